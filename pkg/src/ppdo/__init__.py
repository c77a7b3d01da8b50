"""Privacy-preserving decentralized consensus optimization.

Jacobian ADMM with privately factored, time-varying penalties, a
Paillier-encrypted neighbor exchange built on it, and tools that probe
what an honest-but-curious neighbor or an eavesdropper can learn.
"""

__version__ = "0.1.0"
