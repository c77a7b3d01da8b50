"""Encrypted neighbor exchange: each agent learns only ``rho_ij (x_j - x_i)``.

One round for agent ``i`` and neighbor ``j``:

1. ``i`` encrypts ``-x_i`` (per dimension, fresh nonces) under its own key
   and sends it to ``j``;
2. ``j`` encrypts ``x_j`` under ``i``'s key, adds the two ciphertexts and
   raises the sum to ``round(b_{j->i} * n_max)``, all with public-key
   operations, and replies;
3. ``i`` decrypts, reads the low word as signed, multiplies by its own
   ``round(b_{i->j} * n_max)`` and divides by ``n_max**3``.

Neither factor ``b`` nor ``gamma`` is ever transmitted, and only the key
owner ever decrypts. The recovered terms drive the same multiplier and
state updates as the plaintext algorithm.
"""
from __future__ import annotations

import logging
import time

import numpy as np

from . import paillier
from .admm import (
    AgentState,
    ConfigError,
    ProtocolOrderError,
    RunConfig,
    Trace,
    _Recorder,
    _validate_conditions,
    admit_objectives,
    agent_rng,
    check_condition_A,
    init_agents,
    lambda_update_from_terms,
    new_trace,
    solve_reduced,
    update_factors,
)
from .codec import CodecConfig, EncodingError, encode_real, mask_to_word, scale_weight, to_signed
from .problem import Problem
from .transport import (
    ENCRYPTED_STATE,
    KEY_ANNOUNCE,
    WEIGHTED_DIFF_REPLY,
    EncryptedState,
    Endpoint,
    KeyAnnounce,
    SimTransport,
    WeightedDiffReply,
    deserialize,
    serialize,
)

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


class ProtocolAgent:
    """One agent's side of the encrypted exchange.

    Holds the private key and the private factors; everything it emits is a
    :class:`KeyAnnounce`, :class:`EncryptedState` or
    :class:`WeightedDiffReply`.
    """

    def __init__(self, state: AgentState, public_key: paillier.PublicKey,
                 private_key: paillier.PrivateKey, codec: CodecConfig, crypto_rng):
        self.state = state
        self.public_key = public_key
        self._private_key = private_key
        self.codec = codec
        self.rng = crypto_rng
        self.neighbor_keys: dict[int, paillier.PublicKey] = {}

    @property
    def agent(self) -> int:
        return self.state.agent

    def weight(self, j: int) -> int:
        return scale_weight(self.codec, self.state.b_out[j])

    def key_announcements(self, t: int) -> list[KeyAnnounce]:
        return [KeyAnnounce(self.agent, j, t, self.public_key.n) for j in sorted(self.state.b_out)]

    def accept_key(self, msg: KeyAnnounce) -> None:
        if msg.sender not in self.state.b_out:
            raise ProtocolError(f"agent {self.agent}: key from non-neighbor {msg.sender}")
        known = self.neighbor_keys.get(msg.sender)
        if known is not None and known.n != msg.n:
            raise ProtocolError(f"agent {self.agent}: neighbor {msg.sender} changed its key mid-run")
        self.neighbor_keys[msg.sender] = paillier.PublicKey(msg.n)

    def announce_and_encrypt(self, t: int) -> list[EncryptedState]:
        try:
            slots = [encode_real(self.codec, -v) for v in self.state.x]
        except EncodingError as exc:
            raise EncodingError(f"agent {self.agent}, iteration {t}: {exc}") from exc
        out = []
        for j in sorted(self.state.b_out):
            # fresh nonces per neighbor and per dimension
            cts = tuple(paillier.encrypt(self.public_key, m, self.rng).value for m in slots)
            out.append(EncryptedState(self.agent, j, t, cts))
        return out

    def neighbor_compute_weighted_diff(self, msg: EncryptedState, t: int) -> WeightedDiffReply:
        """Reply with ``E_i(b_{j->i} (x_j - x_i))`` using only ``i``'s public key."""
        i = msg.sender
        if msg.receiver != self.agent:
            raise ProtocolError(f"agent {self.agent}: got a message addressed to {msg.receiver}")
        if msg.iteration != t:
            raise ProtocolOrderError(f"agent {self.agent}: state from {i} for iteration {msg.iteration}, expected {t}")
        pk = self.neighbor_keys.get(i)
        if pk is None:
            raise ProtocolError(f"agent {self.agent}: no public key from neighbor {i}")
        if len(msg.ciphertexts) != len(self.state.x):
            raise ProtocolError(f"agent {self.agent}: neighbor {i} sent {len(msg.ciphertexts)} "
                                f"ciphertexts for a {len(self.state.x)}-dimensional state")
        w = self.weight(i)
        if w >= pk.n:
            raise ConfigError(f"scaled weight {w} does not fit neighbor {i}'s key; key too small for codec")
        try:
            slots = [encode_real(self.codec, v) for v in self.state.x]
        except EncodingError as exc:
            raise EncodingError(f"agent {self.agent}, iteration {t}: {exc}") from exc
        out = []
        for m, c in zip(slots, msg.ciphertexts):
            diff = paillier.hom_add(pk, paillier.encrypt(pk, m, self.rng), paillier.Ciphertext(c))
            out.append(paillier.hom_scale(pk, diff, w).value)
        return WeightedDiffReply(self.agent, i, t, tuple(out))

    def recover_weighted_diff(self, reply: WeightedDiffReply, t: int) -> np.ndarray:
        """``b_{i->j} b_{j->i} (x_j - x_i)`` as reals."""
        j = reply.sender
        if reply.iteration != t:
            raise ProtocolOrderError(f"agent {self.agent}: reply from {j} for iteration {reply.iteration}, expected {t}")
        if j not in self.state.b_out:
            raise ProtocolError(f"agent {self.agent}: reply from non-neighbor {j}")
        if len(reply.ciphertexts) != len(self.state.x):
            raise ProtocolError(f"agent {self.agent}: reply from {j} has {len(reply.ciphertexts)} elements")
        w = self.weight(j)
        scale = self.codec.n_max**3
        out = np.empty(len(reply.ciphertexts))
        for d, c in enumerate(reply.ciphertexts):
            try:
                raw = paillier.decrypt(self._private_key, self.public_key, paillier.Ciphertext(c))
            except paillier.MalformedCiphertextError as exc:
                raise ProtocolError(f"agent {self.agent}: malformed ciphertext from neighbor {j}") from exc
            out[d] = w * to_signed(self.codec, mask_to_word(raw, self.codec)) / scale
        return out


def _check_headroom(codec: CodecConfig, key_bits: int, b_bar: float) -> None:
    try:
        codec.check_plaintext_space(key_bits)
    except EncodingError as exc:
        raise ConfigError(str(exc)) from exc
    # the sum of two words times the scaled weight must not wrap modulo n
    worst = 2 * codec.modulus * scale_weight(codec, b_bar)
    if worst >= 1 << (key_bits - 1):
        raise ConfigError(f"{key_bits}-bit keys leave no headroom for {codec.word_bits}-bit words "
                          f"scaled by n_max={codec.n_max}")


def make_agents(problem: Problem, cfg: RunConfig) -> tuple[list[ProtocolAgent], dict]:
    """Protocol agents plus their schedule streams.

    States and factors come from the same per-agent schedule streams as the
    plaintext runner, so equal seeds give equal ``b`` and ``gamma``.
    """
    g = problem.graph
    codec = CodecConfig(cfg.n_max, cfg.word_bits)
    _check_headroom(codec, cfg.key_bits, cfg.b_bar)
    admit_objectives(problem)
    sched_rngs = {i: agent_rng(cfg.seed, i, "schedule") for i in g.agents}
    states = init_agents(problem, cfg, sched_rngs)
    _validate_conditions(g, states, cfg)
    agents = []
    for st in states:
        crypto = agent_rng(cfg.seed, st.agent, "crypto")
        pk, sk = paillier.generate_keys(cfg.key_bits, crypto)
        agents.append(ProtocolAgent(st, pk, sk, codec, crypto))
    return agents, sched_rngs


def _collect(transport, agent: int, msg_type: int, count: int, timeout):
    msgs = [deserialize(f) for f in transport.receive(agent, msg_type, count, timeout)]
    # process in sender order so nonce draws do not depend on arrival order
    return sorted(msgs, key=lambda m: m.sender)


def run_encrypted(problem: Problem, cfg: RunConfig, transport=None, round_timeout: float | None = None) -> Trace:
    """Run the encrypted algorithm; every message crosses ``transport`` as bytes.

    Without a transport a fresh :class:`SimTransport` is used. The trace's
    ``rho`` records ``B_i B_j / n_max**2`` (the quantized penalty actually
    applied), which only the simulator can see.
    """
    g = problem.graph
    agents, sched_rngs = make_agents(problem, cfg)
    own = transport is None
    transport = transport or SimTransport()
    for a in agents:
        transport.register(Endpoint(a.agent))
    timeout = round_timeout if round_timeout is not None else (0.0 if isinstance(transport, SimTransport) else None)
    states = [a.state for a in agents]
    trace = new_trace("encrypted", problem, states)
    trace.meta.update({"key_bits": cfg.key_bits, "n_max": cfg.n_max})
    rec = _Recorder(problem, cfg, trace)
    by_id = {a.agent: a for a in agents}
    rho_bar = cfg.b_bar**2
    nsq = float(cfg.n_max) ** 2
    solver = dict(max_iter=cfg.inner_iterations, tol=cfg.inner_tolerance)
    prev_rho = None
    try:
        for t in range(cfg.max_iterations):
            started = time.perf_counter()
            old = np.stack([by_id[i].state.x for i in g.agents])
            if t == 0 or cfg.strict_key_announce:
                for a in agents:
                    for msg in a.key_announcements(t):
                        transport.deliver(a.agent, msg.receiver, serialize(msg))
                for a in agents:
                    for msg in _collect(transport, a.agent, KEY_ANNOUNCE, len(g.neighbors(a.agent)), timeout):
                        a.accept_key(msg)
            # phase 1: E_i(-x_i) to every neighbor
            for a in agents:
                for msg in a.announce_and_encrypt(t):
                    transport.deliver(a.agent, msg.receiver, serialize(msg))
            # phase 2: neighbors reply with the weighted difference under i's key
            for a in agents:
                for msg in _collect(transport, a.agent, ENCRYPTED_STATE, len(g.neighbors(a.agent)), timeout):
                    reply = a.neighbor_compute_weighted_diff(msg, t)
                    transport.deliver(a.agent, reply.receiver, serialize(reply))
            # phase 3: owners decrypt and apply their own factor
            recovered = {}
            for a in agents:
                recovered[a.agent] = {m.sender: a.recover_weighted_diff(m, t) for m in
                                      _collect(transport, a.agent, WEIGHTED_DIFF_REPLY,
                                               len(g.neighbors(a.agent)), timeout)}
            for a in agents:
                a.state = lambda_update_from_terms(a.state, recovered[a.agent], t)
                for j in g.neighbors(a.agent):
                    trace.exchanged[(a.agent, j)].append(recovered[a.agent][j])
            rho_t = np.array([by_id[i].weight(j) * by_id[j].weight(i) / nsq for i, j in g.edges])
            rec.record_round([a.state for a in agents], rho_t)
            # Jacobian x-update from the recovered terms only
            for a in agents:
                st = a.state
                w = np.zeros_like(st.x)
                for j in sorted(recovered[a.agent]):
                    w = w + recovered[a.agent][j]
                st.x = solve_reduced(problem.local(a.agent), st.x, st.lambda_agg, w, st.gamma, **solver)
            for a in agents:
                update_factors(a.state, sched_rngs[a.agent])
            if prev_rho is not None:
                ok, _ = check_condition_A([prev_rho, rho_t], rho_bar)
                if not ok:
                    trace.condition_a_ok = False
                    log.warning("quantized penalties violated Condition A at iteration %d", t)
            prev_rho = rho_t
            if rec.finish_round(old, np.stack([by_id[i].state.x for i in g.agents]), started):
                break
        else:
            trace.stop_reason = "max_iterations"
    finally:
        if own:
            transport.close()
    trace.capture = list(getattr(transport, "capture", []))
    return trace
