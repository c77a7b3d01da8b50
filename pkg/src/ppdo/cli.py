"""Command-line harness: ``ppdo run``, ``ppdo adversary`` and ``ppdo bench``.

Exit codes: 0 success, 1 configuration error, 2 runtime abort, 3 a
``--check`` acceptance check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import random
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import paillier
from .admm import (
    ConfigError,
    DivergenceError,
    ProtocolOrderError,
    RunConfig,
    SubproblemError,
    convergence_rate_diagnostic,
    error_metric_d,
    run_plaintext,
)
from .adversary import AdversaryView, run_estimation_trials
from .codec import CodecConfig, EncodingError, encode_real, mask_to_word, scale_weight, to_signed
from .presets import PRESETS, load_preset
from .problem import ProblemError, load_problem
from .protocol import ProtocolError, run_encrypted
from .transport import TcpTransport, TransportError

log = logging.getLogger("ppdo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
RUNTIME_ERRORS = (DivergenceError, SubproblemError, ProtocolError, ProtocolOrderError,
                  TransportError, EncodingError)


@dataclass
class ExperimentConfig:
    config: str | None = None
    preset: str | None = None
    mode: str = "plaintext"
    key_bits: int = 256
    n_max: int = 10**6
    b_bar: float | None = None
    gamma: float | None = None
    gamma_cap: float | None = None
    iterations: int | None = None
    tolerance: float = 1e-9
    seed: int = 0
    out: str = "out"
    check: bool = False
    check_tolerance: float = 1e-8
    transport: str = "sim"
    port_base: int = 7100
    trials: int = 2000
    extra: dict = field(default_factory=dict)


def load_problem_for(cfg: ExperimentConfig):
    if cfg.preset:
        return load_preset(cfg.preset)
    return load_problem(cfg.config)


def validate(cfg: ExperimentConfig, problem=None) -> list[str]:
    """Every violation at once, so one edit fixes the config."""
    errors = []
    if bool(cfg.config) == bool(cfg.preset):
        errors.append("give exactly one of --config or --preset")
    if cfg.preset and cfg.preset not in PRESETS:
        errors.append(f"unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
    if cfg.mode not in ("plaintext", "encrypted"):
        errors.append(f"mode must be plaintext or encrypted, not {cfg.mode!r}")
    if cfg.mode == "encrypted" and cfg.key_bits < 64:
        errors.append(f"encrypted mode needs key_bits >= 64, got {cfg.key_bits}")
    if cfg.key_bits % 2:
        errors.append("key_bits must be even")
    if cfg.n_max < 1:
        errors.append("n_max must be positive")
    if cfg.b_bar is not None and cfg.b_bar <= 0:
        errors.append("b_bar must be positive")
    if cfg.iterations is not None and cfg.iterations < 1:
        errors.append("iterations must be >= 1")
    if cfg.tolerance <= 0:
        errors.append("tolerance must be positive")
    if not 0 <= cfg.seed < 2**64:
        errors.append("seed must fit an unsigned 64-bit integer")
    if cfg.trials < 1:
        errors.append("trials must be >= 1")
    if cfg.transport not in ("sim", "tcp"):
        errors.append(f"transport must be sim or tcp, not {cfg.transport!r}")
    if problem is not None and cfg.mode == "encrypted":
        codec = CodecConfig(cfg.n_max)
        scale = [np.max(np.abs(problem.x0))]
        if problem.quadratic is not None:
            q = problem.quadratic
            scale.append(float(np.max(np.abs(q.theta / np.where(q.h == 0, 1, q.h)[:, None]))))
        if max(scale) * cfg.n_max >= codec.max_magnitude:
            errors.append(f"state magnitude {max(scale):.3g} times n_max overflows the {codec.word_bits}-bit word")
    return errors


def run_config(cfg: ExperimentConfig, problem) -> RunConfig:
    meta = problem.meta
    b_bar = cfg.b_bar if cfg.b_bar is not None else meta.get("b_bar", 0.65)
    gamma = cfg.gamma if cfg.gamma is not None else meta.get("gamma")
    gamma_cap = cfg.gamma_cap if cfg.gamma_cap is not None else meta.get("gamma_cap")
    iterations = cfg.iterations or meta.get("max_iterations", 500)
    return RunConfig(max_iterations=iterations, stop_tolerance=cfg.tolerance, seed=cfg.seed,
                     b_bar=b_bar, gamma=gamma, gamma_cap=gamma_cap, key_bits=cfg.key_bits,
                     n_max=cfg.n_max)


def execute(cfg: ExperimentConfig, problem, run_cfg: RunConfig):
    if cfg.mode == "plaintext":
        return run_plaintext(problem, run_cfg)
    if cfg.transport == "tcp":
        with TcpTransport(port_base=cfg.port_base) as tcp:
            return run_encrypted(problem, run_cfg, tcp)
    return run_encrypted(problem, run_cfg)


def _finite(v):
    return v if v is not None and math.isfinite(v) else None


def metrics(trace, problem, cfg: ExperimentConfig) -> dict:
    out = {
        "mode": trace.mode,
        "seed": cfg.seed,
        "iterations": trace.iterations,
        "stop_reason": trace.stop_reason,
        "iterations_to_tolerance": trace.iterations if trace.stop_reason == "tolerance" else None,
        "condition_a_ok": trace.condition_a_ok,
        "gamma": trace.gamma.tolist(),
        "final_x": trace.final_x.tolist(),
        "timing": trace.timing,
        "mean_iteration_seconds": float(np.mean(trace.timing)) if trace.timing else None,
        "final_residual": trace.residual[-1],
    }
    if problem.quadratic is not None:
        opt = problem.optimum()
        out["optimum"] = opt.tolist()
        out["d"] = error_metric_d([trace.final_x], opt)
        out["max_abs_error"] = float(np.max(np.abs(trace.final_x - opt)))
        if trace.iterations >= 4 and problem.graph.edges:
            out["rate_slope"] = _finite(convergence_rate_diagnostic(trace, problem).slope)
    if "expected_optimum" in problem.meta:
        out["expected_optimum"] = np.asarray(problem.meta["expected_optimum"]).tolist()
    return out


def checks(m: dict, cfg: ExperimentConfig) -> list[str]:
    failures = []
    if "d" in m and m["d"] > cfg.check_tolerance:
        failures.append(f"d = {m['d']:.3e} exceeds {cfg.check_tolerance:.1e}")
    if "expected_optimum" in m:
        dev = float(np.max(np.abs(np.asarray(m["final_x"]) - np.asarray(m["expected_optimum"]))))
        if dev > 1e-4:
            failures.append(f"final state {dev:.3e} away from the expected optimum")
    if not m["condition_a_ok"]:
        failures.append("penalty schedule violated Condition A")
    return failures


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one configured experiment; writes ``trace.csv`` and ``metrics.json``."""
    errors = validate(cfg)
    if errors:
        for e in errors:
            log.error("config: %s", e)
        return EXIT_CONFIG
    try:
        problem = load_problem_for(cfg)
        errors = validate(cfg, problem)
        if errors:
            for e in errors:
                log.error("config: %s", e)
            return EXIT_CONFIG
        run_cfg = run_config(cfg, problem)
    except (ConfigError, ProblemError, OSError, KeyError, ValueError) as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    try:
        trace = execute(cfg, problem, run_cfg)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        log.error("run aborted: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "trace.csv")
    m = metrics(trace, problem, cfg)
    (out / "metrics.json").write_text(json.dumps(m, indent=2))
    log.info("%s run: %d iterations (%s), d = %s", trace.mode, trace.iterations,
             trace.stop_reason, m.get("d"))
    if cfg.check:
        failures = checks(m, cfg)
        for f in failures:
            log.error("check failed: %s", f)
        if failures:
            return EXIT_CHECK
    return EXIT_OK


def run_adversary_study(cfg: ExperimentConfig) -> int:
    """Full run, then the honest-but-curious trial study on its observations."""
    if not cfg.config and not cfg.preset:
        cfg.preset = "two-agent-adversary"
    errors = validate(cfg)
    if errors:
        for e in errors:
            log.error("config: %s", e)
        return EXIT_CONFIG
    try:
        problem = load_problem_for(cfg)
        run_cfg = run_config(cfg, problem)
        adversary = int(problem.meta.get("adversary", 2))
        target = int(problem.meta.get("target", 1))
        if problem.graph.neighbors(target) != [adversary]:
            raise ConfigError(f"agent {target} must have agent {adversary} as its only neighbor")
    except (ConfigError, ProblemError, OSError, KeyError, ValueError) as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    try:
        trace = execute(cfg, problem, run_cfg)
    except RUNTIME_ERRORS as exc:
        log.error("run aborted: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    view = AdversaryView.from_trace(trace, problem, adversary, target, run_cfg.b_bar)
    optimum = problem.optimum() if problem.quadratic is not None else None
    study = run_estimation_trials(view, cfg.trials, np.random.default_rng(cfg.seed), optimum=optimum)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "trace.csv")
    study.to_csv(out / "trials.csv")
    (out / "adversary_summary.json").write_text(study.summary_json())
    s = study.summary
    log.info("%d trials over %d rounds; max minimizer error %s", s["trials"], s["rounds"],
             s.get("max_minimizer_error"))
    if cfg.check:
        x = np.array(trace.x[:view.rounds])
        differs = np.any(x[:, adversary - 1] != x[:, target - 1], axis=1)
        spread = np.asarray(s["x_hat_spread"])
        failures = []
        if np.any(spread[differs] <= 0):
            failures.append("zero x_hat spread at a round where the states differ")
        if np.any(spread[~differs] != 0):
            failures.append("nonzero x_hat spread at a round where the states agree")
        if s.get("max_minimizer_error", 0.0) > 1e-6:
            failures.append(f"fitted minimizers off by {s['max_minimizer_error']:.3e}")
        for f in failures:
            log.error("check failed: %s", f)
        if failures:
            return EXIT_CHECK
    return EXIT_OK


def time_neighbor_round(key_bits: int, repeats: int = 20, seed: int = 0, dimension: int = 1) -> list[float]:
    """Seconds per neighbor exchange: encrypt, weighted difference, decrypt."""
    rng = random.Random(f"bench:{seed}:{key_bits}")
    pk, sk = paillier.generate_keys(key_bits, rng)
    codec = CodecConfig(word_bits=min(64, key_bits - 2))
    w = scale_weight(codec, 0.5)
    samples = []
    for _ in range(repeats):
        xi = [rng.uniform(-10, 10) for _ in range(dimension)]
        xj = [rng.uniform(-10, 10) for _ in range(dimension)]
        t0 = time.perf_counter()
        for a, b in zip(xi, xj):
            c = paillier.encrypt(pk, encode_real(codec, -a), rng)
            c = paillier.hom_add(pk, paillier.encrypt(pk, encode_real(codec, b), rng), c)
            c = paillier.hom_scale(pk, c, w)
            to_signed(codec, mask_to_word(paillier.decrypt(sk, pk, c), codec))
        samples.append(time.perf_counter() - t0)
    return samples


def bench_crypto(key_bits=(64, 256, 512), repeats: int = 20, seed: int = 0) -> dict:
    report = {}
    for bits in key_bits:
        s = time_neighbor_round(bits, repeats, seed)
        report[str(bits)] = {"mean_ms": 1e3 * statistics.fmean(s), "median_ms": 1e3 * statistics.median(s),
                             "repeats": repeats}
    return report


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="problem JSON file")
    p.add_argument("--preset", help=f"bundled problem: {', '.join(PRESETS)}")
    p.add_argument("--mode", default="plaintext", choices=("plaintext", "encrypted"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--key-bits", type=int, default=256)
    p.add_argument("--n-max", type=int, default=10**6)
    p.add_argument("--b-bar", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--transport", default="sim", choices=("sim", "tcp"))
    p.add_argument("--port-base", type=int, default=7100)
    p.add_argument("--check", action="store_true", help="exit 3 when acceptance checks fail")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppdo", description="Privacy-preserving decentralized ADMM")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a plaintext or encrypted experiment")
    _common(run)
    run.add_argument("--check-tolerance", type=float, default=1e-8)
    adv = sub.add_parser("adversary", help="honest-but-curious estimation study")
    _common(adv)
    adv.add_argument("--trials", type=int, default=2000)
    bench = sub.add_parser("bench", help="time one neighbor exchange per key size")
    bench.add_argument("--key-bits", type=int, nargs="+", default=[64, 256, 512])
    bench.add_argument("--repeats", type=int, default=20)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="write bench.json here")
    bench.add_argument("--check", action="store_true", help="exit 3 if 256-bit rounds exceed 10 ms")
    return parser


def config_from_args(args) -> ExperimentConfig:
    return ExperimentConfig(
        config=args.config, preset=args.preset, mode=args.mode, key_bits=args.key_bits,
        n_max=args.n_max, b_bar=args.b_bar, gamma=args.gamma, iterations=args.iterations,
        tolerance=args.tolerance, seed=args.seed, out=args.out, check=args.check,
        check_tolerance=getattr(args, "check_tolerance", 1e-8), transport=args.transport,
        port_base=args.port_base, trials=getattr(args, "trials", 2000))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench":
        if any(b < 16 or b % 2 for b in args.key_bits):
            log.error("config: key sizes must be even and >= 16")
            return EXIT_CONFIG
        report = bench_crypto(args.key_bits, args.repeats, args.seed)
        text = json.dumps(report, indent=2)
        print(text)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "bench.json").write_text(text)
        if args.check and report.get("256", {}).get("mean_ms", 0.0) > 10.0:
            log.error("check failed: 256-bit neighbor round %.2f ms > 10 ms", report["256"]["mean_ms"])
            return EXIT_CHECK
        return EXIT_OK
    cfg = config_from_args(args)
    if args.command == "adversary":
        return run_adversary_study(cfg)
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
