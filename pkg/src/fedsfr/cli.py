"""Command-line entry point: ``fedsfr run | compare | diag | selftest``.

Exit codes: 0 ok, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import federation as fl
from .analysis import (
    assumption1_ratio,
    fr_surrogate_diag,
    improvement_ratio,
    lemma3_bound,
    trace_improvement_ratio,
)
from .compression import estimate_contraction, kept_count, make_compressor, uniform_scalar_quantize
from .config import ConfigError, parse_config
from .data import DataFormatError
from .model import layer_map, save_checkpoint
from .plotting import plot_psnr_curves
from .privacy import FEATURE_UPLOAD, MODEL_UPLOAD, epsilon_budget

OK, INVALID, RUNTIME = 0, 1, 2


def _emit(row: dict) -> None:
    """Print one JSON line; NaN/inf (undefined ratios) become null."""
    clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in row.items()}
    print(json.dumps(clean, allow_nan=False))


def _summary(label: str, rows: list[dict]) -> dict:
    p = np.array([r["psnr_db"] for r in rows])
    tail = p[-15:] if len(p) > 1 else p
    return {
        "config": label,
        "rounds": len(rows) - 1,
        "final_psnr_db": float(p[-1]),
        "last5_mean_psnr_db": float(p[-5:].mean()),
        "last15_std_psnr_db": float(tail.std()),
        "improvement_ratio": trace_improvement_ratio(rows),
        "eps_cumulative": rows[-1].get("eps_cumulative"),
    }


def _progress(quiet):
    if quiet:
        return None
    return lambda row: print(f"t={row['t']:3d} psnr={row['psnr_db']:.3f} dB", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = fl.initial_state(cfg)
    report = _progress(args.quiet)
    for _ in range(cfg.T):
        state = fl.run_round(state, cfg, args.workers)
        if report:
            report(state.metrics[-1])
    fl.write_jsonl(state.metrics, out / "metrics.jsonl")
    fl.write_csv(state.metrics, out / "metrics.csv")
    save_checkpoint(out / "model.fsfr", state.model)
    plot_psnr_curves({Path(args.config).stem: state.metrics}, out / "psnr.png")
    _emit(_summary(Path(args.config).stem, state.metrics))
    return OK


def cmd_compare(args) -> int:
    cfgs = [(Path(p).stem, parse_config(p)) for p in args.configs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces, rows = {}, []
    for label, cfg in cfgs:
        trace = fl.run_experiment(cfg, args.workers, _progress(args.quiet))
        traces[label] = trace
        fl.write_jsonl(trace, out / f"{label}.metrics.jsonl")
        rows.append(_summary(label, trace))
    fl.write_csv(rows, out / "summary.csv")
    plot_psnr_curves(traces, out / "psnr_compare.png")
    for r in rows:
        _emit(r)
    return OK


def cmd_diag(args) -> int:
    cfg = parse_config(args.config)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0xD1A6,)))
    lm = layer_map(cfg.model)
    nu = estimate_contraction(make_compressor(lm, cfg.frac_m, cfg.qsgd_bits), lm.D, args.trials, rng)
    _emit({"diag": "contraction", "frac": cfg.frac_m, "bits": cfg.qsgd_bits, "nu_hat": nu})
    state = fl.initial_state(cfg)
    for _ in range(cfg.T):
        state = fl.run_round(state, cfg, args.workers)
    ok = True
    for row in state.metrics[1:]:
        nu_t = row["nu_hat"] if row["nu_hat"] else nu
        bound = lemma3_bound(min(max(nu_t, 1e-12), 1.0), cfg.eta_c0, cfg.E_c, row["g_hat"])
        ok &= row["mem_sq_mean"] <= bound
        _emit({"diag": "error-memory", "t": row["t"], "mem_sq_mean": row["mem_sq_mean"], "bound": bound})
    X = state.env.eval_images
    ratio, corr = fr_surrogate_diag(state.model, X, args.scale, args.trials, rng)
    _emit({"diag": "fr-surrogate", "scale": args.scale, "ratio": ratio, "correlation": corr})
    _emit({"diag": "summary", "memory_within_bound": bool(ok)})
    return OK


def _checks():
    yield "fedavg weights (10,30)", np.allclose(fl.aggregation_weights("fedavg", [10, 30]), [0.25, 0.75])
    yield "feddma weights (1,2,3)", np.allclose(
        fl.aggregation_weights("feddma", None, [1, 2, 3]), [0.1863, 0.3072, 0.5065], atol=5e-5
    )
    yield "fedlol weights (1,2,3)", np.allclose(fl.aggregation_weights("fedlol", None, [1, 2, 3]), [5 / 12, 4 / 12, 3 / 12])
    e1 = epsilon_budget(MODEL_UPLOAD, 2, 1, 10, 1, 1)
    e2 = epsilon_budget(FEATURE_UPLOAD, 2, 1, 10, 1, 1)
    yield "epsilon plug-in (1.2, 0.6)", math.isclose(e1, 1.2) and math.isclose(e2, 0.6) and e2 == e1 / 2
    yield "lr at round 25", math.isclose(fl.lr_at(0.01, 25, 0.9, 10), 0.0081)
    yield "error-memory bound example", math.isclose(lemma3_bound(0.5, 0.01, 3, 10), 0.72)
    yield "error-memory bound, lossless", lemma3_bound(1.0, 0.01, 3, 10) == 0.0
    a = np.array([1.0, -2.0, 0.5])
    yield "alignment ratio extremes", (
        assumption1_ratio(a, a) == 0.0 and assumption1_ratio(a, 0 * a) == 1.0 and assumption1_ratio(a, -a) == 2.0
    )
    yield "improvement ratio 2 of 4", improvement_ratio([(1, 0), (1, 2), (1, 0.5), (1, 1)]) == 0.5
    lv, lo, hi = uniform_scalar_quantize(np.array([0.0, 0.5, 1.0]), 4)
    yield "scalar quantizer midpoint", list(lv) == [0, 8, 15] and (lo, hi) == (0.0, 1.0)
    yield "kept count 0.1 * 30", kept_count(0.1, 30) == 3
    s_c, s_s = fl.convergence_schedule(1.0, 16)
    yield "convergence schedule order", s_s < s_c


def cmd_selftest(args) -> int:
    failed = 0
    for name, ok in _checks():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed += not ok
    return OK if failed == 0 else RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedsfr", description="Federated VQ semantic-communication simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    c = sub.add_parser("compare", help="run several configs and tabulate them")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    d = sub.add_parser("diag", help="contraction, error-memory and surrogate diagnostics")
    d.add_argument("--config", required=True)
    d.add_argument("--trials", type=int, default=200)
    d.add_argument("--scale", type=float, default=0.01)
    for p in (r, c, d):
        p.add_argument("--workers", type=int, default=1, help="threads for client-side training")
        p.add_argument("--quiet", action="store_true")
    sub.add_parser("selftest", help="check closed-form examples")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as validation failures
        return OK if exc.code in (0, None) else INVALID
    handler = {"run": cmd_run, "compare": cmd_compare, "diag": cmd_diag, "selftest": cmd_selftest}[args.cmd]
    try:
        return handler(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
