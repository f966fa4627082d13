"""Command-line entry point: ``pqkd <subcommand> [flags]``.

Every subcommand writes ``manifest.json`` into ``--out`` next to its results.
Exit codes: 0 success, 1 failed run or failed self-test, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import analysis as an
from . import experiments as ex
from . import features as ft
from .dictconv import count_params
from .distill import evaluate, load_checkpoint, read_metrics, save_checkpoint, student_report, write_metrics
from .errors import ConfigurationError, PQKDError, UsageError
from .models import build_teacher

SCHEMA_VERSION = 1
SUBCOMMANDS = ("train-teacher", "train-pqkd", "sweep", "noise-study", "shot-study", "report", "selftest")
log = logging.getLogger("pqkd")


class CliError(Exception):
    """Argument or config problem; reported with exit status 2."""


class SelfTestFailed(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value file with RunConfig keys")
    common.add_argument("--seed", type=int, help="single seed (overrides 'seeds')")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--shots", type=int, help="shot budget S per feature evaluation")
    common.add_argument("--scope", choices=("conv1", "conv12", "all"))
    common.add_argument("--ranks", metavar="R1[,R2[,R3]]")
    common.add_argument("--dim-theta", type=int, metavar="D")
    common.add_argument("--ema", choices=("on", "off"))
    common.add_argument("--gamma", type=float, metavar="G")
    common.add_argument("--baseline", choices=("none", "dict", "randz", "fixedtheta"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    helps = {
        "train-teacher": "train the dense teacher",
        "train-pqkd": "distil a photonic-conditioned student (trains a teacher unless --teacher is given)",
        "sweep": "compression frontier over scope x rank x dim(theta)",
        "noise-study": "feature-corruption and parameter-drift robustness",
        "shot-study": "shot-noise scaling and accuracy gain over the z=0 ablation",
        "report": "summarise an existing run directory",
        "selftest": "run the built-in invariant checks",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "train-pqkd":
            p.add_argument("--teacher", metavar="PATH", help="teacher checkpoint from train-teacher")
        if name == "report":
            p.add_argument("run_dir", nargs="?", help="run directory (default: --out)")
    return parser


def _overrides(args) -> dict:
    out = {
        "out": args.out, "shots": args.shots, "scope": args.scope, "ranks": args.ranks,
        "dim_theta": args.dim_theta, "ema": args.ema, "gamma": args.gamma, "baseline": args.baseline,
    }
    if args.seed is not None:
        out["seeds"] = str(args.seed)
    return out


def _config(args) -> tuple[ex.RunConfig, str]:
    if args.config and not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}")
    return ex.load_config(args.config, _overrides(args))


def _sha256(parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part if isinstance(part, bytes) else str(part).encode())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: ex.RunConfig, config_text: str, extra: dict | None = None) -> dict:
    inputs = [p for p in ex.input_files(cfg) if p.exists()]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "command": command,
        "config": cfg.as_dict(),
        "seeds": list(cfg.seeds),
        "input_hash": _sha256([json.dumps(cfg.as_dict(), sort_keys=True), config_text] + [p.read_bytes() for p in inputs]),
        "input_files": [str(p) for p in inputs],
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


# -- subcommands ------------------------------------------------------------------


def cmd_train_teacher(cfg, out: Path, args) -> dict:
    data = ex.load_data(cfg)
    res = ex.run_teacher(cfg, data)
    test_acc, test_ce = evaluate(res.model, data[2])
    write_metrics(out / "metrics.csv", res.history)
    save_checkpoint(out / "teacher.npz", res.model, {"role": "teacher", "seed": cfg.seed, "best_epoch": res.best_epoch})
    summary = {"best_epoch": res.best_epoch, "val_accuracy": res.best_val_acc, "test_accuracy": test_acc,
               "test_ce": test_ce, "n_params": res.model.n_trainable()}
    _json(out / "summary.json", summary)
    print(f"teacher: best epoch {res.best_epoch}, val acc {res.best_val_acc:.4f}, test acc {test_acc:.4f}")
    return summary


def _load_teacher(path, cfg):
    params, _, meta = load_checkpoint(path)
    teacher = build_teacher(meta["widths"], seed=0)
    teacher.load_state_dict(params)
    if tuple(meta["widths"]) != cfg.widths:
        raise CliError(f"teacher widths {meta['widths']} differ from config widths {list(cfg.widths)}")
    return teacher


def cmd_train_pqkd(cfg, out: Path, args) -> dict:
    data = ex.load_data(cfg)
    teacher = _load_teacher(args.teacher, cfg) if args.teacher else ex.run_teacher(cfg, data).model
    t_acc, _ = evaluate(teacher, data[1])
    res, pipeline = ex.run_student(cfg, teacher, data)
    test_acc, test_ce = evaluate(res.model, data[2], res.z)
    write_metrics(out / "metrics.csv", res.history)
    if res.trace_raw:
        ft.write_trace(out / "feature_trace.csv", range(1, len(res.trace_raw) + 1), res.trace_raw, res.trace_used)
    st = pipeline.standardizer
    save_checkpoint(
        out / "student.npz", res.model,
        {"role": "student", "scope": cfg.scope, "ranks": list(cfg.compression().ranks), "seed": cfg.seed,
         "baseline": cfg.baseline, "best_epoch": res.best_epoch, "shots": cfg.shots},
        theta=res.theta, z=res.z, mu=None if st is None else st.mu, sigma=None if st is None else st.sigma,
    )
    params = student_report(cfg.compression(), cfg.baseline)
    _json(out / "params.json", params)
    summary = {
        "teacher_val_accuracy": t_acc, "best_epoch": res.best_epoch, "val_accuracy": res.best_val_acc,
        "test_accuracy": test_acc, "test_ce": test_ce, "photonic_delta": res.photonic_delta,
        "spsa_evaluations": res.spsa_evaluations, "cr_overall": params["cr_overall"], "cr_conv": params["cr_conv"],
    }
    _json(out / "summary.json", summary)
    print(f"student: val acc {res.best_val_acc:.4f} (teacher {t_acc:.4f}), C_x {params['cr_overall']:.2f}, "
          f"photonic delta {res.photonic_delta:.4f}")
    return summary


def cmd_sweep(cfg, out: Path, args) -> dict:
    rows = ex.frontier_sweep(cfg)
    _write_rows(out / "frontier.csv", [r.as_dict() for r in rows])
    print(f"sweep: {len(rows)} cells written to {out / 'frontier.csv'}")
    return {"cells": len(rows)}


def cmd_noise_study(cfg, out: Path, args) -> dict:
    rows = ex.noise_study(cfg)
    _write_rows(out / "noise.csv", [asdict(r) for r in rows])
    print(f"noise-study: {len(rows)} runs written to {out / 'noise.csv'}")
    return {"runs": len(rows)}


def cmd_shot_study(cfg, out: Path, args) -> dict:
    curve, rows = ex.shot_study(cfg)
    _write_rows(out / "feature_noise.csv", curve.rows())
    _write_rows(out / "shot_runs.csv", [dict(asdict(r), delta=r.delta) for r in rows])
    table = ex.delta_table(rows, curve)
    _write_rows(out / "shot_delta.csv", table)
    fits = {}
    for ema in ("off", "on"):
        try:
            fits[ema] = asdict(ex.fit_delta(table, ema, cfg.fit_s_min))
        except PQKDError as exc:
            fits[ema] = {"error": str(exc)}
    _json(out / "fit.json", {"feature_slope": curve.slope, "fits": fits})
    print(f"shot-study: feature-noise slope {curve.slope:.3f}")
    return {"feature_slope": curve.slope}


def cmd_report(cfg, out: Path, args) -> dict:
    run = Path(args.run_dir) if args.run_dir else out
    metrics, trace = run / "metrics.csv", run / "feature_trace.csv"
    if not metrics.exists() and not trace.exists():
        raise CliError(f"{run} holds no metrics.csv or feature_trace.csv to report on")
    report: dict = {"run_dir": str(run)}
    if metrics.exists():
        recs = read_metrics(metrics)
        val = [r for r in recs if r.split == "val"]
        if val:
            best = max(val, key=lambda r: r.accuracy)
            report["metrics"] = {"rows": len(recs), "best_val_epoch": best.epoch, "best_val_accuracy": best.accuracy}
    if trace.exists():
        _, raw, used = ft.read_trace(trace)
        ema = an.ema_report(raw, used)
        report["ema"] = {"median": ema.median, "q1": ema.q1, "q3": ema.q3, "n_undefined": ema.n_undefined}
        _write_rows(run / "ema_cdf.csv", [{"ratio": r, "cdf": c} for r, c in ema.cdf_rows()])
    report["params"] = asdict(count_params(cfg.compression()))
    _json(run / "report.json", report)
    print(json.dumps(report, indent=2, default=float))
    return report


def cmd_selftest(cfg, out: Path, args) -> dict:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise SelfTestFailed(", ".join(failed))
    return {"checks": len(results)}


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-pqkd": cmd_train_pqkd,
    "sweep": cmd_sweep,
    "noise-study": cmd_noise_study,
    "shot-study": cmd_shot_study,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with status 2 on unknown flags/subcommands
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, text = _config(args)
        out = Path(cfg.out)
        writes_run = args.command not in ("report", "selftest")
        if writes_run:
            out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = COMMANDS[args.command](cfg, out, args)
        if writes_run:
            write_manifest(out, args.command, cfg, text, {"result": result, "elapsed_s": round(time.perf_counter() - start, 3)})
    except CliError as exc:
        print(f"pqkd: error: {exc}", file=sys.stderr)
        return 2
    except SelfTestFailed as exc:
        print(f"pqkd: self-test failed: {exc}", file=sys.stderr)
        return 1
    except PQKDError as exc:
        status = 2 if isinstance(exc, (ConfigurationError, UsageError)) else 1
        print(f"pqkd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return status
    return 0


if __name__ == "__main__":
    sys.exit(main())
