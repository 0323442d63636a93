"""Command-line driver: ``usslearn {train,eval,theory-check,gradcheck,gen-data,export-thresholds}``.

Exit codes: 0 success, 1 a check failed, 2 usage, config or data error.
Artifacts carry no timestamps, so reruns with the same config are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .checks import (LOSS_NAMES, descend_threshold, run_gradchecks, stationary_sweep,
                     theory_check)
from .config import PRESETS, ExperimentConfig, load_config
from .errors import UssError
from .evaluation import evaluate_embeddings, per_identity_thresholds
from .pairing import generate_synthetic, read_csv, write_csv
from .s2s import stationary_b
from .training import (check_input_dim, experiment_data, load_checkpoint, save_checkpoint,
                       train)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
SCALAR_TOL, NETWORK_TOL, SLACK_TOL = 1e-5, 1e-4, 1e-9


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# (flag, config key, type) for every per-hyperparameter override
_OVERRIDES = [
    ("--preset", "preset", str), ("--gamma", "gamma", float), ("--margin", "margin", float),
    ("--margin-c", "margin_c", float), ("--scale", "scale", float),
    ("--epochs", "epochs", int), ("--lr", "lr", float), ("--schedule", "schedule", str),
    ("--warmup", "warmup", float), ("--milestones", "milestones", _int_list),
    ("--momentum", "momentum", float), ("--weight-decay", "weight_decay", float),
    ("--threshold-lr-scale", "threshold_lr_scale", float),
    ("--batch-ids", "batch_ids", int), ("--steps-per-epoch", "steps_per_epoch", int),
    ("--hidden", "hidden", _int_list), ("--embed-dim", "embed_dim", int),
    ("--n-ids", "n_ids", int), ("--samples-per-id", "samples_per_id", int),
    ("--dim", "dim", int), ("--sigma", "sigma", float), ("--data-seed", "data_seed", int),
    ("--data-csv", "data_csv", str), ("--holdout-per-id", "holdout_per_id", int),
    ("--proxy-init", "proxy_init", str),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="run seed (network init, batches, probe)")
    for flag, key, typ in _OVERRIDES:
        kw = {"choices": PRESETS} if key == "preset" else {}
        p.add_argument(flag, dest=key, type=typ, default=None, **kw)


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    for _, key, _ in _OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_log(rows, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr", "t", "feasibility_margin"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["lr"]),
                        "" if r["t"] is None else repr(r["t"]), repr(r["feasibility_margin"])])


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, holdout = experiment_data(cfg)

    def progress(row):
        if not args.quiet:
            t = "" if row["t"] is None else f" t={row['t']:.4f}"
            print(f"epoch {row['epoch']:3d} loss={row['loss']:.4f} lr={row['lr']:.3g}{t} "
                  f"margin={row['feasibility_margin']:.4f}", file=sys.stderr)

    state = train(cfg, train_ds, holdout, progress=progress)
    report = evaluate_embeddings(state.embed(holdout.features), holdout.labels, state.learned_t,
                                 seed=cfg.seed)
    save_checkpoint(state, out / "checkpoint.json")
    _write_log(state.log, out / "train_log.csv")
    _dump({"config": cfg.to_dict(), "seed": cfg.seed, "split": "holdout",
           "report": report.to_dict()}, out / "report.json")
    t = "" if state.learned_t is None else f" learned_t={state.learned_t:.6f}"
    print(f"{cfg.preset}: holdout TAR@FAR=1e-2 {report.tar(1e-2):.4f}, "
          f"EER {report.eer:.4f}{t}; artifacts in {out}")
    return EXIT_OK


def _eval_data(args, state):
    if args.data:
        return read_csv(args.data)
    train_ds, holdout = experiment_data(state.config)
    return holdout if args.split == "holdout" else train_ds


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = _eval_data(args, state)
    check_input_dim(state, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_embeddings(state.embed(ds.features), ds.labels, state.learned_t,
                                 seed=args.seed)
    report.thresholds.write_csv(out / "thresholds.csv")
    _dump({"config": state.config.to_dict(), "seed": args.seed,
           "split": "csv" if args.data else args.split, "report": report.to_dict()},
          out / "report.json")
    print(f"unified_ok={report.unified_ok} margin={report.feasibility_margin:.4f} "
          f"TAR@FAR=1e-2 {report.tar(1e-2):.4f} EER {report.eer:.4f}")
    return EXIT_OK


def cmd_export_thresholds(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = _eval_data(args, state)
    check_input_dim(state, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    th = per_identity_thresholds(state.embed(ds.features), ds.labels, seed=args.seed)
    th.write_csv(out / "thresholds.csv")
    stats = th.stats()
    print(" ".join(f"{k}={v:.4f}" for k, v in stats.items()))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.n_ids, args.samples_per_id, args.dim, args.sigma, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "data.csv")
    print(f"wrote {len(ds)} samples of {ds.n_ids} identities to {out / 'data.csv'}")
    return EXIT_OK


def cmd_theory_check(args) -> int:
    if args.trials < 1:
        raise argparse.ArgumentTypeError("--trials must be >= 1")
    res = theory_check(args.trials, args.seed, args.rhs_shift)
    rep = res.report
    print(f"{'bound':22s} {'evaluated':>9s} {'skipped':>7s} {'min slack':>13s}")
    for k, slack in rep.slacks.items():
        flag = "" if not slack < -SLACK_TOL else "  VIOLATED"
        print(f"{k:22s} {rep.evaluated[k]:9d} {rep.skipped[k]:7d} {slack:13.4e}{flag}")
    sweep = stationary_sweep()
    sweep_ok = all(abs(r.d_b) < 1e-12 and r.in_range == r.expected_in_range for r in sweep)
    worst_db = max(abs(r.d_b) for r in sweep)
    print(f"stationary sweep: {len(sweep)} (N, gamma) points, max |d_b| = {worst_db:.2e}, "
          f"range flag {'consistent' if sweep_ok else 'INCONSISTENT'}")
    b_gd, iters = descend_threshold(8, 4.0)
    b_cf = stationary_b(8, 4.0).b
    gd_ok = abs(b_gd - b_cf) < 1e-6
    print(f"descent on b (N=8, gamma=4): {b_gd:.12f} after {iters} steps, "
          f"closed form {b_cf:.12f}")
    ok = res.ok(SLACK_TOL) and sweep_ok and gd_ok
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump({"trials": args.trials, "seed": args.seed, "rhs_shift": args.rhs_shift, "ok": ok,
               "slacks": rep.slacks, "evaluated": rep.evaluated, "skipped": rep.skipped,
               "violations": {k: res.worst[k] for k in rep.violations(SLACK_TOL)}},
              out / "theory_check.json")
    if not ok:
        for k in rep.violations(SLACK_TOL):
            w = res.worst[k]
            print(f"violation {k}: trial {w['trial']} N={w['n_ids']} gamma={w['gamma']} "
                  f"t={w['t']:.6f} slack={w['slack']:.3e}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all bounds hold ({res.seconds:.1f}s)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.trials, args.network_seeds, args.seed, broken=args.broken_sign)
    ok = True
    for r in results:
        tol = NETWORK_TOL if r.name.startswith("network/") else SCALAR_TOL
        passed = r.ok(tol)
        ok &= passed
        print(f"{r.name:22s} max rel err {r.max_rel_err:.3e}  (< {tol:g}) "
              f"{'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usslearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a preset and write checkpoint, log and report")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a checkpoint"),
                             ("export-thresholds", cmd_export_thresholds,
                              "write per-identity optimal thresholds as CSV")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True, type=Path)
        p.add_argument("--data", type=Path, help="embedding CSV (label,f0,...); default: the "
                       "checkpoint's own synthetic data")
        p.add_argument("--split", choices=("holdout", "train"), default="holdout",
                       help="which part of the checkpoint's data to use without --data")
        p.add_argument("--seed", type=int, default=0, help="seed for pair sampling and folds")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("gen-data", help="write a synthetic identity dataset as CSV")
    p.add_argument("--n-ids", type=int, default=50)
    p.add_argument("--samples-per-id", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory (data.csv)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("theory-check", help="randomized inequality and stationarity suite")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rhs-shift", type=float, default=0.0,
                   help="test mode: add this to every right-hand side")
    p.add_argument("--out", help="optional directory for theory_check.json")
    p.set_defaults(func=cmd_theory_check)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss and the network")
    p.add_argument("--trials", type=int, default=200, help=f"random inputs per loss ({len(LOSS_NAMES)} losses)")
    p.add_argument("--network-seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--broken-sign", action="store_true",
                   help="test mode: flip analytic gradients so every check fails")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UssError, OSError, argparse.ArgumentTypeError) as exc:
        print(f"usslearn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
