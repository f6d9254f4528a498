"""``trifuse`` command line: synth, train, eval, gradcheck, ablate, report.

Exit status is 0 on success, 2 on a usage error and 1 on a runtime error.
Machine-readable records go to stdout as JSON Lines; human-readable
summaries go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import secrets
import sys
from pathlib import Path

from .audit import gradient_audit
from .data import SynthConfig, generate_synthetic, read_manifest
from .errors import TrifuseError
from .metrics import aggregate_folds, render_table
from .model import MODES

__all__ = ["main", "build_parser"]

log = logging.getLogger("trifuse")

# train/ablate flags that map one-to-one onto TrainConfig fields
TRAIN_FLAGS = {
    "task": dict(choices=("classification", "regression"), help="label type (default: from the manifest)"),
    "lr": dict(type=float, help="AdamW learning rate (default 3e-4)"),
    "batch": dict(type=int, help="minibatch size (default 8)"),
    "weight_decay": dict(type=float, help="decoupled weight decay (default 0.01)"),
    "max_epochs": dict(type=int, help="epoch budget (default 50)"),
    "patience": dict(type=int, help="early-stopping patience in epochs (default 10)"),
    "d_h": dict(type=int, help="hidden width of encoders, attention and head (default 32)"),
    "kv": dict(choices=("sequence", "final"), help="attend over all hidden states or only the final one"),
    "val_fold": dict(type=int, help="fold held out for validation, 1..5 (default 5)"),
    "sigma": dict(type=float, help="augmentation noise std (default 0.01)"),
    "mask_p": dict(type=float, help="augmentation row-mask probability (default 0.1)"),
    "lam": dict(type=float, help="reconstruction loss weight when --recon is set (default 0.1)"),
    "alpha": dict(type=float, help="focal loss alpha (default 0.25)"),
    "gamma": dict(type=float, help="focal loss gamma (default 2)"),
}


def _emit(record: dict, fh=None) -> None:
    line = json.dumps(record, sort_keys=True)
    print(line, flush=True)
    if fh is not None:
        fh.write(line + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _resolve_seed(seed):
    if seed is None:
        seed = secrets.randbelow(2**31)
        _say(f"seed: {seed} (generated; pass --seed {seed} to reproduce)")
    return seed


def _manifest(path):
    p = Path(path)
    return read_manifest(p / "manifest.jsonl" if p.is_dir() else p)


def _train_config(args, manifest):
    from .trainer import TrainConfig

    base = TrainConfig.from_json(args.config).to_dict() if args.config else {}
    for name in TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    if args.no_augment:
        base["augment"] = False
    if args.recon:
        base["recon"] = True
    if getattr(args, "mode", None):
        base["mode"] = args.mode
    if "task" not in base:
        base["task"] = manifest.task()
    if hasattr(args, "seed"):
        base["seed"] = _resolve_seed(args.seed if args.seed is not None else base.get("seed"))
    return TrainConfig.from_dict(base)


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = _resolve_seed(args.seed)
    cfg = SynthConfig(n_clips=args.n, d_v=args.d_v, d_i=args.d_i, d_t=args.d_t, task=args.task, seed=seed,
                      noise=args.noise)
    manifest = generate_synthetic(cfg, args.out)
    _emit({"event": "synth", "out": str(args.out), "n_clips": len(manifest.records), "seed": seed,
           "task": cfg.task})
    _say(f"wrote {len(manifest.records)} clips to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training
    from .trainer import save_checkpoint, train

    manifest = _manifest(args.data)
    cfg = _train_config(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    with (out / "train_log.jsonl").open("w") as fh:
        result = train(cfg, manifest, log_fn=lambda rec: _emit(rec, fh))
    ckpt_path = save_checkpoint(result.checkpoint, out / "checkpoint")
    if not args.no_plot:
        plot_training(result.log, out / "training.png")
    ck = result.checkpoint
    _say(f"best val {'F1' if cfg.task == 'classification' else 'CCC'} {ck.best_score:.4f} at epoch {ck.epoch} "
         f"({len(result.log)} epochs{', stopped early' if result.stopped_early else ''}); checkpoint {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    split = int(args.split) if args.split.isdigit() else args.split
    rep = evaluate(ckpt, _manifest(args.data), split)
    text = json.dumps(rep, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    _say(f"{rep['metric']} on {rep['split']} ({rep['n']} windows): {rep['score']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    results = gradient_audit(seed, args.eps)
    worst = max(results, key=lambda r: r.error)
    for r in results:
        _emit({"check": r.name, "error": r.error, "pass": r.passed(args.tol)})
    ok = worst.error < args.tol
    _say(f"max relative error {worst.error:.3e} ({worst.name}) {'<' if ok else '>='} {args.tol:g}: "
         f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .trainer import run_ablation

    manifest = _manifest(args.data)
    cfg = _train_config(args, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(mode, run):
        _emit({"mode": mode, **run})
        _say(f"{mode:<7} seed {run['seed']}: {run['score']:.4f} (best epoch {run['best_epoch']})")

    table = run_ablation(cfg, manifest, seeds=args.seeds, modes=args.modes, progress=progress)
    (out / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", *[f"seed_{s}" for s in args.seeds], "mean"])
        for mode, row in table["modes"].items():
            w.writerow([mode, *[f"{r['score']:.6f}" for r in row["runs"]], f"{row['mean']:.6f}"])
    plot_ablation(table, out / "ablation.png")
    _say(f"{'mode':<8}{table['metric']:>8}")
    for mode, row in table["modes"].items():
        _say(f"{mode:<8}{row['mean']:>8.4f}")
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_fold_reports

    reports = {}
    if args.evals:
        scores = [json.loads(Path(p).read_text()) for p in args.evals]
        metrics = {s["metric"] for s in scores}
        if len(metrics) != 1:
            raise TrifuseError(f"eval files mix metrics: {sorted(metrics)}")
        reports[args.name] = aggregate_folds([s["score"] for s in scores], metrics.pop())
    for name, metric, *vals in args.row or []:
        try:
            reports[name] = aggregate_folds([float(v) for v in vals], metric)
        except ValueError as exc:
            raise TrifuseError(f"--row {name}: {exc}") from exc
    if not reports:
        raise TrifuseError("report needs five eval JSON files or at least one --row")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(reports)
    (out / "report.txt").write_text(table)
    (out / "report.json").write_text(
        json.dumps({k: json.loads(v.to_json()) for k, v in reports.items()}, indent=1, sort_keys=True) + "\n")
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "metric", *[f"fold_{i}" for i in range(1, 6)], "mean", "std"])
        for name, rep in reports.items():
            w.writerow([name, rep.metric, *rep.folds, repr(rep.mean), repr(rep.std)])
    if not args.no_plot:
        plot_fold_reports(reports, out / "report.png")
    sys.stdout.write(table)
    for name, rep in reports.items():
        _emit({"dataset": name, **json.loads(rep.to_json())})
    return 0


# -- parser -----------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory (with manifest.jsonl) or manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file of training settings; flags override it")
    for name, kw in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)
    p.add_argument("--recon", action="store_true", help="add the reconstruction regulariser")
    p.add_argument("--no-augment", action="store_true", help="disable feature-level augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trifuse", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=2000, help="number of clips (default 2000)")
    p.add_argument("--seed", type=int, help="random seed (generated and printed if omitted)")
    p.add_argument("--task", choices=("classification", "regression"), default="classification",
                   help="label type (default classification)")
    p.add_argument("--noise", type=float, default=0.5, help="feature noise std (default 0.5)")
    p.add_argument("--d-v", type=int, default=16, help="video feature dim (default 16)")
    p.add_argument("--d-i", type=int, default=16, help="image feature dim (default 16)")
    p.add_argument("--d-t", type=int, default=16, help="text feature dim (default 16)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model, write checkpoint and epoch log")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, help="random seed (generated and printed if omitted)")
    p.add_argument("--mode", choices=MODES, help="model variant (default full)")
    p.add_argument("--no-plot", action="store_true", help="skip the training-curve figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (with or without .json)")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--split", default="val", help="val, train, all or a fold number (default val)")
    p.add_argument("--out", help="also write the JSON result to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    p.add_argument("--seed", type=int, help="random seed (generated and printed if omitted)")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step (default 1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="pass threshold on max relative error (default 1e-4)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every model variant over several seeds")
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds to average (default 0 1 2)")
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES), help="variants to train (default all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate five fold scores into a table, JSON, CSV and figure")
    p.add_argument("evals", nargs="*", help="five eval JSON files, one per fold")
    p.add_argument("--name", default="dataset", help="row label for the eval files (default 'dataset')")
    p.add_argument("--row", nargs=7, action="append", metavar=("NAME", "METRIC", "S1", "S2", "S3", "S4", "S5"),
                   help="a row given directly as name, metric and five scores; repeatable")
    p.add_argument("--out", default=".", help="output directory (default current)")
    p.add_argument("--no-plot", action="store_true", help="skip the figure")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrifuseError, OSError, ValueError) as exc:
        _say(f"trifuse {args.command}: error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
