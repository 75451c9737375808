"""Command-line entry point.

Subcommands: train, eval, ablate, sweep, confidence, gradcheck, datagen.
Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 I/O error. Every
command is a pure function of (config, seed); the resolved config echo
written to the output directory suffices to replay any artifact.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .autodiff import NumericsError, dtype_for, set_default_dtype
from .config import ConfigError, RunConfig, family_from_spec, load_config
from .data import DatasetFormatError, materialize, sample_episode, save_dataset
from .evaluate import (
    DENSE_FREE_LADDER,
    MAIN_LADDER,
    Rung,
    confidence_report,
    evaluate,
    run_ablation,
    sweep_iterations,
)
from .gradcheck import run_all
from .meta import (
    Checkpoint,
    CheckpointError,
    EVAL_INDEX_BASE,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

# protocol default grids for the iteration sweeps
EVAL_SIDE_GRID = (0, 3, 6, 9, 12, 15, 18, 21, 24)
TRAIN_SIDE_GRID = (0, 1, 3, 5, 10, 15)


def _ensure_outdir(cfg: RunConfig) -> str:
    set_default_dtype(dtype_for(int(cfg.data["precision"])))
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved-config.yaml"), "w") as f:
        f.write(cfg.echo_yaml())
    return out


def _write_csv(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _checkpoint_family(ckpt: Checkpoint):
    if not ckpt.family_spec:
        raise ConfigError("checkpoint carries no family description; pass --config")
    return family_from_spec(ckpt.family_spec)


def _rung_from_config(cfg: RunConfig) -> Rung:
    psi = cfg.data["psi"]
    return Rung(
        label="config",
        dense=cfg.dense,
        init=cfg.inner().init,
        transductive=bool(psi["transductive"]),
        learnable=cfg.learnable(),
    )


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _ensure_outdir(cfg)
    family = cfg.family()
    result = train(
        family,
        cfg.embedding(),
        cfg.psi(),
        cfg.meta(),
        cfg.inner(),
        seed=cfg.seed,
        learnable_psi=cfg.learnable(),
        dense=cfg.dense,
    )
    ckpt_path = os.path.join(out, "checkpoint.fiml")
    save_checkpoint(result.checkpoint, ckpt_path)
    rows = [
        [r["epoch"], f"{r['meta_loss']:.10f}", f"{r.get('val_acc', float('nan')):.6f}", f"{r.get('val_ci95', float('nan')):.6f}"]
        for r in result.log
    ]
    _write_csv(os.path.join(out, "training-log.csv"), ["epoch", "meta_loss", "val_acc", "val_ci95"], rows)
    print(f"checkpoint: {ckpt_path}")
    if result.log:
        best = result.checkpoint.best_val_acc
        print(f"best validation accuracy: {best:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    family = family_from_spec(load_config(args.config).family_spec()) if args.config else _checkpoint_family(ckpt)
    seed = int(os.environ.get("FIML_SEED", args.seed))
    report = evaluate(
        ckpt,
        family,
        args.split,
        args.ways,
        args.shots,
        args.episodes,
        seed,
        iterations=args.iters,
        threads=args.threads,
    )
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        _write_csv(
            args.out,
            ["ways", "shots", "episodes", "iterations", "seed", "mean_acc", "ci95"],
            [[report.ways, report.shots, report.episodes, report.iterations, seed, f"{report.mean_acc:.6f}", f"{report.ci95:.6f}"]],
        )
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _ensure_outdir(cfg)
    ab = cfg.data["ablation"]
    ladder = MAIN_LADDER if ab["ladder"] == "main" else DENSE_FREE_LADDER
    rows = run_ablation(
        cfg.family(),
        cfg.embedding(),
        cfg.meta(),
        cfg.inner(),
        cfg.seed,
        eval_episodes=int(ab["eval_episodes"]),
        shots=tuple(int(s) for s in ab["shots"]),
        ladder=ladder,
        threads=cfg.threads,
    )
    csv_rows = [[label, shot, rep.episodes, f"{rep.mean_acc:.6f}", f"{rep.ci95:.6f}"] for label, shot, rep in rows]
    path = os.path.join(out, "ablation.csv")
    _write_csv(path, ["config", "shots", "episodes", "mean_acc", "ci95"], csv_rows)
    for label, shot, rep in rows:
        print(f"{label:16s} {shot}-shot  {rep.summary()}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _ensure_outdir(cfg)
    sw = cfg.data["sweep"]
    mode = args.mode or sw["mode"]
    if args.grid:
        grid = [int(tok) for tok in args.grid.split(",") if tok.strip() != ""]
    elif sw["grid"]:
        grid = [int(g) for g in sw["grid"]]
    else:
        grid = list(EVAL_SIDE_GRID if mode == "eval-side" else TRAIN_SIDE_GRID)
    kwargs = {
        "family": cfg.family(),
        "seed": cfg.seed,
        "shots": int(sw["shots"]),
        "eval_episodes": int(sw["eval_episodes"]),
        "threads": cfg.threads,
    }
    if mode == "eval-side":
        if not args.checkpoint:
            raise ConfigError("eval-side sweep needs --checkpoint")
        kwargs["ckpt"] = load_checkpoint(args.checkpoint)
    else:
        kwargs.update(
            emb_cfg=cfg.embedding(),
            rung=_rung_from_config(cfg),
            meta_cfg=cfg.meta(),
            inner_cfg=cfg.inner(),
        )
    try:
        rows = sweep_iterations(mode, grid, **kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    csv_rows = [[mode, it, rep.episodes, f"{rep.mean_acc:.6f}", f"{rep.ci95:.6f}"] for it, rep in rows]
    path = os.path.join(out, "sweep.csv")
    _write_csv(path, ["mode", "iterations", "episodes", "mean_acc", "ci95"], csv_rows)
    for it, rep in rows:
        print(f"iters={it:3d}  {rep.summary()}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_confidence(args) -> int:
    cfg = load_config(args.config)
    out = _ensure_outdir(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    family = cfg.family()
    conf = cfg.data["confidence"]
    meta = cfg.meta()
    header = None
    csv_rows = []
    summaries = []
    for idx in range(int(conf["episodes"])):
        episode = sample_episode(
            family,
            meta.ways,
            int(conf["shots"]),
            meta.queries_per_class,
            cfg.seed,
            split=str(conf["split"]),
            index=EVAL_INDEX_BASE + idx,
        )
        rep = confidence_report(ckpt, episode)
        k = episode.ways
        header = ["episode_id", "query_id", "true_class"] + [f"p_{c}" for c in range(k)] + ["variant"]
        for variant, qid, true_class, probs in rep["rows"]:
            csv_rows.append([idx, qid, true_class] + [f"{p:.9f}" for p in probs] + [variant])
        summaries.append(rep["mean_max_prob"])
    path = os.path.join(out, "confidence.csv")
    _write_csv(path, header, csv_rows)
    on = float(np.mean([s["transductive"] for s in summaries]))
    off = float(np.mean([s["inductive"] for s in summaries]))
    print(f"mean max probability: transductive={on:.4f} inductive={off:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(fast=args.fast)
    for res in results:
        print(res.line())
    if all(r.passed for r in results):
        print("all checks passed")
        return EXIT_OK
    print("gradcheck FAILED", file=sys.stderr)
    return EXIT_NUMERIC


def cmd_datagen(args) -> int:
    cfg = load_config(args.config)
    family = cfg.family()
    frozen = materialize(family, per_class=args.per_class, seed=cfg.seed)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    save_dataset(frozen, args.out)
    print(f"wrote {args.out} ({frozen.data.shape[0]} examples, {frozen.num_classes} classes)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fiml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a model from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", default=None, help="config supplying the task family (default: from checkpoint)")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--threads", type=int, default=max(1, os.cpu_count() or 1))
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the ablation ladder")
    p.add_argument("config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="vary the inner iteration budget")
    p.add_argument("config")
    p.add_argument("--mode", choices=["eval-side", "train-side"], default=None)
    p.add_argument("--grid", default=None, help="comma-separated iteration counts")
    p.add_argument("--checkpoint", default=None, help="required for eval-side")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("confidence", help="export per-query softmax tables")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("gradcheck", help="run the finite-difference verification suite")
    p.add_argument("--fast", action="store_true", help="reduced draw counts")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("datagen", help="materialize a family into an FSDT file")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.set_defaults(func=cmd_datagen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DatasetFormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
