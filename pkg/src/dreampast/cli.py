"""Command-line entry point: gen-corpus, pretrain, run, eval, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .diffusion import (
    DiffusionConfig,
    load_pretrain_state,
    make_schedule,
    pretrain_denoiser,
    save_denoiser,
    save_pretrain_state,
)
from .runner import (
    ConfigError,
    MODES,
    RunConfig,
    evaluate,
    find_runs,
    load_config,
    prepare_data,
    read_metrics,
    run_scenario,
    validation_set,
)
from .scenario import STYLES, CorpusSpec, generate_corpus, load_corpus, load_manifest, save_corpus
from .segmenter import load_segmenter

log = logging.getLogger("dreampast")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
METRIC_KEYS = ("miou_base", "miou_novel", "miou_all", "hiou", "miou_old")


class UsageError(Exception):
    pass


def _run_dir(args) -> Path:
    path = args.run_dir or os.environ.get("DREAMPAST_RUN_DIR")
    if not path:
        raise UsageError("no run directory: pass --run-dir or set DREAMPAST_RUN_DIR")
    return Path(path)


def _base_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


# -- gen-corpus ------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    spec = CorpusSpec()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        spec = CorpusSpec.from_dict({**spec.to_dict(), **raw.get("corpus", raw)})
    overrides = {k: getattr(args, k) for k in ("style", "seed", "num_classes", "images_per_class") if getattr(args, k) is not None}
    if args.image_size:
        overrides["image_size"] = list(args.image_size)
    spec = CorpusSpec.from_dict({**spec.to_dict(), **overrides})
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = save_corpus(generate_corpus(spec), args.out, spec)
    print(f"wrote {spec.num_classes * spec.images_per_class} images ({spec.style}) to {out}")
    return EXIT_OK


# -- pretrain -------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = DiffusionConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        cfg = DiffusionConfig.from_dict({**cfg.to_dict(), **raw.get("diffusion", raw)})
    if args.iters is not None:
        cfg = DiffusionConfig.from_dict({**cfg.to_dict(), "train_iters": args.iters})
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    corpus_dir = Path(args.corpus)
    if not (corpus_dir / "manifest.json").exists():
        raise FileNotFoundError(f"pretrain corpus not found at {corpus_dir}")
    corpus = load_corpus(corpus_dir)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state_path = out.with_suffix(".state")
    resume = None
    if args.resume:
        if not state_path.exists():
            raise FileNotFoundError(f"--resume given but no optimizer state at {state_path}")
        resume = load_pretrain_state(state_path)
    res = pretrain_denoiser(corpus, cfg, seed=args.seed, resume=resume)
    digest = save_denoiser(out, res.denoiser, make_schedule(cfg))
    save_pretrain_state(state_path, res)
    sidecar = {
        "checkpoint": out.name,
        "sha256": digest,
        "iters": res.step,
        "seed": args.seed,
        "heldout_loss_init": res.heldout_init,
        "heldout_loss_final": res.heldout_final,
        "history": res.history,
        "corpus": str(corpus_dir),
        "corpus_style": load_manifest(corpus_dir).get("style"),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    print(f"denoiser {out} sha256={digest} held-out loss {res.heldout_init:.4f} -> {res.heldout_final:.4f}")
    return EXIT_OK


# -- run ------------------------------------------------------------------------------


def _apply_run_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    for key in ("mode", "seed", "denoiser_path", "downstream_dir", "epochs_base", "epochs_step", "token_iters"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    if getattr(args, "budget", None) is not None:
        changes["budget"] = {"total_size": args.budget}
    if getattr(args, "dump_replay", False):
        changes["dump_replay"] = True
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _apply_run_overrides(_base_config(args), args)
    root = _run_dir(args)
    seeds = args.seeds or [cfg.seed]
    for s in seeds:
        c = cfg.replace(seed=s) if args.seeds else cfg
        rd = root / f"seed_{s}" if args.seeds else root
        records = run_scenario(c, rd)
        for r in records:
            print(json.dumps({k: r[k] for k in ("step", "mode", "seed", *METRIC_KEYS)}))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------


def _eval_checkpoint(ckpt: Path, cfg: RunConfig, step: int | None) -> dict:
    model, header = load_segmenter(ckpt)
    data = prepare_data(cfg)
    t = step if step is not None else header["step"]
    if not 1 <= t <= data.label_space.n_steps:
        raise ValueError(f"step {t} outside the scenario's 1..{data.label_space.n_steps}")
    return evaluate(model, validation_set(data, t), data.label_space, t)


def cmd_eval(args) -> int:
    if args.runs is not None:
        root = _run_dir(args)
        runs = find_runs(root)[: args.runs]
        if len(runs) < args.runs:
            raise ValueError(f"asked for {args.runs} runs but {root} holds {len(runs)}")
        finals = []
        for rd in runs:
            cfg = load_config(rd / "config.json")
            steps = sorted(int(p.name.split("_")[1]) for p in rd.glob("step_*") if (p / "segmenter.ckpt").exists())
            if not steps:
                raise ValueError(f"{rd} has no segmenter checkpoints")
            finals.append(_eval_checkpoint(rd / f"step_{steps[-1]}" / "segmenter.ckpt", cfg, steps[-1]))
        summary = {"runs": [str(r) for r in runs]}
        for k in METRIC_KEYS:
            vals = [f[k] for f in finals if f[k] is not None]
            summary[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
        print(json.dumps(summary, indent=1))
        for k in METRIC_KEYS:
            if summary[k]:
                print(f"{k}: {summary[k]['mean']:.2f} +- {summary[k]['std']:.2f}")
        return EXIT_OK

    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        cfg = load_config(args.config) if args.config else load_config(ckpt.parent.parent / "config.json")
    else:
        rd = _run_dir(args)
        cfg = load_config(rd / "config.json")
        if args.step is None:
            raise UsageError("eval needs --step (or --checkpoint, or --runs)")
        ckpt = rd / f"step_{args.step}" / "segmenter.ckpt"
    if args.corpus:
        cfg = cfg.replace(downstream_dir=str(args.corpus))
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    record = _eval_checkpoint(ckpt, cfg, args.step)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


# -- report ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    runs = []
    for root in args.run_dirs:
        runs += find_runs(root)
    if not runs:
        raise ValueError(f"no runs found under {', '.join(args.run_dirs)}")
    out = Path(args.out) if args.out else Path(args.run_dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    rows, warnings = [], 0
    for rd in runs:
        records, bad = read_metrics(rd)
        warnings += bad
        for r in records:
            rows.append({"run": str(rd), "mode": r.get("mode"), "seed": r.get("seed"), "budget": r.get("budget"),
                         "step": r["step"], **{k: r.get(k) for k in METRIC_KEYS}})
    if not rows:
        raise ValueError("the given runs contain no metrics records")
    fields = ["run", "mode", "seed", "budget", "step", *METRIC_KEYS]
    with (out / "evolution.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rd in runs:
        pts = [r for r in rows if r["run"] == str(rd) and r["miou_all"] is not None]
        ax.plot([r["step"] for r in pts], [r["miou_all"] for r in pts], marker="o", label=rd.name)
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU (all, %)")
    if len(runs) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "evolution.png", dpi=100)
    plt.close(fig)

    final = {}
    for rd in runs:
        pts = [r for r in rows if r["run"] == str(rd)]
        if pts:
            final[str(rd)] = max(pts, key=lambda r: r["step"])
    budgets = sorted({r["budget"] for r in final.values() if r["budget"] is not None})
    n_sweep = 0
    if len(final) > 1 and len(budgets) > 1:
        sweep = []
        for b in budgets:
            vals = [r["miou_all"] for r in final.values() if r["budget"] == b and r["miou_all"] is not None]
            sweep.append({"budget": b, "n_runs": len(vals), "miou_all_mean": float(np.mean(vals)) if vals else None,
                          "miou_all_std": float(np.std(vals)) if vals else None})
        with (out / "sweep.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(sweep[0]))
            w.writeheader()
            w.writerows(sweep)
        fig, ax = plt.subplots(figsize=(4, 3))
        pts = [s for s in sweep if s["miou_all_mean"] is not None]
        ax.errorbar([s["budget"] for s in pts], [s["miou_all_mean"] for s in pts], yerr=[s["miou_all_std"] for s in pts], marker="o")
        ax.set_xlabel("replay budget")
        ax.set_ylabel("final mIoU (all, %)")
        fig.tight_layout()
        fig.savefig(out / "sweep.png", dpi=100)
        plt.close(fig)
        n_sweep = len(sweep)
    print(f"runs: {len(runs)}  records: {len(rows)}  sweep points: {n_sweep}  warnings: {warnings}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dreampast", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="render a synthetic shapes corpus to disk")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--style", choices=STYLES)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--images-per-class", dest="images_per_class", type=int)
    g.add_argument("--image-size", dest="image_size", type=int, nargs=2, metavar=("H", "W"))
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("pretrain", help="pretrain the denoiser on a pretrain-style corpus")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iters", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("run", help="run an incremental scenario")
    r.add_argument("--config")
    r.add_argument("--run-dir", dest="run_dir")
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--seeds", type=int, nargs="+", help="one run per seed under <run-dir>/seed_<s>")
    r.add_argument("--budget", type=int)
    r.add_argument("--denoiser", dest="denoiser_path")
    r.add_argument("--corpus", dest="downstream_dir")
    r.add_argument("--epochs-base", dest="epochs_base", type=int)
    r.add_argument("--epochs-step", dest="epochs_step", type=int)
    r.add_argument("--token-iters", dest="token_iters", type=int)
    r.add_argument("--dump-replay", dest="dump_replay", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a segmenter checkpoint")
    e.add_argument("--config")
    e.add_argument("--run-dir", dest="run_dir")
    e.add_argument("--checkpoint")
    e.add_argument("--corpus")
    e.add_argument("--step", type=int)
    e.add_argument("--runs", type=int, help="aggregate the final step of the first k runs under --run-dir")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="CSV tables and plots from completed runs")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"dreampast {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as e:
        print(f"dreampast {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
