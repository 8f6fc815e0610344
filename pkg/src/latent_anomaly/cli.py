"""Command-line entry point: ``latent-anomaly {gen,train,eval,sweep,keywords}``.

Every command writes into its own subdirectory of ``--out`` and refuses to
touch an existing one unless ``--overwrite`` is given (``train --resume``
continues an existing training directory instead).

Exit codes: 0 success, 1 user/configuration error, 2 internal invariant
violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .denoiser import AnalyticDenoiser, load_checkpoint, save_checkpoint, start_training, train
from .errors import ConfigurationError, InvariantViolation, TrainingDivergedError
from .evaluation import evaluate, timestep_sweep
from .prompting import derive_conditions, keyword_frequencies, prompts_from_indices, save_pool, write_frequencies
from .synthdata import Dataset, gen_dataset, write_csv

log = logging.getLogger("latent_anomaly")


def _fresh_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ConfigurationError(f"{path} already exists; use a fresh --out or pass --overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args):
    from .config import Config

    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["eval.mode"] = args.mode
    return Config.load(args.config, overrides)


def _dataset(args) -> Dataset:
    root = Path(args.data) if args.data else Path(args.out) / "dataset"
    return Dataset(root)


def _training_patches(ds: Dataset, world, k: int):
    z = np.concatenate([s.cells.reshape(-1, s.dim) for s in ds.slides("train")])
    ids = None
    if getattr(world.provider, "needs_ids", False):
        ids = [pid for s in ds.slides("train") for pid in s.patch_ids()]
    cond, _, _ = derive_conditions(z, world.pool, world.provider, k, ids)
    return z, cond


def _denoiser(cfg, ds: Dataset, sched, world, out: Path):
    if cfg.get("denoiser.kind") == "analytic":
        return AnalyticDenoiser(world.normal, sched)
    ckpt = cfg.path("denoiser.checkpoint") or out / "train" / "checkpoint.json"
    if not ckpt.exists():
        raise ConfigurationError(f"no checkpoint at {ckpt}; run 'train' first or set denoiser.checkpoint")
    state, meta = load_checkpoint(ckpt, dim=cfg.int("data.dim"), cond_dim=cfg.int("data.cond_dim"))
    if meta["dataset_digest"] != ds.digest:
        raise ConfigurationError(
            f"checkpoint {ckpt} was trained on dataset {meta['dataset_digest'][:16]}, "
            f"not {ds.digest[:16]}; refusing to run")
    sch = meta["schedule"]
    if (sch["T"], sch["beta_start"], sch["beta_end"]) != (sched.T, sched.beta_start, sched.beta_end):
        raise ConfigurationError(f"checkpoint {ckpt} schedule {sch} differs from the configured schedule")
    return state.net


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    from .config import save_mixtures

    cfg = _load_config(args)
    world = cfg.world()
    out = _fresh_dir(Path(args.data) if args.data else Path(args.out) / "dataset", args.overwrite)
    digest = cfg.digest()
    cfg.write(out / "config.ini")
    gen_dataset(world.spec, out, digest)
    save_mixtures(out / "mixture.json", world.spec.normal, world.spec.ood)
    save_pool(out / "keyword_pool.txt", world.pool)
    ds = Dataset(out)
    print(f"wrote {len(ds.manifest)} slides to {out} (manifest sha256 {ds.digest[:16]})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = _dataset(args)
    ds.require("train")
    world = cfg.world()
    sched = cfg.schedule()
    tcfg = cfg.train_config()
    out_dir = Path(args.out) / "train"
    ckpt = out_dir / "checkpoint.json"
    digest = cfg.digest(("run", "schedule", "data", "prompting", "denoiser"))
    if args.resume:
        if not ckpt.exists():
            raise ConfigurationError(f"--resume given but {ckpt} does not exist")
        state, meta = load_checkpoint(ckpt, dim=cfg.int("data.dim"), cond_dim=cfg.int("data.cond_dim"))
        if meta["dataset_digest"] != ds.digest:
            raise ConfigurationError(f"checkpoint {ckpt} belongs to a different dataset; refusing to resume")
        if state.step > tcfg.steps:
            raise ConfigurationError(f"checkpoint is at step {state.step} > train.steps={tcfg.steps}")
    else:
        _fresh_dir(out_dir, args.overwrite)
        state = start_training(cfg.int("data.dim"), cfg.int("data.cond_dim"), sched, tcfg,
                               hidden=cfg.hidden(), time_dim=cfg.int("denoiser.time_dim"))
    cfg.write(out_dir / "config.ini")
    z, cond = _training_patches(ds, world, cfg.int("prompting.top_k"))
    log.info("training on %d patches for %d steps (from step %d)", len(z), tcfg.steps, state.step)

    def progress(step, loss):
        if step % 1000 == 0:
            log.info("step %d loss %.4f", step, loss)

    train(state, z, cond, sched, tcfg, progress)
    sha = save_checkpoint(ckpt, state, sched, digest, ds.digest)
    write_csv(out_dir / "loss_curve.csv", ["step", "loss"],
              [[i + 1, repr(float(x))] for i, x in enumerate(state.losses)], cfg.digest())
    print(f"checkpoint {ckpt} at step {state.step} (sha256 {sha[:16]})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ds = _dataset(args)
    world = cfg.world()
    sched = cfg.schedule()
    den = _denoiser(cfg, ds, sched, world, Path(args.out))
    ecfg = cfg.eval_config(jobs=args.jobs)
    out = _fresh_dir(Path(args.out) / f"eval_{ecfg.mode}", args.overwrite)
    cfg.write(out / "config.ini")
    rep = evaluate(ds, den, world, sched, ecfg, out_dir=out, config_digest=cfg.digest())
    for k, v in rep.metrics().items():
        print(f"{k:16s} {v:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    ds = _dataset(args)
    world = cfg.world()
    sched = cfg.schedule()
    den = _denoiser(cfg, ds, sched, world, Path(args.out))
    ecfg = cfg.eval_config(jobs=args.jobs)
    out = _fresh_dir(Path(args.out) / f"sweep_{ecfg.mode}", args.overwrite)
    cfg.write(out / "config.ini")
    digest = cfg.digest()
    best, rows = timestep_sweep(ds, den, world, sched, ecfg, cfg.ints("eval.sweep"), digest)
    fields = list(rows[0])
    write_csv(out / "sweep.csv", fields, [[repr(r[f]) if isinstance(r[f], float) else r[f] for f in fields]
                                          for r in rows], digest)
    (out / "sweep.json").write_text(
        json.dumps({"config_digest": digest, "best_t_star": best, "rows": rows}, sort_keys=True, indent=1) + "\n")
    for r in rows:
        print(f"t_star={r['t_star']:5d}  slide_auc_z99={r['slide_auc_z99']:.4f}  patch_auc={r['patch_auc']:.4f}")
    print(f"best t_star: {best}")
    return 0


def cmd_keywords(args) -> int:
    cfg = _load_config(args)
    ds = _dataset(args)
    world = cfg.world()
    k = cfg.int("prompting.top_k")
    out = _fresh_dir(Path(args.out) / "keywords", args.overwrite)
    digest = cfg.digest()
    cfg.write(out / "config.ini")
    for name, splits in (("train", ("train",)), ("test", ("test_in", "test_out"))):
        slides = [s for sp in splits for s in ds.slides(sp)]
        z = np.concatenate([s.cells.reshape(-1, s.dim) for s in slides])
        ids = [p for s in slides for p in s.patch_ids()] if getattr(world.provider, "needs_ids", False) else None
        _, idx, w = derive_conditions(z, world.pool, world.provider, k, ids)
        table = keyword_frequencies(prompts_from_indices(idx, w, world.pool))
        write_frequencies(out / f"keyword_frequencies_{name}.csv", table, f"config_digest={digest}")
        print(f"top-10 keywords ({name}, {len(z)} patches):")
        for kw, n in table[:10]:
            print(f"  {n:8d}  {kw}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "keywords": cmd_keywords}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file (defaults embedded)")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-slide scoring")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--data", help="dataset directory (default: OUT/dataset)")
    common.add_argument("--mode", choices=["conditioned", "null"], help="condition mode (overrides eval.mode)")
    common.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="latent-anomaly", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from OUT/train/checkpoint.json")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        if args.print_config:
            cfg = _load_config(args)
            sys.stdout.write(f"# config_digest={cfg.digest()}\n" + cfg.text())
            return 0
        return COMMANDS[args.command](args)
    except (ConfigurationError, TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
