"""End-to-end scoring protocol: reconstruct, score, z-normalise, erode, measure."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .denoiser import ConditionEmbedding
from .errors import ConfigurationError
from .metrics import (
    ScoreMap,
    anomaly_score,
    aupr,
    auc,
    dice_iou,
    erode,
    fit_zstats,
    segment,
    slide_scores,
    tnr,
)
from .prompting import derive_conditions
from .sampler import reconstruct
from .synthdata import SPLITS, write_csv

log = logging.getLogger(__name__)

DEFAULT_SWEEP = (125, 250, 375, 500, 625, 750, 875, 1000)
MODES = ("conditioned", "null")
ZNORM_SOURCES = ("validation", "test")


@dataclass
class EvalConfig:
    t_star: int = 674
    n_steps: int = 100
    mode: str = "conditioned"
    znorm: str = "validation"
    top_k: int = 5
    repeats: int = 1
    seed: int = 0
    jobs: int = 1
    heatmap_pgm: bool = False
    dump_reconstructions: bool = False
    sampler: str = "plms"

    def __post_init__(self):
        if self.sampler not in ("plms", "ancestral"):
            raise ConfigurationError(f"unknown sampler {self.sampler!r}")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.znorm not in ZNORM_SOURCES:
            raise ConfigurationError(f"znorm must be one of {ZNORM_SOURCES}, got {self.znorm!r}")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")


@dataclass
class SlideResult:
    slide_id: str
    split: str
    raw: np.ndarray            # (H, W)
    mask: np.ndarray
    z0: np.ndarray | None = None
    z0_hat: np.ndarray | None = None


@dataclass
class EvalReport:
    patch_auc: float
    patch_aupr: float
    slide_auc_zmax: float
    slide_aupr_zmax: float
    slide_auc_z99: float
    slide_aupr_z99: float
    mean_dice: float
    mean_iou: float
    mean_tnr: float
    config_digest: str = ""
    t_star: int = 0
    mode: str = ""
    znorm: dict = field(default_factory=dict)
    per_slide: list = field(default_factory=list)

    def metrics(self) -> dict:
        d = asdict(self)
        for k in ("config_digest", "t_star", "mode", "znorm", "per_slide"):
            d.pop(k)
        return d

    def to_json(self) -> str:
        doc = asdict(self)
        doc["kernel_backend"] = _kernels.BACKEND
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def patch_noise(seed: int, slide_seed: int, n: int, dim: int, repeat: int = 0) -> np.ndarray:
    """Partial-diffusion noise, one independent stream per patch."""
    out = np.empty((n, dim))
    for j in range(n):
        out[j] = np.random.default_rng([int(seed), int(slide_seed), j, int(repeat)]).standard_normal(dim)
    return out


def slide_conditions(z, slide, world, cfg: EvalConfig) -> ConditionEmbedding:
    if cfg.mode == "null":
        return ConditionEmbedding.null(world.pool.d_e, len(z))
    ids = slide.patch_ids() if getattr(world.provider, "needs_ids", False) else None
    cond, _, _ = derive_conditions(z, world.pool, world.provider, cfg.top_k, ids)
    return cond


def score_slide(slide, denoiser, world, sched, cfg: EvalConfig, keep_recon: bool = False) -> SlideResult:
    z = slide.cells.reshape(-1, slide.dim)
    cond = slide_conditions(z, slide, world, cfg)
    n_steps = min(cfg.n_steps, cfg.t_star) if cfg.t_star else cfg.n_steps
    total = np.zeros(len(z))
    z_hat = None
    for r in range(cfg.repeats):
        noise = patch_noise(cfg.seed, slide.seed, len(z), slide.dim, r)
        rng = None
        if cfg.sampler == "ancestral":
            # per-step noise is drawn per slide; slides are the unit of parallel work
            rng = np.random.default_rng([int(cfg.seed), int(slide.seed), len(z), int(r), 1])
        z_hat = reconstruct(z, cfg.t_star, cond, denoiser, sched, n_steps, rng=rng, noise=noise,
                            method=cfg.sampler)
        total += anomaly_score(z, z_hat)
    raw = (total / cfg.repeats).reshape(slide.height, slide.width)
    if keep_recon:
        return SlideResult(slide.slide_id, slide.split, raw, slide.mask, z, z_hat)
    return SlideResult(slide.slide_id, slide.split, raw, slide.mask)


def score_dataset(dataset, denoiser, world, sched, cfg: EvalConfig, splits=("val", "test_in", "test_out"),
                  keep_recon: bool = False) -> list[SlideResult]:
    dataset.require(*splits)
    slides = [s for split in splits for s in dataset.slides(split)]

    def work(slide):
        return score_slide(slide, denoiser, world, sched, cfg, keep_recon)

    if cfg.jobs == 1:
        return [work(s) for s in slides]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(work, slides))


def summarize(results: list[SlideResult], cfg: EvalConfig, config_digest: str = "") -> tuple[EvalReport, dict]:
    """Metrics from per-slide raw score maps; also returns the z and eroded maps."""
    by_split = {s: [r for r in results if r.split == s] for s in SPLITS}
    if cfg.znorm == "validation":
        if not by_split["val"]:
            raise ConfigurationError("validation z-normalisation needs val slides")
        stats = fit_zstats(np.concatenate([r.raw.ravel() for r in by_split["val"]]), "val")
    else:
        pooled = [r.raw.ravel() for r in by_split["test_in"] + by_split["test_out"]]
        stats = fit_zstats(np.concatenate(pooled), "test")

    zmaps, emaps = {}, {}
    for r in results:
        zm = ScoreMap(r.raw, r.slide_id).to_z(stats)
        zmaps[r.slide_id] = zm
        emaps[r.slide_id] = erode(zm)

    tests = by_split["test_in"] + by_split["test_out"]
    pos = np.concatenate([zmaps[r.slide_id].values[r.mask] for r in tests])
    neg = np.concatenate([zmaps[r.slide_id].values[~r.mask] for r in tests])

    rows, zmax, z99, labels = [], [], [], []
    dices, ious, tnrs = [], [], []
    for r in tests:
        em = emaps[r.slide_id]
        a, b = slide_scores(em)
        pred = segment(em)
        row = {"slide_id": r.slide_id, "split": r.split, "z_max": a, "z_99": b}
        if r.split == "test_out":
            d, i = dice_iou(pred, r.mask)
            row.update(dice=d, iou=i)
            dices.append(d)
            ious.append(i)
        else:
            row["tnr"] = tnr(pred)
            tnrs.append(row["tnr"])
        rows.append(row)
        zmax.append(a)
        z99.append(b)
        labels.append(r.split == "test_out")
    labels = np.array(labels)
    zmax, z99 = np.array(zmax), np.array(z99)
    report = EvalReport(
        patch_auc=auc(pos, neg),
        patch_aupr=aupr(pos, neg),
        slide_auc_zmax=auc(zmax[labels], zmax[~labels]),
        slide_aupr_zmax=aupr(zmax[labels], zmax[~labels]),
        slide_auc_z99=auc(z99[labels], z99[~labels]),
        slide_aupr_z99=aupr(z99[labels], z99[~labels]),
        mean_dice=float(np.mean(dices)),
        mean_iou=float(np.mean(ious)),
        mean_tnr=float(np.mean(tnrs)),
        config_digest=config_digest,
        t_star=cfg.t_star,
        mode=cfg.mode,
        znorm={"source": stats.source, "mean": stats.mean, "std": stats.std},
        per_slide=rows,
    )
    return report, {"z": zmaps, "eroded": emaps, "stats": stats}


def evaluate(dataset, denoiser, world, sched, cfg: EvalConfig, out_dir=None, config_digest: str = "") -> EvalReport:
    """Run the full protocol; when ``out_dir`` is given, persist scores, heatmaps and the report."""
    results = score_dataset(dataset, denoiser, world, sched, cfg, keep_recon=cfg.dump_reconstructions)
    report, maps = summarize(results, cfg, config_digest)
    if out_dir is not None:
        write_outputs(Path(out_dir), results, report, maps, cfg, config_digest)
    return report


def write_outputs(out: Path, results, report: EvalReport, maps, cfg: EvalConfig, digest: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        z = maps["z"][r.slide_id].values
        for (i, j), raw in np.ndenumerate(r.raw):
            rows.append([r.slide_id, i, j, repr(float(raw)), repr(float(z[i, j])), int(r.mask[i, j])])
    write_csv(out / "scores.csv", ["slide_id", "row", "col", "raw_score", "z", "label"], rows, digest)
    (out / "report.json").write_text(report.to_json())
    hm = out / "heatmaps"
    hm.mkdir(exist_ok=True)
    for r in results:
        for stage, grid in (("raw", r.raw), ("z", maps["z"][r.slide_id].values),
                            ("eroded", maps["eroded"][r.slide_id].values)):
            write_grid(hm / f"{r.slide_id}_{stage}.csv", grid, digest)
        if cfg.heatmap_pgm:
            write_pgm(hm / f"{r.slide_id}_eroded.pgm", maps["eroded"][r.slide_id].values)
    if cfg.dump_reconstructions:
        recon_rows = []
        for r in results:
            for j, (a, b) in enumerate(zip(r.z0, r.z0_hat)):
                pid = f"{r.slide_id}/{j // r.raw.shape[1]}/{j % r.raw.shape[1]}"
                recon_rows.append([pid, " ".join(repr(float(x)) for x in a), " ".join(repr(float(x)) for x in b)])
        write_csv(out / "reconstructions.csv", ["patch_id", "z0", "z0_hat"], recon_rows, digest)


def write_grid(path, grid, digest: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        for row in np.asarray(grid):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_grid(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(x) for x in ln.split(",")] for ln in fh if not ln.startswith("#")])


def write_pgm(path, grid, lo: float = -3.0, hi: float = 3.0) -> None:
    """8-bit binary graymap, values clipped to [lo, hi]."""
    g = np.clip((np.asarray(grid) - lo) / (hi - lo), 0.0, 1.0)
    px = np.rint(g * 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + px.tobytes())


def timestep_sweep(dataset, denoiser, world, sched, cfg: EvalConfig, candidates=DEFAULT_SWEEP,
                   config_digest: str = "") -> tuple[int, list[dict]]:
    """Evaluate each candidate ``t_star``; pick the best slide-level Z_99 AUC (ties -> smaller)."""
    cands = [int(c) for c in candidates]
    if not cands:
        raise ConfigurationError("sweep needs at least one candidate")
    for c in cands:
        if not 1 <= c <= sched.T:
            raise ConfigurationError(f"sweep candidate {c} outside [1, {sched.T}]")
    rows = []
    for c in cands:
        sub = EvalConfig(**{**asdict(cfg), "t_star": c, "dump_reconstructions": False})
        rep = evaluate(dataset, denoiser, world, sched, sub, config_digest=config_digest)
        log.info("t_star=%d slide AUC (Z99)=%.4f patch AUC=%.4f", c, rep.slide_auc_z99, rep.patch_auc)
        rows.append({"t_star": c, **rep.metrics()})
    best = None
    for row in sorted(rows, key=lambda r: r["t_star"]):
        if best is None or row["slide_auc_z99"] > best["slide_auc_z99"]:
            best = row
    return best["t_star"], rows
