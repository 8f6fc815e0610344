"""Synthetic slides: grids of patch latents with planted OOD rectangles.

Slide file layout::

    b"LATSLIDE1\\n"
    <one line of JSON: H, W, dim, slide_id, split, seed, digest>
    H*W*dim little-endian float64 cell latents, row-major
    packbits(mask) (row-major, ceil(H*W/8) bytes)
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import ArchetypeMixture
from .errors import ConfigurationError, GenerationError, InvariantViolation

SPLITS = ("train", "val", "test_in", "test_out")
SLIDE_MAGIC = b"LATSLIDE1\n"
DEFAULT_COUNTS = {"train": 200, "val": 20, "test_in": 20, "test_out": 20}


@dataclass
class SlideGrid:
    cells: np.ndarray          # (H, W, dim)
    mask: np.ndarray           # (H, W) bool, True = anomalous
    slide_id: str
    split: str
    seed: int = 0

    def __post_init__(self):
        if self.cells.shape[:2] != self.mask.shape:
            raise InvariantViolation("cells and mask disagree on grid shape")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def dim(self) -> int:
        return self.cells.shape[2]

    def patch_ids(self) -> list[str]:
        return [f"{self.slide_id}/{r}/{c}" for r in range(self.height) for c in range(self.width)]


@dataclass
class DatasetSpec:
    normal: ArchetypeMixture
    ood: ArchetypeMixture
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    height: int = 32
    width: int = 32
    region_min: int = 2
    region_max: int | None = None      # default H // 4
    max_regions: int = 2
    seed: int = 0
    min_separation: float = 4.0        # in units of the largest per-dim std

    def __post_init__(self):
        if self.region_max is None:
            self.region_max = min(self.height, self.width) // 4
        self.validate()

    def validate(self):
        for split in SPLITS:
            if int(self.counts.get(split, 0)) < 1:
                raise ConfigurationError(f"counts.{split} must be positive")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("grid dimensions must be positive")
        if self.region_min < 1 or self.region_max < self.region_min:
            raise GenerationError(f"region_max={self.region_max} must be >= region_min={self.region_min} >= 1")
        if self.region_max > min(self.height, self.width):
            raise GenerationError(
                f"region_max={self.region_max} exceeds grid {self.height}x{self.width}")
        if self.max_regions < 1:
            raise GenerationError("max_regions must be at least 1")
        if self.normal.dim != self.ood.dim:
            raise ConfigurationError("normal and OOD mixtures differ in latent dim")
        sep = separation(self.normal, self.ood)
        need = self.min_separation * max(np.sqrt(self.normal.sigma2.max()), np.sqrt(self.ood.sigma2.max()))
        if sep < need:
            raise GenerationError(f"OOD/normal mean separation {sep:.3f} below required {need:.3f}")


def separation(normal: ArchetypeMixture, ood: ArchetypeMixture) -> float:
    d = np.linalg.norm(normal.mu[:, None, :] - ood.mu[None, :, :], axis=2)
    return float(d.min())


def gen_patches(mix: ArchetypeMixture, n: int, rng: np.random.Generator):
    """``n`` draws; returns ``(latents (n, dim), component index (n,))``."""
    comp = rng.choice(mix.K, size=n, p=mix.pi)
    z = mix.mu[comp] + np.sqrt(mix.sigma2[comp]) * rng.standard_normal((n, mix.dim))
    return z, comp


def gen_patch(mix: ArchetypeMixture, rng: np.random.Generator) -> np.ndarray:
    return gen_patches(mix, 1, rng)[0][0]


def plant_regions(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    for _ in range(int(rng.integers(1, spec.max_regions + 1))):
        h = int(rng.integers(spec.region_min, spec.region_max + 1))
        w = int(rng.integers(spec.region_min, spec.region_max + 1))
        r0 = int(rng.integers(0, spec.height - h + 1))
        c0 = int(rng.integers(0, spec.width - w + 1))
        mask[r0:r0 + h, c0:c0 + w] = True
    return mask


def gen_slide(spec: DatasetSpec, split: str, rng: np.random.Generator, slide_id: str = "", seed: int = 0) -> SlideGrid:
    n = spec.height * spec.width
    cells, _ = gen_patches(spec.normal, n, rng)
    cells = cells.reshape(spec.height, spec.width, spec.normal.dim)
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    if split == "test_out":
        mask = plant_regions(spec, rng)
        cells[mask], _ = gen_patches(spec.ood, int(mask.sum()), rng)
    return SlideGrid(cells, mask, slide_id or f"{split}_0000", split, seed)


def slide_seed(global_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(global_seed), SPLITS.index(split), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def iter_specs(spec: DatasetSpec):
    for split in SPLITS:
        for i in range(int(spec.counts[split])):
            yield split, i, f"{split}_{i:04d}", slide_seed(spec.seed, split, i)


# --------------------------------------------------------------------------
# persistence


def slide_bytes(slide: SlideGrid, digest: str = "") -> bytes:
    header = {"H": slide.height, "W": slide.width, "dim": slide.dim, "slide_id": slide.slide_id,
              "split": slide.split, "seed": slide.seed, "digest": digest}
    buf = io.BytesIO()
    buf.write(SLIDE_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(np.ascontiguousarray(slide.cells, dtype="<f8").tobytes())
    buf.write(np.packbits(slide.mask.ravel()).tobytes())
    return buf.getvalue()


def read_slide(path) -> SlideGrid:
    data = Path(path).read_bytes()
    if not data.startswith(SLIDE_MAGIC):
        raise ConfigurationError(f"{path}: not a slide file")
    nl = data.index(b"\n", len(SLIDE_MAGIC))
    header = json.loads(data[len(SLIDE_MAGIC):nl])
    H, W, D = header["H"], header["W"], header["dim"]
    off = nl + 1
    nbytes = H * W * D * 8
    cells = np.frombuffer(data, dtype="<f8", count=H * W * D, offset=off).reshape(H, W, D).astype(float)
    bits = np.frombuffer(data, dtype=np.uint8, offset=off + nbytes)
    mask = np.unpackbits(bits, count=H * W).astype(bool).reshape(H, W)
    return SlideGrid(cells, mask, header["slide_id"], header["split"], int(header["seed"]))


def mask_digest(mask: np.ndarray) -> str:
    return hashlib.sha256(np.packbits(mask.ravel()).tobytes()).hexdigest()[:16]


MANIFEST_FIELDS = ["slide_id", "split", "n_anomalous_cells", "seed", "mask_digest"]


def gen_dataset(spec: DatasetSpec, out_dir, digest: str = "") -> Path:
    """Generate every slide and write them plus ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    slides_dir = out / "slides"
    try:
        slides_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {slides_dir}: {exc}") from exc
    rows = []
    for split, _, sid, seed in iter_specs(spec):
        slide = gen_slide(spec, split, np.random.default_rng(seed), sid, seed)
        path = slides_dir / f"{sid}.slide"
        try:
            path.write_bytes(slide_bytes(slide, digest))
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        rows.append([sid, split, int(slide.mask.sum()), seed, mask_digest(slide.mask)])
    write_csv(out / "manifest.csv", MANIFEST_FIELDS, rows, digest)
    return out


def write_csv(path, fields, rows, digest: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        w.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.csv"
        if not manifest.exists():
            raise ConfigurationError(f"no dataset at {self.root} (missing manifest.csv)")
        self.manifest = read_csv(manifest)
        self.digest = hashlib.sha256(manifest.read_bytes()).hexdigest()

    def ids(self, split: str) -> list[str]:
        return [r["slide_id"] for r in self.manifest if r["split"] == split]

    def slide(self, slide_id: str) -> SlideGrid:
        return read_slide(self.root / "slides" / f"{slide_id}.slide")

    def slides(self, split: str):
        for sid in self.ids(split):
            yield self.slide(sid)

    def require(self, *splits):
        for s in splits:
            if not self.ids(s):
                raise ConfigurationError(f"dataset {self.root} has no {s!r} slides")


# --------------------------------------------------------------------------
# default synthetic world


def random_means(rng, n, dim, radius, avoid=None, min_dist=0.0, max_tries=10000):
    out = []
    for _ in range(max_tries):
        if len(out) == n:
            break
        v = rng.standard_normal(dim)
        v *= radius / np.linalg.norm(v)
        others = list(out) + ([] if avoid is None else list(avoid))
        if all(np.linalg.norm(v - o) >= min_dist for o in others):
            out.append(v)
    if len(out) < n:
        raise GenerationError("could not place mixture means with the requested separation")
    return np.array(out)


@dataclass
class World:
    """Everything seeded that a run shares: data spec, embedding provider, keyword pool."""

    spec: DatasetSpec
    provider: object
    pool: object

    @property
    def normal(self) -> ArchetypeMixture:
        return self.spec.normal


def build_world(seed: int = 0, dim: int = 8, cond_dim: int = 16, n_normal: int = 4, n_ood: int = 2,
                radius: float = 3.0, offset: float = 3.0, sigma: float = 0.5, kappa: float = 20.0,
                keywords_per_archetype: int = 4, keyword_jitter: float = 0.05, counts=None,
                height: int = 32, width: int = 32, region_min: int = 2, region_max: int | None = None,
                max_regions: int = 2) -> World:
    """Default synthetic setup.

    Archetype means sit on a sphere of ``radius`` shifted by ``offset`` along
    the first axis; the shared offset keeps image-keyword cosines positive.
    OOD means are rejection-sampled at least ``4 * sigma + 1`` from every
    normal mean.
    """
    from .prompting import SyntheticProvider, normalize_rows, synthetic_pool

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4D454E53]))
    shift = np.zeros(dim)
    shift[0] = offset
    normal_mu = random_means(rng, n_normal, dim, radius)
    ood_mu = random_means(rng, n_ood, dim, radius, avoid=normal_mu, min_dist=4 * sigma + 1.0)
    normal_mu = normal_mu + shift
    ood_mu = ood_mu + shift
    provider = SyntheticProvider.from_seed(dim, cond_dim, seed)
    normal = ArchetypeMixture(np.full(n_normal, 1.0 / n_normal), normal_mu, np.full((n_normal, dim), sigma**2),
                              normalize_rows(normal_mu @ provider.projection.T), kappa)
    ood = ArchetypeMixture(np.full(n_ood, 1.0 / n_ood), ood_mu, np.full((n_ood, dim), sigma**2),
                           normalize_rows(ood_mu @ provider.projection.T), kappa)
    spec = DatasetSpec(normal, ood, dict(counts or DEFAULT_COUNTS), height, width, region_min, region_max,
                       max_regions, int(seed))
    pool = synthetic_pool(normal_mu, provider, keywords_per_archetype, keyword_jitter, seed)
    return World(spec, provider, pool)
