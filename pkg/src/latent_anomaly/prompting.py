"""Keyword pools, image-keyword alignment and weighted condition composition.

Embeddings file format (UTF-8)::

    dim=<d_e>
    <keyword>\\t<f1> <f2> ... <f_d_e>
    ...

Keywords may contain spaces but not tabs. Image-embedding files use the same
layout with patch identifiers (``slide_id/row/col``) in the first column.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import ConditionEmbedding
from .errors import (
    ConfigurationError,
    DegenerateEmbeddingError,
    DegeneratePoolError,
    EmbeddingFileError,
)

NORM_TOL = 1e-9

# Grouped four per archetype for the synthetic pool.
SYNTHETIC_KEYWORDS = (
    "small lymphocytes", "dense lymphoid cells", "mantle zone", "lymphoid follicle",
    "germinal center", "tingible body macrophages", "centroblasts", "centrocytes",
    "medullary cords", "plasma cells", "medullary sinus", "reticular fibers",
    "subcapsular sinus", "fibrous capsule", "histiocytes", "adipose tissue",
    "high endothelial venules", "paracortex", "interfollicular zone", "dendritic cells",
    "blood vessels", "smooth muscle", "collagen fibers", "perinodal fat",
)


@dataclass(frozen=True)
class KeywordPool:
    keywords: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        kws = tuple(self.keywords)
        if len(kws) != emb.shape[0]:
            raise ConfigurationError("keyword count does not match embedding rows")
        if len(set(kws)) != len(kws):
            raise ConfigurationError("duplicate keywords in pool")
        if np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > NORM_TOL):
            raise ConfigurationError("keyword embeddings must be unit-norm")
        emb.setflags(write=False)
        object.__setattr__(self, "keywords", kws)
        object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.keywords)

    @property
    def d_e(self) -> int:
        return self.embeddings.shape[1]

    def index(self, keyword: str) -> int:
        try:
            return self.keywords.index(keyword)
        except ValueError:
            raise ConfigurationError(f"keyword {keyword!r} not in pool") from None


@dataclass(frozen=True)
class WeightedPrompt:
    """Selected keywords in descending similarity with median-normalised weights."""

    keywords: tuple[str, ...]
    weights: tuple[float, ...]
    similarities: tuple[float, ...] = ()

    def __len__(self):
        return len(self.keywords)

    def text(self) -> str:
        """Render in the ``(keyword)weight`` style used by prompt-weighting tools."""
        return ", ".join(f"({k}){w:.4f}" for k, w in zip(self.keywords, self.weights))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateEmbeddingError("zero-norm embedding")
    return x / n


def similarities(image_emb, pool: KeywordPool) -> np.ndarray:
    """Cosine similarity of one (or each row of a batch of) image embedding to every keyword."""
    x = np.asarray(image_emb, dtype=float)
    if x.shape[-1] != pool.d_e:
        raise ConfigurationError(f"image embedding dim {x.shape[-1]} != pool dim {pool.d_e}")
    sims = normalize_rows(x) @ pool.embeddings.T
    return np.clip(sims, -1.0, 1.0)


def top_k(sims: np.ndarray, k: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Batched selection: ``(indices, weights)`` each of shape (N, k).

    Order is descending similarity with ties going to the lower pool index;
    weights are similarities divided by the median selected similarity.
    """
    sims = np.atleast_2d(np.asarray(sims, dtype=float))
    n_pool = sims.shape[1]
    if k > n_pool:
        raise ConfigurationError(f"k={k} exceeds pool size {n_pool}")
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"k must be a positive odd number, got {k}")
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(sims, order, axis=1)
    med = sel[:, k // 2]
    if np.any(med <= 0):
        bad = int(np.argmax(med <= 0))
        raise DegeneratePoolError(f"non-positive median similarity {med[bad]:.6g} (row {bad})")
    weights = sel / med[:, None]
    weights[:, k // 2] = 1.0
    return order, weights


def select_keywords(sims, pool: KeywordPool, k: int = 5) -> WeightedPrompt:
    sims = np.asarray(sims, dtype=float)
    if sims.shape != (len(pool),):
        raise ConfigurationError("similarity vector length must equal pool size")
    idx, w = top_k(sims, k)
    return WeightedPrompt(
        tuple(pool.keywords[i] for i in idx[0]),
        tuple(float(x) for x in w[0]),
        tuple(float(sims[i]) for i in idx[0]),
    )


def compose_condition(prompt: WeightedPrompt, pool: KeywordPool) -> ConditionEmbedding:
    """Weighted mean ``sum(w_i e_i) / sum(w_i)`` of the selected keyword embeddings."""
    if len(prompt) == 0:
        return ConditionEmbedding.null(pool.d_e)
    idx = [pool.index(k) for k in prompt.keywords]
    w = np.asarray(prompt.weights, dtype=float)
    return ConditionEmbedding(w @ pool.embeddings[idx] / w.sum(), False)


def compose_batch(idx: np.ndarray, weights: np.ndarray, pool: KeywordPool) -> ConditionEmbedding:
    w = np.asarray(weights, dtype=float)
    vals = np.einsum("nk,nkd->nd", w, pool.embeddings[idx]) / w.sum(axis=1, keepdims=True)
    return ConditionEmbedding(vals, np.zeros(len(vals), dtype=bool))


def prompts_from_indices(idx, weights, pool: KeywordPool) -> list[WeightedPrompt]:
    return [
        WeightedPrompt(tuple(pool.keywords[i] for i in row), tuple(float(x) for x in wr))
        for row, wr in zip(np.atleast_2d(idx), np.atleast_2d(weights))
    ]


def keyword_frequencies(prompts) -> list[tuple[str, int]]:
    """Selection counts, most frequent first (ties alphabetical)."""
    counts = Counter(k for p in prompts for k in p.keywords)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def write_frequencies(path, table, header_comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["keyword", "count"])
        w.writerows(table)


# --------------------------------------------------------------------------
# embedding providers


class SyntheticProvider:
    """Image embedding ``normalize(P @ z)`` for a fixed seeded projection ``P``."""

    needs_ids = False

    def __init__(self, projection: np.ndarray):
        self.projection = np.asarray(projection, dtype=float)

    @classmethod
    def from_seed(cls, dim: int, d_e: int, seed: int) -> "SyntheticProvider":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x50524F4A]))
        return cls(rng.standard_normal((d_e, dim)) / np.sqrt(dim))

    @property
    def d_e(self) -> int:
        return self.projection.shape[0]

    def embed_images(self, z0, ids=None) -> np.ndarray:
        return normalize_rows(np.asarray(z0, dtype=float) @ self.projection.T)


class FileProvider:
    """Precomputed image embeddings keyed by patch identifier."""

    needs_ids = True

    def __init__(self, ids, vectors):
        self._index = {k: i for i, k in enumerate(ids)}
        self.vectors = np.asarray(vectors, dtype=float)

    @property
    def d_e(self) -> int:
        return self.vectors.shape[1]

    def embed_images(self, z0, ids=None) -> np.ndarray:
        if ids is None:
            raise ConfigurationError("file embedding provider needs patch identifiers")
        try:
            rows = [self._index[i] for i in ids]
        except KeyError as exc:
            raise ConfigurationError(f"no embedding for patch {exc.args[0]!r}") from None
        return self.vectors[rows]


def synthetic_pool(archetype_means: np.ndarray, provider: SyntheticProvider, per_archetype: int = 4,
                   jitter: float = 0.05, seed: int = 0, names=None) -> KeywordPool:
    """Keywords clustered around each archetype's projected mean direction."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4B574453]))
    base = normalize_rows(np.asarray(archetype_means, dtype=float) @ provider.projection.T)
    n = base.shape[0] * per_archetype
    if names is None:
        names = SYNTHETIC_KEYWORDS if n <= len(SYNTHETIC_KEYWORDS) else [f"keyword {i}" for i in range(n)]
    vecs = np.repeat(base, per_archetype, axis=0)
    vecs = normalize_rows(vecs + jitter * rng.standard_normal(vecs.shape))
    return KeywordPool(tuple(names[:n]), vecs)


def save_embeddings(path, names, vectors) -> None:
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    lines = [f"dim={vectors.shape[1]}"]
    for name, v in zip(names, vectors):
        if "\t" in name or "\n" in name:
            raise ConfigurationError(f"keyword {name!r} contains a tab or newline")
        lines.append(name + "\t" + " ".join(repr(float(x)) for x in v))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    """Parse an embeddings file, validating dimension and norms per row."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise EmbeddingFileError(path, 0, str(exc)) from exc
    lines = text.splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise EmbeddingFileError(path, 1, "expected header 'dim=<d_e>'")
    try:
        d_e = int(lines[0][4:])
    except ValueError:
        raise EmbeddingFileError(path, 1, f"bad dimension {lines[0][4:]!r}") from None
    if d_e < 1:
        raise EmbeddingFileError(path, 1, "dimension must be positive")
    names, rows, seen = [], [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise EmbeddingFileError(path, lineno, "expected '<keyword>TAB<values>'")
        name, fields = parts
        if not name:
            raise EmbeddingFileError(path, lineno, "empty keyword")
        if name in seen:
            raise EmbeddingFileError(path, lineno, f"duplicate keyword {name!r}")
        cols = fields.split(" ")
        if len(cols) != d_e:
            raise EmbeddingFileError(path, lineno, f"expected {d_e} values, found {len(cols)}")
        try:
            vec = np.array([float(c) for c in cols])
        except ValueError:
            raise EmbeddingFileError(path, lineno, "non-numeric value") from None
        if not np.all(np.isfinite(vec)) or abs(np.linalg.norm(vec) - 1.0) > NORM_TOL:
            raise EmbeddingFileError(path, lineno, "embedding is not unit-norm")
        seen.add(name)
        names.append(name)
        rows.append(vec)
    return names, np.array(rows).reshape(len(rows), d_e)


def save_pool(path, pool: KeywordPool) -> None:
    save_embeddings(path, pool.keywords, pool.embeddings)


def load_pool(path) -> KeywordPool:
    names, vecs = read_embeddings(path)
    return KeywordPool(tuple(names), vecs)


def load_provider(path) -> FileProvider:
    names, vecs = read_embeddings(path)
    return FileProvider(names, vecs)


def derive_conditions(z0, pool: KeywordPool, provider, k: int = 5, ids=None):
    """Per-patch weighted-prompt conditions; returns ``(cond, idx, weights)``."""
    sims = similarities(provider.embed_images(z0, ids), pool)
    idx, w = top_k(sims, k)
    return compose_batch(idx, w, pool), idx, w
