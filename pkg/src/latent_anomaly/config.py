"""Experiment configuration: INI file with every default embedded."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .denoiser import ArchetypeMixture, TrainConfig
from .diffusion import build_schedule
from .errors import ConfigurationError
from .evaluation import DEFAULT_SWEEP, MODES, ZNORM_SOURCES, EvalConfig

DEFAULTS = {
    "run": {"seed": "0"},
    "schedule": {"T": "1000", "beta_start": "0.0001", "beta_end": "0.02"},
    "data": {
        "dim": "8", "cond_dim": "16", "n_normal": "4", "n_ood": "2",
        "radius": "3.0", "offset": "3.0", "sigma": "0.5", "kappa": "20.0",
        "height": "32", "width": "32", "region_min": "2", "region_max": "8", "max_regions": "2",
        "train": "200", "val": "20", "test_in": "20", "test_out": "20",
        "mixture_path": "",
    },
    "prompting": {
        "pool_path": "", "image_embeddings_path": "",
        "keywords_per_archetype": "4", "keyword_jitter": "0.05", "top_k": "5",
    },
    "denoiser": {"kind": "analytic", "hidden": "128,128", "time_dim": "16", "checkpoint": ""},
    "train": {"steps": "20000", "batch_size": "128", "lr": "0.001", "p_drop": "0.1"},
    "sampler": {"kind": "plms", "n_steps": "100", "t_star": "674", "repeats": "1"},
    "eval": {
        "mode": "conditioned", "znorm": "validation",
        "sweep": ",".join(str(c) for c in DEFAULT_SWEEP),
        "heatmap_pgm": "false", "dump_reconstructions": "false",
    },
}

INT_KEYS = ("run.seed", "data.dim", "data.cond_dim", "data.n_normal", "data.n_ood", "data.max_regions",
            "prompting.keywords_per_archetype", "denoiser.time_dim", "train.steps", "train.batch_size",
            "sampler.repeats")
FLOAT_KEYS = ("data.radius", "data.offset", "data.sigma", "data.kappa", "prompting.keyword_jitter", "train.lr")


class Config:
    """Resolved configuration; ``get*`` helpers name the offending key on error."""

    def __init__(self, parser: configparser.ConfigParser):
        self._p = parser
        self.validate()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "Config":
        p = configparser.ConfigParser(interpolation=None)
        p.optionxform = str
        p.read_dict(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigurationError(f"config file {path} not found")
            extra = configparser.ConfigParser(interpolation=None)
            extra.optionxform = str
            try:
                extra.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
            for section in extra.sections():
                if section not in DEFAULTS:
                    raise ConfigurationError(f"unknown config section [{section}]")
                for key, value in extra.items(section):
                    if key not in DEFAULTS[section]:
                        raise ConfigurationError(f"unknown config key {section}.{key}")
                    p.set(section, key, value)
        for dotted, value in (overrides or {}).items():
            section, key = dotted.split(".", 1)
            p.set(section, key, str(value))
        return cls(p)

    # -- access -------------------------------------------------------------

    def get(self, key: str) -> str:
        section, name = key.split(".", 1)
        return self._p.get(section, name)

    def _typed(self, key, fn, what):
        raw = self.get(key)
        try:
            return fn(raw)
        except ValueError:
            raise ConfigurationError(f"{key}={raw!r} is not {what}") from None

    def int(self, key: str) -> int:
        return self._typed(key, int, "an integer")

    def float(self, key: str) -> float:
        return self._typed(key, float, "a number")

    def bool(self, key: str) -> bool:
        raw = self.get(key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}={raw!r} is not a boolean")

    def ints(self, key: str) -> list[int]:
        return self._typed(key, lambda s: [int(x) for x in s.split(",") if x.strip()], "a comma-separated integer list")

    def path(self, key: str) -> Path | None:
        raw = self.get(key).strip()
        return Path(raw) if raw else None

    # -- serialisation ------------------------------------------------------

    def text(self, sections=None) -> str:
        buf = io.StringIO()
        for section in DEFAULTS:
            if sections is not None and section not in sections:
                continue
            buf.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                buf.write(f"{key} = {self._p.get(section, key)}\n")
            buf.write("\n")
        return buf.getvalue()

    def digest(self, sections=None) -> str:
        return hashlib.sha256(self.text(sections).encode()).hexdigest()[:16]

    def write(self, path) -> None:
        Path(path).write_text(f"# config_digest={self.digest()}\n" + self.text(), encoding="utf-8")

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        T = self.int("schedule.T")
        bs, be = self.float("schedule.beta_start"), self.float("schedule.beta_end")
        if T < 1:
            raise ConfigurationError(f"schedule.T={T} must be >= 1")
        if not 0 < bs <= be < 1:
            raise ConfigurationError("schedule.beta_start/beta_end must satisfy 0 < start <= end < 1")
        h, w = self.int("data.height"), self.int("data.width")
        rmin, rmax = self.int("data.region_min"), self.int("data.region_max")
        if h < 1 or w < 1:
            raise ConfigurationError("data.height and data.width must be positive")
        if rmin < 1:
            raise ConfigurationError(f"data.region_min={rmin} must be >= 1")
        if rmax < rmin or rmax > min(h, w):
            raise ConfigurationError(f"data.region_max={rmax} must lie in [data.region_min={rmin}, {min(h, w)}]")
        for split in ("train", "val", "test_in", "test_out"):
            if self.int(f"data.{split}") < 1:
                raise ConfigurationError(f"data.{split} must be positive")
        k = self.int("prompting.top_k")
        if k < 1 or k % 2 == 0:
            raise ConfigurationError(f"prompting.top_k={k} must be a positive odd number")
        if self.get("denoiser.kind") not in ("analytic", "trained"):
            raise ConfigurationError("denoiser.kind must be 'analytic' or 'trained'")
        if self.get("sampler.kind") not in ("plms", "ancestral"):
            raise ConfigurationError("sampler.kind must be 'plms' or 'ancestral'")
        t_star, n_steps = self.int("sampler.t_star"), self.int("sampler.n_steps")
        if not 0 <= t_star <= T:
            raise ConfigurationError(f"sampler.t_star={t_star} outside [0, {T}]")
        if n_steps < 1:
            raise ConfigurationError("sampler.n_steps must be >= 1")
        if self.get("eval.mode") not in MODES:
            raise ConfigurationError(f"eval.mode must be one of {MODES}")
        if self.get("eval.znorm") not in ZNORM_SOURCES:
            raise ConfigurationError(f"eval.znorm must be one of {ZNORM_SOURCES}")
        for c in self.ints("eval.sweep"):
            if not 1 <= c <= T:
                raise ConfigurationError(f"eval.sweep candidate {c} outside [1, {T}]")
        p = self.float("train.p_drop")
        if not 0 <= p <= 1:
            raise ConfigurationError("train.p_drop must lie in [0, 1]")
        for key in INT_KEYS:
            self.int(key)
        for key in FLOAT_KEYS:
            self.float(key)
        for key in ("eval.heatmap_pgm", "eval.dump_reconstructions"):
            self.bool(key)
        if not self.float("train.lr") > 0:
            raise ConfigurationError("train.lr must be positive")
        if self.int("train.batch_size") < 1 or self.int("train.steps") < 0:
            raise ConfigurationError("train.batch_size must be >= 1 and train.steps >= 0")
        if self.int("sampler.repeats") < 1:
            raise ConfigurationError("sampler.repeats must be >= 1")
        if not self.hidden() or min(self.hidden()) < 1:
            raise ConfigurationError("denoiser.hidden must list positive layer widths")
        if self.int("denoiser.time_dim") < 2 or self.int("denoiser.time_dim") % 2:
            raise ConfigurationError("denoiser.time_dim must be an even number >= 2")

    # -- builders -----------------------------------------------------------

    def schedule(self):
        return build_schedule(self.int("schedule.T"), self.float("schedule.beta_start"), self.float("schedule.beta_end"))

    def world(self):
        from .prompting import load_pool, load_provider
        from .synthdata import DatasetSpec, build_world

        counts = {s: self.int(f"data.{s}") for s in ("train", "val", "test_in", "test_out")}
        world = build_world(
            seed=self.int("run.seed"), dim=self.int("data.dim"), cond_dim=self.int("data.cond_dim"),
            n_normal=self.int("data.n_normal"), n_ood=self.int("data.n_ood"), radius=self.float("data.radius"),
            offset=self.float("data.offset"), sigma=self.float("data.sigma"), kappa=self.float("data.kappa"),
            keywords_per_archetype=self.int("prompting.keywords_per_archetype"),
            keyword_jitter=self.float("prompting.keyword_jitter"), counts=counts,
            height=self.int("data.height"), width=self.int("data.width"),
            region_min=self.int("data.region_min"), region_max=self.int("data.region_max"),
            max_regions=self.int("data.max_regions"),
        )
        mpath = self.path("data.mixture_path")
        if mpath is not None:
            normal, ood = load_mixtures(mpath)
            s = world.spec
            world.spec = DatasetSpec(normal, ood, s.counts, s.height, s.width, s.region_min, s.region_max,
                                     s.max_regions, s.seed)
        pool_path = self.path("prompting.pool_path")
        if pool_path is not None:
            world.pool = load_pool(pool_path)
        emb_path = self.path("prompting.image_embeddings_path")
        if emb_path is not None:
            world.provider = load_provider(emb_path)
        if world.pool.d_e != world.normal.cond_dim:
            raise ConfigurationError(
                f"keyword pool dim {world.pool.d_e} != data.cond_dim {world.normal.cond_dim}")
        return world

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.int("train.steps"), batch_size=self.int("train.batch_size"),
                           lr=self.float("train.lr"), p_drop=self.float("train.p_drop"), seed=self.int("run.seed"))

    def hidden(self) -> tuple[int, ...]:
        return tuple(self.ints("denoiser.hidden"))

    def eval_config(self, jobs: int = 1) -> EvalConfig:
        return EvalConfig(
            t_star=self.int("sampler.t_star"), n_steps=self.int("sampler.n_steps"), mode=self.get("eval.mode"),
            znorm=self.get("eval.znorm"), top_k=self.int("prompting.top_k"), repeats=self.int("sampler.repeats"),
            seed=self.int("run.seed"), jobs=jobs, heatmap_pgm=self.bool("eval.heatmap_pgm"),
            dump_reconstructions=self.bool("eval.dump_reconstructions"), sampler=self.get("sampler.kind"),
        )


def mixture_to_dict(m: ArchetypeMixture) -> dict:
    return {"pi": m.pi.tolist(), "mu": m.mu.tolist(), "sigma2": m.sigma2.tolist(),
            "archetype_emb": m.archetype_emb.tolist(), "kappa": m.kappa}


def save_mixtures(path, normal: ArchetypeMixture, ood: ArchetypeMixture) -> None:
    doc = {"normal": mixture_to_dict(normal), "ood": mixture_to_dict(ood)}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_mixtures(path) -> tuple[ArchetypeMixture, ArchetypeMixture]:
    try:
        doc = json.loads(Path(path).read_text())
        return tuple(
            ArchetypeMixture(np.array(d["pi"]), np.array(d["mu"]), np.array(d["sigma2"]),
                             np.array(d["archetype_emb"]), d["kappa"])
            for d in (doc["normal"], doc["ood"])
        )
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"data.mixture_path: cannot load {path}: {exc}") from exc
