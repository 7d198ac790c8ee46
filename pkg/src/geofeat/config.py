"""Flat ``key = value`` pipeline configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .batching import BatchConfig
from .errors import ConfigInvalid
from .geosim import GeoSimParams
from .losses import LossParams
from .net import ARCHS, Objective
from .patches import AugmentParams, NO_AUGMENT
from .synth import SyntheticConfig

_SYNTH_PREFIX = "synth."


@dataclass
class PipelineConfig:
    # paths, relative to the working directory
    scene: str = "scene.georec"
    patches: str = "patches.gdpk"
    checkpoint: str = "net.gdnw"
    descriptors: str = "descriptors"
    reports: str = "reports"
    # run control
    seed: int = 0
    deterministic: bool = True
    threads: int = 1
    # patch sampling
    support_k: float = 12.0
    grid_size: int = 32
    # geometric similarity
    sigma1: float = 15.0
    sigma2: float = 20.0
    prune_threshold: float = 0.85
    # batching and loss
    batching: str = "match_set"  # or "random"
    objective: str = "structured"  # or "hardest"
    margin: float = 0.6
    n1: int = 64
    n2: int = 12
    alpha: float = 0.4
    lam: float = 0.2
    augment: bool = True
    # network and optimiser
    arch: str = "full"
    steps: int = 20000
    lr: float = 0.001
    lr_decay: float = 0.9
    lr_decay_every: int = 10000
    weight_decay: float = 1e-4
    # evaluation
    holdout_pairs: str = "0:1,3:4,6:7,9:10,2:5"
    split_tracks: bool = True
    gt_tol_px: float = 3.0
    mutual: bool = True
    ratio: float = 0.0  # 0 disables the ratio test
    target_precision: float = 0.95
    ratio_grid_step: float = 0.01
    compact_t: float = 0.9
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> "PipelineConfig":
        checks = [
            ("support_k", self.support_k > 0),
            ("sigma1", self.sigma1 > 0),
            ("sigma2", self.sigma2 > 0),
            ("prune_threshold", 0 < self.prune_threshold <= 1),
            ("n1", self.n1 >= 2),
            ("n2", self.n2 >= 1),
            ("alpha", 0 < self.alpha < 1),
            ("lam", self.lam >= 0),
            ("grid_size", self.grid_size >= 8),
            ("threads", self.threads >= 1),
            ("batching", self.batching in ("match_set", "random")),
            ("objective", self.objective in ("structured", "hardest")),
            ("margin", self.margin > 0),
            ("arch", self.arch in ARCHS),
            ("steps", self.steps >= 0),
            ("lr", self.lr > 0),
            ("lr_decay", 0 < self.lr_decay <= 1),
            ("lr_decay_every", self.lr_decay_every >= 1),
            ("weight_decay", self.weight_decay >= 0),
            ("gt_tol_px", self.gt_tol_px > 0),
            ("ratio", 0 <= self.ratio <= 1),
            ("target_precision", 0 < self.target_precision < 1),
            ("ratio_grid_step", 0 < self.ratio_grid_step <= 0.01),
            ("compact_t", 0 < self.compact_t < 1),
        ]
        for key, ok in checks:
            if not ok:
                shown = "lambda" if key == "lam" else key
                raise ConfigInvalid(shown, f"{shown}={getattr(self, key)!r} is out of range")
        if self.arch != "full" and self.grid_size != ARCHS[self.arch][1]:
            raise ConfigInvalid("grid_size", f"arch {self.arch} needs grid_size={ARCHS[self.arch][1]}")
        try:
            self.synth.validate()
        except ConfigInvalid as exc:
            raise ConfigInvalid(_SYNTH_PREFIX + exc.key, str(exc)) from exc
        self.holdout()
        return self

    # --- typed views -------------------------------------------------------

    def geo_params(self) -> GeoSimParams:
        return GeoSimParams(self.sigma1, self.sigma2, self.prune_threshold)

    def batch_config(self) -> BatchConfig:
        return BatchConfig(self.n1, self.n2, self.seed)

    def loss_params(self) -> LossParams:
        return LossParams(self.alpha, self.lam)

    def objective_spec(self) -> Objective:
        return Objective(self.objective, self.margin, self.loss_params())

    def augment_params(self) -> AugmentParams:
        return AugmentParams() if self.augment else NO_AUGMENT

    def holdout(self) -> List[Tuple[int, int]]:
        out = []
        for item in filter(None, (s.strip() for s in self.holdout_pairs.split(","))):
            try:
                a, b = (int(v) for v in item.split(":"))
            except ValueError as exc:
                raise ConfigInvalid("holdout_pairs", f"bad pair {item!r}; use i:j") from exc
            out.append((min(a, b), max(a, b)))
        return out

    # --- text form ---------------------------------------------------------

    def to_items(self) -> List[Tuple[str, str]]:
        items = []
        for f in fields(self):
            if f.name == "synth":
                items += [(_SYNTH_PREFIX + k, _show(v)) for k, v in self.synth.to_dict().items()]
            else:
                items.append(("lambda" if f.name == "lam" else f.name, _show(getattr(self, f.name))))
        return items

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items())

    def updated(self, overrides: Dict[str, str]) -> "PipelineConfig":
        """Copy with string-valued ``overrides`` applied; unknown keys raise ConfigInvalid."""
        top = {("lambda" if f.name == "lam" else f.name): f for f in fields(self) if f.name != "synth"}
        synth_fields = {f.name: f for f in fields(SyntheticConfig)}
        changes, synth_changes = {}, {}
        for key, raw in overrides.items():
            if key in top:
                f = top[key]
                changes[f.name] = _parse(key, raw, f.type)
            elif key.startswith(_SYNTH_PREFIX) and key[len(_SYNTH_PREFIX):] in synth_fields:
                name = key[len(_SYNTH_PREFIX):]
                synth_changes[name] = _parse(key, raw, synth_fields[name].type)
            else:
                raise ConfigInvalid(key, f"unknown configuration key {key!r}")
        out = dataclasses.replace(self, **changes)
        if synth_changes:
            out.synth = dataclasses.replace(self.synth, **synth_changes)
        return out


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw: str, typ):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    raw = raw.strip()
    try:
        if name == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigInvalid(key, f"cannot parse {key}={raw!r} as {name}") from exc


def parse_config_text(text: str) -> Dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(line, f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigInvalid(key, f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Defaults, then the config file, then ``overrides``; the result is validated."""
    cfg = PipelineConfig()
    if path is not None:
        cfg = cfg.updated(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.updated(overrides)
    return cfg.validate()
