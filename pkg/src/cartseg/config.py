"""Run configuration: one flat record, read from ``key = value`` text files.

Each field carries a short doc string and a provenance tag: ``published`` when the
value is taken from the method description, ``decision`` when it is a choice
made for this implementation.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import PhantomConfig
from .losses import TverskyParams
from .optim import AMSGradConfig
from .vnet import NetworkConfig


def _f(default, doc: str, source: str = "decision"):
    return field(default=default, metadata={"doc": doc, "source": source})


@dataclass
class RunConfig:
    # reproducibility
    seed: int = _f(0, "global seed; every random stream derives from it")
    workers: int = _f(1, "threads for patch extraction and tiled inference; 1 is bit-deterministic")
    # synthetic data
    n_volumes: int = _f(40, "number of phantom volumes", "published")
    dims: int = _f(64, "cubic phantom edge in voxels (clinical scans are 512)")
    spacing_mm: float = _f(0.2, "isotropic voxel spacing", "published")
    sheet_thickness_vox: int = _f(3, "thickness of the bright sheet in the image")
    target_positive_fraction: float = _f(0.0018, "fraction of positive voxels", "published")
    noise_sigma: float = _f(0.05, "additive Gaussian noise")
    distractor_count: int = _f(10, "bright speckles per volume away from the sheet")
    split_train: float = _f(0.7, "training fraction (by subject)", "published")
    split_val: float = _f(0.1, "validation fraction (by subject)", "published")
    split_test: float = _f(0.2, "test fraction (by subject)", "published")
    # network
    stages: int = _f(3, "encoder levels")
    base_channels: int = _f(8, "channels at the first level, doubled per level")
    convs_per_stage: int = _f(2, "conv + SeLU layers per residual block")
    kernel_size: int = _f(3, "conv kernel edge")
    dropout_rate: float = _f(0.6, "drop probability", "published")
    patch_size: int = _f(16, "cubic patch edge (100 on 512^3 clinical scans)")
    # loss
    alpha: float = _f(0.4, "Tversky weight on false negatives", "published")
    beta: float = _f(0.6, "Tversky weight on false positives", "published")
    tversky_eps: float = _f(1e-6, "smoothing added to numerator and denominator")
    # optimizer
    learning_rate: float = _f(1e-4, "AMSGrad step size")
    beta1: float = _f(0.9, "first moment decay")
    beta2: float = _f(0.999, "second moment decay")
    adam_eps: float = _f(1e-8, "denominator guard")
    # sampling and schedule
    patches_per_volume: int = _f(4, "patches drawn per volume per epoch", "published")
    positive_ratio: float = _f(0.7, "probability of a positive-centered patch", "published")
    augment_rotations: bool = _f(True, "random quarter-turn rotations of training patches", "published")
    rotation_axis: str = _f("x", "rotation axis; x rotates within the sagittal (y-z) plane")
    resample_each_epoch: bool = _f(True, "draw fresh patches every epoch instead of once")
    epochs: int = _f(50, "training epochs")
    batch_size: int = _f(2, "patches per optimizer step")
    # post-processing
    threshold: float = _f(0.5, "probability threshold for the binary map")
    keep: int = _f(2, "connected components kept", "published")
    connectivity: int = _f(26, "voxel adjacency for component labeling")

    def __post_init__(self):
        total = self.split_train + self.split_val + self.split_test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if self.batch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1, epochs >= 0")
        self.network()
        self.tversky()
        self.optimizer()

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            self.stages, self.base_channels, self.convs_per_stage,
            self.kernel_size, self.dropout_rate, self.patch_size,
        )

    def tversky(self) -> TverskyParams:
        return TverskyParams(self.alpha, self.beta, self.tversky_eps)

    def optimizer(self) -> AMSGradConfig:
        return AMSGradConfig(self.learning_rate, self.beta1, self.beta2, self.adam_eps)

    def phantom(self, seed: int) -> PhantomConfig:
        return PhantomConfig(
            (self.dims,) * 3, self.spacing_mm, self.sheet_thickness_vox,
            self.target_positive_fraction, self.noise_sigma, self.distractor_count, seed,
        )

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']} [{f.metadata['source']}]")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_overrides(items, base: dict | None = None) -> dict:
    """``["key=value", ...]`` -> typed dict; unknown keys are an error."""
    out = dict(base or {})
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _coerce(key, val, _TYPES[key])
    return out


def parse_config_text(text: str) -> dict:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        items.append(line)
    return parse_overrides(items)


def load_config(path=None, overrides=()) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values = parse_overrides(overrides, values)
    return RunConfig(**values)
