"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights

ABLATIONS = ("base", "lad_only", "cbm_only", "full")


@dataclass
class RunConfig:
    seed: int = 0
    data: str = ""
    background: tuple = (0.0, 0.0, 0.0)
    max_resolution: int = 256
    cull_sigma: float = 3.0
    threads: int = 1

    # anchors and fields
    voxel_size: float = 0.1
    n_offsets: int = 4
    grid_levels: int = 12
    grid_feature_dim: int = 4
    grid_log2_table: int = 15
    grid_min_res: int = 16
    grid_max_res: int = 512
    codebook_size: int = 256
    codebook_dim: int = 32
    fuse_hidden: int = 64
    fuse_out: int = 32
    head_hidden: int = 32

    # hierarchy
    lod_levels: int = 4
    levels_dropped: int = 2
    full_iterations: int = 30000
    unfold_iterations: int = 10000
    ablation: str = "full"
    mask_threshold: float = 0.01
    mask_init: float = 2.197

    # losses
    lambda_ssim: float = 0.2
    lambda_vol: float = 0.001
    lambda_group: float = 0.01
    lambda_mask: float = 5e-4
    lambda_mask_growth: float = 4.0

    # optimizer (Adam 0.9 / 0.999 / 1e-8, exponential decay to lr_decay_final)
    lr_grid: float = 5e-3
    lr_codebook: float = 5e-3
    lr_soft_index: float = 1e-2
    lr_mlp: float = 4e-3
    lr_offset: float = 1e-2
    lr_scaling: float = 5e-3
    lr_mask: float = 3.5e-2
    lr_decay_final: float = 0.1

    # serialization
    deflate_level: int = 6
    log_every: int = 100

    # -- derived schedules ---------------------------------------------------
    @property
    def top_level(self) -> int:
        return self.lod_levels - 1

    def active_levels(self, level: int) -> int:
        return self.grid_levels - self.levels_dropped * (self.top_level - level)

    def resolution_scale(self, level: int) -> float:
        return 1.0 / 2 ** (self.top_level - level)

    def lambda_mask_at(self, level: int) -> float:
        """Sparsity weight used while unfolding into ``level``; grows per coarser level."""
        return self.lambda_mask * self.lambda_mask_growth ** (self.top_level - 1 - level)

    def loss_weights(self, level: int | None = None) -> LossWeights:
        mask = self.lambda_mask if level is None else self.lambda_mask_at(level)
        return LossWeights(self.lambda_ssim, self.lambda_vol, self.lambda_group, mask)

    def validate(self) -> "RunConfig":
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.lod_levels < 1:
            raise ConfigError("lod_levels must be >= 1")
        if self.active_levels(0) < 1:
            raise ConfigError("grid deactivation schedule leaves no active level at L0")
        if self.levels_dropped < 1 and self.lod_levels > 1:
            raise ConfigError("grid schedule must strictly decrease (levels_dropped >= 1)")
        if self.full_iterations < 0 or self.unfold_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if not 0 < self.mask_threshold < 1:
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if not 1 <= self.n_offsets <= 255:
            raise ConfigError("n_offsets must be in [1, 255]")
        if not 1 <= self.codebook_size <= 256:
            raise ConfigError("codebook indices are stored as bytes; codebook_size must be in [1, 256]")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if not 0 <= self.deflate_level <= 9:
            raise ConfigError("deflate_level must be in [0, 9]")
        if self.max_resolution > 256:
            raise ConfigError("max_resolution is capped at 256")
        self.loss_weights().validate()
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            current = getattr(defaults, key)
            try:
                if isinstance(current, tuple):
                    values[key] = tuple(float(x) for x in val.split(","))
                elif isinstance(current, bool):
                    values[key] = val.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    values[key] = int(val)
                elif isinstance(current, float):
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.loads(p.read_text())
