"""Anchor feature extraction: hash grids, the anchor codebook, decoders."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import DTYPE
from .errors import ConfigError, FormatError
from .render import Gaussians

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)
_MASK64 = (1 << 64) - 1

HEADS = ("opacity", "color", "scale", "rotation")
HEAD_WIDTH = {"opacity": 1, "color": 3, "scale": 3, "rotation": 4}


def hash_index(cell, T: int) -> int:
    """Spatial hash of an integer lattice cell into a table of size T (power of two)."""
    if T <= 0 or T & (T - 1):
        raise ConfigError(f"table size must be a power of two, got {T}")
    h = 0
    for c, p in zip(cell, PRIMES):
        h ^= (int(c) * p) & _MASK64
    return h % T


def hash_index_tensor(cells: torch.Tensor, T: int) -> torch.Tensor:
    # corners are non-negative and far below 2**31, so int64 products never wrap
    h = cells[..., 0] * PRIMES[0]
    h = torch.bitwise_xor(h, cells[..., 1] * PRIMES[1])
    h = torch.bitwise_xor(h, cells[..., 2] * PRIMES[2])
    return torch.bitwise_and(h, T - 1)


def level_resolutions(n_levels: int, n_min: int, n_max: int) -> list[int]:
    if n_levels == 1:
        return [n_min]
    growth = math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))
    res = [int(math.floor(n_min * growth ** l + 1e-9)) for l in range(n_levels)]
    if any(b <= a for a, b in zip(res, res[1:])):
        raise ConfigError(f"grid resolutions must strictly increase, got {res}")
    return res


@dataclass
class HashGridStack:
    tables: torch.Tensor  # (levels, T, F)
    bbox: torch.Tensor  # (2, 3) min/max corners
    n_min: int = 16
    n_max: int = 512
    total_levels: int = 12

    @property
    def n_levels(self) -> int:
        """Levels actually held in ``tables`` (a coarse model keeps a prefix)."""
        return self.tables.shape[0]

    @property
    def table_size(self) -> int:
        return self.tables.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.tables.shape[2]

    @property
    def resolutions(self) -> list[int]:
        return level_resolutions(self.total_levels, self.n_min, self.n_max)

    @classmethod
    def create(cls, bbox, n_levels=12, log2_T=15, feature_dim=4, n_min=16, n_max=512, seed=0, init_range=1e-4):
        gen = torch.Generator().manual_seed(seed)
        T = 1 << log2_T
        tables = (torch.rand((n_levels, T, feature_dim), generator=gen, dtype=DTYPE) * 2 - 1) * init_range
        level_resolutions(n_levels, n_min, n_max)
        return cls(tables, torch.as_tensor(bbox, dtype=DTYPE), n_min, n_max, n_levels)


_CORNERS = torch.tensor([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=torch.int64)


def grid_plan(grids: HashGridStack, x: torch.Tensor, active_levels: int):
    """Flat table rows and trilinear weights for each (level, point, corner).

    Returns ``rows`` (levels, N, 8) indexing ``tables.reshape(-1, F)`` and the
    matching ``weights``. Positions outside the bounding box are clamped.
    """
    if not 1 <= active_levels <= grids.n_levels:
        raise ConfigError(f"active_levels must be in [1, {grids.n_levels}], got {active_levels}")
    T = grids.table_size
    lo, hi = grids.bbox[0], grids.bbox[1]
    u = ((x.detach() - lo) / (hi - lo)).clamp(0.0, 1.0)
    cf = _CORNERS.to(DTYPE)[None]
    rows, weights = [], []
    for level, res in enumerate(grids.resolutions[:active_levels]):
        pos = u * res
        base = torch.floor(pos).clamp(max=res - 1)
        frac = pos - base
        cells = base.to(torch.int64)[:, None, :] + _CORNERS[None]  # (N, 8, 3)
        rows.append(hash_index_tensor(cells, T) + level * T)
        weights.append(torch.prod(cf * frac[:, None, :] + (1 - cf) * (1 - frac[:, None, :]), dim=-1))
    return torch.stack(rows), torch.stack(weights)


def interpolate_rows(values: torch.Tensor, rows: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Blend gathered table rows; ``values`` is (R, F) and ``rows`` indexes into it."""
    feats = (weights[..., None] * values[rows]).sum(dim=2)  # (levels, N, F)
    return feats.permute(1, 0, 2).reshape(rows.shape[1], -1)


def grid_interpolate(grids: HashGridStack, x: torch.Tensor, active_levels: int, tables=None) -> torch.Tensor:
    """Trilinearly interpolated features of the ``active_levels`` coarsest levels.

    Returns an (N, active_levels * F) tensor, levels concatenated coarsest first.
    """
    tables = grids.tables if tables is None else tables
    rows, weights = grid_plan(grids, x, active_levels)
    return interpolate_rows(tables.reshape(-1, grids.feature_dim), rows, weights)


def soft_argmax_index(v: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest
    return torch.argmax(v, dim=-1)


def codebook_lookup_train(v: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """Straight-through codebook fetch: value C[argmax v], gradient of softmax(v) @ C."""
    w = torch.softmax(v, dim=-1)
    onehot = F.one_hot(soft_argmax_index(v), num_classes=C.shape[0]).to(C.dtype)
    return (onehot + (w - w.detach())) @ C


def codebook_lookup_relaxed(v: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    return torch.softmax(v, dim=-1) @ C


def codebook_lookup_infer(idx, C_L: torch.Tensor) -> torch.Tensor:
    idx = torch.as_tensor(idx, dtype=torch.int64)
    if (idx < 0).any() or (idx >= C_L.shape[0]).any():
        raise FormatError(f"codebook index out of range [0, {C_L.shape[0]})")
    return C_L[idx]


@dataclass
class AnchorSet:
    """Anchors present in a model, ordered by ascending global id."""

    ids: torch.Tensor  # (N,) int64 global anchor ids
    positions: torch.Tensor  # (N, 3)
    offsets: torch.Tensor  # (N, K, 3)
    base_scales: torch.Tensor  # (N, 3)
    idx: torch.Tensor  # (N,) int64 codebook rows, stored as bytes

    def __len__(self):
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    def select(self, keep: torch.Tensor) -> "AnchorSet":
        return AnchorSet(self.ids[keep], self.positions[keep], self.offsets[keep], self.base_scales[keep], self.idx[keep])


def voxelize_points(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Centers of occupied voxels, sorted lexicographically by voxel index."""
    cells = np.unique(np.floor(points / voxel_size).astype(np.int64), axis=0)
    return (cells + 0.5) * voxel_size


def init_anchor_positions(points: np.ndarray, voxel_size: float, k: int, seed: int = 0):
    if voxel_size <= 0:
        raise ConfigError("voxel_size must be positive")
    rng = np.random.default_rng(seed)
    pos = voxelize_points(np.asarray(points, dtype=np.float64), voxel_size)
    n = pos.shape[0]
    if n == 0:
        raise ConfigError("no initialization points to place anchors on")
    offsets = rng.uniform(-0.5, 0.5, size=(n, k, 3))
    scales = np.full((n, 3), voxel_size)
    return pos, offsets, scales


# -- decoders ---------------------------------------------------------------

def decoder_shapes(hier_width: int, local_width: int, k: int, fuse_hidden=64, fuse_out=32, head_hidden=32):
    """Ordered (name, shape) list of every decoder tensor."""
    shapes = [
        ("fuse.w1", (hier_width + local_width, fuse_hidden)),
        ("fuse.b1", (fuse_hidden,)),
        ("fuse.w2", (fuse_hidden, fuse_out)),
        ("fuse.b2", (fuse_out,)),
    ]
    for head in HEADS:
        out = HEAD_WIDTH[head] * k
        shapes += [
            (f"{head}.w1", (fuse_out + 4, head_hidden)),
            (f"{head}.b1", (head_hidden,)),
            (f"{head}.w2", (head_hidden, out)),
            (f"{head}.b2", (out,)),
        ]
    return shapes


def init_decoder(hier_width, local_width, k, fuse_hidden=64, fuse_out=32, head_hidden=32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    shapes = dict(decoder_shapes(hier_width, local_width, k, fuse_hidden, fuse_out, head_hidden))
    dec = {}
    for name, shape in shapes.items():
        fan_in = shapes[name[:-2] + "w" + name[-1]][0]
        bound = 1.0 / math.sqrt(fan_in)
        dec[name] = (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound
    # start rotations near identity so normalization is well conditioned
    dec["rotation.b2"] = dec["rotation.b2"] + torch.tensor([1.0, 0, 0, 0], dtype=DTYPE).repeat(k)
    return dec


def slice_decoder(dec: dict, feature_dim: int, keep_levels: int, parent_levels: int, parent_local: bool, keep_local: bool):
    """Child decoder whose fusion input drops deactivated grid levels (and optionally the local branch).

    Dropping input rows is exactly what the parent computes when the removed
    inputs are zero, so the child starts as a faithful copy of its parent.
    """
    if keep_local and not parent_local:
        raise ConfigError("cannot restore a discarded local-feature branch")
    w1 = dec["fuse.w1"]
    rows = [w1[: keep_levels * feature_dim]]
    if keep_local:
        rows.append(w1[parent_levels * feature_dim:])
    child = {n: t.detach().clone() for n, t in dec.items()}
    child["fuse.w1"] = torch.cat(rows, dim=0).detach().clone()
    return child


def _mlp(x, dec, prefix):
    h = torch.relu(x @ dec[f"{prefix}.w1"] + dec[f"{prefix}.b1"])
    return h @ dec[f"{prefix}.w2"] + dec[f"{prefix}.b2"]


def view_terms(positions: torch.Tensor, cam_center: torch.Tensor, radius: float):
    """Normalized viewing distance and direction for every anchor."""
    delta = positions - cam_center
    dist = torch.linalg.vector_norm(delta, dim=-1, keepdim=True)
    coincident = dist[:, 0] == 0
    if coincident.any():
        log.warning("camera coincides with %d anchor(s); using direction (0, 0, 1)", int(coincident.sum()))
        fallback = torch.tensor([0.0, 0.0, 1.0], dtype=positions.dtype)
        direction = torch.where(coincident[:, None], fallback, delta / torch.where(dist > 0, dist, torch.ones_like(dist)))
    else:
        direction = delta / dist
    return dist / radius, dist, direction


def predict_attributes(positions, offsets, base_scales, f_hier, f_loc, dec, cam_center, radius) -> Gaussians:
    """Decode the K neural Gaussians of every anchor, anchor-major order."""
    n, k, _ = offsets.shape
    feat = f_hier if f_loc is None else torch.cat([f_hier, f_loc], dim=-1)
    fused = _mlp(feat, dec, "fuse")
    dist_n, _, direction = view_terms(positions, cam_center, radius)
    head_in = torch.cat([fused, dist_n, direction], dim=-1)
    opacity = torch.sigmoid(_mlp(head_in, dec, "opacity")).reshape(n * k)
    color = torch.sigmoid(_mlp(head_in, dec, "color")).reshape(n, k, 3)
    scale = F.softplus(_mlp(head_in, dec, "scale")).reshape(n, k, 3) * base_scales[:, None, :]
    raw_rot = _mlp(head_in, dec, "rotation").reshape(n, k, 4)
    rot = raw_rot / torch.linalg.vector_norm(raw_rot, dim=-1, keepdim=True)
    means = positions[:, None, :] + offsets * base_scales[:, None, :]
    return Gaussians(
        means=means.reshape(n * k, 3),
        scales=scale.reshape(n * k, 3),
        quats=rot.reshape(n * k, 4),
        opacities=opacity,
        colors=color.reshape(n * k, 3),
    )
