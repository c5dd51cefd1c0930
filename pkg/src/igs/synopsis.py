"""Foundation training and top-down unfolding into nested levels of detail.

The finest level is trained end to end. Each coarser level is then derived
from its parent by learning binary keep/prune masks over the parent's active
Gaussians, while shared tensors (anchors, offsets, grid tables, codebook
indices) stay frozen. Depending on the ablation mode the level may also get
its own codebook copy (CBM) and decoders (LAD).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .datasets import Dataset, downsample
from .diffcore import DTYPE, ExpDecay, OptimizerState, ParamStore, adam_step, backward
from .errors import ConfigError, NumericalError, PruningCollapseError, StateError
from .fields import (
    AnchorSet,
    HashGridStack,
    codebook_lookup_infer,
    codebook_lookup_train,
    grid_interpolate,
    grid_plan,
    interpolate_rows,
    init_anchor_positions,
    init_decoder,
    predict_attributes,
    slice_decoder,
)
from .losses import loss_full, loss_sparsity
from .render import Camera, Gaussians, render_image

log = logging.getLogger(__name__)

METRIC_FIELDS = ["phase", "level", "iteration", "loss", "l1", "dssim", "vol", "sparsity",
                 "active_anchors", "active_slots", "seconds"]


def to_f32(t: torch.Tensor) -> torch.Tensor:
    """Round to the nearest float32 while keeping float64 storage."""
    return t.detach().to(torch.float32).to(DTYPE)


def mask_value(m: torch.Tensor, eps: float) -> torch.Tensor:
    """Binary keep mask 1[sigmoid(m) > eps] with the sigmoid's gradient."""
    s = torch.sigmoid(m)
    hard = (s > eps).to(s.dtype)
    return hard + (s - s.detach())


def apply_mask(g: Gaussians, mask: torch.Tensor) -> Gaussians:
    """Zero opacity and scale of masked-out primitives."""
    return Gaussians(g.means, g.scales * mask[:, None], g.quats, g.opacities * mask, g.colors)


@dataclass
class LodModel:
    """One renderable level. Anchors, grid tables and indices are shared by every level."""

    level: int
    anchors: AnchorSet
    grids: HashGridStack
    active_levels: int
    codebook: torch.Tensor
    decoder: dict
    bitmap: torch.Tensor  # (N, K) bool over the present anchors
    scene_radius: float
    n_total: int  # anchors in the finest level; global ids lie in [0, n_total)
    use_local: bool = True
    trained: bool = False

    @property
    def k(self) -> int:
        return self.anchors.k

    def active_anchor_count(self) -> int:
        return int(self.bitmap.any(dim=1).sum())

    def active_slot_count(self) -> int:
        return int(self.bitmap.sum())

    def features(self):
        f_hier = grid_interpolate(self.grids, self.anchors.positions, self.active_levels)
        f_loc = codebook_lookup_infer(self.anchors.idx, self.codebook) if self.use_local else None
        return f_hier, f_loc

    def gaussians(self, cam: Camera) -> Gaussians:
        f_hier, f_loc = self.features()
        a = self.anchors
        g = predict_attributes(a.positions, a.offsets, a.base_scales, f_hier, f_loc,
                               self.decoder, cam.center, self.scene_radius)
        return g.subset(self.bitmap.reshape(-1))

    def render(self, cam: Camera, background=(0.0, 0.0, 0.0), cull_sigma: float = 3.0) -> torch.Tensor:
        return render_image(self.gaussians(cam), cam, background, cull_sigma)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in METRIC_FIELDS})

    def write(self, path, append: bool = False):
        fresh = not (append and Path(path).is_file())
        with open(path, "w" if fresh else "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if fresh:
                w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


class TrainingDiverged(NumericalError):
    def __init__(self, message, block=None, last_good=None):
        super().__init__(message, block)
        self.last_good = last_good


def _view_order(rng: np.random.Generator, ids: list, n: int):
    order = []
    while len(order) < n:
        order.extend(rng.permutation(ids).tolist())
    return order[:n]


# -- foundation --------------------------------------------------------------

@dataclass
class GridRows:
    touched: torch.Tensor  # flat table rows reachable from some anchor
    local: torch.Tensor  # (levels, N, 8) positions into ``touched``
    weights: torch.Tensor  # (levels, N, 8)


def init_foundation(dataset: Dataset, cfg: RunConfig):
    """Fresh training parameters for the finest level."""
    pos, offsets, scales = init_anchor_positions(dataset.points, cfg.voxel_size, cfg.n_offsets, cfg.seed)
    # the bbox is stored as float32; rounding it now keeps reloaded models bit-identical
    bbox = np.asarray(dataset.bbox, dtype=np.float32).astype(np.float64)
    grids = HashGridStack.create(bbox, cfg.grid_levels, cfg.grid_log2_table, cfg.grid_feature_dim,
                                 cfg.grid_min_res, cfg.grid_max_res, seed=cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    n = pos.shape[0]
    store = ParamStore()
    pos = pos.astype(np.float32).astype(np.float64)
    store.add("positions", pos, trainable=False)
    store.add("offsets", offsets, lr=cfg.lr_offset)
    store.add("log_scales", np.log(scales), lr=cfg.lr_scaling)
    # anchors never move, so only these table rows can ever receive gradient
    rows, weights = grid_plan(grids, torch.as_tensor(pos, dtype=DTYPE), grids.n_levels)
    touched, local = torch.unique(rows, return_inverse=True)
    store.add("grid_rows", grids.tables.reshape(-1, grids.feature_dim)[touched], lr=cfg.lr_grid)
    store.add("codebook", torch.randn((cfg.codebook_size, cfg.codebook_dim), generator=gen, dtype=DTYPE) * 0.1,
              lr=cfg.lr_codebook)
    store.add("soft_index", torch.randn((n, cfg.codebook_size), generator=gen, dtype=DTYPE) * 0.01,
              lr=cfg.lr_soft_index)
    dec = init_decoder(cfg.grid_levels * cfg.grid_feature_dim, cfg.codebook_dim, cfg.n_offsets,
                       cfg.fuse_hidden, cfg.fuse_out, cfg.head_hidden, seed=cfg.seed + 3)
    for name, t in dec.items():
        store.add(f"dec.{name}", t, lr=cfg.lr_mlp)
    plan = GridRows(touched, local, weights)
    return store, grids, plan


def _decoder_from(store: ParamStore) -> dict:
    return {name[4:]: store[name] for name in store if name.startswith("dec.")}


def foundation_tables(store: ParamStore, grids: HashGridStack, plan: GridRows) -> torch.Tensor:
    flat = grids.tables.detach().reshape(-1, grids.feature_dim).clone()
    flat[plan.touched] = store["grid_rows"].detach()
    return flat.reshape(grids.tables.shape)


def foundation_gaussians(store: ParamStore, plan: GridRows, cam: Camera, radius: float) -> Gaussians:
    pos = store["positions"]
    f_hier = interpolate_rows(store["grid_rows"], plan.local, plan.weights)
    f_loc = codebook_lookup_train(store["soft_index"], store["codebook"])
    return predict_attributes(pos, store["offsets"], torch.exp(store["log_scales"]), f_hier, f_loc,
                              _decoder_from(store), cam.center, radius)


def foundation_model(store: ParamStore, grids: HashGridStack, plan: GridRows, cfg: RunConfig, radius: float,
                     trained=True) -> LodModel:
    n = store["positions"].shape[0]
    anchors = AnchorSet(
        ids=torch.arange(n),
        positions=to_f32(store["positions"]),
        offsets=to_f32(store["offsets"]),
        base_scales=to_f32(torch.exp(store["log_scales"])),
        idx=torch.argmax(store["soft_index"].detach(), dim=-1),
    )
    g = replace(grids, tables=to_f32(foundation_tables(store, grids, plan)))
    return LodModel(
        level=cfg.top_level, anchors=anchors, grids=g, active_levels=cfg.grid_levels,
        codebook=to_f32(store["codebook"]), decoder={k: to_f32(v) for k, v in _decoder_from(store).items()},
        bitmap=torch.ones((n, cfg.n_offsets), dtype=torch.bool), scene_radius=float(np.float32(radius)),
        n_total=n, use_local=True, trained=trained,
    )


def train_full(dataset: Dataset, cfg: RunConfig, iterations: int | None = None, metrics: TrainLog | None = None,
               progress=None) -> LodModel:
    """Train the finest level end to end on full-resolution views."""
    cfg.validate()
    iterations = cfg.full_iterations if iterations is None else iterations
    radius = float(np.float32(dataset.scene_radius))
    store, grids, plan = init_foundation(dataset, cfg)
    state = OptimizerState(schedule=ExpDecay(iterations, cfg.lr_decay_final))
    w = cfg.loss_weights()
    rng = np.random.default_rng(cfg.seed)
    order = _view_order(rng, dataset.train_ids, iterations)
    metrics = metrics if metrics is not None else TrainLog()
    last_good = store.snapshot()
    t0 = time.perf_counter()
    for it, view in enumerate(order):
        cam, gt = dataset.cameras[view], dataset.images[view]
        parts = {}
        try:
            g = foundation_gaussians(store, plan, cam, radius)
            img = render_image(g, cam, dataset.background, cfg.cull_sigma)
            loss = loss_full(img, gt, g.scales, w, parts)
            backward(loss, store)
            adam_step(store, state)
        except NumericalError as exc:
            for name, value in last_good.items():
                store[name].data.copy_(value)
            raise TrainingDiverged(f"foundation training diverged at iteration {it}: {exc}", exc.block,
                                   foundation_model(store, grids, plan, cfg, radius)) from exc
        if it % cfg.log_every == 0 or it == iterations - 1:
            last_good = store.snapshot()
            n = store["positions"].shape[0]
            metrics.add(phase="full", level=cfg.top_level, iteration=it, loss=float(loss.detach()), sparsity=0.0,
                        active_anchors=n, active_slots=n * cfg.n_offsets,
                        seconds=round(time.perf_counter() - t0, 3), **parts)
            if progress:
                progress(it, float(loss.detach()))
    return foundation_model(store, grids, plan, cfg, radius, trained=True)


# -- unfolding ---------------------------------------------------------------

def unfold_level(parent: LodModel, dataset: Dataset, cfg: RunConfig, iterations: int | None = None,
                 metrics: TrainLog | None = None, progress=None) -> LodModel:
    """Derive level ``parent.level - 1`` by mask pruning plus per-level adaptation."""
    cfg.validate()
    if not parent.trained:
        raise StateError(f"level {parent.level} model has not been trained")
    if parent.level < 1:
        raise ConfigError("cannot unfold below level 0")
    level = parent.level - 1
    iterations = cfg.unfold_iterations if iterations is None else iterations
    active = cfg.active_levels(level)
    if not 1 <= active <= parent.active_levels:
        raise ConfigError(f"grid schedule gives {active} active levels at L{level}")
    mode = cfg.ablation
    keep_local = parent.use_local and mode != "lad_only"
    train_codebook = keep_local and mode in ("cbm_only", "full")
    train_decoder = mode in ("lad_only", "full")

    F = parent.grids.feature_dim
    child_dec = slice_decoder(parent.decoder, F, active, parent.active_levels, parent.use_local, keep_local)
    anchors = parent.anchors
    n, k = parent.bitmap.shape
    valid = parent.bitmap

    store = ParamStore()
    store.add("masks", torch.full((n, k), cfg.mask_init, dtype=DTYPE), lr=cfg.lr_mask)
    store.add("codebook", parent.codebook, trainable=train_codebook, lr=cfg.lr_codebook)
    for name, t in child_dec.items():
        store.add(f"dec.{name}", t, trainable=train_decoder, lr=cfg.lr_mlp)

    with torch.no_grad():
        f_hier = grid_interpolate(parent.grids, anchors.positions, active)
    scale = cfg.resolution_scale(level)
    views = {i: (dataset.cameras[i].scaled(scale), downsample(dataset.images[i], scale)) for i in dataset.train_ids}
    w = cfg.loss_weights(level)
    state = OptimizerState(schedule=ExpDecay(iterations, cfg.lr_decay_final))
    rng = np.random.default_rng(cfg.seed + 1000 * (level + 1))
    order = _view_order(rng, dataset.train_ids, iterations)
    metrics = metrics if metrics is not None else TrainLog()
    t0 = time.perf_counter()

    def forward(cam):
        f_loc = store["codebook"][anchors.idx] if keep_local else None
        g = predict_attributes(anchors.positions, anchors.offsets, anchors.base_scales, f_hier, f_loc,
                               _decoder_from(store), cam.center, parent.scene_radius)
        m = mask_value(store["masks"], cfg.mask_threshold) * valid
        return apply_mask(g, m.reshape(-1)).subset(valid.reshape(-1))

    for it, view in enumerate(order):
        cam, gt = views[view]
        parts = {}
        g = forward(cam)
        img = render_image(g, cam, dataset.background, cfg.cull_sigma)
        sparsity = loss_sparsity(store["masks"], w.group, valid)
        loss = loss_full(img, gt, g.scales, w, parts) + w.mask * sparsity
        try:
            backward(loss, store)
            adam_step(store, state)
        except NumericalError as exc:
            raise TrainingDiverged(f"unfold to L{level} diverged at iteration {it}: {exc}", exc.block, parent) from exc
        if it % cfg.log_every == 0 or it == iterations - 1:
            bits = valid & (torch.sigmoid(store["masks"].detach()) > cfg.mask_threshold)
            metrics.add(phase="unfold", level=level, iteration=it, loss=float(loss.detach()), sparsity=float(sparsity.detach()),
                        active_anchors=int(bits.any(dim=1).sum()), active_slots=int(bits.sum()),
                        seconds=round(time.perf_counter() - t0, 3), **parts)
            if progress:
                progress(it, float(loss.detach()))

    bits = valid & (torch.sigmoid(store["masks"].detach()) > cfg.mask_threshold)
    alive = bits.any(dim=1)
    if not alive.any():
        raise PruningCollapseError(
            f"unfold to L{level} pruned every anchor (lambda_mask={w.mask:g}, {iterations} iterations)")
    return LodModel(
        level=level,
        anchors=anchors.select(alive),
        grids=parent.grids,
        active_levels=active,
        codebook=to_f32(store["codebook"]),
        decoder={name[4:]: to_f32(store[name]) for name in store if name.startswith("dec.")},
        bitmap=bits[alive],
        scene_radius=parent.scene_radius,
        n_total=parent.n_total,
        use_local=keep_local,
        trained=True,
    )


def build_hierarchy(dataset: Dataset, cfg: RunConfig, metrics: TrainLog | None = None,
                    foundation: LodModel | None = None, progress=None) -> list[LodModel]:
    """Finest level first, then each unfolded level: [L_top, ..., L0]."""
    metrics = metrics if metrics is not None else TrainLog()
    top = foundation if foundation is not None else train_full(dataset, cfg, metrics=metrics, progress=progress)
    chain = [top]
    while chain[-1].level > 0:
        chain.append(unfold_level(chain[-1], dataset, cfg, metrics=metrics, progress=progress))
    return chain


def checkpoint_path(ckpt_dir, level: int) -> Path:
    return Path(ckpt_dir) / f"L{level}.igs"
