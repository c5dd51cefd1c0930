"""Binary model files, inter-level deltas and DEFLATE sizing.

Model file (``.igs``), all integers little-endian, reals float32::

    header   magic "IGS1", version u16, level u8, flags u8, total anchors u32,
             stored anchors u32, K u8, grid levels total u8, grid levels
             stored u8, log2 table size u8, feature dim u8, N_c u16, D_c u16,
             fusion hidden u16, fusion out u16, head hidden u16, grid N_min
             u16, grid N_max u16, bbox 6 x f32, scene radius f32
    presence ceil(total / 8) bytes, bit i set when global anchor i is stored
    positions, offsets, base_scales  (stored anchors, ascending id)
    idx      one byte per stored anchor
    bitmaps  ceil(K / 8) bytes per stored anchor
    grid     stored levels x T x F
    codebook N_c x D_c
    decoder  every decoder tensor in ``fields.decoder_shapes`` order
    crc32    u32 over everything above

flags: bit 0 local-feature branch in use, bit 1 trained.

Delta file (``.igsd``) turns level L into L+1; see ``DELTA_HEADER`` and
``compute_delta`` for the section order. Bit packing is LSB first.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffcore import DTYPE
from .errors import (
    BadMagicError,
    CRCError,
    FormatError,
    HierarchyError,
    LevelMismatchError,
    MissingAssetError,
    TruncatedError,
    VersionError,
)
from .fields import AnchorSet, HashGridStack, decoder_shapes
from .synopsis import LodModel

VERSION = 1
MODEL_MAGIC = b"IGS1"
DELTA_MAGIC = b"IGSD"
MODEL_HEADER = struct.Struct("<4sHBBIIBBBBBHHHHHHH6ff")
DELTA_HEADER = struct.Struct("<4sHBBBBBBIIIBBBHHHHH")
DEFAULT_DEFLATE_LEVEL = 6

FLAG_LOCAL = 1
FLAG_TRAINED = 2


# -- DEFLATE -----------------------------------------------------------------

def deflate(data: bytes, level: int = DEFAULT_DEFLATE_LEVEL) -> bytes:
    """Raw DEFLATE stream (no zlib/gzip wrapper)."""
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def inflate(data: bytes) -> bytes:
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(data) + d.flush()
    except zlib.error as exc:
        raise FormatError(f"corrupt DEFLATE stream: {exc}") from exc
    if not d.eof:
        raise TruncatedError("DEFLATE stream ends early", section="deflate")
    return out


def compressed_size(payload: bytes, level: int = DEFAULT_DEFLATE_LEVEL) -> int:
    return len(deflate(payload, level))


# -- byte helpers ------------------------------------------------------------

def _f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def _bits(mask: torch.Tensor) -> bytes:
    """Pack a (N, K) bool tensor row by row, LSB first."""
    arr = mask.cpu().numpy().astype(np.uint8)
    if arr.ndim == 1:
        return np.packbits(arr, bitorder="little").tobytes()
    return np.packbits(arr, axis=1, bitorder="little").tobytes()


def _unbits(buf: bytes, rows: int, k: int) -> torch.Tensor:
    nb = (k + 7) // 8
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(rows, nb)
    return torch.from_numpy(np.unpackbits(arr, axis=1, count=k, bitorder="little").astype(bool))


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"file ends inside section {section!r}", section=section)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def f32(self, shape, section: str) -> torch.Tensor:
        n = int(np.prod(shape)) if len(shape) else 1
        raw = self.take(4 * n, section)
        return torch.from_numpy(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))

    def u8(self, n: int, section: str) -> np.ndarray:
        return np.frombuffer(self.take(n, section), dtype=np.uint8)

    def u32(self, n: int, section: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * n, section), dtype="<u4")


def _check_crc(data: bytes):
    if len(data) < 4:
        raise TruncatedError("file too short for its checksum", section="crc32")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != stored:
        raise CRCError("CRC32 mismatch")


def _dims(m: LodModel):
    w1 = m.decoder["fuse.w1"]
    return {
        "fuse_hidden": w1.shape[1],
        "fuse_out": m.decoder["fuse.w2"].shape[1],
        "head_hidden": m.decoder["opacity.w1"].shape[1],
    }


def _decoder_layout(m_active, F, use_local, D_c, k, fuse_hidden, fuse_out, head_hidden):
    return decoder_shapes(m_active * F, D_c if use_local else 0, k, fuse_hidden, fuse_out, head_hidden)


# -- model files -------------------------------------------------------------

def model_to_bytes(m: LodModel) -> bytes:
    a, g = m.anchors, m.grids
    T = g.table_size
    log2_T = T.bit_length() - 1
    n_c, d_c = m.codebook.shape
    dims = _dims(m)
    flags = (FLAG_LOCAL if m.use_local else 0) | (FLAG_TRAINED if m.trained else 0)
    bbox = [float(v) for v in g.bbox.reshape(-1)]
    parts = [MODEL_HEADER.pack(
        MODEL_MAGIC, VERSION, m.level, flags, m.n_total, len(a), m.k, g.total_levels, m.active_levels,
        log2_T, g.feature_dim, n_c, d_c, dims["fuse_hidden"], dims["fuse_out"], dims["head_hidden"],
        g.n_min, g.n_max, *bbox, m.scene_radius,
    )]
    presence = torch.zeros(m.n_total, dtype=torch.bool)
    presence[a.ids] = True
    parts += [
        _bits(presence),
        _f32(a.positions), _f32(a.offsets), _f32(a.base_scales),
        a.idx.to(torch.uint8).numpy().tobytes(),
        _bits(m.bitmap),
        _f32(g.tables[: m.active_levels]),
        _f32(m.codebook),
    ]
    layout = _decoder_layout(m.active_levels, g.feature_dim, m.use_local, d_c, m.k, **dims)
    for name, shape in layout:
        t = m.decoder[name]
        if tuple(t.shape) != shape:
            raise FormatError(f"decoder tensor {name} has shape {tuple(t.shape)}, expected {shape}")
        parts.append(_f32(t))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _model_sections(h):
    (_, _, _, flags, n_total, n, k, _, active, log2_T, F, n_c, d_c, fuse_hidden, fuse_out, head_hidden) = h[:16]
    T = 1 << log2_T
    dec = _decoder_layout(active, F, bool(flags & FLAG_LOCAL), d_c, k, fuse_hidden, fuse_out, head_hidden)
    return [
        ("presence", (n_total + 7) // 8),
        ("positions", 12 * n),
        ("offsets", 12 * n * k),
        ("base_scales", 12 * n),
        ("idx", n),
        ("bitmaps", n * ((k + 7) // 8)),
        ("grid", 4 * active * T * F),
        ("codebook", 4 * n_c * d_c),
        ("decoder", 4 * sum(int(np.prod(shape)) for _, shape in dec)),
        ("crc32", 4),
    ]


def _verify_layout(data: bytes, header_size: int, sections):
    """CRC first; a failing CRC on a short file is reported as truncation of the section it ends in."""
    expected = header_size + sum(n for _, n in sections)
    try:
        _check_crc(data)
    except CRCError:
        if len(data) < expected:
            pos = header_size
            for name, n in sections:
                if len(data) < pos + n:
                    raise TruncatedError(f"file ends inside section {name!r}", section=name) from None
                pos += n
        raise
    if len(data) != expected:
        raise FormatError(f"file is {len(data)} bytes, header implies {expected}")


def model_from_bytes(data: bytes) -> LodModel:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise BadMagicError(f"not a model file (magic {data[:4]!r})")
    if len(data) < MODEL_HEADER.size:
        raise TruncatedError("file ends inside section 'header'", section="header")
    h = MODEL_HEADER.unpack_from(data)
    (_, version, level, flags, n_total, n, k, total_levels, active, log2_T, F, n_c, d_c,
     fuse_hidden, fuse_out, head_hidden, n_min, n_max, *rest) = h
    bbox, radius = rest[:6], rest[6]
    if version != VERSION:
        raise VersionError(f"unsupported model version {version}")
    _verify_layout(data, MODEL_HEADER.size, _model_sections(h))
    r = _Reader(data, len(data) - 4)
    r.pos = MODEL_HEADER.size
    T = 1 << log2_T
    use_local = bool(flags & FLAG_LOCAL)
    presence = _unbits(r.take((n_total + 7) // 8, "presence"), 1, n_total)[0]
    ids = torch.nonzero(presence).reshape(-1)
    if ids.numel() != n:
        raise FormatError(f"presence bitmap lists {ids.numel()} anchors, header says {n}")
    positions = r.f32((n, 3), "positions")
    offsets = r.f32((n, k, 3), "offsets")
    base_scales = r.f32((n, 3), "base_scales")
    idx = torch.from_numpy(r.u8(n, "idx").astype(np.int64))
    bitmap = _unbits(r.take(n * ((k + 7) // 8), "bitmaps"), n, k)
    tables = r.f32((active, T, F), "grid")
    codebook = r.f32((n_c, d_c), "codebook")
    decoder = {}
    for name, shape in _decoder_layout(active, F, use_local, d_c, k, fuse_hidden, fuse_out, head_hidden):
        decoder[name] = r.f32(shape, "decoder")
    if (idx >= n_c).any():
        raise FormatError("codebook index out of range")
    grids = HashGridStack(tables, torch.tensor(bbox, dtype=DTYPE).reshape(2, 3), n_min, n_max, total_levels)
    return LodModel(
        level=level, anchors=AnchorSet(ids, positions, offsets, base_scales, idx), grids=grids,
        active_levels=active, codebook=codebook, decoder=decoder, bitmap=bitmap, scene_radius=radius,
        n_total=n_total, use_local=use_local, trained=bool(flags & FLAG_TRAINED),
    )


def save_model(m: LodModel, path) -> int:
    data = model_to_bytes(m)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path) -> LodModel:
    p = Path(path)
    if not p.is_file():
        raise MissingAssetError(f"model file not found: {p}")
    return model_from_bytes(p.read_bytes())


# -- deltas ------------------------------------------------------------------

@dataclass
class DeltaInfo:
    from_level: int
    to_level: int
    new_anchors: int
    patches: int
    new_grid_levels: int
    size: int


def _shared_check(lo: LodModel, hi: LodModel):
    if hi.level != lo.level + 1:
        raise HierarchyError(f"levels {lo.level} and {hi.level} are not consecutive")
    if lo.n_total != hi.n_total or lo.k != hi.k or lo.codebook.shape != hi.codebook.shape:
        raise HierarchyError("models disagree on anchor count, K or codebook shape")
    if hi.active_levels < lo.active_levels:
        raise HierarchyError("finer level uses fewer grid levels than the coarser one")
    gl, gh = lo.grids, hi.grids
    if (gl.total_levels, gl.n_min, gl.n_max, gl.table_size, gl.feature_dim) != \
            (gh.total_levels, gh.n_min, gh.n_max, gh.table_size, gh.feature_dim) or \
            _f32(gl.bbox) != _f32(gh.bbox) or np.float32(lo.scene_radius) != np.float32(hi.scene_radius):
        raise HierarchyError("grid geometry differs between levels")
    if _f32(gl.tables[: lo.active_levels]) != _f32(gh.tables[: lo.active_levels]):
        raise HierarchyError("shared grid tables differ between levels")
    pos = torch.searchsorted(hi.anchors.ids, lo.anchors.ids)
    if (pos >= len(hi.anchors)).any() or not torch.equal(hi.anchors.ids[pos.clamp(max=len(hi.anchors) - 1)], lo.anchors.ids):
        raise HierarchyError("coarser level holds anchors the finer level lacks")
    a, b = lo.anchors, hi.anchors.select(pos)
    for name in ("positions", "offsets", "base_scales"):
        if _f32(getattr(a, name)) != _f32(getattr(b, name)):
            raise HierarchyError(f"shared anchor {name} differ between levels")
    if not torch.equal(a.idx, b.idx):
        raise HierarchyError("shared codebook indices differ between levels")
    if (lo.bitmap & ~hi.bitmap[pos]).any():
        raise HierarchyError("coarser bitmap is not nested in the finer one")
    return pos


def compute_delta(lo: LodModel, hi: LodModel, deflate_level: int = DEFAULT_DEFLATE_LEVEL) -> bytes:
    """Payload upgrading ``lo`` to ``hi``: new anchors, bitmap patches, new grid levels, codebook, decoders."""
    pos = _shared_check(lo, hi)
    is_new = torch.ones(len(hi.anchors), dtype=torch.bool)
    is_new[pos] = False
    new = hi.anchors.select(is_new)
    added = hi.bitmap[pos] & ~lo.bitmap
    changed = added.any(dim=1)
    patch_ids = lo.anchors.ids[changed]
    n_new_levels = hi.active_levels - lo.active_levels
    dims = _dims(hi)
    g = hi.grids
    flags = (FLAG_LOCAL if hi.use_local else 0) | (FLAG_TRAINED if hi.trained else 0)
    header = DELTA_HEADER.pack(
        DELTA_MAGIC, VERSION, lo.level, hi.level, flags, deflate_level, lo.active_levels, n_new_levels,
        hi.n_total, len(new), int(changed.sum()), hi.k, g.feature_dim, g.table_size.bit_length() - 1,
        hi.codebook.shape[0], hi.codebook.shape[1], dims["fuse_hidden"], dims["fuse_out"], dims["head_hidden"],
    )
    parts = [
        header,
        new.ids.numpy().astype("<u4").tobytes(),
        _f32(new.positions), _f32(new.offsets), _f32(new.base_scales),
        new.idx.to(torch.uint8).numpy().tobytes(),
        _bits(hi.bitmap[is_new]),
        patch_ids.numpy().astype("<u4").tobytes(),
        _bits(added[changed]),
        _f32(g.tables[lo.active_levels: hi.active_levels]),
        _f32(hi.codebook),
    ]
    layout = _decoder_layout(hi.active_levels, g.feature_dim, hi.use_local, hi.codebook.shape[1], hi.k, **dims)
    parts += [_f32(hi.decoder[name]) for name, _ in layout]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def delta_info(data: bytes) -> DeltaInfo:
    h = _delta_header(data)
    return DeltaInfo(h[2], h[3], h[9], h[10], h[7], len(data))


def _delta_header(data: bytes):
    if len(data) < 4 or data[:4] != DELTA_MAGIC:
        raise BadMagicError(f"not a delta file (magic {data[:4]!r})")
    if len(data) < DELTA_HEADER.size:
        raise TruncatedError("file ends inside section 'header'", section="header")
    h = DELTA_HEADER.unpack_from(data)
    if h[1] != VERSION:
        raise VersionError(f"unsupported delta version {h[1]}")
    return h


def _delta_sections(h):
    (_, _, _, _, flags, _, from_active, n_new_levels, _, n_new, n_patch, k, F, log2_T,
     n_c, d_c, fuse_hidden, fuse_out, head_hidden) = h
    nb = (k + 7) // 8
    dec = _decoder_layout(from_active + n_new_levels, F, bool(flags & FLAG_LOCAL), d_c, k,
                          fuse_hidden, fuse_out, head_hidden)
    return [
        ("new_anchor_ids", 4 * n_new),
        ("new_anchor_positions", 12 * n_new),
        ("new_anchor_offsets", 12 * n_new * k),
        ("new_anchor_base_scales", 12 * n_new),
        ("new_anchor_idx", n_new),
        ("new_anchor_bitmaps", n_new * nb),
        ("patch_ids", 4 * n_patch),
        ("patch_bitmaps", n_patch * nb),
        ("grid", 4 * n_new_levels * (1 << log2_T) * F),
        ("codebook", 4 * n_c * d_c),
        ("decoder", 4 * sum(int(np.prod(shape)) for _, shape in dec)),
        ("crc32", 4),
    ]


def apply_delta(lo: LodModel, data: bytes) -> LodModel:
    """Reassemble level L+1 from level L and a delta; ``lo`` is never modified."""
    h = _delta_header(data)
    (_, _, from_level, to_level, flags, _, from_active, n_new_levels, n_total, n_new, n_patch, k, F, log2_T,
     n_c, d_c, fuse_hidden, fuse_out, head_hidden) = h
    _verify_layout(data, DELTA_HEADER.size, _delta_sections(h))
    r = _Reader(data, len(data) - 4)
    r.pos = DELTA_HEADER.size
    nb = (k + 7) // 8
    T = 1 << log2_T
    use_local = bool(flags & FLAG_LOCAL)
    to_active = from_active + n_new_levels
    ids = torch.from_numpy(r.u32(n_new, "new_anchor_ids").astype(np.int64))
    positions = r.f32((n_new, 3), "new_anchor_positions")
    offsets = r.f32((n_new, k, 3), "new_anchor_offsets")
    base_scales = r.f32((n_new, 3), "new_anchor_base_scales")
    idx = torch.from_numpy(r.u8(n_new, "new_anchor_idx").astype(np.int64))
    new_bits = _unbits(r.take(n_new * nb, "new_anchor_bitmaps"), n_new, k)
    patch_ids = torch.from_numpy(r.u32(n_patch, "patch_ids").astype(np.int64))
    patch_bits = _unbits(r.take(n_patch * nb, "patch_bitmaps"), n_patch, k)
    tables = r.f32((n_new_levels, T, F), "grid")
    codebook = r.f32((n_c, d_c), "codebook")
    decoder = {}
    for name, shape in _decoder_layout(to_active, F, use_local, d_c, k, fuse_hidden, fuse_out, head_hidden):
        decoder[name] = r.f32(shape, "decoder")

    if from_level != lo.level:
        raise LevelMismatchError(f"delta upgrades L{from_level}, model is L{lo.level}")
    if from_active != lo.active_levels or n_total != lo.n_total or k != lo.k:
        raise LevelMismatchError("delta does not match the model's grid levels, anchor count or K")
    if (idx >= n_c).any():
        raise FormatError("codebook index out of range")

    bitmap = lo.bitmap.clone()
    if n_patch:
        where = torch.searchsorted(lo.anchors.ids, patch_ids)
        if (where >= len(lo.anchors)).any() or not torch.equal(lo.anchors.ids[where], patch_ids):
            raise FormatError("bitmap patch refers to an anchor the model does not hold")
        bitmap[where] |= patch_bits
    a = lo.anchors
    all_ids = torch.cat([a.ids, ids])
    if torch.unique(all_ids).numel() != all_ids.numel():
        raise FormatError("delta re-sends an anchor the model already holds")
    order = torch.argsort(all_ids)
    anchors = AnchorSet(
        all_ids[order],
        torch.cat([a.positions, positions])[order],
        torch.cat([a.offsets, offsets])[order],
        torch.cat([a.base_scales, base_scales])[order],
        torch.cat([a.idx, idx])[order],
    )
    g = lo.grids
    grids = HashGridStack(torch.cat([g.tables[: from_active], tables]), g.bbox.clone(), g.n_min, g.n_max,
                          g.total_levels)
    return LodModel(
        level=to_level, anchors=anchors, grids=grids, active_levels=to_active, codebook=codebook,
        decoder=decoder, bitmap=torch.cat([bitmap, new_bits])[order], scene_radius=lo.scene_radius,
        n_total=n_total, use_local=use_local, trained=bool(flags & FLAG_TRAINED),
    )


def shared_sections(m: LodModel, ids: torch.Tensor | None = None, grid_levels: int | None = None) -> dict:
    """Serialized shared tensors, optionally restricted to ``ids`` and a grid-level prefix."""
    a = m.anchors
    if ids is not None:
        a = a.select(torch.searchsorted(a.ids, ids))
    levels = m.active_levels if grid_levels is None else grid_levels
    return {
        "positions": _f32(a.positions),
        "offsets": _f32(a.offsets),
        "base_scales": _f32(a.base_scales),
        "idx": a.idx.to(torch.uint8).numpy().tobytes(),
        "grid": _f32(m.grids.tables[:levels]),
    }
