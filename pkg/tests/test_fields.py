import itertools
import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from igs.diffcore import DTYPE, ParamStore, fd_check
from igs.errors import ConfigError, FormatError
from igs.fields import (
    HashGridStack,
    codebook_lookup_infer,
    codebook_lookup_relaxed,
    codebook_lookup_train,
    decoder_shapes,
    grid_interpolate,
    grid_plan,
    interpolate_rows,
    hash_index,
    hash_index_tensor,
    init_anchor_positions,
    init_decoder,
    level_resolutions,
    predict_attributes,
    slice_decoder,
)

T = 32768


def test_hash_examples():
    assert hash_index((0, 0, 0), T) == 0
    assert hash_index((1, 0, 0), T) == 1
    assert hash_index((0, 1, 0), T) == 2654435761 % 32768


def test_hash_requires_power_of_two():
    with pytest.raises(ConfigError):
        hash_index((1, 2, 3), 1000)


@given(st.tuples(*[st.integers(0, 600)] * 3))
def test_hash_tensor_matches_scalar(cell):
    # scalar version works in explicit 64-bit wraparound arithmetic
    assert int(hash_index_tensor(torch.tensor([cell]), T)[0]) == hash_index(cell, T)


def test_resolutions_geometric_and_increasing():
    res = level_resolutions(12, 16, 512)
    assert res[0] == 16 and res[-1] == 512
    assert all(b > a for a, b in zip(res, res[1:]))


def _grid(levels=3, n_min=4, n_max=16, seed=0, log2_T=10):
    g = HashGridStack.create(np.array([[0, 0, 0], [1, 1, 1]], dtype=float), levels, log2_T, 4, n_min, n_max,
                             seed=seed, init_range=1.0)
    return g


def test_zero_tables_give_zero_features():
    g = _grid()
    g.tables.zero_()
    f = grid_interpolate(g, torch.rand(5, 3, dtype=DTYPE), 2)
    assert f.shape == (5, 8) and torch.count_nonzero(f) == 0


def test_lattice_corner_returns_row():
    g = _grid()
    res = g.resolutions
    for level in range(3):
        cell = (1, 2, 3)
        x = torch.tensor([cell], dtype=DTYPE) / res[level]
        f = grid_interpolate(g, x, 3)
        row = g.tables[level, hash_index(cell, g.table_size)]
        assert torch.allclose(f[0, 4 * level:4 * level + 4], row, atol=1e-12, rtol=0)


def _brute_force(g, x, level):
    # independent corner enumeration with explicit trilinear weights
    res = g.resolutions[level]
    u = np.clip(x, 0, 1) * res
    base = np.minimum(np.floor(u), res - 1)
    frac = u - base
    out = np.zeros(4)
    for corner in itertools.product((0, 1), repeat=3):
        w = np.prod([f if c else 1 - f for c, f in zip(corner, frac)])
        cell = tuple(int(b + c) for b, c in zip(base, corner))
        out += w * g.tables[level, hash_index(cell, g.table_size)].numpy()
    return out


def test_cell_midpoint_is_corner_mean():
    g = _grid()
    res = g.resolutions[1]
    x = (np.array([2, 3, 1]) + 0.5) / res
    f = grid_interpolate(g, torch.as_tensor(x[None]), 3)[0, 4:8].numpy()
    rows = [g.tables[1, hash_index((2 + a, 3 + b, 1 + c), g.table_size)].numpy()
            for a, b, c in itertools.product((0, 1), repeat=3)]
    assert np.allclose(f, np.mean(rows, axis=0), atol=1e-12)
    assert np.allclose(f, _brute_force(g, x, 1), atol=1e-12)


def test_random_points_match_brute_force(rng):
    g = _grid()
    x = rng.uniform(0, 1, (20, 3))
    f = grid_interpolate(g, torch.as_tensor(x), 3).numpy()
    for i in range(20):
        for level in range(3):
            assert np.allclose(f[i, 4 * level:4 * level + 4], _brute_force(g, x[i], level), atol=1e-12)


def test_grid_row_gradients(rng):
    g = _grid()
    x = torch.as_tensor(rng.uniform(0, 1, (6, 3)))
    rows, weights = grid_plan(g, x, 3)
    touched, local = torch.unique(rows, return_inverse=True)
    s = ParamStore()
    values = s.add("rows", g.tables.reshape(-1, 4)[touched])
    w = torch.as_tensor(rng.normal(size=(6, 12)))
    loss = lambda: (torch.tanh(interpolate_rows(values, local, weights)) * w).sum()
    assert fd_check(loss, s, sample=48) < 1e-6


def test_active_levels_out_of_range():
    g = _grid()
    with pytest.raises(ConfigError):
        grid_interpolate(g, torch.zeros(1, 3, dtype=DTYPE), 4)
    with pytest.raises(ConfigError):
        grid_interpolate(g, torch.zeros(1, 3, dtype=DTYPE), 0)


def test_inactive_tables_do_not_matter():
    g = _grid()
    x = torch.rand(10, 3, dtype=DTYPE)
    before = grid_interpolate(g, x, 2)
    g.tables[2] += 5.0
    assert torch.equal(before, grid_interpolate(g, x, 2))


def test_interpolation_lipschitz(rng):
    g = _grid(levels=1, n_min=8, n_max=8)
    res = 8
    bound = 2 * g.tables.abs().max().item() * res * 3  # per-axis slope bound times three axes
    for _ in range(50):
        x = rng.uniform(0.05, 0.95, 3)
        d = rng.normal(size=3)
        d *= 1e-3 / np.linalg.norm(d)
        fa = grid_interpolate(g, torch.as_tensor(x[None]), 1)
        fb = grid_interpolate(g, torch.as_tensor((x + d)[None]), 1)
        assert (fa - fb).abs().max().item() <= bound * 1e-3


def test_codebook_forward_values():
    C = torch.arange(12, dtype=DTYPE).reshape(4, 3)
    v = torch.tensor([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 9.0, 0.0]], dtype=DTYPE)
    out = codebook_lookup_train(v, C)
    assert torch.equal(out[0], C[0])  # tie goes to the lowest index
    assert torch.equal(out[1], C[2])


def test_codebook_train_matches_infer_bitwise(rng):
    C = torch.as_tensor(rng.normal(size=(256, 32)))
    v = torch.as_tensor(rng.normal(size=(30, 256)))
    assert torch.equal(codebook_lookup_train(v, C), codebook_lookup_infer(torch.argmax(v, -1), C))


def test_codebook_ste_gradient():
    gen = torch.Generator().manual_seed(0)
    s = ParamStore()
    v = s.add("v", torch.randn(3, 8, generator=gen, dtype=DTYPE))
    C = s.add("C", torch.randn(8, 5, generator=gen, dtype=DTYPE))
    weights = torch.randn(3, 5, generator=gen, dtype=DTYPE)
    err = fd_check(lambda: (codebook_lookup_train(v, C) * weights).sum(), s, sample=40,
                   names=["v"], relaxed_fn=lambda: (codebook_lookup_relaxed(v, C) * weights).sum())
    assert err < 1e-6


def test_codebook_infer_range():
    C = torch.eye(4, dtype=DTYPE)
    assert torch.equal(codebook_lookup_infer(0, C), C[0])
    with pytest.raises(FormatError):
        codebook_lookup_infer(4, C)


def test_cbm_update_changes_only_touched_rows():
    C = torch.randn(6, 3, dtype=DTYPE)
    s = ParamStore()
    CL = s.add("C", C)
    idx = torch.tensor([1, 4])
    from igs.diffcore import OptimizerState, adam_step, backward
    backward(codebook_lookup_infer(idx, CL).sum(), s)
    adam_step(s, OptimizerState(), lr=0.1)
    changed = (CL.detach() != C).any(dim=1)
    assert changed.tolist() == [False, True, False, False, True, False]


def _decoder(k=3, levels=2, local=5):
    return init_decoder(levels * 4, local, k, 8, 6, 7, seed=1)


def test_predict_attribute_ranges():
    torch.manual_seed(0)
    n, k = 5, 3
    dec = _decoder(k)
    pos = torch.rand(n, 3, dtype=DTYPE)
    off = torch.rand(n, k, 3, dtype=DTYPE) - 0.5
    base = torch.full((n, 3), 0.1, dtype=DTYPE)
    g = predict_attributes(pos, off, base, torch.randn(n, 8, dtype=DTYPE), torch.randn(n, 5, dtype=DTYPE), dec,
                           torch.tensor([0.0, 0.0, -3.0], dtype=DTYPE), 2.0)
    assert len(g) == n * k
    assert (g.scales > 0).all()
    assert ((g.opacities > 0) & (g.opacities < 1)).all()
    assert ((g.colors > 0) & (g.colors < 1)).all()
    assert torch.allclose(torch.linalg.vector_norm(g.quats, dim=-1), torch.ones(n * k, dtype=DTYPE), atol=1e-12)
    assert torch.allclose(g.means.reshape(n, k, 3), pos[:, None] + off * 0.1)


def test_zero_offsets_put_gaussians_on_anchor():
    dec = _decoder()
    pos = torch.tensor([[0.1, 0.2, 0.3]], dtype=DTYPE)
    g = predict_attributes(pos, torch.zeros(1, 3, 3, dtype=DTYPE), torch.ones(1, 3, dtype=DTYPE),
                           torch.zeros(1, 8, dtype=DTYPE), torch.zeros(1, 5, dtype=DTYPE), dec,
                           torch.zeros(3, dtype=DTYPE), 1.0)
    assert torch.equal(g.means, pos.expand(3, 3))


def test_zero_preactivation_opacity_is_half():
    dec = _decoder(k=1)
    for name in ("opacity.w2", "opacity.b2"):
        dec[name] = torch.zeros_like(dec[name])
    g = predict_attributes(torch.zeros(1, 3, dtype=DTYPE), torch.zeros(1, 1, 3, dtype=DTYPE),
                           torch.ones(1, 3, dtype=DTYPE), torch.zeros(1, 8, dtype=DTYPE),
                           torch.zeros(1, 5, dtype=DTYPE), dec, torch.tensor([0, 0, -2.0], dtype=DTYPE), 1.0)
    assert g.opacities.item() == 0.5


def test_view_terms_and_coincident_camera(caplog):
    from igs.fields import view_terms
    pos = torch.tensor([[0.0, 0.0, 2.0], [1.0, 1.0, 1.0]], dtype=DTYPE)
    dist_n, dist, direction = view_terms(pos, torch.zeros(3, dtype=DTYPE), 1.0)
    assert dist[0].item() == 2.0 and direction[0].tolist() == [0.0, 0.0, 1.0]
    with caplog.at_level(logging.WARNING):
        _, dist, direction = view_terms(pos, torch.tensor([1.0, 1.0, 1.0], dtype=DTYPE), 1.0)
    assert direction[1].tolist() == [0.0, 0.0, 1.0] and dist[1].item() == 0.0
    assert "coincides" in caplog.text


def test_slice_decoder_equals_zero_filled_inputs():
    torch.manual_seed(3)
    dec = _decoder(levels=3)
    n = 4
    f_hier = torch.randn(n, 12, dtype=DTYPE)
    f_loc = torch.randn(n, 5, dtype=DTYPE)
    cam = torch.tensor([0, 0, -3.0], dtype=DTYPE)
    pos = torch.rand(n, 3, dtype=DTYPE)
    off = torch.rand(n, 3, 3, dtype=DTYPE)
    base = torch.ones(n, 3, dtype=DTYPE)
    zeroed = f_hier.clone()
    zeroed[:, 8:] = 0
    full = predict_attributes(pos, off, base, zeroed, f_loc, dec, cam, 1.0)
    child = slice_decoder(dec, 4, 2, 3, True, True)
    part = predict_attributes(pos, off, base, f_hier[:, :8], f_loc, child, cam, 1.0)
    assert torch.allclose(full.opacities, part.opacities, atol=1e-13)
    no_local = slice_decoder(dec, 4, 2, 3, True, False)
    ref = predict_attributes(pos, off, base, zeroed, torch.zeros_like(f_loc), dec, cam, 1.0)
    got = predict_attributes(pos, off, base, f_hier[:, :8], None, no_local, cam, 1.0)
    assert torch.allclose(ref.colors, got.colors, atol=1e-13)
    with pytest.raises(ConfigError):
        slice_decoder(no_local, 4, 1, 2, False, True)


def test_decoder_shapes_follow_widths():
    shapes = dict(decoder_shapes(48, 32, 4))
    assert shapes["fuse.w1"] == (80, 64)
    assert shapes["fuse.w2"] == (64, 32)
    assert shapes["rotation.w2"] == (32, 16)
    assert shapes["color.b2"] == (12,)


def test_anchor_init():
    pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.03, 0.04], [0.55, 0.5, 0.5]])
    pos, off, scales = init_anchor_positions(pts, 0.1, 4, seed=0)
    assert pos.shape == (2, 3) and off.shape == (2, 4, 3)
    assert np.allclose(pos[0], 0.05) and (np.abs(off) <= 0.5).all() and (scales == 0.1).all()
    with pytest.raises(ConfigError):
        init_anchor_positions(pts, 0.0, 4)
