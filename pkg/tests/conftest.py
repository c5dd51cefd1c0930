import dataclasses

import numpy as np
import pytest
import torch

from igs.config import RunConfig
from igs.datasets import gen_synthetic_scene
from igs.diffcore import DTYPE
from igs.render import Camera, Gaussians
from igs.synopsis import TrainLog, build_hierarchy

# small enough that a whole chain trains in a couple of seconds
TINY = RunConfig(
    seed=0, voxel_size=0.2, n_offsets=3, grid_levels=4, levels_dropped=1, grid_log2_table=10, grid_min_res=4,
    grid_max_res=32, codebook_size=16, codebook_dim=8, fuse_hidden=16, fuse_out=8, head_hidden=8,
    full_iterations=40, unfold_iterations=15, log_every=5,
)


def pytest_configure(config):
    torch.set_num_threads(1)


def make_camera(width=8, height=8, f=10.0, eye=(0.0, 0.0, -3.0)):
    # looks down +z from ``eye`` with identity rotation
    t = -torch.as_tensor(eye, dtype=DTYPE)
    return Camera(torch.eye(3, dtype=DTYPE), t, f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def random_gaussians(rng, n, spread=0.4, scale=(0.05, 0.3), opacity=(0.2, 0.9)):
    q = rng.normal(size=(n, 4))
    return Gaussians(
        means=torch.as_tensor(rng.uniform(-spread, spread, (n, 3)), dtype=DTYPE),
        scales=torch.as_tensor(rng.uniform(*scale, (n, 3)), dtype=DTYPE),
        quats=torch.as_tensor(q / np.linalg.norm(q, axis=1, keepdims=True), dtype=DTYPE),
        opacities=torch.as_tensor(rng.uniform(*opacity, n), dtype=DTYPE),
        colors=torch.as_tensor(rng.uniform(0, 1, (n, 3)), dtype=DTYPE),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scene():
    return gen_synthetic_scene(2, 4, 9, (16, 16))


@pytest.fixture(scope="session")
def tiny_chain(tiny_scene):
    log = TrainLog()
    return build_hierarchy(tiny_scene, TINY, metrics=log), log


@pytest.fixture(scope="session")
def pruned_chain(tiny_chain):
    """The tiny chain with nested slots removed by a fixed random rule.

    Training that small a scene prunes all or nothing, so the storage tests
    get their partial pruning this way instead.
    """
    chain, _ = tiny_chain
    u = torch.as_tensor(np.random.default_rng(7).uniform(size=tuple(chain[0].bitmap.shape)))
    out = []
    for m in chain:
        keep_frac = (m.level + 1) / len(chain)
        bits = m.bitmap & (u < keep_frac) if m.level < len(chain) - 1 else m.bitmap.clone()
        alive = bits.any(dim=1)
        out.append(dataclasses.replace(m, anchors=m.anchors.select(alive), bitmap=bits[alive]))
    return out


# acceptance results, printed once at the end of the run
CRITERIA: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
