import math

import pytest
import torch

from igs.diffcore import ExpDecay, OptimizerState, ParamStore, adam_step, backward, fd_check
from igs.errors import ConfigError, NumericalError
from igs.losses import loss_sparsity


def test_square_gradient():
    s = ParamStore()
    p = s.add("p", [3.0])
    backward((p ** 2).sum(), s)
    assert s.grad("p").item() == 6.0


def test_sigmoid_gradient_at_zero():
    s = ParamStore()
    m = s.add("m", [0.0])
    backward(torch.sigmoid(m).sum(), s)
    assert s.grad("m").item() == 0.25


def test_unreached_and_frozen_blocks():
    s = ParamStore()
    a = s.add("a", [1.0, 2.0])
    s.add("b", [5.0])
    c = s.add("c", [1.0], trainable=False)
    backward((a * c).sum(), s)
    assert torch.equal(s.grad("b"), torch.zeros(1, dtype=torch.float64))
    assert torch.equal(s.grad("c"), torch.zeros(1, dtype=torch.float64))
    assert s.grad("a").tolist() == [1.0, 1.0]


def test_duplicate_block_rejected():
    s = ParamStore()
    s.add("a", [1.0])
    with pytest.raises(ConfigError):
        s.add("a", [2.0])


def test_nonfinite_loss_names_block():
    s = ParamStore()
    p = s.add("weights", [float("nan")])
    with pytest.raises(NumericalError) as e:
        backward(p.sum(), s)
    assert e.value.block == "weights"
    assert e.value.code == "E_NONFINITE"


def test_nonfinite_gradient_names_block():
    s = ParamStore()
    p = s.add("x", [0.0])
    with pytest.raises(NumericalError) as e:
        backward(torch.sqrt(p).sum(), s)
    assert e.value.block == "x"


def test_fd_check_quadratic():
    s = ParamStore()
    p = s.add("p", torch.linspace(-1, 1, 7))
    for h in (1e-4, 1e-5, 1e-6):
        assert fd_check(lambda: (p ** 2).sum() + 3 * p.sum(), s, h=h, sample=7) < 1e-8


def test_fd_check_sparsity_ten_logits():
    s = ParamStore()
    m = s.add("m", torch.linspace(-3, 3, 10).reshape(5, 2))
    assert fd_check(lambda: loss_sparsity(m, 0.01), s, sample=10) < 1e-6


def test_fd_check_reports_nonfinite():
    s = ParamStore()
    p = s.add("p", [0.0])
    with pytest.raises(NumericalError):
        fd_check(lambda: torch.log(p + 1e-6).sum(), s, h=1e-3)


def test_fd_check_rejects_bad_step():
    s = ParamStore()
    p = s.add("p", [1.0])
    with pytest.raises(ConfigError):
        fd_check(lambda: p.sum(), s, h=0)


def test_fd_check_is_deterministic():
    s = ParamStore()
    p = s.add("p", torch.linspace(0.1, 2, 50))
    f = lambda: torch.sin(p).pow(3).sum()
    assert fd_check(f, s, sample=8, seed=3) == fd_check(f, s, sample=8, seed=3)


def test_adam_zero_gradient_keeps_params():
    s = ParamStore()
    p = s.add("p", [1.0, -2.0])
    backward((p * 0).sum(), s)
    state = OptimizerState()
    adam_step(s, state, lr=0.1)
    assert p.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_first_step():
    s = ParamStore()
    p = s.add("p", [0.0])
    backward(p.sum(), s)
    adam_step(s, OptimizerState(), lr=0.01)
    assert p.item() == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)


def test_adam_frozen_block_unchanged():
    s = ParamStore()
    p = s.add("p", [1.0])
    q = s.add("q", [2.0], trainable=False)
    backward((p * q).sum(), s)
    adam_step(s, OptimizerState(), lr=0.5)
    assert q.item() == 2.0 and p.item() != 1.0


def test_adam_per_block_rates_and_schedule():
    s = ParamStore()
    a = s.add("a", [0.0], lr=0.1)
    b = s.add("b", [0.0], lr=0.2)
    backward((a + b).sum(), s)
    state = OptimizerState(schedule=ExpDecay(10, 0.1))
    adam_step(s, state)
    assert a.item() == pytest.approx(-0.1, rel=1e-7)
    assert b.item() == pytest.approx(-0.2, rel=1e-7)
    assert state.schedule(10) == pytest.approx(0.1)
    assert state.schedule(5) == pytest.approx(math.sqrt(0.1))


def _run_adam(seed):
    gen = torch.Generator().manual_seed(seed)
    s = ParamStore()
    w = s.add("w", torch.randn(6, generator=gen, dtype=torch.float64))
    target = torch.randn(6, generator=gen, dtype=torch.float64)
    state = OptimizerState()
    for _ in range(100):
        backward(((w - target) ** 2 * torch.arange(1, 7)).sum(), s)
        adam_step(s, state, lr=0.05)
    return w.detach().clone()


def test_adam_deterministic():
    assert torch.equal(_run_adam(4), _run_adam(4))


def test_adam_thread_count_invariant():
    before = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = _run_adam(9)
        torch.set_num_threads(2)
        b = _run_adam(9)
    finally:
        torch.set_num_threads(before)
    assert torch.equal(a, b)
