"""Parameter storage, gradient plumbing, finite-difference checking and Adam.

Gradients come from torch autograd in float64; every module only writes its
forward pass. ``fd_check`` is the independent oracle used to validate them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import ConfigError, NumericalError

DTYPE = torch.float64


@dataclass
class Block:
    value: torch.Tensor
    trainable: bool = True
    lr: float = 1e-3

    @property
    def grad(self) -> torch.Tensor:
        g = self.value.grad
        return torch.zeros_like(self.value) if g is None else g


class ParamStore:
    """Named float64 parameter blocks with per-block gradient buffers."""

    def __init__(self):
        self._blocks: dict[str, Block] = {}

    def add(self, name: str, value, trainable: bool = True, lr: float = 1e-3) -> torch.Tensor:
        if name in self._blocks:
            raise ConfigError(f"duplicate parameter block {name!r}")
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone()
        t.requires_grad_(trainable)
        self._blocks[name] = Block(t, trainable, lr)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._blocks[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    def block(self, name: str) -> Block:
        return self._blocks[name]

    def items(self):
        return self._blocks.items()

    def trainable_names(self) -> list[str]:
        return [n for n, b in self._blocks.items() if b.trainable]

    def set_trainable(self, name: str, trainable: bool):
        b = self._blocks[name]
        b.trainable = trainable
        b.value.grad = None
        b.value.requires_grad_(trainable)

    def grad(self, name: str) -> torch.Tensor:
        return self._blocks[name].grad

    def zero_grad(self):
        for b in self._blocks.values():
            b.value.grad = None

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: b.value.detach().clone() for n, b in self._blocks.items()}


def _check_params_finite(store: ParamStore):
    for name, b in store.items():
        if not torch.isfinite(b.value).all():
            raise NumericalError(f"non-finite values in parameter block {name!r}", block=name)


def backward(loss: torch.Tensor, store: ParamStore, accumulate: bool = False):
    """Populate ``store`` gradients with d(loss)/d(block).

    Blocks the loss does not reach receive zeros; frozen blocks never get a
    gradient. Raises NumericalError naming the first offending block.
    """
    if not torch.isfinite(loss).all():
        _check_params_finite(store)
        raise NumericalError("non-finite loss in forward pass", block="loss")
    names = store.trainable_names()
    tensors = [store[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True) if tensors else ()
    for name, t, g in zip(names, tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for block {name!r}", block=name)
        if accumulate and t.grad is not None:
            t.grad = t.grad + g
        else:
            t.grad = g.detach().clone()


def fd_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    h: float = 1e-5,
    sample: int = 32,
    seed: int = 0,
    names: Iterable[str] | None = None,
    relaxed_fn: Callable[[], torch.Tensor] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` re-evaluates the scalar loss from the current contents of
    ``store``. ``relaxed_fn``, when given, is the function differenced instead;
    it is how straight-through estimators are checked against the smooth path
    whose gradient they report.
    """
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    names = list(names) if names is not None else store.trainable_names()
    for n in names:
        if not store.block(n).trainable:
            raise ConfigError(f"block {n!r} is frozen; fd_check needs trainable coordinates")

    store.zero_grad()
    backward(loss_fn(), store)
    analytic = {n: store.grad(n).detach().reshape(-1).clone() for n in names}

    coords = [(n, i) for n in names for i in range(store[n].numel())]
    rng = np.random.default_rng(seed)
    if sample < len(coords):
        picks = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    fd_fn = relaxed_fn or loss_fn
    worst = 0.0
    with torch.no_grad():
        for name, i in coords:
            flat = store[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(fd_fn())
            flat[i] = orig - h
            minus = float(fd_fn())
            flat[i] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericalError(f"loss non-finite at {name}[{i}] +/- h", block=name)
            numeric = (plus - minus) / (2 * h)
            a = analytic[name][i].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    store.zero_grad()
    return worst


@dataclass
class ExpDecay:
    """Multiplier decaying exponentially from 1 to ``final_ratio`` over ``total`` steps."""

    total: int
    final_ratio: float = 0.1

    def __call__(self, step: int) -> float:
        if self.total <= 0:
            return 1.0
        t = min(max(step, 0), self.total) / self.total
        return self.final_ratio ** t


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    schedule: ExpDecay | None = None
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(store: ParamStore, state: OptimizerState, lr: float | Mapping[str, float] | None = None):
    """One bias-corrected Adam update of every trainable block.

    ``lr`` may be a single rate, a per-block mapping, or None to use each
    block's own rate. The state's schedule multiplies whichever applies.
    """
    scale = state.schedule(state.step) if state.schedule is not None else 1.0
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, b in store.items():
        if not b.trainable:
            continue
        g = b.grad
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for block {name!r}", block=name)
        if isinstance(lr, Mapping):
            rate = lr.get(name, b.lr)
        else:
            rate = b.lr if lr is None else lr
        if rate <= 0:
            raise ConfigError(f"learning rate for {name!r} must be positive")
        rate *= scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(b.value, requires_grad=False)
            state.v[name] = torch.zeros_like(b.value, requires_grad=False)
        v = state.v[name]
        with torch.no_grad():
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            b.value.sub_(rate * (m / bc1) / ((v / bc2).sqrt() + state.eps))
