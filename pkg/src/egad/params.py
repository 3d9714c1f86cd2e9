"""Trainable parameters, initialisers, Adam and the parameter EMA."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tensor


class Param(Tensor):
    """A named leaf tensor with an exponential-moving-average shadow."""

    __slots__ = ("ema",)

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(value, requires_grad=True, name=name)
        self.ema = self.data.copy()


class ParamStore:
    """Ordered, uniquely named parameters plus non-trainable buffers.

    Buffers hold batch-norm running statistics; they are checkpointed but
    neither optimised nor averaged.
    """

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(name, value)
        self.params[name] = p
        return p

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(p.data.size for p in self))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop these parameters from receiving gradients."""
        before = {n: p.requires_grad for n, p in self.params.items()}
        for p in self:
            p.requires_grad = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.requires_grad = before[n]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def use_ema(self) -> None:
        """Overwrite raw values with their EMA shadows (test-time weights)."""
        for p in self:
            p.data = p.ema.copy()

    def astype(self, dtype) -> None:
        for p in self:
            p.data = p.data.astype(dtype)
            p.ema = p.ema.astype(dtype)
        for n, b in self.buffers.items():
            b_new = b.astype(dtype)
            self.buffers[n] = b_new


# ------------------------------------------------------------ initialisation

@dataclass(frozen=True)
class InitSpec:
    """Weight initialiser; biases are always constant zero."""

    kind: str = "gaussian"  # "gaussian" | "xavier" | "constant"
    std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "xavier", "constant"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "gaussian" and not self.std > 0:
            raise ValueError("gaussian init needs std > 0")


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[:-2]))
    return receptive * shape[-2], receptive * shape[-1]


def draw_weight(shape, spec: InitSpec, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if spec.kind == "gaussian":
        w = rng.normal(0.0, spec.std, size=shape)
    elif spec.kind == "xavier":
        fan_in, fan_out = _fans(tuple(shape))
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=shape)
    else:
        w = np.zeros(shape)
    return w.astype(dtype)


def init_params(entries, spec: InitSpec, dtype=np.float64) -> ParamStore:
    """Build a store from ``(name, shape, role)`` triples.

    ``role`` is ``weight`` (drawn from ``spec``), ``bias``/``beta`` (zeros) or
    ``gamma`` (ones). Draws happen in list order from one seeded generator,
    so equal seeds give bit-identical stores.
    """
    rng = np.random.default_rng(spec.seed)
    store = ParamStore()
    for name, shape, role in entries:
        if role == "weight":
            value = draw_weight(shape, spec, rng, dtype)
        elif role in ("bias", "beta"):
            value = np.zeros(shape, dtype=dtype)
        elif role == "gamma":
            value = np.ones(shape, dtype=dtype)
        else:
            raise ValueError(f"unknown parameter role {role!r}")
        store.add(name, value)
    return store


# ------------------------------------------------------------------ optimise

@dataclass
class Adam:
    """Adam with bias correction over one :class:`ParamStore`."""

    store: ParamStore
    lr: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.store.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self) -> None:
        missing = [n for n, p in self.store.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: no gradient for {missing[:5]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.store.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = np.divide(m, denom, out=denom)
            step *= self.lr / c1
            p.data = (p.data - step).astype(p.data.dtype, copy=False)


def adam_step(store: ParamStore, state: Adam) -> Adam:
    if state.store is not store:
        raise ValueError("optimizer state belongs to a different store")
    state.step()
    return state


def ema_update(store: ParamStore, decay: float) -> ParamStore:
    """``shadow <- decay * shadow + (1 - decay) * value`` for every parameter."""
    if not 0.0 < decay < 1.0:
        raise ValueError(f"EMA decay must lie in (0, 1), got {decay}")
    for p in store:
        p.ema *= decay
        p.ema += (1.0 - decay) * p.data
    return store
