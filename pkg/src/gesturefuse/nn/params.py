"""Named-parameter registry with gradient accumulators and Adam state.

Everything is float64: the model is desk-scale and gradient checks against
central finite differences need the precision headroom.
"""

from __future__ import annotations

import numpy as np


class Parameter:
    """A named float64 tensor with a same-shape gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)), the default weight init."""
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Insertion-ordered registry of parameters plus non-trainable state.

    ``stats`` holds mutable non-trainable arrays (batchnorm running moments)
    that still belong in checkpoints and snapshots. Adam moment buffers are
    lazily allocated to zeros on the first step.
    """

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.stats: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: int = 0

    def parameter(self, name: str, value: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def stat(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.stats:
            raise ValueError(f"duplicate stat {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        self.stats[name] = arr
        return arr

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- persistence helpers -------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of parameter values and stats (not optimizer state)."""
        snap = {f"param/{k}": p.value.copy() for k, p in self.params.items()}
        snap.update({f"stats/{k}": v.copy() for k, v in self.stats.items()})
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.value[...] = snap[f"param/{k}"]
        for k, v in self.stats.items():
            v[...] = snap[f"stats/{k}"]


def adam_step(
    store: ParamStore,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update over every parameter; zeroes gradients."""
    store.adam_t += 1
    t = store.adam_t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        m = store.adam_m.get(name)
        if m is None:
            m = store.adam_m[name] = np.zeros_like(p.value)
            store.adam_v[name] = np.zeros_like(p.value)
        v = store.adam_v[name]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g[...] = 0.0
