"""Central-finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from gesturefuse.nn.params import ParamStore


def grad_check(
    loss_fn: Callable[[bool], float],
    store: ParamStore,
    h: float = 1e-5,
    coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and numeric gradients.

    ``loss_fn(compute_grads)`` must evaluate the loss at the store's current
    parameters, additionally populating ``Parameter.grad`` when asked; it must
    be deterministic in the parameters (same inputs every call). Each checked
    coordinate is perturbed in place by +/-h and the centered difference
    (f(p+h) - f(p-h)) / 2h is compared to the analytic value with denominator
    max(|analytic|, |numeric|, abs_floor).

    With ``coords_per_tensor`` set, at most that many coordinates are sampled
    per tensor (small tensors are checked exhaustively); otherwise every
    coordinate is checked.

    ``abs_floor`` is the denominator floor. Central differences at float64
    carry roundoff noise of roughly eps * |loss| / (2h); coordinates whose
    gradient sits below noise/tolerance cannot be resolved relatively, so
    large-model harnesses raise the floor to the instrument resolution
    (errors under floor * tolerance are then still caught absolutely).
    """
    store.zero_grads()
    loss_fn(True)
    analytic = {name: p.grad.copy() for name, p in store.params.items()}
    store.zero_grads()
    if rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    for name, p in store.params.items():
        flat = p.value.reshape(-1)
        n = flat.size
        if coords_per_tensor is None or n <= coords_per_tensor:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=coords_per_tensor, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(False)
            flat[i] = orig - h
            f_minus = loss_fn(False)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if rel > max_rel:
                max_rel = rel
    return float(max_rel)
