"""Full-model gradient verification harness.

Builds a reduced fusion model with randomized-but-live parameters (nonzero
pool gates, moderate head/final scales so every class keeps a resolvable
softmax probability), feeds it a random mini-batch, and compares the analytic
gradient against central finite differences over a stratified coordinate
sample of every tensor.

Numerics: at float64 the finite-difference noise is ~eps*|loss|/(2h), so the
relative-error denominator is floored at 1e-5 — below that, disagreements are
still caught absolutely at the 1e-9 level, which is far tighter than the
noise floor of a naive relative comparison. h defaults to 1e-6 to keep ReLU
kink straddles rare.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gesturefuse.datamodel import SensorType
from gesturefuse.model import FusionModel, ModelConfig
from gesturefuse.nn.gradcheck import grad_check
from gesturefuse.nn.layers import cross_entropy


@dataclass(frozen=True)
class GradCheckConfig:
    seed: int = 1
    feature_dim: int = 16
    batch: int = 4
    window_seconds: float = 0.5
    fusion_kind: str = "llr"
    h: float = 1e-6
    abs_floor: float = 1e-5
    coords_per_tensor: int = 12
    tolerance: float = 1e-4


def randomize_live_params(model: FusionModel, rng: np.random.Generator) -> None:
    """Randomize every parameter so each gradient path stays measurable.

    Zero-initialized gates or biases would make whole tensors' gradients
    structurally zero; over-wide head/final scales push softmax tails below
    finite-difference resolution. These scales keep the batch loss near
    ln(n_classes) with moderate logit spread.
    """
    for name, p in model.store.params.items():
        if name.endswith(".gate"):
            p.value[...] = rng.uniform(0.5, 1.5)
        elif name.endswith(".gamma"):
            p.value[...] = rng.uniform(0.8, 1.2, size=p.value.shape)
        elif name == "final.w":
            p.value[...] = rng.uniform(-0.02, 0.02, size=p.value.shape)
        elif name == "final.b":
            p.value[...] = rng.uniform(-0.3, 0.3, size=p.value.shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            p.value[...] = rng.uniform(-0.1, 0.1, size=p.value.shape)
        else:
            p.value[...] = rng.uniform(-0.4, 0.4, size=p.value.shape)


def full_model_gradcheck(cfg: GradCheckConfig = GradCheckConfig()) -> dict:
    """Run the check; returns {'max_rel_error', 'passed', 'n_params', ...}."""
    rng = np.random.default_rng(cfg.seed)
    model_config = ModelConfig(feature_dim=cfg.feature_dim, fusion_kind=cfg.fusion_kind)
    model = FusionModel(model_config, rng)
    randomize_live_params(model, rng)
    batch = {}
    for pair in model_config.active_pairs:
        t = int(round(cfg.window_seconds * pair.sensor.nominal_rate))
        batch[pair] = rng.normal(size=(cfg.batch, t, pair.sensor.channel_count))
    targets = rng.integers(0, model_config.n_classes, size=cfg.batch)

    def loss_fn(compute_grads: bool) -> float:
        logits, cache, _ = model.forward_batch(batch, training=True)
        loss, dlogits = cross_entropy(logits, targets)
        if compute_grads:
            model.backward_batch(dlogits, cache)
        return loss

    max_rel = grad_check(
        loss_fn,
        model.store,
        h=cfg.h,
        coords_per_tensor=cfg.coords_per_tensor,
        rng=np.random.default_rng(cfg.seed + 5000),
        abs_floor=cfg.abs_floor,
    )
    return {
        "max_rel_error": max_rel,
        "tolerance": cfg.tolerance,
        "passed": max_rel < cfg.tolerance,
        "n_params": model.store.num_params(),
        "n_tensors": len(model.store.params),
        "seed": cfg.seed,
        "fusion_kind": cfg.fusion_kind,
    }
