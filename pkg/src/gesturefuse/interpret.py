"""Post-hoc interpretability exports and the modality-ablation harness.

The summed-log-odds fusion decomposes exactly: each pair's log-odds for the
predicted class is its additive contribution to the pre-refinement fused
vector. The attention fusion exposes its pair-by-pair attention matrix
instead. Reports are plain data, rendered to JSON/figures by the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gesturefuse.datamodel import Hand, ModalityPair, SensorType, label_map
from gesturefuse.model import ATTENTION, LLR, FusionOutput, ModelConfig
from gesturefuse.training import TrainConfig, run_cross_validation

_LABEL_NAMES = dict(label_map())


class WrongFusionKindError(ValueError):
    """Report requested from the other fusion kind's output."""


@dataclass
class ContributionReport:
    """Per-pair log-odds for the predicted class, plus the inverse-magnitude score.

    ``raw_llr`` preserves the additive decomposition (they sum to the fused
    pre-refinement value for the predicted class); ``inverse_scores`` carry
    1/|llr| with None marking the zero-log-odds neutral case.
    """

    window_id: int | str
    predicted_class: int
    predicted_name: str
    pairs: list[str]
    raw_llr: list[float]
    inverse_scores: list[float | None]

    def to_dict(self) -> dict:
        return {
            "window": self.window_id,
            "predicted_class": self.predicted_class,
            "predicted_name": self.predicted_name,
            "pairs": self.pairs,
            "raw_llr": self.raw_llr,
            "inverse_magnitude_scores": self.inverse_scores,
        }


@dataclass
class AttentionReport:
    window_id: int | str
    predicted_class: int
    predicted_name: str
    pairs: list[str]
    matrix: np.ndarray

    def to_dict(self) -> dict:
        return {
            "window": self.window_id,
            "predicted_class": self.predicted_class,
            "predicted_name": self.predicted_name,
            "pairs": self.pairs,
            "attention": self.matrix.tolist(),
        }


def llr_contributions(output: FusionOutput, window_id: int | str = "") -> ContributionReport:
    if output.fusion_kind != LLR or output.per_pair_llr is None:
        raise WrongFusionKindError("log-odds contributions need an LLR-fusion output")
    pred = output.predicted_class
    raw = output.per_pair_llr[:, pred]
    scores: list[float | None] = [
        (1.0 / abs(v)) if v != 0.0 else None for v in raw
    ]
    return ContributionReport(
        window_id=window_id,
        predicted_class=pred,
        predicted_name=_LABEL_NAMES[pred],
        pairs=[p.name for p in output.active_pairs],
        raw_llr=[float(v) for v in raw],
        inverse_scores=scores,
    )


def attention_heatmap(output: FusionOutput, window_id: int | str = "") -> AttentionReport:
    if output.fusion_kind != ATTENTION or output.attention is None:
        raise WrongFusionKindError("attention heatmap needs a self-attention output")
    pred = output.predicted_class
    return AttentionReport(
        window_id=window_id,
        predicted_class=pred,
        predicted_name=_LABEL_NAMES[pred],
        pairs=[p.name for p in output.active_pairs],
        matrix=output.attention.copy(),
    )


# -- modality ablation -------------------------------------------------------

# the standard comparison grid: every row applies its sensors to both hands
DEFAULT_ABLATION_SUBSETS = (
    "CAP+ACC+GYRO+QUAT",
    "CAP+ACC+GYRO",
    "CAP+ACC+QUAT",
    "ACC+GYRO+QUAT",
    "ACC+QUAT",
    "ACC+GYRO",
    "CAP+QUAT",
    "CAP+ACC",
    "CAP",
    "ACC",
    "GYRO",
)

_SENSOR_TOKENS = {
    "CAP": SensorType.CAPA,
    "CAPA": SensorType.CAPA,
    "ACC": SensorType.ACC,
    "GYRO": SensorType.GYRO,
    "QUAT": SensorType.QUAT,
}


def parse_subset(spec: str) -> tuple[SensorType, ...]:
    sensors = []
    for token in spec.replace(" ", "").upper().split("+"):
        if token not in _SENSOR_TOKENS:
            raise ValueError(f"unknown sensor token {token!r}")
        sensors.append(_SENSOR_TOKENS[token])
    if not sensors:
        raise ValueError("empty sensor subset")
    return tuple(dict.fromkeys(sensors))


def subset_pairs(sensors: tuple[SensorType, ...]) -> tuple[ModalityPair, ...]:
    """Both-hands expansion: {ACC} -> {left_acc, right_acc}."""
    return tuple(ModalityPair(h, s) for h in (Hand.LEFT, Hand.RIGHT) for s in sensors)


@dataclass
class AblationRow:
    subset: str
    sensors: list[str]
    mean_f1: float
    std_f1: float
    fold_f1: list[float]
    prediction_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "sensors": self.sensors,
            "mean_f1": self.mean_f1,
            "std_f1": self.std_f1,
            "fold_f1": self.fold_f1,
            "prediction_counts": self.prediction_counts,
        }


def ablate(
    subsets,
    windows,
    split_kind: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log=None,
) -> list[AblationRow]:
    """Train + evaluate one model per sensor subset under the given split.

    Each subset reuses the base model config with ``active_pairs`` replaced
    by the subset's both-hands expansion; the same seed keeps rows
    comparable (a full-set subset reproduces the direct run exactly).
    """
    rows = []
    for spec in subsets:
        sensors = parse_subset(spec) if isinstance(spec, str) else tuple(spec)
        name = "+".join(
            "CAP" if s is SensorType.CAPA else s.value.upper() for s in sensors
        )
        config = ModelConfig(
            feature_dim=model_config.feature_dim,
            conv_layers=model_config.conv_layers,
            kernel=model_config.kernel,
            stride=model_config.stride,
            gru_layers=model_config.gru_layers,
            n_classes=model_config.n_classes,
            fusion_kind=model_config.fusion_kind,
            llr_clamp=model_config.llr_clamp,
            active_pairs=subset_pairs(sensors),
        )
        report = run_cross_validation(windows, split_kind, config, train_config)
        pred_counts = np.zeros(model_config.n_classes, dtype=np.int64)
        for fold in report.folds:
            pred_counts += fold.confusion.sum(axis=0)
        mean, std = report._agg("macro_f1")
        row = AblationRow(
            subset=name,
            sensors=[s.value for s in sensors],
            mean_f1=mean,
            std_f1=std,
            fold_f1=[f.macro_f1 for f in report.folds],
            prediction_counts=pred_counts.tolist(),
        )
        rows.append(row)
        if log is not None:
            log({"event": "ablation_row", **row.to_dict()})
    return rows
