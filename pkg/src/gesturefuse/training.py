"""Cross-validation splits, the training loop, and metric computation.

Splits hold out whole units: session ids (LOSO) or participant ids (LOPO).
Within each fold the unit following the test unit (cyclically, in sorted
order) is the validation unit used for early stopping on macro F1; the rest
train. Training is mini-batch Adam with a seeded shuffle, keeping the
best-validation-F1 parameter snapshot.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gesturefuse.datamodel import LabeledWindow, ModalityPair, NUM_GESTURE_CLASSES
from gesturefuse.model import FusionModel, ModelConfig
from gesturefuse.nn.layers import cross_entropy
from gesturefuse.nn.params import adam_step

LOSO = "loso"
LOPO = "lopo"


@dataclass(frozen=True)
class Fold:
    test_unit: str
    val_unit: str
    train_units: tuple[str, ...]


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    folds: tuple[Fold, ...]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    max_epochs: int = 150
    batch_size: int = 32
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.max_epochs, self.batch_size) <= 0 or self.patience < 0:
            raise ValueError("train config values must be positive")


@dataclass
class FoldResult:
    fold_index: int
    test_unit: str
    precision: float
    recall: float
    macro_f1: float
    confusion: np.ndarray
    n_test: int

    def to_dict(self) -> dict:
        return {
            "fold": self.fold_index,
            "test_unit": self.test_unit,
            "precision": self.precision,
            "recall": self.recall,
            "macro_f1": self.macro_f1,
            "n_test": self.n_test,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class EvalReport:
    split_kind: str
    folds: list[FoldResult]

    def _agg(self, key: str) -> tuple[float, float]:
        vals = np.array([getattr(f, key) for f in self.folds])
        # sample std, matching mean +/- std reporting; 0 for a single fold
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    @property
    def mean_f1(self) -> float:
        return self._agg("macro_f1")[0]

    def to_dict(self) -> dict:
        out = {"split": self.split_kind, "folds": [f.to_dict() for f in self.folds]}
        for key in ("precision", "recall", "macro_f1"):
            mean, std = self._agg(key)
            out[key] = {"mean": mean, "std": std}
        return out

    def to_table(self) -> str:
        lines = [
            f"{'Fold':<10}{'F1 (%)':>12}{'Precision (%)':>16}{'Recall (%)':>14}",
            "-" * 52,
        ]
        for f in self.folds:
            lines.append(
                f"{f.test_unit:<10}{100 * f.macro_f1:>12.2f}"
                f"{100 * f.precision:>16.2f}{100 * f.recall:>14.2f}"
            )
        lines.append("-" * 52)
        parts = []
        for key in ("macro_f1", "precision", "recall"):
            mean, std = self._agg(key)
            parts.append(f"{100 * mean:.2f} +/- {100 * std:.2f}")
        lines.append(f"{'mean':<10}{parts[0]:>12}{parts[1]:>16}{parts[2]:>14}")
        return "\n".join(lines)


def make_splits(windows: list[LabeledWindow], kind: str) -> SplitSpec:
    """One fold per held-out unit; the cyclically-next unit validates."""
    if kind == LOSO:
        units = sorted({w.session_id for w in windows})
    elif kind == LOPO:
        units = sorted({w.participant_id for w in windows})
    else:
        raise ValueError(f"unknown split kind {kind!r}")
    if len(units) < 2:
        raise ValueError(f"{kind} needs >= 2 distinct units, found {len(units)}")
    folds = []
    for i, test in enumerate(units):
        val = units[(i + 1) % len(units)]
        train = tuple(u for u in units if u not in (test, val))
        folds.append(Fold(test_unit=test, val_unit=val, train_units=train))
    return SplitSpec(kind=kind, folds=tuple(folds))


def _unit_of(window: LabeledWindow, kind: str) -> str:
    return window.session_id if kind == LOSO else window.participant_id


def partition_fold(
    windows: list[LabeledWindow], fold: Fold, kind: str
) -> tuple[list[LabeledWindow], list[LabeledWindow], list[LabeledWindow]]:
    train = [w for w in windows if _unit_of(w, kind) in fold.train_units]
    val = [w for w in windows if _unit_of(w, kind) == fold.val_unit]
    test = [w for w in windows if _unit_of(w, kind) == fold.test_unit]
    # leakage guard: the three partitions must be disjoint by construction
    assert not ({fold.test_unit, fold.val_unit} & set(fold.train_units))
    return train, val, test


def stack_windows(
    windows: list[LabeledWindow], pairs: tuple[ModalityPair, ...]
) -> tuple[dict[ModalityPair, np.ndarray], np.ndarray]:
    """Collate windows into per-pair [N, T, C] arrays plus a label vector."""
    batch = {p: np.stack([w.tensors[p] for w in windows]) for p in pairs}
    labels = np.array([w.label.id for w in windows], dtype=np.int64)
    return batch, labels


def predict(model: FusionModel, windows: list[LabeledWindow], batch_size: int = 64) -> np.ndarray:
    preds = np.empty(len(windows), dtype=np.int64)
    pairs = model.config.active_pairs
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        batch, _ = stack_windows(chunk, pairs)
        logits, _, _ = model.forward_batch(batch, training=False)
        preds[i : i + len(chunk)] = logits.argmax(axis=1)
    return preds


def confusion_matrix(
    true: np.ndarray, pred: np.ndarray, n_classes: int = NUM_GESTURE_CLASSES
) -> np.ndarray:
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (true, pred), 1)
    return mat


def macro_metrics(confusion: np.ndarray) -> tuple[float, float, float]:
    """Macro precision/recall/F1 over classes observed as true or predicted.

    Per-class values with a zero denominator count as 0 (penalizing
    prediction collapse) rather than being dropped.
    """
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    observed = np.flatnonzero((support > 0) | (predicted > 0))
    precisions, recalls, f1s = [], [], []
    for c in observed:
        tp = confusion[c, c]
        prec = tp / predicted[c] if predicted[c] > 0 else 0.0
        rec = tp / support[c] if support[c] > 0 else 0.0
        f1 = 2 * prec * rec / (prec + rec) if (prec + rec) > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return float(np.mean(precisions)), float(np.mean(recalls)), float(np.mean(f1s))


def evaluate(
    model: FusionModel, test_windows: list[LabeledWindow]
) -> tuple[float, float, float, np.ndarray]:
    """(precision, recall, macro F1, confusion matrix) on a window list."""
    if not test_windows:
        raise ValueError("test set is empty")
    true = np.array([w.label.id for w in test_windows], dtype=np.int64)
    pred = predict(model, test_windows)
    mat = confusion_matrix(true, pred, model.config.n_classes)
    prec, rec, f1 = macro_metrics(mat)
    return prec, rec, f1, mat


def macro_f1_score(true: np.ndarray, pred: np.ndarray, n_classes: int) -> float:
    return macro_metrics(confusion_matrix(true, pred, n_classes))[2]


def train_fold(
    train_windows: list[LabeledWindow],
    val_windows: list[LabeledWindow],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log=None,
    resume_state: dict | None = None,
    model: FusionModel | None = None,
) -> tuple[FusionModel, list[dict], dict]:
    """Train with Adam and early stopping on validation macro F1.

    Stops once the epochs since the best validation F1 exceed ``patience``
    (patience 0 therefore stops at the first non-improving epoch) or at
    ``max_epochs``. Returns the model restored to its best snapshot, the
    per-epoch history, and a resumable trainer state (epoch counters, RNG
    state, best snapshot) that continues the run exactly where it stopped.
    """
    if not train_windows:
        raise ValueError("training set is empty")
    if len({w.label.id for w in train_windows}) < 2:
        raise ValueError("training set needs at least two classes")

    if model is None:
        model = FusionModel(model_config, np.random.default_rng(train_config.seed))
    pairs = model.config.active_pairs
    data, labels = stack_windows(train_windows, pairs)
    n = len(train_windows)
    rng = np.random.default_rng(train_config.seed + 1)

    history: list[dict] = []
    best_f1 = -1.0
    best_snap = model.store.snapshot()
    bad_epochs = 0
    start_epoch = 0
    stopped = False
    if resume_state:
        start_epoch = resume_state["epoch"]
        best_f1 = resume_state["best_f1"]
        bad_epochs = resume_state["bad_epochs"]
        history = list(resume_state.get("history", []))
        rng.bit_generator.state = resume_state["rng_state"]
        stopped = resume_state.get("stopped", False)
        if "best_snapshot" in resume_state:
            best_snap = resume_state["best_snapshot"]

    b1, b2 = train_config.betas
    epoch = start_epoch
    while epoch < train_config.max_epochs and not stopped:
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, train_config.batch_size):
            idx = order[i : i + train_config.batch_size]
            batch = {p: data[p][idx] for p in pairs}
            logits, cache, _ = model.forward_batch(batch, training=True)
            loss, dlogits = cross_entropy(logits, labels[idx])
            model.backward_batch(dlogits, cache)
            adam_step(model.store, lr=train_config.lr, beta1=b1, beta2=b2)
            losses.append(loss)
        val_true = np.array([w.label.id for w in val_windows], dtype=np.int64)
        val_pred = predict(model, val_windows)
        val_f1 = macro_f1_score(val_true, val_pred, model.config.n_classes)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_f1": val_f1}
        history.append(entry)
        if log is not None:
            log(entry)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_snap = model.store.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_config.patience:
                stopped = True
        epoch += 1
    final_state = {
        "epoch": epoch,
        "best_f1": best_f1,
        "bad_epochs": bad_epochs,
        "rng_state": rng.bit_generator.state,
        "history": history,
        "stopped": stopped or epoch >= train_config.max_epochs,
        "best_snapshot": best_snap,
    }
    model.store.restore(best_snap)
    return model, history, final_state


def max_workers() -> int:
    """Parallelism cap from MF_THREADS (default 1: fully serial)."""
    try:
        return max(1, int(os.environ.get("MF_THREADS", "1")))
    except ValueError:
        return 1


def _run_one_fold(args) -> FoldResult:
    windows, fold, i, kind, model_config, train_config, log = args
    train, val, test = partition_fold(windows, fold, kind)
    fold_tc = TrainConfig(
        lr=train_config.lr,
        betas=train_config.betas,
        max_epochs=train_config.max_epochs,
        batch_size=train_config.batch_size,
        patience=train_config.patience,
        # derived per-fold seed keeps results identical whether folds run
        # serially or in parallel
        seed=train_config.seed * 1000 + i,
    )
    model, _ = train_fold(train, val, model_config, fold_tc, log=log)
    prec, rec, f1, mat = evaluate(model, test)
    return FoldResult(
        fold_index=i, test_unit=fold.test_unit, precision=prec, recall=rec,
        macro_f1=f1, confusion=mat, n_test=len(test),
    ), model


def run_cross_validation(
    windows: list[LabeledWindow],
    kind: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    log=None,
    return_models: bool = False,
):
    """Train + evaluate every fold of a LOSO/LOPO split."""
    spec = make_splits(windows, kind)
    jobs = [
        (windows, fold, i, kind, model_config, train_config, log if max_workers() == 1 else None)
        for i, fold in enumerate(spec.folds)
    ]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one_fold, jobs))
    else:
        outcomes = [_run_one_fold(j) for j in jobs]
    results = [r for r, _ in outcomes]
    report = EvalReport(split_kind=kind, folds=results)
    if return_models:
        return report, [m for _, m in outcomes]
    return report
