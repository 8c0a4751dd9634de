"""Core domain types and on-disk session format.

A recording session consists of one CSV file per (hand, sensor) modality pair
plus a JSON annotation file, all timed in seconds. The canonical timebase is
the video timeline: annotations are authored in it, and sensor streams are
mapped into it during preprocessing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """A stream or annotation file could not be parsed."""


class SchemaError(ValueError):
    """File contents disagree with the expected channel layout."""


class DataError(ValueError):
    """Parsed data violates a stream invariant (e.g. decreasing timestamps)."""


class Hand(Enum):
    LEFT = "left"
    RIGHT = "right"


class SensorType(Enum):
    ACC = "acc"
    GYRO = "gyro"
    QUAT = "quat"
    CAPA = "capa"

    @property
    def channel_count(self) -> int:
        return _CHANNEL_COUNTS[self]

    @property
    def channel_names(self) -> tuple[str, ...]:
        return _CHANNEL_NAMES[self]

    @property
    def nominal_rate(self) -> float:
        """Samples per second: watch sensors run at 100 Hz, glove CAPA at 50 Hz."""
        return 50.0 if self is SensorType.CAPA else 100.0


_CHANNEL_COUNTS = {
    SensorType.ACC: 3,
    SensorType.GYRO: 3,
    SensorType.QUAT: 4,
    SensorType.CAPA: 4,
}

_CHANNEL_NAMES = {
    SensorType.ACC: ("ACC_X", "ACC_Y", "ACC_Z"),
    SensorType.GYRO: ("GYRO_X", "GYRO_Y", "GYRO_Z"),
    SensorType.QUAT: ("QUAT_W", "QUAT_X", "QUAT_Y", "QUAT_Z"),
    SensorType.CAPA: ("CAPA_0", "CAPA_1", "CAPA_2", "CAPA_3"),
}


@dataclass(frozen=True)
class ModalityPair:
    """One (hand, sensor) combination; the full set has cardinality 8."""

    hand: Hand
    sensor: SensorType

    def __lt__(self, other: "ModalityPair") -> bool:
        return (self.hand.value, self.sensor.value) < (other.hand.value, other.sensor.value)

    @property
    def name(self) -> str:
        return f"{self.hand.value}_{self.sensor.value}"

    @classmethod
    def from_name(cls, name: str) -> "ModalityPair":
        hand_s, _, sensor_s = name.partition("_")
        return cls(Hand(hand_s), SensorType(sensor_s))

    def __repr__(self) -> str:
        return f"ModalityPair({self.name})"


def all_modality_pairs() -> tuple[ModalityPair, ...]:
    """All 8 pairs in canonical (hand-major) order."""
    return tuple(
        ModalityPair(h, s) for h in (Hand.LEFT, Hand.RIGHT) for s in SensorType
    )


# -- gesture labels ------------------------------------------------------

_LABEL_NAMES = (
    "Brake",
    "Brake Fire Left",
    "Brake Fire Right",
    "Come Close",
    "Cut Engine Left",
    "Cut Engine Right",
    "Down",
    "Engine Start Left",
    "Engine Start Right",
    "Follow",
    "Left",
    "Move Away",
    "Negative",
    "Release Brake",
    "Right",
    "Slow Down",
    "Stop",
    "Straight",
    "Take Photo",
    "Up",
    "Null Class",
)

NULL_LABEL_ID = 20
NUM_GESTURE_CLASSES = 20  # Null excluded


@dataclass(frozen=True)
class GestureLabel:
    id: int
    name: str = field(compare=False)

    def __post_init__(self):
        if not 0 <= self.id <= NULL_LABEL_ID:
            raise ValueError(f"label id {self.id} outside 0..{NULL_LABEL_ID}")
        expected = _LABEL_NAMES[self.id]
        if self.name != expected:
            raise ValueError(f"label {self.id} must be named {expected!r}")

    @property
    def is_null(self) -> bool:
        return self.id == NULL_LABEL_ID

    @classmethod
    def from_id(cls, label_id: int) -> "GestureLabel":
        return cls(label_id, _LABEL_NAMES[label_id])

    @classmethod
    def from_name(cls, name: str) -> "GestureLabel":
        return cls(_LABEL_NAMES.index(name), name)


NULL_LABEL = GestureLabel.from_id(NULL_LABEL_ID)


def label_map() -> list[tuple[int, str]]:
    """The full (id, name) gesture table, ids 0..20 with 20 = Null."""
    return [(i, n) for i, n in enumerate(_LABEL_NAMES)]


# -- streams, annotations, sessions --------------------------------------


@dataclass
class SensorStream:
    """A single device/sensor's timestamped multi-channel series.

    ``values`` is [num_samples x channel_count] float64; timestamps are
    seconds in whatever clock the stream currently lives in (raw device
    clock before alignment, video time after).
    """

    pair: ModalityPair
    timestamps: np.ndarray
    values: np.ndarray
    nominal_rate: float = 0.0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.nominal_rate <= 0:
            self.nominal_rate = self.pair.sensor.nominal_rate
        if self.values.ndim != 2:
            raise SchemaError(f"{self.pair.name}: values must be 2-D")
        if self.values.shape[1] != self.pair.sensor.channel_count:
            raise SchemaError(
                f"{self.pair.name}: expected {self.pair.sensor.channel_count} "
                f"channels, got {self.values.shape[1]}"
            )
        if len(self.timestamps) != len(self.values):
            raise SchemaError(f"{self.pair.name}: timestamp/value length mismatch")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError(f"{self.pair.name}: timestamps not strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0


@dataclass(frozen=True)
class Annotation:
    """A labeled gesture interval in the video timebase."""

    label: GestureLabel
    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise DataError(f"annotation start {self.start} must precede end {self.end}")


@dataclass
class Session:
    """One participant-session: streams keyed by pair, plus annotations.

    Missing modality pairs are simply absent from ``streams``; downstream
    consumers must handle absence explicitly (modality-ablation runs rely
    on it). ``aux_streams`` holds parsed-but-unused extras such as the
    glove-internal IMU channels.
    """

    participant_id: str
    session_id: str
    streams: dict[ModalityPair, SensorStream]
    annotations: list[Annotation]
    video_duration: float
    clap_times: list[float] = field(default_factory=list)
    aux_streams: dict[str, SensorStream] = field(default_factory=dict)

    def __post_init__(self):
        if not self.streams:
            raise DataError("session must contain at least one stream")
        for ann in self.annotations:
            if ann.start < 0 or ann.end > self.video_duration + 1e-9:
                raise DataError(
                    f"annotation [{ann.start}, {ann.end}] outside "
                    f"[0, {self.video_duration}]"
                )
        spans = sorted((a.start, a.end) for a in self.annotations)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0 - 1e-12:
                raise DataError(f"annotations overlap near t={s1}")


@dataclass
class LabeledWindow:
    """A fixed-duration multi-modality slice with a vote-assigned label.

    ``tensors`` maps each present pair to a [T x C] float64 array where
    T = round(window_seconds * nominal_rate) for that pair's sensor.
    """

    label: GestureLabel
    tensors: dict[ModalityPair, np.ndarray]
    participant_id: str
    session_id: str
    start_time: float

    @property
    def source(self) -> tuple[str, str, float]:
        return (self.participant_id, self.session_id, self.start_time)


# -- on-disk session format ----------------------------------------------

ANNOTATION_FILENAME = "annotations.json"
_AUX_SENSORS = {"glove_acc": SensorType.ACC, "glove_gyro": SensorType.GYRO}


def _parse_stream_csv(path: Path, pair: ModalityPair) -> SensorStream:
    expected_cols = 1 + pair.sensor.channel_count
    times: list[float] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        expected_header = "t," + ",".join(pair.sensor.channel_names)
        if header.split(",")[0] != "t":
            raise ParseError(f"{path.name}: line 1: header must start with 't'")
        if len(header.split(",")) != expected_cols:
            raise SchemaError(
                f"{path.name}: header has {len(header.split(','))} columns, "
                f"expected {expected_cols} ({expected_header})"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != expected_cols:
                raise SchemaError(
                    f"{path.name}: line {lineno}: {len(parts)} columns, "
                    f"expected {expected_cols}"
                )
            try:
                nums = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(f"{path.name}: line {lineno}: {exc}") from None
            times.append(nums[0])
            rows.append(nums[1:])
    if not rows:
        raise ParseError(f"{path.name}: no data rows")
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(rows, dtype=np.float64)
    # cleaning: drop rows repeating the previous timestamp, then require
    # strictly-increasing order
    if len(t) > 1:
        keep = np.concatenate(([True], np.diff(t) != 0.0))
        t, v = t[keep], v[keep]
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise DataError(f"{path.name}: timestamps decrease")
    return SensorStream(pair=pair, timestamps=t, values=v)


def _format_float(x: float) -> str:
    return repr(float(x))


def load_session(dir_path: str | Path) -> Session:
    """Load one session directory into a validated :class:`Session`.

    Absent stream files yield absent entries rather than errors; the glove
    IMU files (``*_glove_acc.csv`` / ``*_glove_gyro.csv``) are parsed into
    ``aux_streams`` when present but never become model inputs.
    """
    dir_path = Path(dir_path)
    ann_path = dir_path / ANNOTATION_FILENAME
    if not ann_path.exists():
        raise ParseError(f"{ann_path}: annotation file missing")
    with open(ann_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{ann_path.name}: {exc}") from None
    try:
        video_duration = float(meta["video_duration"])
        annotations = [
            Annotation(GestureLabel.from_id(int(a["label"])), float(a["start"]), float(a["end"]))
            for a in meta["annotations"]
        ]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{ann_path.name}: bad annotation structure: {exc}") from None
    clap_times = [float(t) for t in meta.get("clap_times", [])]

    streams: dict[ModalityPair, SensorStream] = {}
    for pair in all_modality_pairs():
        path = dir_path / f"{pair.name}.csv"
        if path.exists():
            streams[pair] = _parse_stream_csv(path, pair)
    aux: dict[str, SensorStream] = {}
    for hand in Hand:
        for suffix, sensor in _AUX_SENSORS.items():
            path = dir_path / f"{hand.value}_{suffix}.csv"
            if path.exists():
                aux[f"{hand.value}_{suffix}"] = _parse_stream_csv(
                    path, ModalityPair(hand, sensor)
                )

    participant_id = str(meta.get("participant_id", dir_path.parent.name or "unknown"))
    session_id = str(meta.get("session_id", dir_path.name))
    return Session(
        participant_id=participant_id,
        session_id=session_id,
        streams=streams,
        annotations=annotations,
        video_duration=video_duration,
        clap_times=clap_times,
        aux_streams=aux,
    )


def save_session(session: Session, dir_path: str | Path) -> None:
    """Write a session back to disk in the canonical CSV/JSON layout.

    Floats are written with shortest round-trip formatting, so
    save -> load -> save reproduces byte-identical stream files.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for pair, stream in session.streams.items():
        path = dir_path / f"{pair.name}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t," + ",".join(pair.sensor.channel_names) + "\n")
            for t, row in zip(stream.timestamps, stream.values):
                fh.write(
                    _format_float(t) + "," + ",".join(_format_float(x) for x in row) + "\n"
                )
    meta = {
        "participant_id": session.participant_id,
        "session_id": session.session_id,
        "video_duration": session.video_duration,
        "clap_times": list(session.clap_times),
        "annotations": [
            {"label": a.label.id, "start": a.start, "end": a.end}
            for a in session.annotations
        ],
    }
    with open(dir_path / ANNOTATION_FILENAME, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
