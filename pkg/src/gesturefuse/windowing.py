"""Sliding-window segmentation, threshold-vote labeling, and window storage.

Windows are cut on the video timeline (the common denominator across
modalities with different rates) and labeled by the fraction of the window
covered by a single gesture annotation. Windows that meet no class's
threshold are Null and excluded from training, as are windows touching the
synchronization claps.

On-disk format: a binary record file (``.bin``) holding length-prefixed
records (label id + per-pair shape header + row-major float64 payload) next
to a JSON index carrying per-window provenance for split generation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gesturefuse.datamodel import (
    Annotation,
    GestureLabel,
    Hand,
    LabeledWindow,
    ModalityPair,
    NULL_LABEL,
    SensorType,
    Session,
)

WINDOW_FILE_MAGIC = b"GFWR"
WINDOW_FILE_VERSION = 1

_HANDS = (Hand.LEFT, Hand.RIGHT)
_SENSORS = (SensorType.ACC, SensorType.GYRO, SensorType.QUAT, SensorType.CAPA)


@dataclass(frozen=True)
class WindowingConfig:
    window_seconds: float = 3.0
    step_seconds: float = 1.0
    vote_threshold: float = 0.75

    def __post_init__(self):
        if not 0 < self.step_seconds <= self.window_seconds:
            raise ValueError("step must satisfy 0 < step <= window")
        if not 0 < self.vote_threshold <= 1:
            raise ValueError("vote threshold must be in (0, 1]")


def window_starts(duration: float, cfg: WindowingConfig) -> list[float]:
    """Start times t = 0, step, 2*step, ... while t + window <= duration."""
    starts = []
    k = 0
    while k * cfg.step_seconds + cfg.window_seconds <= duration:
        starts.append(k * cfg.step_seconds)
        k += 1
    return starts


def expected_samples(sensor: SensorType, window_seconds: float) -> int:
    return int(round(window_seconds * sensor.nominal_rate))


def vote_label(
    window_interval: tuple[float, float],
    annotations: list[Annotation],
    cfg: WindowingConfig,
) -> GestureLabel:
    """Assign the class covering >= vote_threshold of the window, else Null.

    The overlap fraction uses the full window length as denominator. With a
    threshold above 0.5 and non-overlapping annotations at most one class
    can qualify; this is asserted rather than assumed.
    """
    start, end = window_interval
    totals: dict[int, float] = {}
    for ann in annotations:
        ov = min(end, ann.end) - max(start, ann.start)
        if ov > 0:
            totals[ann.label.id] = totals.get(ann.label.id, 0.0) + ov
    qualifying = [
        lid for lid, tot in totals.items() if tot / cfg.window_seconds >= cfg.vote_threshold
    ]
    if cfg.vote_threshold > 0.5:
        assert len(qualifying) <= 1, "non-overlapping annotations cannot double-qualify"
    if not qualifying:
        return NULL_LABEL
    return GestureLabel.from_id(min(qualifying))


def segment(session: Session, cfg: WindowingConfig) -> list[LabeledWindow]:
    """Slice an aligned, on-grid session into labeled windows.

    Every present modality pair contributes exactly
    round(window_seconds * nominal_rate) samples per window; a session
    shorter than one window yields an empty list.
    """
    windows: list[LabeledWindow] = []
    for t in window_starts(session.video_duration, cfg):
        tensors: dict[ModalityPair, np.ndarray] = {}
        ok = True
        for pair, stream in session.streams.items():
            rate = stream.nominal_rate
            n = expected_samples(pair.sensor, cfg.window_seconds)
            i0 = int(round(t * rate))
            if i0 + n > len(stream):
                ok = False
                break
            tensors[pair] = stream.values[i0 : i0 + n].copy()
        if not ok:
            continue
        label = vote_label((t, t + cfg.window_seconds), session.annotations, cfg)
        windows.append(
            LabeledWindow(
                label=label,
                tensors=tensors,
                participant_id=session.participant_id,
                session_id=session.session_id,
                start_time=t,
            )
        )
    return windows


def filter_training_windows(
    windows: list[LabeledWindow],
    clap_intervals: list[tuple[float, float]],
    window_seconds: float = 3.0,
) -> list[LabeledWindow]:
    """Drop Null-labeled windows and windows intersecting any clap interval."""
    kept = []
    for w in windows:
        if w.label.is_null:
            continue
        w0, w1 = w.start_time, w.start_time + window_seconds
        if any(w0 < c1 and c0 < w1 for c0, c1 in clap_intervals):
            continue
        kept.append(w)
    return kept


# -- window record file ----------------------------------------------------


def save_windows(
    windows: list[LabeledWindow],
    bin_path: str | Path,
    index_path: str | Path | None = None,
    config_echo: dict | None = None,
) -> None:
    """Write windows as length-prefixed binary records plus a JSON index."""
    bin_path = Path(bin_path)
    if index_path is None:
        index_path = bin_path.with_suffix(".index.json")
    index_records = []
    with open(bin_path, "wb") as fh:
        fh.write(WINDOW_FILE_MAGIC)
        fh.write(struct.pack("<I", WINDOW_FILE_VERSION))
        for i, w in enumerate(windows):
            payload = bytearray()
            payload += struct.pack("<BB", w.label.id, len(w.tensors))
            for pair in sorted(w.tensors):
                arr = np.ascontiguousarray(w.tensors[pair], dtype=np.float64)
                payload += struct.pack(
                    "<BBII",
                    _HANDS.index(pair.hand),
                    _SENSORS.index(pair.sensor),
                    arr.shape[0],
                    arr.shape[1],
                )
                payload += arr.tobytes()
            offset = fh.tell()
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            index_records.append(
                {
                    "id": i,
                    "offset": offset,
                    "label": w.label.id,
                    "participant": w.participant_id,
                    "session": w.session_id,
                    "start": w.start_time,
                }
            )
    index = {
        "version": WINDOW_FILE_VERSION,
        "count": len(windows),
        "records": index_records,
    }
    if config_echo is not None:
        index["config"] = config_echo
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")


def load_windows(
    bin_path: str | Path, index_path: str | Path | None = None
) -> list[LabeledWindow]:
    """Read a window record file back into :class:`LabeledWindow` objects."""
    bin_path = Path(bin_path)
    if index_path is None:
        index_path = bin_path.with_suffix(".index.json")
    with open(index_path, "r", encoding="utf-8") as fh:
        index = json.load(fh)
    if index.get("version") != WINDOW_FILE_VERSION:
        raise ValueError(f"unsupported window index version {index.get('version')}")
    with open(bin_path, "rb") as fh:
        data = fh.read()
    if data[:4] != WINDOW_FILE_MAGIC:
        raise ValueError(f"{bin_path}: not a window record file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WINDOW_FILE_VERSION:
        raise ValueError(f"{bin_path}: unsupported version {version}")

    windows = []
    for rec in index["records"]:
        off = rec["offset"]
        (rec_len,) = struct.unpack_from("<I", data, off)
        pos = off + 4
        end = pos + rec_len
        label_id, n_pairs = struct.unpack_from("<BB", data, pos)
        pos += 2
        tensors: dict[ModalityPair, np.ndarray] = {}
        for _ in range(n_pairs):
            h_idx, s_idx, t_dim, c_dim = struct.unpack_from("<BBII", data, pos)
            pos += 10
            nbytes = t_dim * c_dim * 8
            arr = np.frombuffer(data, dtype="<f8", count=t_dim * c_dim, offset=pos)
            tensors[ModalityPair(_HANDS[h_idx], _SENSORS[s_idx])] = arr.reshape(
                t_dim, c_dim
            ).copy()
            pos += nbytes
        if pos != end:
            raise ValueError(f"{bin_path}: record {rec['id']} length mismatch")
        windows.append(
            LabeledWindow(
                label=GestureLabel.from_id(label_id),
                tensors=tensors,
                participant_id=rec["participant"],
                session_id=rec["session"],
                start_time=float(rec["start"]),
            )
        )
    return windows
