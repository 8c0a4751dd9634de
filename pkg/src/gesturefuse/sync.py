"""Stream cleaning, clap-anchor detection, and video-timebase alignment.

Sensor and video clocks disagree by an (approximately) affine map: the
recording protocol places five claps at the start and end of every session,
visible as acceleration spikes on the wrist and markable in the video. The
mean time of each clap cluster anchors an affine map from sensor time onto
the video timeline; streams are then resampled onto a uniform grid so every
window has a fixed sample count per modality.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gesturefuse.datamodel import Hand, SensorStream, SensorType, Session

SIGMA_FLOOR = 1e-8

# clap detector defaults: five deliberate claps ~0.5 s apart form one
# cluster, session body separates the leading and trailing clusters
CLAP_STD_MULTIPLIER = 4.0
CLAP_MIN_SEPARATION = 0.3
CLAP_CLUSTER_GAP = 10.0
CLAP_WINDOW_MARGIN = 0.5


class SyncError(RuntimeError):
    """Clap anchors could not be established or are degenerate."""


@dataclass(frozen=True)
class SyncAnchors:
    """Cluster-anchor times: leading and trailing clap-cluster means.

    Both lists are strictly increasing with length >= 2; the first and last
    entries define the affine sensor->video map.
    """

    sensor_claps: tuple[float, ...]
    video_claps: tuple[float, ...]

    def __post_init__(self):
        for name, seq in (("sensor", self.sensor_claps), ("video", self.video_claps)):
            if len(seq) < 2:
                raise SyncError(f"{name} anchors need >= 2 entries, got {len(seq)}")
            if np.any(np.diff(seq) <= 0):
                raise SyncError(f"{name} anchors must be strictly increasing")

    @classmethod
    def from_clap_times(
        cls,
        sensor_times: list[float],
        video_times: list[float],
        cluster_gap: float = CLAP_CLUSTER_GAP,
    ) -> "SyncAnchors":
        """Reduce raw clap times on both sides to [leading mean, trailing mean]."""
        return cls(
            tuple(cluster_anchor_times(sensor_times, cluster_gap)),
            tuple(cluster_anchor_times(video_times, cluster_gap)),
        )


def standardize(stream: SensorStream, sigma_floor: float = SIGMA_FLOOR) -> SensorStream:
    """Zero-mean / unit-std each channel over the whole stream (per session).

    Population statistics; dead channels (std below ``sigma_floor``) map
    to all-zero rather than dividing by ~0.
    """
    if len(stream) == 0:
        raise ValueError("cannot standardize an empty stream")
    mean = stream.values.mean(axis=0)
    std = stream.values.std(axis=0)
    std = np.maximum(std, sigma_floor)
    return replace(stream, values=(stream.values - mean) / std)


def detect_claps(
    acc_stream: SensorStream,
    k: float = CLAP_STD_MULTIPLIER,
    min_separation: float = CLAP_MIN_SEPARATION,
) -> list[float]:
    """Timestamps of acceleration-magnitude spikes (the sync claps).

    A sample qualifies when the Euclidean channel magnitude exceeds
    mean + k*std and is the largest sample within ``min_separation`` on
    either side. Raises :class:`SyncError` when fewer than two peaks are
    found.
    """
    if acc_stream.pair.sensor is not SensorType.ACC:
        raise ValueError("clap detection expects an ACC stream")
    mag = np.linalg.norm(acc_stream.values, axis=1)
    threshold = mag.mean() + k * mag.std()
    above = np.flatnonzero(mag > threshold)
    if len(above) == 0:
        raise SyncError("no acceleration spikes exceed the clap threshold")

    t = acc_stream.timestamps
    peaks: list[float] = []
    # greedy scan: within each run of candidates closer than min_separation,
    # keep only the strongest sample
    best_idx = above[0]
    last_t = t[best_idx]
    for idx in above[1:]:
        if t[idx] - last_t < min_separation:
            if mag[idx] > mag[best_idx]:
                best_idx = idx
        else:
            peaks.append(float(t[best_idx]))
            best_idx = idx
        last_t = t[idx]
    peaks.append(float(t[best_idx]))
    if len(peaks) < 2:
        raise SyncError(f"only {len(peaks)} clap peak(s) found; need >= 2")
    return peaks


def cluster_anchor_times(times: list[float], cluster_gap: float = CLAP_CLUSTER_GAP) -> list[float]:
    """Mean time of the leading and trailing clap clusters.

    Clusters are maximal runs separated by gaps larger than ``cluster_gap``;
    interior spurious clusters are ignored. A single cluster cannot anchor
    both ends of a session and raises :class:`SyncError`.
    """
    if len(times) < 2:
        raise SyncError("need at least two clap times to form anchors")
    ts = np.sort(np.asarray(times, dtype=np.float64))
    breaks = np.flatnonzero(np.diff(ts) > cluster_gap)
    if len(breaks) == 0:
        raise SyncError("all claps fall in one cluster; cannot anchor both ends")
    lead = ts[: breaks[0] + 1]
    trail = ts[breaks[-1] + 1 :]
    return [float(lead.mean()), float(trail.mean())]


def clap_intervals(times: list[float], cluster_gap: float = CLAP_CLUSTER_GAP,
                   margin: float = CLAP_WINDOW_MARGIN) -> list[tuple[float, float]]:
    """[start - margin, end + margin] spans of each clap cluster."""
    ts = np.sort(np.asarray(times, dtype=np.float64))
    if len(ts) == 0:
        return []
    breaks = np.flatnonzero(np.diff(ts) > cluster_gap)
    bounds = [0, *(breaks + 1), len(ts)]
    return [
        (float(ts[a] - margin), float(ts[b - 1] + margin))
        for a, b in zip(bounds, bounds[1:])
    ]


def align_to_video(stream: SensorStream, anchors: SyncAnchors) -> SensorStream:
    """Map sensor timestamps onto the video timeline.

    Affine map sending (first sensor anchor, last sensor anchor) to
    (first video anchor, last video anchor): t' = v0 + (t - s0)*(v1-v0)/(s1-s0).
    The scale factor is the video/sensor span ratio; the offset term handles
    trimmed recordings. Values are untouched.
    """
    s0, s1 = anchors.sensor_claps[0], anchors.sensor_claps[-1]
    v0, v1 = anchors.video_claps[0], anchors.video_claps[-1]
    if s1 == s0:
        raise SyncError("degenerate sensor anchors (equal first/last)")
    scale = (v1 - v0) / (s1 - s0)
    if scale <= 0:
        raise SyncError("anchor map reverses time")
    return replace(stream, timestamps=v0 + (stream.timestamps - s0) * scale)


def resample_to_grid(stream: SensorStream, duration: float | None = None) -> SensorStream:
    """Linearly interpolate onto a uniform grid at the nominal rate.

    The grid starts at t=0 in video time and covers [0, duration]
    (default: the stream's last timestamp). Grid points outside the
    stream's span hold the nearest-edge value.
    """
    rate = stream.nominal_rate
    if duration is None:
        duration = float(stream.timestamps[-1])
    n = int(np.floor(duration * rate)) + 1
    grid = np.arange(n, dtype=np.float64) / rate
    out = np.empty((n, stream.values.shape[1]), dtype=np.float64)
    for c in range(stream.values.shape[1]):
        out[:, c] = np.interp(grid, stream.timestamps, stream.values[:, c])
    return replace(stream, timestamps=grid, values=out)


def preprocess_session(
    session: Session,
    sync: bool = True,
    clap_k: float = CLAP_STD_MULTIPLIER,
    clap_min_separation: float = CLAP_MIN_SEPARATION,
    cluster_gap: float = CLAP_CLUSTER_GAP,
) -> tuple[Session, list[tuple[float, float]]]:
    """Align, resample, and standardize every stream of a session.

    Returns the processed session plus the clap-cluster intervals in video
    time (for window exclusion). With ``sync=False``, or when no ACC stream
    or no video clap times are available, streams are taken as already being
    in video time (identity alignment).
    """
    anchors = None
    sensor_clap_times: list[float] = []
    if sync:
        acc_stream = next(
            (session.streams[p] for p in sorted(session.streams) if p.sensor is SensorType.ACC),
            None,
        )
        if acc_stream is not None and len(session.clap_times) >= 2:
            sensor_clap_times = detect_claps(acc_stream, k=clap_k, min_separation=clap_min_separation)
            anchors = SyncAnchors.from_clap_times(
                sensor_clap_times, session.clap_times, cluster_gap
            )

    processed: dict = {}
    for pair, stream in session.streams.items():
        if anchors is not None:
            stream = align_to_video(stream, anchors)
        stream = resample_to_grid(stream, duration=session.video_duration)
        processed[pair] = standardize(stream)

    if anchors is not None:
        # map detected sensor clap times into video time for window exclusion
        s0, s1 = anchors.sensor_claps[0], anchors.sensor_claps[-1]
        v0, v1 = anchors.video_claps[0], anchors.video_claps[-1]
        scale = (v1 - v0) / (s1 - s0)
        video_side = [v0 + (t - s0) * scale for t in sensor_clap_times]
        intervals = clap_intervals(video_side, cluster_gap)
    elif session.clap_times:
        intervals = clap_intervals(session.clap_times, cluster_gap)
    else:
        intervals = []

    out = Session(
        participant_id=session.participant_id,
        session_id=session.session_id,
        streams=processed,
        annotations=session.annotations,
        video_duration=session.video_duration,
        clap_times=session.clap_times,
        aux_streams=session.aux_streams,
    )
    return out, intervals
