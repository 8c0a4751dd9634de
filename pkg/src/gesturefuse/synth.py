"""Parametric generator of synthetic multi-session gesture recordings.

Each of the 20 gesture classes gets a deterministic waveform codebook per
inertial sensor: random-but-fixed per-channel amplitudes, phases, and a base
frequency, shaped by a Hann envelope over the gesture span. Handed classes
(".. Left" / ".. Right") put almost all energy on their named hand; bilateral
classes mirror the x-axis channel across hands; the "Move Away" template is a
right-hand-dominant horizontal accelerometer burst.

Capacitive channels are deliberately near-uninformative: every gesture
produces the same smooth press-and-hold bump shape with a random amplitude,
and only "Take Photo" draws its amplitude from a higher, narrower band (the
sustained finger-frame pose). Class identity is therefore unrecoverable from
the glove channels except through that amplitude continuum, which is what
makes capacitive-only models collapse onto "Take Photo".

Sessions carry five clap spikes at both ends on the wrist accelerometers,
ground-truth annotations, and per-participant style offsets (amplitude,
phase, and a small frequency factor) that make unseen-participant splits
measurably harder than unseen-session splits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from gesturefuse.datamodel import (
    Annotation,
    GestureLabel,
    Hand,
    ModalityPair,
    SensorStream,
    SensorType,
    Session,
    all_modality_pairs,
    save_session,
)

_TEMPLATE_ROOT_SEED = 9421

MOVE_AWAY_ID = 11
TAKE_PHOTO_ID = 18
_LEFT_CLASSES = {1, 4, 7, 10}
_RIGHT_CLASSES = {2, 5, 8, 14}

_BASELINES = {
    SensorType.ACC: np.array([0.0, 0.0, 9.81]),
    SensorType.GYRO: np.zeros(3),
    SensorType.QUAT: np.array([1.0, 0.0, 0.0, 0.0]),
    SensorType.CAPA: np.array([40.0, 44.0, 48.0, 52.0]),
}

CLAP_AMPLITUDE = 12.0
CLAP_SPACING = 0.5
CLAPS_PER_CLUSTER = 5

# capacitive press-bump amplitude bands: all classes share the bump shape;
# Take Photo draws from the denser high band so only the amplitude continuum
# separates it
CAPA_BUMP_MAX = 2.0
CAPA_PHOTO_RANGE = (0.4, 2.0)
_CAPA_WEIGHTS = np.array([1.0, 0.8, 0.9, 0.7])


@dataclass(frozen=True)
class SynthConfig:
    num_participants: int = 6
    sessions_per_participant: int = 5
    repetitions_per_class: int = 4          # 4 x 20 classes = 80 per session
    duration_range: tuple[float, float] = (1.5, 2.5)
    gap_range: tuple[float, float] = (0.6, 1.4)
    noise_sigma: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if min(self.num_participants, self.sessions_per_participant,
               self.repetitions_per_class) <= 0:
            raise ValueError("counts must be positive")
        # durations below vote_threshold * window_seconds can never produce a
        # labeled window; the default range deliberately spans the boundary
        if self.duration_range[0] > self.duration_range[1]:
            raise ValueError("bad duration range")

    @property
    def gestures_per_session(self) -> int:
        return 20 * self.repetitions_per_class


@dataclass(frozen=True)
class _Template:
    amp: np.ndarray      # per channel
    phase: np.ndarray    # per channel
    freq: float


def _codebook(class_id: int, sensor: SensorType) -> _Template:
    """Deterministic per-(class, sensor) waveform signature."""
    rng = np.random.default_rng(
        np.random.SeedSequence([_TEMPLATE_ROOT_SEED, class_id, list(SensorType).index(sensor)])
    )
    c = sensor.channel_count
    amp = rng.uniform(0.5, 1.5, size=c) * rng.choice([-1.0, 1.0], size=c)
    phase = rng.uniform(0.0, 2 * np.pi, size=c)
    freq = float(rng.uniform(1.2, 4.2))
    if sensor is SensorType.QUAT:
        amp = amp * 0.35
    if class_id == MOVE_AWAY_ID and sensor is SensorType.ACC:
        amp = np.array([1.6, 0.15, 0.1]) * np.sign(amp)
    return _Template(amp=amp, phase=phase, freq=freq)


def _hand_gain(class_id: int, hand: Hand) -> float:
    if class_id in _LEFT_CLASSES:
        return 1.25 if hand is Hand.LEFT else 0.12
    if class_id in _RIGHT_CLASSES or class_id == MOVE_AWAY_ID:
        return 1.25 if hand is Hand.RIGHT else 0.15
    return 1.0


def _mirror(class_id: int, hand: Hand, amp: np.ndarray) -> np.ndarray:
    # bilateral gestures mirror across the body: flip the x-like channel on
    # the left hand
    if hand is Hand.LEFT and class_id not in _LEFT_CLASSES | _RIGHT_CLASSES:
        out = amp.copy()
        out[0] = -out[0]
        return out
    return amp


def _press_envelope(t: np.ndarray, start: float, end: float, edge: float = 0.2) -> np.ndarray:
    """Ramp-hold-ramp shape shared by every capacitive press event."""
    up = np.clip((t - start) / edge, 0.0, 1.0)
    down = np.clip((end - t) / edge, 0.0, 1.0)
    return np.minimum(up, down)


@dataclass(frozen=True)
class _ParticipantStyle:
    amp_scale: float
    phase: float
    freq_factor: float


def _participant_style(seed: int, participant_idx: int) -> _ParticipantStyle:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101, participant_idx]))
    return _ParticipantStyle(
        amp_scale=float(rng.uniform(0.8, 1.2)),
        phase=float(rng.uniform(0.0, 2 * np.pi)),
        freq_factor=float(rng.uniform(0.92, 1.08)),
    )


def _schedule_session(cfg: SynthConfig, rng: np.random.Generator):
    """Clap times, gesture (label, start, end) list, and video duration."""
    labels = np.repeat(np.arange(20), cfg.repetitions_per_class)
    rng.shuffle(labels)
    lead_claps = [1.0 + CLAP_SPACING * k for k in range(CLAPS_PER_CLUSTER)]
    cursor = lead_claps[-1] + 2.5
    gestures = []
    for lab in labels:
        d = float(rng.uniform(*cfg.duration_range))
        gestures.append((int(lab), cursor, cursor + d))
        cursor += d + float(rng.uniform(*cfg.gap_range))
    cursor += 2.0
    trail_claps = [cursor + CLAP_SPACING * k for k in range(CLAPS_PER_CLUSTER)]
    video_duration = trail_claps[-1] + 1.5
    return lead_claps + trail_claps, gestures, video_duration


def generate_session(cfg: SynthConfig, participant_idx: int, session_idx: int) -> Session:
    """One fully-annotated session with streams already in video time."""
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, participant_idx, session_idx])
    )
    style = _participant_style(cfg.seed, participant_idx)
    clap_times, gestures, video_duration = _schedule_session(cfg, rng)

    streams: dict[ModalityPair, SensorStream] = {}
    grids = {}
    for pair in all_modality_pairs():
        rate = pair.sensor.nominal_rate
        n = int(np.floor(video_duration * rate)) + 1
        t = np.arange(n, dtype=np.float64) / rate
        grids[pair] = t
        streams[pair] = SensorStream(
            pair=pair,
            timestamps=t,
            values=np.tile(_BASELINES[pair.sensor], (n, 1)),
        )

    for label_id, g0, g1 in gestures:
        jitter = float(rng.uniform(0.9, 1.1))
        capa_amp = (
            float(rng.uniform(*CAPA_PHOTO_RANGE))
            if label_id == TAKE_PHOTO_ID
            else float(rng.uniform(0.0, CAPA_BUMP_MAX))
        )
        for pair in all_modality_pairs():
            t = grids[pair]
            i0, i1 = np.searchsorted(t, (g0, g1))
            seg = t[i0:i1]
            if len(seg) == 0:
                continue
            vals = streams[pair].values
            if pair.sensor is SensorType.CAPA:
                env = _press_envelope(seg, g0, g1)
                vals[i0:i1] += capa_amp * env[:, None] * _CAPA_WEIGHTS
                continue
            tpl = _codebook(label_id, pair.sensor)
            gain = _hand_gain(label_id, pair.hand) * style.amp_scale * jitter
            amp = _mirror(label_id, pair.hand, tpl.amp) * gain
            env = np.sin(np.pi * (seg - g0) / (g1 - g0)) ** 2  # Hann window
            arg = (
                2 * np.pi * tpl.freq * style.freq_factor * (seg - g0)[:, None]
                + tpl.phase[None, :]
                + style.phase
            )
            vals[i0:i1] += amp[None, :] * np.sin(arg) * env[:, None]

    # five claps at both ends of the session on both wrist accelerometers
    for hand in Hand:
        pair = ModalityPair(hand, SensorType.ACC)
        t = grids[pair]
        rate = pair.sensor.nominal_rate
        vals = streams[pair].values
        for tc in clap_times:
            i = int(round(tc * rate))
            if 1 <= i < len(t) - 1:
                vals[i] += CLAP_AMPLITUDE
                vals[i - 1] += 0.4 * CLAP_AMPLITUDE
                vals[i + 1] += 0.4 * CLAP_AMPLITUDE

    if cfg.noise_sigma > 0:
        for pair in all_modality_pairs():
            streams[pair].values += rng.normal(
                0.0, cfg.noise_sigma, size=streams[pair].values.shape
            )

    annotations = [
        Annotation(GestureLabel.from_id(lab), g0, g1) for lab, g0, g1 in gestures
    ]
    return Session(
        participant_id=f"p{participant_idx:02d}",
        session_id=f"s{session_idx:02d}",
        streams=streams,
        annotations=annotations,
        video_duration=video_duration,
        clap_times=clap_times,
    )


def generate_dataset(cfg: SynthConfig) -> list[Session]:
    return [
        generate_session(cfg, p, s)
        for p in range(cfg.num_participants)
        for s in range(cfg.sessions_per_participant)
    ]


def inject_clock_skew(session: Session, skew: float, offset: float) -> Session:
    """Warp sensor clocks by t' = skew*t + offset, leaving video time alone.

    Creates the misalignment the clap-anchored affine alignment must undo;
    annotations and clap times remain in the video timebase.
    """
    if skew <= 0:
        raise ValueError("skew must be positive")
    streams = {
        pair: replace(stream, timestamps=stream.timestamps * skew + offset)
        for pair, stream in session.streams.items()
    }
    return Session(
        participant_id=session.participant_id,
        session_id=session.session_id,
        streams=streams,
        annotations=session.annotations,
        video_duration=session.video_duration,
        clap_times=session.clap_times,
        aux_streams=session.aux_streams,
    )


def write_dataset(cfg: SynthConfig, out_dir: str | Path) -> list[Path]:
    """Generate and save every session under out/<participant>/<session>/."""
    out_dir = Path(out_dir)
    paths = []
    for p in range(cfg.num_participants):
        for s in range(cfg.sessions_per_participant):
            session = generate_session(cfg, p, s)
            path = out_dir / session.participant_id / session.session_id
            save_session(session, path)
            paths.append(path)
    return paths
