"""Multimodal wearable-sensor gesture recognition with interpretable late fusion.

Pipeline: ingest raw sensor CSVs, synchronize them onto the video timeline via
clap anchors, slice into fixed-length labeled windows, train a per-modality
encoder network fused by either summed log-odds (LLR) or modality
self-attention, and evaluate under leave-one-session-out / leave-one-
participant-out cross-validation.
"""

__version__ = "0.1.0"

from gesturefuse.datamodel import (
    Annotation,
    DataError,
    GestureLabel,
    Hand,
    ModalityPair,
    ParseError,
    SchemaError,
    SensorStream,
    Session,
    LabeledWindow,
    SensorType,
    NULL_LABEL_ID,
    all_modality_pairs,
    label_map,
    load_session,
    save_session,
)

__all__ = [
    "Annotation",
    "DataError",
    "GestureLabel",
    "Hand",
    "LabeledWindow",
    "ModalityPair",
    "NULL_LABEL_ID",
    "ParseError",
    "SchemaError",
    "SensorStream",
    "SensorType",
    "Session",
    "all_modality_pairs",
    "label_map",
    "load_session",
    "save_session",
]
