"""The full recognition network: per-modality encoders plus two fusion heads.

Every active (hand, sensor) pair is encoded independently: a 1-D conv subnet
(weights shared across hands per sensor type, so four subnets feed eight
pairs), a two-layer GRU, and a gated attention pool producing one feature
vector per pair. Fusion is either

* ``llr``: a per-pair linear head yields class probabilities, converted to
  log-odds per class and summed across pairs, then passed through a final
  N->N linear layer; or
* ``attention``: scaled dot-product self-attention across the pair axis,
  flattened and reduced to one feature vector, then a final D->N linear.

No nonlinearity sits between fusion and the classification logits, which is
what keeps the per-pair log-odds directly interpretable as contributions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gesturefuse.datamodel import (
    LabeledWindow,
    ModalityPair,
    SensorType,
    all_modality_pairs,
)
from gesturefuse.nn.layers import (
    AttentionPool,
    BatchNorm1d,
    Conv1d,
    GRULayer,
    Linear,
    ReLULayer,
    attention_backward,
    attention_forward,
    softmax,
)
from gesturefuse.nn.multi import MultiAttentionPool, MultiGRU, MultiLinear
from gesturefuse.nn.params import ParamStore

CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1

LLR = "llr"
ATTENTION = "attention"

_SENSOR_ORDER = (SensorType.ACC, SensorType.GYRO, SensorType.QUAT, SensorType.CAPA)


class MissingModalityError(ValueError):
    """A window lacks a pair the model was configured to consume."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or disagrees with its config."""


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    conv_layers: int = 2
    kernel: int = 5
    stride: int = 2
    gru_layers: int = 2
    n_classes: int = 20
    fusion_kind: str = LLR
    llr_clamp: float = 1e-7
    active_pairs: tuple[ModalityPair, ...] = field(default_factory=all_modality_pairs)

    def __post_init__(self):
        if self.fusion_kind not in (LLR, ATTENTION):
            raise ValueError(f"unknown fusion kind {self.fusion_kind!r}")
        if not self.active_pairs:
            raise ValueError("active_pairs must be non-empty")
        object.__setattr__(self, "active_pairs", tuple(sorted(self.active_pairs)))

    @property
    def active_sensors(self) -> tuple[SensorType, ...]:
        present = {p.sensor for p in self.active_pairs}
        return tuple(s for s in _SENSOR_ORDER if s in present)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "conv_layers": self.conv_layers,
            "kernel": self.kernel,
            "stride": self.stride,
            "gru_layers": self.gru_layers,
            "n_classes": self.n_classes,
            "fusion_kind": self.fusion_kind,
            "llr_clamp": self.llr_clamp,
            "active_pairs": [p.name for p in self.active_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["active_pairs"] = tuple(ModalityPair.from_name(n) for n in d["active_pairs"])
        return cls(**d)


@dataclass
class FusionOutput:
    """Single-window inference result plus the fusion-stage internals."""

    logits: np.ndarray                       # [N]
    probs: np.ndarray                        # [N]
    fusion_kind: str
    active_pairs: tuple[ModalityPair, ...]
    fused: np.ndarray                        # pre-final-layer vector ([N] or [D])
    per_pair_llr: np.ndarray | None = None   # [|active|, N]
    per_pair_probs: np.ndarray | None = None  # [|active|, N]
    attention: np.ndarray | None = None      # [|active|, |active|]

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.probs))


def llr_per_pair(probs: np.ndarray) -> np.ndarray:
    """Per-class log-odds ln(p_i / (1 - p_i)) for a normalized vector."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.log(probs) - np.log1p(-probs)


def fuse_llr(per_pair: np.ndarray) -> np.ndarray:
    """Elementwise sum over the pair axis (axis 0 of [|pairs|, N])."""
    per_pair = np.asarray(per_pair, dtype=np.float64)
    if per_pair.shape[0] < 1:
        raise ValueError("need at least one pair")
    return per_pair.sum(axis=0)


class FusionModel:
    """All learned parameters plus forward/backward for one fusion kind."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.store = ParamStore()
        d = config.feature_dim
        n = config.n_classes

        self.conv_stacks: dict[SensorType, list] = {}
        for sensor in config.active_sensors:
            stack = []
            c_in = sensor.channel_count
            for i in range(config.conv_layers):
                conv = Conv1d(
                    self.store, f"conv/{sensor.value}/{i}", c_in, d,
                    config.kernel, config.stride, rng,
                )
                bn = BatchNorm1d(self.store, f"conv/{sensor.value}/{i}/bn", d)
                stack.append((conv, ReLULayer(), bn))
                c_in = d
            self.conv_stacks[sensor] = stack

        self.grus: dict[ModalityPair, list[GRULayer]] = {}
        self.pools: dict[ModalityPair, AttentionPool] = {}
        for pair in config.active_pairs:
            self.grus[pair] = [
                GRULayer(self.store, f"enc/{pair.name}/gru{i}", d, d, rng)
                for i in range(config.gru_layers)
            ]
            self.pools[pair] = AttentionPool(self.store, f"enc/{pair.name}/pool", d, rng)

        if config.fusion_kind == LLR:
            self.pair_heads = {
                pair: Linear(self.store, f"head/{pair.name}", d, n, rng)
                for pair in config.active_pairs
            }
            self.final = Linear(self.store, "final", n, n, rng)
            # start the refinement layer as a scaled identity: the summed
            # log-odds carry a large shared offset (about -|pairs| * ln(N-1))
            # that a random square matrix would scatter into huge logit
            # spread, stalling early training
            self.final.w.value[...] = 0.25 * np.eye(n)
        else:
            self.w_q = Linear(self.store, "fuse/w_q", d, d, rng)
            self.w_k = Linear(self.store, "fuse/w_k", d, d, rng)
            self.w_v = Linear(self.store, "fuse/w_v", d, d, rng)
            m = len(config.active_pairs)
            self.fuse_out = Linear(self.store, "fuse/out", m * d, d, rng)
            self.final = Linear(self.store, "final", d, n, rng)

    # -- forward / backward ------------------------------------------------

    def encode_pair(
        self, pair: ModalityPair, x: np.ndarray, training: bool
    ) -> tuple[np.ndarray, list]:
        """Conv subnet -> GRU stack -> attention pool for one pair; [B,T,C] -> [B,D]."""
        if x.ndim != 3 or x.shape[2] != pair.sensor.channel_count:
            raise ValueError(
                f"{pair.name}: expected [B, T, {pair.sensor.channel_count}] input, "
                f"got {x.shape}"
            )
        trail: list = []
        out = x
        for conv, act, bn in self.conv_stacks[pair.sensor]:
            out, ctx = conv.forward(out)
            trail.append((conv, ctx))
            out, ctx = act.forward(out)
            trail.append((act, ctx))
            out, ctx = bn.forward(out, training)
            trail.append((bn, ctx))
        for gru in self.grus[pair]:
            out, ctx = gru.forward(out)
            trail.append((gru, ctx))
        pool = self.pools[pair]
        out, ctx = pool.forward(out)
        trail.append((pool, ctx))
        return out, trail

    @staticmethod
    def _backward_trail(dout: np.ndarray, trail: list) -> np.ndarray:
        for layer, ctx in reversed(trail):
            dout = layer.backward(dout, ctx)
        return dout

    def _encode_all(
        self, batch: dict[ModalityPair, np.ndarray], training: bool
    ) -> tuple[np.ndarray, list]:
        """Encode every active pair; returns ([P,B,D] features, cache).

        Pairs with equal window lengths run their GRU stacks and pools as one
        stacked computation (an execution detail: parameters stay per pair).
        """
        cfg = self.config
        groups: dict[int, list[int]] = {}
        for idx, pair in enumerate(cfg.active_pairs):
            groups.setdefault(batch[pair].shape[1], []).append(idx)

        feats: list[np.ndarray | None] = [None] * len(cfg.active_pairs)
        cache = []
        for t_len, idxs in groups.items():
            conv_trails = []
            conv_outs = []
            for idx in idxs:
                pair = cfg.active_pairs[idx]
                x = batch[pair]
                if x.ndim != 3 or x.shape[2] != pair.sensor.channel_count:
                    raise ValueError(
                        f"{pair.name}: expected [B, T, {pair.sensor.channel_count}], "
                        f"got {x.shape}"
                    )
                out = x
                trail = []
                for conv, act, bn in self.conv_stacks[pair.sensor]:
                    out, c = conv.forward(out)
                    trail.append((conv, c))
                    out, c = act.forward(out)
                    trail.append((act, c))
                    out, c = bn.forward(out, training)
                    trail.append((bn, c))
                conv_trails.append(trail)
                conv_outs.append(out)
            stacked = np.stack(conv_outs)  # [P,B,T*,D]
            gru_steps = []
            for layer_i in range(cfg.gru_layers):
                mgru = MultiGRU([self.grus[cfg.active_pairs[i]][layer_i] for i in idxs])
                # inference never runs backward; skip the BPTT caches
                stacked, c = mgru.forward(stacked, keep_ctx=training)
                gru_steps.append((mgru, c))
            mpool = MultiAttentionPool([self.pools[cfg.active_pairs[i]] for i in idxs])
            pooled, pool_ctx = mpool.forward(stacked)
            for row, idx in enumerate(idxs):
                feats[idx] = pooled[row]
            cache.append((idxs, conv_trails, gru_steps, (mpool, pool_ctx)))
        return np.stack(feats), cache

    def _backward_encoders(self, dfeats: np.ndarray, enc_cache: list) -> None:
        for idxs, conv_trails, gru_steps, (mpool, pool_ctx) in enc_cache:
            dstack = mpool.backward(np.stack([dfeats[i] for i in idxs]), pool_ctx)
            for mgru, c in reversed(gru_steps):
                dstack = mgru.backward(dstack, c)
            for row, trail in enumerate(conv_trails):
                self._backward_trail(np.ascontiguousarray(dstack[row]), trail)

    def forward_batch(
        self, batch: dict[ModalityPair, np.ndarray], training: bool = False
    ) -> tuple[np.ndarray, dict, dict]:
        """Returns (logits [B,N], cache for backward, extras for reporting).

        extras: 'probs', and per fusion kind 'per_pair_llr'/'per_pair_probs'/
        'fused' or 'attention'/'fused'.
        """
        cfg = self.config
        for pair in cfg.active_pairs:
            if pair not in batch:
                raise MissingModalityError(f"window batch lacks pair {pair.name}")

        feats, enc_cache = self._encode_all(batch, training)  # [P,B,D]

        if cfg.fusion_kind == LLR:
            eps = cfg.llr_clamp
            mhead = MultiLinear([self.pair_heads[p] for p in cfg.active_pairs])
            z, head_ctx = mhead.forward(feats)          # [P,B,N]
            s = softmax(z, axis=-1)
            c = np.clip(s, eps, 1.0 - eps)
            q = c / c.sum(axis=-1, keepdims=True)
            llr = np.log(q) - np.log1p(-q)
            fused = llr.sum(axis=0)                     # [B,N]
            logits, final_ctx = self.final.forward(fused)
            cache = {
                "kind": LLR,
                "enc": enc_cache,
                "mhead": mhead,
                "head_ctx": head_ctx,
                "soft": s,
                "clamped": c,
                "renormed": q,
                "final_ctx": final_ctx,
            }
            extras = {
                "probs": softmax(logits, axis=1),
                "fused": fused,
                "per_pair_llr": llr.transpose(1, 0, 2),     # [B,P,N]
                "per_pair_probs": q.transpose(1, 0, 2),
            }
            return logits, cache, extras

        h = feats.transpose(1, 0, 2)  # [B,M,D]
        q, q_ctx = self.w_q.forward(h)
        k, k_ctx = self.w_k.forward(h)
        v, v_ctx = self.w_v.forward(h)
        o, attn_ctx = attention_forward(q, k, v)
        b = h.shape[0]
        flat = o.reshape(b, -1)
        fused, out_ctx = self.fuse_out.forward(flat)
        logits, final_ctx = self.final.forward(fused)
        cache = {
            "kind": ATTENTION,
            "enc": enc_cache,
            "q_ctx": q_ctx,
            "k_ctx": k_ctx,
            "v_ctx": v_ctx,
            "attn_ctx": attn_ctx,
            "o_shape": o.shape,
            "out_ctx": out_ctx,
            "final_ctx": final_ctx,
        }
        extras = {
            "probs": softmax(logits, axis=1),
            "fused": fused,
            "attention": attn_ctx[3],
        }
        return logits, cache, extras

    def backward_batch(self, dlogits: np.ndarray, cache: dict) -> None:
        cfg = self.config
        if cache["kind"] == LLR:
            dfused = self.final.backward(dlogits, cache["final_ctx"])
            q = cache["renormed"]
            c = cache["clamped"]
            s = cache["soft"]
            # d llr/d q with llr = ln q - ln(1-q), then renormalization,
            # clamp pass-through, and the softmax jacobian
            dq = dfused / (q * (1.0 - q))
            dc = (dq - (dq * q).sum(axis=-1, keepdims=True)) / c.sum(axis=-1, keepdims=True)
            ds = dc * ((s > cfg.llr_clamp) & (s < 1.0 - cfg.llr_clamp))
            dz = s * (ds - (ds * s).sum(axis=-1, keepdims=True))
            dfeats = cache["mhead"].backward(dz, cache["head_ctx"])
            self._backward_encoders(dfeats, cache["enc"])
            return

        dfused = self.final.backward(dlogits, cache["final_ctx"])
        dflat = self.fuse_out.backward(dfused, cache["out_ctx"])
        do = dflat.reshape(cache["o_shape"])
        dq, dk, dv = attention_backward(do, cache["attn_ctx"])
        dh = self.w_q.backward(dq, cache["q_ctx"])
        dh += self.w_k.backward(dk, cache["k_ctx"])
        dh += self.w_v.backward(dv, cache["v_ctx"])
        self._backward_encoders(dh.transpose(1, 0, 2), cache["enc"])

    # -- single-window inference -------------------------------------------

    def infer(self, window: LabeledWindow) -> FusionOutput:
        batch = {}
        for pair in self.config.active_pairs:
            if pair not in window.tensors:
                raise MissingModalityError(f"window lacks pair {pair.name}")
            batch[pair] = window.tensors[pair][None, :, :]
        logits, _, extras = self.forward_batch(batch, training=False)
        return FusionOutput(
            logits=logits[0],
            probs=extras["probs"][0],
            fusion_kind=self.config.fusion_kind,
            active_pairs=self.config.active_pairs,
            fused=extras["fused"][0],
            per_pair_llr=(
                extras["per_pair_llr"][0] if "per_pair_llr" in extras else None
            ),
            per_pair_probs=(
                extras["per_pair_probs"][0] if "per_pair_probs" in extras else None
            ),
            attention=extras["attention"][0] if "attention" in extras else None,
        )


# -- checkpoint format -------------------------------------------------------


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    shape = arr.shape  # before ascontiguousarray, which promotes 0-d to 1-d
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", len(shape)))
    for dim in shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def save_checkpoint(
    model: FusionModel,
    path: str | Path,
    trainer_state: dict | None = None,
    include_optimizer: bool = True,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write config + every parameter/stat (and Adam state) to one file."""
    store = model.store
    tensors: dict[str, np.ndarray] = {}
    for name, p in store.params.items():
        tensors[f"param/{name}"] = p.value
    for name, v in store.stats.items():
        tensors[f"stats/{name}"] = v
    if include_optimizer and store.adam_m:
        for name, m in store.adam_m.items():
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = store.adam_v[name]
    if extra_tensors:
        tensors.update(extra_tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "adam_t": store.adam_t,
    }
    if trainer_state is not None:
        header["trainer"] = trainer_state
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_tensor(fh, name, arr)


def _read_checkpoint_raw(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", data, 8)
    pos = 12
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        ndim = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos) if ndim else ()
        pos += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        tensors[name] = arr.copy()
        pos += size * 8
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor section")
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[FusionModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, trainer_state).

    Every parameter, running statistic, and Adam moment round-trips
    bit-exactly. Tensor shapes are validated against the stored config.
    """
    header, tensors = _read_checkpoint_raw(path)
    config = ModelConfig.from_dict(header["config"])
    model = FusionModel(config, rng=np.random.default_rng(0))
    store = model.store
    for name, p in store.params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")
        if tensors[key].shape != p.value.shape:
            raise CheckpointError(
                f"{path}: tensor {key} shape {tensors[key].shape} does not match "
                f"config-implied shape {p.value.shape}"
            )
        p.value[...] = tensors[key]
    for name, v in store.stats.items():
        key = f"stats/{name}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")
        v[...] = tensors[key]
    for name in store.params:
        mkey = f"adam_m/{name}"
        if mkey in tensors:
            store.adam_m[name] = tensors[mkey].copy()
            store.adam_v[name] = tensors[f"adam_v/{name}"].copy()
    store.adam_t = int(header.get("adam_t", 0))
    trainer_state = header.get("trainer", {})
    if "best" in {k.split("/", 1)[0] for k in tensors}:
        trainer_state = dict(trainer_state)
        trainer_state["best_snapshot"] = {
            k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("best/")
        }
    return model, trainer_state
