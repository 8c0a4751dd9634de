"""Differentiable layers with explicit, hand-derived backward passes.

Each layer's ``forward`` returns ``(output, ctx)`` where ``ctx`` carries the
cached activations its ``backward`` needs; shared layers (the per-sensor conv
subnets are reused across hands) can therefore be called several times per
step before any backward runs. ``backward`` accumulates into ``Parameter.grad``
and returns the gradient w.r.t. the layer input.

Shape conventions: batched time series are [B, T, C]; feature vectors [B, D].
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from gesturefuse.nn.params import ParamStore, uniform_init


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh identity: branchless and overflow-free for any magnitude
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stabilized softmax (finite for any finite logits)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch.

    Returns (loss, dloss/dlogits). Targets are integer class ids.
    """
    b, n = logits.shape
    if np.any(targets < 0) or np.any(targets >= n):
        raise ValueError("target id out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(b), targets] - log_z
    loss = float(-log_p.mean())
    probs = softmax(logits, axis=1)
    dlogits = probs
    dlogits[np.arange(b), targets] -= 1.0
    dlogits /= b
    return loss, dlogits


class Linear:
    """y = x @ W + b over the last axis."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        self.w = store.parameter(f"{name}.w", uniform_init(rng, (d_in, d_out), d_in))
        self.b = store.parameter(f"{name}.b", np.zeros(d_out))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        return x @ self.w.value + self.b.value, (x,)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        (x,) = ctx
        x2 = x.reshape(-1, x.shape[-1])
        d2 = dout.reshape(-1, dout.shape[-1])
        self.w.grad += x2.T @ d2
        self.b.grad += d2.sum(axis=0)
        return dout @ self.w.value.T


class Conv1d:
    """Valid (no-padding) 1-D convolution along the time axis.

    kernel shape [K, C_in, C_out]; output length T* = floor((T-K)/stride)+1.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int, rng: np.random.Generator):
        self.k, self.stride = kernel, stride
        self.c_in, self.c_out = c_in, c_out
        self.w = store.parameter(
            f"{name}.w", uniform_init(rng, (kernel, c_in, c_out), kernel * c_in)
        )
        self.b = store.parameter(f"{name}.b", np.zeros(c_out))

    def out_len(self, t: int) -> int:
        if t < self.k:
            raise ValueError(f"input length {t} shorter than kernel {self.k}")
        return (t - self.k) // self.stride + 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        b, t, c = x.shape
        t_out = self.out_len(t)
        sb, st, sc = x.strides
        cols = as_strided(
            x, shape=(b, t_out, self.k, c), strides=(sb, st * self.stride, st, sc)
        ).reshape(b * t_out, self.k * c)
        out = cols @ self.w.value.reshape(self.k * self.c_in, self.c_out)
        out += self.b.value
        return out.reshape(b, t_out, self.c_out), (cols, b, t, t_out)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        cols, b, t, t_out = ctx
        d2 = dout.reshape(b * t_out, self.c_out)
        self.w.grad += (cols.T @ d2).reshape(self.k, self.c_in, self.c_out)
        self.b.grad += d2.sum(axis=0)
        dx = np.zeros((b, t, self.c_in))
        for k in range(self.k):
            # windows never collide for fixed k, so a strided slice suffices
            dx[:, k : k + self.stride * t_out : self.stride, :] += (
                dout @ self.w.value[k].T
            )
        return dx


class ReLULayer:
    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        out = np.maximum(x, 0.0)
        return out, (x > 0,)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        (mask,) = ctx
        return dout * mask


class BatchNorm1d:
    """Per-channel normalization over batch x time.

    Train mode uses population batch statistics and updates running moments
    with momentum 0.1; eval mode normalizes with the running moments.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.parameter(f"{name}.gamma", np.ones(channels))
        self.beta = store.parameter(f"{name}.beta", np.zeros(channels))
        self.run_mean = store.stat(f"{name}.run_mean", np.zeros(channels))
        self.run_var = store.stat(f"{name}.run_var", np.ones(channels))

    def forward(self, x: np.ndarray, training: bool) -> tuple[np.ndarray, tuple]:
        if training:
            mu = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            inv_std = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mu) * inv_std
            self.run_mean *= 1.0 - self.MOMENTUM
            self.run_mean += self.MOMENTUM * mu
            self.run_var *= 1.0 - self.MOMENTUM
            self.run_var += self.MOMENTUM * var
            out = self.gamma.value * xhat + self.beta.value
            n = x.shape[0] * x.shape[1]
            return out, (True, xhat, inv_std, n)
        inv_std = 1.0 / np.sqrt(self.run_var + self.EPS)
        xhat = (x - self.run_mean) * inv_std
        return self.gamma.value * xhat + self.beta.value, (False, xhat, inv_std, 0)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        training, xhat, inv_std, n = ctx
        self.gamma.grad += (dout * xhat).sum(axis=(0, 1))
        self.beta.grad += dout.sum(axis=(0, 1))
        dxhat = dout * self.gamma.value
        if not training:
            return dxhat * inv_std
        sum_d = dxhat.sum(axis=(0, 1))
        sum_dx = (dxhat * xhat).sum(axis=(0, 1))
        return (inv_std / n) * (n * dxhat - sum_d - xhat * sum_dx)


class GRULayer:
    """Single GRU layer returning hidden states at every timestep.

    Gate equations (candidate-gate bias on the hidden side, reset applied to
    the recurrent term):

        r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
        z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
        n_t = tanh(x_t W_n + b_in + r_t * (h_{t-1} U_n + b_hn))
        h_t = (1 - z_t) * n_t + z_t * h_{t-1}
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d: int,
                 rng: np.random.Generator):
        self.d_in, self.d = d_in, d
        self.w_r = store.parameter(f"{name}.w_r", uniform_init(rng, (d_in, d), d_in))
        self.w_z = store.parameter(f"{name}.w_z", uniform_init(rng, (d_in, d), d_in))
        self.w_n = store.parameter(f"{name}.w_n", uniform_init(rng, (d_in, d), d_in))
        self.u_r = store.parameter(f"{name}.u_r", uniform_init(rng, (d, d), d))
        self.u_z = store.parameter(f"{name}.u_z", uniform_init(rng, (d, d), d))
        self.u_n = store.parameter(f"{name}.u_n", uniform_init(rng, (d, d), d))
        self.b_r = store.parameter(f"{name}.b_r", np.zeros(d))
        self.b_z = store.parameter(f"{name}.b_z", np.zeros(d))
        self.b_in = store.parameter(f"{name}.b_in", np.zeros(d))
        self.b_hn = store.parameter(f"{name}.b_hn", np.zeros(d))

    def forward(self, x: np.ndarray, h0: np.ndarray | None = None) -> tuple[np.ndarray, tuple]:
        b, t, _ = x.shape
        d = self.d
        # input-side projections for every timestep at once; the reset/update
        # gates share one fused matmul per step on the recurrent side
        xrz = np.concatenate(
            (x @ self.w_r.value + self.b_r.value, x @ self.w_z.value + self.b_z.value),
            axis=2,
        )
        xn = x @ self.w_n.value + self.b_in.value
        u_rz = np.concatenate((self.u_r.value, self.u_z.value), axis=1)
        h = np.zeros((b, d)) if h0 is None else h0.astype(np.float64, copy=True)

        hs = np.empty((t, b, d))
        rz_all = np.empty((t, b, 2 * d))
        n_all = np.empty((t, b, d))
        hn_all = np.empty((t, b, d))
        h_prev_all = np.empty((t, b, d))
        for i in range(t):
            h_prev_all[i] = h
            a_rz = xrz[:, i]
            rz = sigmoid(a_rz + h @ u_rz)
            r = rz[:, :d]
            z = rz[:, d:]
            hn = h @ self.u_n.value + self.b_hn.value
            n = np.tanh(xn[:, i] + r * hn)
            h = (1.0 - z) * n + z * h
            rz_all[i] = rz
            n_all[i] = n
            hn_all[i] = hn
            hs[i] = h
        out = hs.transpose(1, 0, 2)
        return out, (x, rz_all, n_all, hn_all, h_prev_all, u_rz)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        x, rz_all, n_all, hn_all, h_prev_all, u_rz = ctx
        b, t, _ = x.shape
        d = self.d
        d_xrz = np.empty((t, b, 2 * d))
        d_xn = np.empty((t, b, d))
        du_rz = np.zeros((d, 2 * d))
        du_n = np.zeros((d, d))
        db_hn = np.zeros(d)
        dh = np.zeros((b, d))
        u_n_t = self.u_n.value.T
        u_rz_t = u_rz.T
        for i in range(t - 1, -1, -1):
            dh += dout[:, i]
            rz = rz_all[i]
            r = rz[:, :d]
            z = rz[:, d:]
            n = n_all[i]
            hn = hn_all[i]
            h_prev = h_prev_all[i]
            dan = (dh * (1.0 - z)) * (1.0 - n * n)
            d_xn[i] = dan
            dh_prev = dh * z
            da_rz = d_xrz[i]
            da_rz[:, :d] = dan * hn          # d r
            da_rz[:, d:] = dh * (h_prev - n)  # d z
            da_rz *= rz * (1.0 - rz)
            dhn = dan * r
            du_n += h_prev.T @ dhn
            db_hn += dhn.sum(axis=0)
            dh_prev += dhn @ u_n_t
            du_rz += h_prev.T @ da_rz
            dh = dh_prev + da_rz @ u_rz_t
        self.u_r.grad += du_rz[:, :d]
        self.u_z.grad += du_rz[:, d:]
        self.u_n.grad += du_n
        self.b_hn.grad += db_hn
        d_xrz_b = d_xrz.transpose(1, 0, 2)
        d_xn_b = d_xn.transpose(1, 0, 2)
        x2 = x.reshape(b * t, self.d_in)
        dr2 = d_xrz_b[:, :, :d].reshape(b * t, d)
        dz2 = d_xrz_b[:, :, d:].reshape(b * t, d)
        dn2 = d_xn_b.reshape(b * t, d)
        self.w_r.grad += x2.T @ dr2
        self.w_z.grad += x2.T @ dz2
        self.w_n.grad += x2.T @ dn2
        self.b_r.grad += dr2.sum(axis=0)
        self.b_z.grad += dz2.sum(axis=0)
        self.b_in.grad += dn2.sum(axis=0)
        dx = (
            d_xrz_b[:, :, :d] @ self.w_r.value.T
            + d_xrz_b[:, :, d:] @ self.w_z.value.T
            + d_xn_b @ self.w_n.value.T
        )
        return dx


class AttentionPool:
    """Score-weighted sum of all hidden states, gated onto the last state.

    scores s_t = w . tanh(H_t W + b); alpha = softmax(s);
    out = H_T + gate * sum_t alpha_t H_t. Gate starts at 0 so the global
    context is a learned addition.
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng: np.random.Generator):
        self.w_proj = store.parameter(f"{name}.w_proj", uniform_init(rng, (d, d), d))
        self.b_proj = store.parameter(f"{name}.b_proj", np.zeros(d))
        self.score_w = store.parameter(f"{name}.score_w", uniform_init(rng, (d,), d))
        self.gate = store.parameter(f"{name}.gate", np.zeros(()))

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, tuple]:
        u = np.tanh(h @ self.w_proj.value + self.b_proj.value)  # [B,T,D]
        s = u @ self.score_w.value  # [B,T]
        alpha = softmax(s, axis=1)
        context = np.einsum("bt,btd->bd", alpha, h)
        out = h[:, -1] + self.gate.value * context
        return out, (h, u, alpha, context)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        h, u, alpha, context = ctx
        b, t, d = h.shape
        dh = np.zeros_like(h)
        dh[:, -1] += dout
        self.gate.grad += np.sum(dout * context)
        dcontext = self.gate.value * dout  # [B,D]
        dalpha = np.einsum("bd,btd->bt", dcontext, h)
        dh += alpha[:, :, None] * dcontext[:, None, :]
        ds = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
        du = ds[:, :, None] * self.score_w.value
        self.score_w.grad += np.einsum("btd,bt->d", u, ds)
        da = du * (1.0 - u * u)
        a2 = da.reshape(b * t, d)
        self.w_proj.grad += h.reshape(b * t, d).T @ a2
        self.b_proj.grad += a2.sum(axis=0)
        dh += da @ self.w_proj.value.T
        return dh


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Scaled dot-product attention over the second-to-last axis.

    q, k, v: [B, M, D]. Returns (output [B, M, D], ctx); the attention matrix
    A = rowsoftmax(QK^T / sqrt(D)) is ctx[3].
    """
    d = q.shape[-1]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    a = softmax(scores, axis=-1)
    return a @ v, (q, k, v, a)


def attention_backward(dout: np.ndarray, ctx: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k, v, a = ctx
    d = q.shape[-1]
    dv = a.transpose(0, 2, 1) @ dout
    da = dout @ v.transpose(0, 2, 1)
    dscores = a * (da - (da * a).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(d)
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    return dq, dk, dv
