"""Batched execution of independent per-pair layers.

Modality pairs sharing a window length run their (per-pair, independently
parameterized) GRU stacks, attention pools, and linear heads as one stacked
computation over a leading pair axis P: weights are gathered into [P, ...]
stacks before the loop and gradient stacks are scattered back into each
pair's ``Parameter.grad`` afterwards. Purely an execution strategy; the
parameters, math, and results per pair are identical to running the layers
one at a time.

Shapes: inputs [P, B, T, D_in], features [P, B, D].
"""

from __future__ import annotations

import numpy as np

from gesturefuse.nn.layers import AttentionPool, GRULayer, Linear, sigmoid, softmax


class MultiGRU:
    """Runs P independent GRU layers of identical shape in lockstep."""

    def __init__(self, layers: list[GRULayer]):
        self.layers = layers
        self.d = layers[0].d
        self.d_in = layers[0].d_in

    def forward(self, x: np.ndarray, keep_ctx: bool = True) -> tuple[np.ndarray, tuple]:
        p, b, t, _ = x.shape
        d = self.d
        w_rz = np.stack(
            [np.concatenate((l.w_r.value, l.w_z.value), axis=1) for l in self.layers]
        )[:, None]  # [P,1,Din,2D] broadcasting over batch
        w_n = np.stack([l.w_n.value for l in self.layers])[:, None]
        b_rz = np.stack(
            [np.concatenate((l.b_r.value, l.b_z.value)) for l in self.layers]
        )[:, None, None]
        b_in = np.stack([l.b_in.value for l in self.layers])[:, None, None]
        b_hn = np.stack([l.b_hn.value for l in self.layers])[:, None]
        u_rz = np.stack(
            [np.concatenate((l.u_r.value, l.u_z.value), axis=1) for l in self.layers]
        )
        u_n = np.stack([l.u_n.value for l in self.layers])

        xrz = x @ w_rz + b_rz          # [P,B,T,2D]
        xn = x @ w_n + b_in            # [P,B,T,D]
        h = np.zeros((p, b, d))
        hs = np.empty((t, p, b, d))
        if keep_ctx:
            rz_all = np.empty((t, p, b, 2 * d))
            n_all = np.empty((t, p, b, d))
            hn_all = np.empty((t, p, b, d))
            h_prev_all = np.empty((t, p, b, d))
        for i in range(t):
            rz = sigmoid(xrz[:, :, i] + h @ u_rz)
            r = rz[:, :, :d]
            z = rz[:, :, d:]
            hn = h @ u_n + b_hn
            n = np.tanh(xn[:, :, i] + r * hn)
            if keep_ctx:
                rz_all[i], n_all[i], hn_all[i], h_prev_all[i] = rz, n, hn, h
            h = (1.0 - z) * n + z * h
            hs[i] = h
        out = hs.transpose(1, 2, 0, 3)  # [P,B,T,D]
        if not keep_ctx:
            return out, ()
        return out, (x, rz_all, n_all, hn_all, h_prev_all, u_rz, u_n)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        x, rz_all, n_all, hn_all, h_prev_all, u_rz, u_n = ctx
        p, b, t, d_in = x.shape
        d = self.d
        d_xrz = np.empty((t, p, b, 2 * d))
        d_xn = np.empty((t, p, b, d))
        du_rz = np.zeros((p, d, 2 * d))
        du_n = np.zeros((p, d, d))
        db_hn = np.zeros((p, d))
        dh = np.zeros((p, b, d))
        u_rz_t = u_rz.transpose(0, 2, 1)
        u_n_t = u_n.transpose(0, 2, 1)
        for i in range(t - 1, -1, -1):
            dh += dout[:, :, i]
            rz = rz_all[i]
            r = rz[:, :, :d]
            z = rz[:, :, d:]
            n = n_all[i]
            hn = hn_all[i]
            h_prev = h_prev_all[i]
            h_prev_t = h_prev.transpose(0, 2, 1)
            dan = (dh * (1.0 - z)) * (1.0 - n * n)
            d_xn[i] = dan
            dh_prev = dh * z
            da_rz = d_xrz[i]
            da_rz[:, :, :d] = dan * hn
            da_rz[:, :, d:] = dh * (h_prev - n)
            da_rz *= rz * (1.0 - rz)
            dhn = dan * r
            du_n += h_prev_t @ dhn
            db_hn += dhn.sum(axis=1)
            dh_prev += dhn @ u_n_t
            du_rz += h_prev_t @ da_rz
            dh = dh_prev + da_rz @ u_rz_t
        d_xrz_b = d_xrz.transpose(1, 2, 0, 3)  # [P,B,T,2D]
        d_xn_b = d_xn.transpose(1, 2, 0, 3)
        x2 = x.reshape(p, b * t, d_in)
        x2_t = x2.transpose(0, 2, 1)
        dw_rz = x2_t @ d_xrz_b.reshape(p, b * t, 2 * d)
        dw_n = x2_t @ d_xn_b.reshape(p, b * t, d)
        db_rz = d_xrz_b.reshape(p, b * t, 2 * d).sum(axis=1)
        db_in = d_xn_b.reshape(p, b * t, d).sum(axis=1)
        w_rz_t = np.stack(
            [np.concatenate((l.w_r.value, l.w_z.value), axis=1) for l in self.layers]
        ).transpose(0, 2, 1)[:, None]  # [P,1,2D,Din]
        w_n_t = np.stack([l.w_n.value for l in self.layers]).transpose(0, 2, 1)[:, None]
        dx = d_xrz_b @ w_rz_t + d_xn_b @ w_n_t
        for k, layer in enumerate(self.layers):
            layer.u_r.grad += du_rz[k, :, :d]
            layer.u_z.grad += du_rz[k, :, d:]
            layer.u_n.grad += du_n[k]
            layer.b_hn.grad += db_hn[k]
            layer.w_r.grad += dw_rz[k, :, :d]
            layer.w_z.grad += dw_rz[k, :, d:]
            layer.w_n.grad += dw_n[k]
            layer.b_r.grad += db_rz[k, :d]
            layer.b_z.grad += db_rz[k, d:]
            layer.b_in.grad += db_in[k]
        return dx


class MultiAttentionPool:
    """Stacked gated attention pooling: [P,B,T,D] -> [P,B,D]."""

    def __init__(self, pools: list[AttentionPool]):
        self.pools = pools

    def forward(self, h: np.ndarray) -> tuple[np.ndarray, tuple]:
        w = np.stack([pl.w_proj.value for pl in self.pools])[:, None]   # [P,1,D,D]
        b = np.stack([pl.b_proj.value for pl in self.pools])[:, None, None]
        sw = np.stack([pl.score_w.value for pl in self.pools])[:, None, None]  # [P,1,1,D]
        gate = np.array([pl.gate.value for pl in self.pools])[:, None, None]
        u = np.tanh(h @ w + b)                    # [P,B,T,D]
        s = (u * sw).sum(axis=-1)                 # [P,B,T]
        alpha = softmax(s, axis=-1)
        context = np.einsum("pbt,pbtd->pbd", alpha, h)
        out = h[:, :, -1] + gate * context
        return out, (h, u, alpha, context, w, sw, gate)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        h, u, alpha, context, w, sw, gate = ctx
        p, b, t, d = h.shape
        dh = np.zeros_like(h)
        dh[:, :, -1] += dout
        dgate = np.einsum("pbd,pbd->p", dout, context)
        dcontext = gate * dout                    # [P,B,D]
        dalpha = np.einsum("pbd,pbtd->pbt", dcontext, h)
        dh += alpha[..., None] * dcontext[:, :, None, :]
        ds = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
        dsw = np.einsum("pbtd,pbt->pd", u, ds)
        du = ds[..., None] * sw
        da = du * (1.0 - u * u)
        da2 = da.reshape(p, b * t, d)
        h2_t = h.reshape(p, b * t, d).transpose(0, 2, 1)
        dw = h2_t @ da2
        db = da2.sum(axis=1)
        dh += da @ w.squeeze(1).transpose(0, 2, 1)[:, None]
        for k, pl in enumerate(self.pools):
            pl.gate.grad += dgate[k]
            pl.score_w.grad += dsw[k]
            pl.w_proj.grad += dw[k]
            pl.b_proj.grad += db[k]
        return dh


class MultiLinear:
    """Stacked per-pair linear heads: [P,B,D] -> [P,B,N]."""

    def __init__(self, heads: list[Linear]):
        self.heads = heads

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        w = np.stack([hd.w.value for hd in self.heads])       # [P,D,N]
        b = np.stack([hd.b.value for hd in self.heads])[:, None]
        return x @ w + b, (x, w)

    def backward(self, dout: np.ndarray, ctx: tuple) -> np.ndarray:
        x, w = ctx
        dw = x.transpose(0, 2, 1) @ dout
        db = dout.sum(axis=1)
        for k, hd in enumerate(self.heads):
            hd.w.grad += dw[k]
            hd.b.grad += db[k]
        return dout @ w.transpose(0, 2, 1)
