"""Neural layers with explicit forward caches and hand-written backprop.

Every layer reads and writes a shared flat parameter dict (name -> float64
array) and accumulates into a matching gradient dict, which keeps the
optimizer and the finite-difference gradient checker trivially generic.
Shapes are batch-major: sequences are (B, L, D) with a boolean mask (B, L);
masked steps carry state through unchanged so the final state of a padded
sequence equals the state at its true end.
"""

from __future__ import annotations

import numpy as np

Params = dict


def glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (d_in + d_out))
    return rng.normal(0.0, scale, size=(d_in, d_out))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def add_grad(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int, params: Params,
                 rng: np.random.Generator):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        params[f"{name}.W"] = glorot(rng, d_in, d_out)
        params[f"{name}.b"] = np.zeros(d_out)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        y = x @ params[f"{self.name}.W"] + params[f"{self.name}.b"]
        return y, (x,)

    def backward(self, params: Params, grads: Params, dy: np.ndarray,
                 cache: tuple) -> np.ndarray:
        (x,) = cache
        flat_x = x.reshape(-1, self.d_in)
        flat_dy = dy.reshape(-1, self.d_out)
        add_grad(grads, f"{self.name}.W", flat_x.T @ flat_dy)
        add_grad(grads, f"{self.name}.b", flat_dy.sum(axis=0))
        return dy @ params[f"{self.name}.W"].T


class MLP:
    """Linear -> tanh -> Linear."""

    def __init__(self, name: str, d_in: int, d_hidden: int, d_out: int,
                 params: Params, rng: np.random.Generator):
        self.l1 = Linear(f"{name}.l1", d_in, d_hidden, params, rng)
        self.l2 = Linear(f"{name}.l2", d_hidden, d_out, params, rng)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        a, c1 = self.l1.forward(params, x)
        h = np.tanh(a)
        y, c2 = self.l2.forward(params, h)
        return y, (c1, h, c2)

    def backward(self, params: Params, grads: Params, dy: np.ndarray,
                 cache: tuple) -> np.ndarray:
        c1, h, c2 = cache
        dh = self.l2.backward(params, grads, dy, c2)
        da = dh * (1.0 - h * h)
        return self.l1.backward(params, grads, da, c1)


class EmbeddingBag:
    """Mean of token embeddings per bag; empty bags stay exactly zero."""

    def __init__(self, name: str, vocab_size: int, dim: int, params: Params,
                 rng: np.random.Generator):
        self.name = name
        self.vocab_size, self.dim = vocab_size, dim
        params[f"{name}.E"] = rng.normal(0.0, 0.1, size=(vocab_size, dim))

    def forward(self, params: Params, token_ids: np.ndarray, bag_ids: np.ndarray,
                n_bags: int) -> tuple[np.ndarray, tuple]:
        """token_ids, bag_ids: flat aligned arrays; returns (n_bags, dim)."""
        E = params[f"{self.name}.E"]
        out = np.zeros((n_bags, self.dim))
        counts = np.zeros(n_bags)
        if token_ids.size:
            np.add.at(out, bag_ids, E[token_ids])
            np.add.at(counts, bag_ids, 1.0)
        nz = counts > 0
        out[nz] /= counts[nz, None]
        return out, (token_ids, bag_ids, counts)

    def backward(self, params: Params, grads: Params, dout: np.ndarray,
                 cache: tuple) -> None:
        token_ids, bag_ids, counts = cache
        dE = np.zeros((self.vocab_size, self.dim))
        if token_ids.size:
            scaled = dout[bag_ids] / counts[bag_ids, None]
            np.add.at(dE, token_ids, scaled)
        add_grad(grads, f"{self.name}.E", dE)


class GRU:
    """Single-layer GRU; returns the final hidden state per sequence."""

    def __init__(self, name: str, d_in: int, d_hidden: int, params: Params,
                 rng: np.random.Generator):
        self.name = name
        self.d_in, self.H = d_in, d_hidden
        params[f"{name}.Wx"] = glorot(rng, d_in, 3 * d_hidden)
        params[f"{name}.Wh"] = glorot(rng, d_hidden, 3 * d_hidden)
        params[f"{name}.bx"] = np.zeros(3 * d_hidden)
        params[f"{name}.bh"] = np.zeros(3 * d_hidden)

    def forward(self, params: Params, x: np.ndarray, mask: np.ndarray
                ) -> tuple[np.ndarray, tuple]:
        """x: (B, L, d_in), mask: (B, L) bool. Returns final h: (B, H)."""
        p = self.name
        B, L, _ = x.shape
        H = self.H
        h = np.zeros((B, H))
        steps = []
        xg_all = x @ params[f"{p}.Wx"] + params[f"{p}.bx"]
        for t in range(L):
            hg = h @ params[f"{p}.Wh"] + params[f"{p}.bh"]
            xg = xg_all[:, t]
            r = sigmoid(xg[:, :H] + hg[:, :H])
            z = sigmoid(xg[:, H:2 * H] + hg[:, H:2 * H])
            n = np.tanh(xg[:, 2 * H:] + r * hg[:, 2 * H:])
            h_new = (1.0 - z) * n + z * h
            m = mask[:, t:t + 1]
            h_next = np.where(m, h_new, h)
            steps.append((h.copy(), hg, r, z, n))
            h = h_next
        return h, (x, mask, steps)

    def backward(self, params: Params, grads: Params, dh_final: np.ndarray,
                 cache: tuple) -> np.ndarray:
        p = self.name
        x, mask, steps = cache
        B, L, _ = x.shape
        H = self.H
        Wx = params[f"{p}.Wx"]
        Wh = params[f"{p}.Wh"]
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        dbx = np.zeros(3 * H)
        dbh = np.zeros(3 * H)
        dx = np.zeros_like(x)
        dh = dh_final
        for t in range(L - 1, -1, -1):
            h_prev, hg, r, z, n = steps[t]
            m = mask[:, t:t + 1]
            dh_new = np.where(m, dh, 0.0)
            dh_skip = np.where(m, 0.0, dh)
            dz = dh_new * (h_prev - n)
            dn = dh_new * (1.0 - z)
            dh_prev = dh_new * z + dh_skip
            dn_pre = dn * (1.0 - n * n)
            dr = dn_pre * hg[:, 2 * H:]
            dhg_n = dn_pre * r
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dxg = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            dhg = np.concatenate([dr_pre, dz_pre, dhg_n], axis=1)
            dWx += x[:, t].T @ dxg
            dbx += dxg.sum(axis=0)
            dWh += h_prev.T @ dhg
            dbh += dhg.sum(axis=0)
            dx[:, t] = dxg @ Wx.T
            dh_prev = dh_prev + dhg @ Wh.T
            dh = dh_prev
        add_grad(grads, f"{p}.Wx", dWx)
        add_grad(grads, f"{p}.Wh", dWh)
        add_grad(grads, f"{p}.bx", dbx)
        add_grad(grads, f"{p}.bh", dbh)
        return dx


class LSTM:
    """Single-layer LSTM returning hidden states at every step."""

    def __init__(self, name: str, d_in: int, d_hidden: int, params: Params,
                 rng: np.random.Generator):
        self.name = name
        self.d_in, self.H = d_in, d_hidden
        params[f"{name}.Wx"] = glorot(rng, d_in, 4 * d_hidden)
        params[f"{name}.Wh"] = glorot(rng, d_hidden, 4 * d_hidden)
        params[f"{name}.b"] = np.zeros(4 * d_hidden)

    def forward(self, params: Params, x: np.ndarray, mask: np.ndarray
                ) -> tuple[np.ndarray, tuple]:
        p = self.name
        B, L, _ = x.shape
        H = self.H
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        out = np.zeros((B, L, H))
        steps = []
        xg_all = x @ params[f"{p}.Wx"] + params[f"{p}.b"]
        for t in range(L):
            g = xg_all[:, t] + h @ params[f"{p}.Wh"]
            i = sigmoid(g[:, :H])
            f = sigmoid(g[:, H:2 * H])
            gg = np.tanh(g[:, 2 * H:3 * H])
            o = sigmoid(g[:, 3 * H:])
            c_new = f * c + i * gg
            tc = np.tanh(c_new)
            h_new = o * tc
            m = mask[:, t:t + 1]
            h_next = np.where(m, h_new, h)
            c_next = np.where(m, c_new, c)
            out[:, t] = h_next
            steps.append((h.copy(), c.copy(), i, f, gg, o, c_new, tc))
            h, c = h_next, c_next
        return out, (x, mask, steps)

    def backward(self, params: Params, grads: Params, dout: np.ndarray,
                 cache: tuple) -> np.ndarray:
        p = self.name
        x, mask, steps = cache
        B, L, _ = x.shape
        H = self.H
        Wx = params[f"{p}.Wx"]
        Wh = params[f"{p}.Wh"]
        dWx = np.zeros_like(Wx)
        dWh = np.zeros_like(Wh)
        db = np.zeros(4 * H)
        dx = np.zeros_like(x)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            h_prev, c_prev, i, f, gg, o, c_new, tc = steps[t]
            m = mask[:, t:t + 1]
            dh_total = dh + dout[:, t]
            dh_new = np.where(m, dh_total, 0.0)
            dh_skip = np.where(m, 0.0, dh_total)
            dc_new = np.where(m, dc, 0.0) + dh_new * o * (1.0 - tc * tc)
            dc_skip = np.where(m, 0.0, dc)
            do = dh_new * tc
            di = dc_new * gg
            dff = dc_new * c_prev
            dgg = dc_new * i
            dc_prev = dc_new * f + dc_skip
            dh_prev = dh_skip
            dg = np.concatenate(
                [
                    di * i * (1.0 - i),
                    dff * f * (1.0 - f),
                    dgg * (1.0 - gg * gg),
                    do * o * (1.0 - o),
                ],
                axis=1,
            )
            dWx += x[:, t].T @ dg
            db += dg.sum(axis=0)
            dWh += h_prev.T @ dg
            dx[:, t] = dg @ Wx.T
            dh = dh_prev + dg @ Wh.T
            dc = dc_prev
        add_grad(grads, f"{p}.Wx", dWx)
        add_grad(grads, f"{p}.Wh", dWh)
        add_grad(grads, f"{p}.b", db)
        return dx


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    """Standard fixed sin/cos position table, shape (L, d)."""
    pos = np.arange(L)[:, None]
    dim = np.arange(d // 2)[None, :]
    angle = pos / np.power(10_000.0, 2.0 * dim / d)
    table = np.zeros((L, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class CausalSelfAttention:
    """Multi-head self-attention restricted to the past (strict -inf mask)."""

    def __init__(self, name: str, d_model: int, n_heads: int, params: Params,
                 rng: np.random.Generator):
        assert d_model % n_heads == 0
        self.name = name
        self.d = d_model
        self.h = n_heads
        self.dk = d_model // n_heads
        for w in ("Wq", "Wk", "Wv", "Wo"):
            params[f"{name}.{w}"] = glorot(rng, d_model, d_model)

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, L, _ = x.shape
        return x.reshape(B, L, self.h, self.dk).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, h, L, dk = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, h * dk)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        p = self.name
        B, L, _ = x.shape
        q = self._split(x @ params[f"{p}.Wq"])
        k = self._split(x @ params[f"{p}.Wk"])
        v = self._split(x @ params[f"{p}.Wv"])
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.dk)
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        scores = np.where(future, -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        a = e / e.sum(axis=-1, keepdims=True)
        z = a @ v
        merged = self._merge(z)
        out = merged @ params[f"{p}.Wo"]
        return out, (x, q, k, v, a, merged)

    def backward(self, params: Params, grads: Params, dout: np.ndarray,
                 cache: tuple) -> np.ndarray:
        p = self.name
        x, q, k, v, a, merged = cache
        B, L, _ = x.shape
        add_grad(grads, f"{p}.Wo",
                 merged.reshape(-1, self.d).T @ dout.reshape(-1, self.d))
        dmerged = dout @ params[f"{p}.Wo"].T
        dz = self._split(dmerged)
        da = dz @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ dz
        dscores = a * (da - (da * a).sum(axis=-1, keepdims=True))
        dscores /= np.sqrt(self.dk)
        dq = dscores @ k
        dk_ = dscores.transpose(0, 1, 3, 2) @ q
        dx = np.zeros_like(x)
        for mat, dm in (("Wq", dq), ("Wk", dk_), ("Wv", dv)):
            dflat = self._merge(dm)
            add_grad(grads, f"{p}.{mat}",
                     x.reshape(-1, self.d).T @ dflat.reshape(-1, self.d))
            dx += dflat @ params[f"{p}.{mat}"].T
        return dx


class AttentionBlock:
    """Attention + position-wise MLP, both with residual connections."""

    def __init__(self, name: str, d_model: int, n_heads: int, params: Params,
                 rng: np.random.Generator):
        self.attn = CausalSelfAttention(f"{name}.attn", d_model, n_heads, params, rng)
        self.ff = MLP(f"{name}.ff", d_model, 2 * d_model, d_model, params, rng)

    def forward(self, params: Params, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        a, ca = self.attn.forward(params, x)
        h = x + a
        f, cf = self.ff.forward(params, h)
        return h + f, (ca, cf)

    def backward(self, params: Params, grads: Params, dy: np.ndarray,
                 cache: tuple) -> np.ndarray:
        ca, cf = cache
        dh = dy + self.ff.backward(params, grads, dy, cf)
        return dh + self.attn.backward(params, grads, dh, ca)
