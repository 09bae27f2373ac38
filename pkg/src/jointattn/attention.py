"""Additive attention and the mechanisms built from it.

* :class:`AdditiveAttention` -- ``e_i = v . tanh(W1 key_i + W2 query)``,
  softmax over keys, context = weighted sum of keys.
* :class:`BranchSelection` -- attention over exactly two stream features.
* :class:`SpatialAttention` -- additive attention over the K*K positions of a
  feature map, used as a replacement for average pooling, and
  :class:`RecurrentSpatialPooling` which drives it with a GRU over time.
* :class:`JointAttention` -- cross-stream temporal attention between two
  hidden-state sequences ``h`` (spatial) and ``g`` (temporal).

Trace layout for :class:`JointAttention` (``T x T`` matrices):

``alpha[i, j]``  weight of ``h_i`` in ``o_h[j]``; each column sums to 1.
``beta[i, j]``   weight of ``g_j`` in ``o_g[i]``; each row sums to 1.
``e[i, j]``, ``f[i, j]`` are the matching pre-softmax scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .recurrent import GruCell
from .tensor_core import (
    DTYPE,
    DimensionError,
    NormalizationError,
    Param,
    StateError,
    glorot_uniform,
    softmax,
    softmax_backward,
)


def _param(name, shape, rng, zero=False):
    if zero or rng is None:
        return Param(name, np.zeros(shape))
    return Param(name, glorot_uniform(rng, *shape))


class AdditiveAttention:
    def __init__(self, key_dim: int, query_dim: int, attn_dim: int,
                 rng: np.random.Generator | None = None, name: str = "attn"):
        self.key_dim, self.query_dim, self.attn_dim = key_dim, query_dim, attn_dim
        self.v = _param(f"{name}.v", (attn_dim,), rng, zero=True)
        self.W1 = _param(f"{name}.W1", (attn_dim, key_dim), rng)
        self.W2 = _param(f"{name}.W2", (attn_dim, query_dim), rng)

    @property
    def params(self) -> list[Param]:
        return [self.v, self.W1, self.W2]

    def forward(self, keys: np.ndarray, query: np.ndarray):
        """keys ``(B, N, Dk)``, query ``(B, Dq)`` -> (context, weights, scores, cache)."""
        if keys.ndim != 3 or keys.shape[1] == 0:
            raise ValueError("additive attention needs a nonempty batch of keys")
        if keys.shape[2] != self.key_dim or query.shape[-1] != self.query_dim:
            raise DimensionError(
                f"attention expects key dim {self.key_dim} / query dim {self.query_dim}, "
                f"got {keys.shape[2]} / {query.shape[-1]}")
        s = np.tanh(keys @ self.W1.value.T + (query @ self.W2.value.T)[:, None, :])
        e = s @ self.v.value
        w = softmax(e, axis=1)
        ctx = np.einsum("bn,bnd->bd", w, keys)
        return ctx, w, e, (keys, query, s, w)

    def backward(self, cache, d_ctx: np.ndarray):
        keys, query, s, w = cache
        dw = np.einsum("bnd,bd->bn", keys, d_ctx)
        d_keys = w[:, :, None] * d_ctx[:, None, :]
        de = softmax_backward(w, dw, axis=1)
        self.v.grad += np.einsum("bn,bna->a", de, s)
        dpre = de[:, :, None] * self.v.value * (1.0 - s * s)
        self.W1.grad += np.einsum("bna,bnd->ad", dpre, keys)
        d_keys += dpre @ self.W1.value
        dq = dpre.sum(axis=1)
        self.W2.grad += dq.T @ query
        d_query = dq @ self.W2.value
        return d_keys, d_query


def additive_attention(params: AdditiveAttention, keys, query):
    """Unbatched additive attention -> ``(context, weights)``."""
    keys = np.asarray(keys, dtype=DTYPE)
    query = np.asarray(query, dtype=DTYPE)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("additive_attention needs a nonempty list of keys")
    ctx, w, _, _ = params.forward(keys[None], query[None])
    return ctx[0], w[0]


def _l2_forward(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise NormalizationError("cannot L2-normalize a zero feature vector")
    return x / norm, norm


def _l2_backward(n, norm, dn):
    return (dn - n * np.sum(n * dn, axis=-1, keepdims=True)) / norm


class BranchSelection:
    """Attention over two stream features acting as a learned weighted average.

    s = W1 x1 + W2 x2;  e_i = v . tanh(s + W3 x_i);  alpha = softmax(e);
    fused = alpha_1 x1 + alpha_2 x2.
    With ``l2_normalize_inputs`` both features are unit-normalized first.
    """

    def __init__(self, dim: int, attn_dim: int, l2_normalize_inputs: bool = False,
                 rng: np.random.Generator | None = None, name: str = "bs"):
        self.dim, self.attn_dim = dim, attn_dim
        self.l2 = l2_normalize_inputs
        self.v = _param(f"{name}.v", (attn_dim,), rng, zero=True)
        self.W1 = _param(f"{name}.W1", (attn_dim, dim), rng)
        self.W2 = _param(f"{name}.W2", (attn_dim, dim), rng)
        self.W3 = _param(f"{name}.W3", (attn_dim, dim), rng)

    @property
    def params(self) -> list[Param]:
        return [self.v, self.W1, self.W2, self.W3]

    def forward(self, x1: np.ndarray, x2: np.ndarray):
        if x1.shape != x2.shape or x1.shape[-1] != self.dim:
            raise DimensionError(f"branch selection expects two ({self.dim},) inputs, "
                                 f"got {x1.shape} and {x2.shape}")
        norms = None
        if self.l2:
            (x1, n1), (x2, n2) = _l2_forward(x1), _l2_forward(x2)
            norms = (n1, n2)
        x = np.stack([x1, x2], axis=1)  # (B, 2, D)
        s = x1 @ self.W1.value.T + x2 @ self.W2.value.T
        t = np.tanh(s[:, None, :] + x @ self.W3.value.T)
        e = t @ self.v.value
        a = softmax(e, axis=1)
        fused = np.einsum("bk,bkd->bd", a, x)
        return fused, a, (x, t, a, norms)

    def backward(self, cache, d_fused: np.ndarray):
        x, t, a, norms = cache
        da = np.einsum("bkd,bd->bk", x, d_fused)
        dx = a[:, :, None] * d_fused[:, None, :]
        de = softmax_backward(a, da, axis=1)
        self.v.grad += np.einsum("bk,bka->a", de, t)
        dpre = de[:, :, None] * self.v.value * (1.0 - t * t)
        self.W3.grad += np.einsum("bka,bkd->ad", dpre, x)
        dx += dpre @ self.W3.value
        ds = dpre.sum(axis=1)
        self.W1.grad += ds.T @ x[:, 0]
        self.W2.grad += ds.T @ x[:, 1]
        dx1 = dx[:, 0] + ds @ self.W1.value
        dx2 = dx[:, 1] + ds @ self.W2.value
        if norms is not None:
            dx1 = _l2_backward(x[:, 0], norms[0], dx1)
            dx2 = _l2_backward(x[:, 1], norms[1], dx2)
        return dx1, dx2


def branch_selection(params: BranchSelection, x1, x2):
    """Unbatched branch selection -> ``(fused, weights)``."""
    x1 = np.asarray(x1, dtype=DTYPE)
    x2 = np.asarray(x2, dtype=DTYPE)
    fused, a, _ = params.forward(x1[None], x2[None])
    return fused[0], a[0]


class SpatialAttention(AdditiveAttention):
    """Additive attention over the ``K*K`` positions ``C[i, j]`` of a feature map,
    queried by a recurrent state ``L``; replaces average pooling."""

    def __init__(self, channels: int, lstm_hidden: int, attn_dim: int, grid: int,
                 rng: np.random.Generator | None = None, name: str = "sa"):
        if grid < 1:
            raise ValueError("spatial grid size K must be at least 1")
        self.grid = grid
        super().__init__(channels, lstm_hidden, attn_dim, rng, name)

    @property
    def channels(self) -> int:
        return self.key_dim


def spatial_attention(params: SpatialAttention, feature_map, lstm_hidden):
    """``feature_map`` of shape ``(K, K, channels)`` -> ``(pooled, weights (K, K))``."""
    fmap = np.asarray(feature_map, dtype=DTYPE)
    if fmap.ndim != 3 or fmap.shape[0] == 0 or fmap.shape[0] != fmap.shape[1]:
        raise ValueError(f"expected a nonempty (K, K, channels) map, got shape {fmap.shape}")
    k = fmap.shape[0]
    ctx, w, _, _ = params.forward(fmap.reshape(1, k * k, -1), np.asarray(lstm_hidden, dtype=DTYPE)[None])
    return ctx[0], w[0].reshape(k, k)


class RecurrentSpatialPooling:
    """Spatial attention applied at every timestep, queried by a GRU ``L``.

    Frame features of size ``K*K*channels`` are read as a ``(K*K, channels)``
    grid. ``L`` is primed on the uniform average of the first frame's grid;
    attention at step ``t`` uses ``L``'s state after it consumed the pooled
    output of step ``t-1``. Output: pooled ``(B, T, channels)``.
    """

    def __init__(self, feature_dim: int, grid: int, lstm_hidden: int, attn_dim: int,
                 rng: np.random.Generator | None = None, name: str = "sa"):
        if grid < 1 or feature_dim % (grid * grid):
            raise DimensionError(f"feature dim {feature_dim} is not divisible by K*K={grid * grid}")
        self.grid = grid
        self.channels = feature_dim // (grid * grid)
        self.attn = SpatialAttention(self.channels, lstm_hidden, attn_dim, grid, rng, name=name)
        self.lstm = GruCell(self.channels, lstm_hidden, rng, name=f"{name}.L")
        self.uniform = False
        self._cache = None

    @property
    def params(self) -> list[Param]:
        return self.attn.params + list(self.lstm.params.values())

    def forward(self, x: np.ndarray):
        b, t_len, _ = x.shape
        cmap = x.reshape(b, t_len, self.grid * self.grid, self.channels)
        if self.uniform:
            self._cache = ("uniform", cmap.shape)
            return cmap.mean(axis=2), None
        l_state, prime_cache = self.lstm.step(cmap[:, 0].mean(axis=1),
                                              np.zeros((b, self.lstm.hidden_dim)))
        pooled = np.empty((b, t_len, self.channels))
        weights = np.empty((b, t_len, self.grid * self.grid))
        attn_caches, step_caches = [], []
        for t in range(t_len):
            ctx, w, _, ac = self.attn.forward(cmap[:, t], l_state)
            pooled[:, t] = ctx
            weights[:, t] = w
            attn_caches.append(ac)
            if t < t_len - 1:
                l_state, sc = self.lstm.step(ctx, l_state)
                step_caches.append(sc)
        self._cache = ("attn", cmap.shape, prime_cache, attn_caches, step_caches)
        return pooled, weights.reshape(b, t_len, self.grid, self.grid)

    def backward(self, d_pooled: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("spatial pooling backward called before forward")
        cache, self._cache = self._cache, None
        shape = cache[1]
        b, t_len, npos, ch = shape
        if cache[0] == "uniform":
            return np.repeat(d_pooled[:, :, None, :] / npos, npos, axis=2).reshape(b, t_len, npos * ch)
        _, _, prime_cache, attn_caches, step_caches = cache
        d_cmap = np.empty(shape)
        dl = np.zeros((b, self.lstm.hidden_dim))
        for t in range(t_len - 1, -1, -1):
            d_ctx = d_pooled[:, t].copy()
            if t < t_len - 1:
                d_in, dl = self.lstm.step_backward(step_caches[t], dl)
                d_ctx += d_in
            d_keys, d_query = self.attn.backward(attn_caches[t], d_ctx)
            d_cmap[:, t] = d_keys
            dl = dl + d_query
        d_mean, _ = self.lstm.step_backward(prime_cache, dl)
        d_cmap[:, 0] += d_mean[:, None, :] / npos
        return d_cmap.reshape(b, t_len, npos * ch)


@dataclass(frozen=True)
class AttentionTrace:
    """Pre-softmax scores and sharing-gate weights for one sequence pair."""

    e: np.ndarray
    f: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def steps(self) -> int:
        return self.alpha.shape[0]

    def check(self, tol: float = 1e-9) -> None:
        """Raise ``ValueError`` if the stochasticity invariants do not hold."""
        for name in ("e", "f", "alpha", "beta"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"trace matrix {name} must be square, got {m.shape}")
        if not (np.all(self.alpha > 0) and np.all(self.beta > 0)):
            raise ValueError("sharing-gate weights must be strictly positive")
        if np.max(np.abs(self.alpha.sum(axis=0) - 1.0)) > tol:
            raise ValueError("alpha columns do not sum to 1")
        if np.max(np.abs(self.beta.sum(axis=1) - 1.0)) > tol:
            raise ValueError("beta rows do not sum to 1")


class JointAttention:
    """Cross-stream temporal attention between hidden sequences h and g.

    e_ij = v . tanh(W1 h_i + W2 g_j),  alpha_ij = softmax_i(e_ij),  o_h[j] = sum_i alpha_ij h_i
    f_ji = u . tanh(W3 g_j + W4 h_i),  beta_ji  = softmax_j(f_ji),  o_g[i] = sum_j beta_ji g_j

    Each frame of one branch queries the other, so both outputs have T frames.
    """

    def __init__(self, dim_h: int, dim_g: int, attn_dim: int,
                 rng: np.random.Generator | None = None, name: str = "jna"):
        self.dim_h, self.dim_g, self.attn_dim = dim_h, dim_g, attn_dim
        self.v = _param(f"{name}.v", (attn_dim,), rng, zero=True)
        self.u = _param(f"{name}.u", (attn_dim,), rng, zero=True)
        self.W1 = _param(f"{name}.W1", (attn_dim, dim_h), rng)
        self.W2 = _param(f"{name}.W2", (attn_dim, dim_g), rng)
        self.W3 = _param(f"{name}.W3", (attn_dim, dim_g), rng)
        self.W4 = _param(f"{name}.W4", (attn_dim, dim_h), rng)
        self._cache = None

    @property
    def params(self) -> list[Param]:
        return [self.v, self.u, self.W1, self.W2, self.W3, self.W4]

    def forward(self, h: np.ndarray, g: np.ndarray):
        """h ``(B, T, Hh)``, g ``(B, T, Hg)`` -> ``(o_h, o_g, (e, f, alpha, beta))``."""
        if h.ndim != 3 or g.ndim != 3:
            raise DimensionError("joint attention expects batched (B, T, dim) sequences")
        if h.shape[:2] != g.shape[:2]:
            raise ValueError(f"stream lengths differ: {h.shape[1]} vs {g.shape[1]}")
        if h.shape[2] != self.dim_h or g.shape[2] != self.dim_g:
            raise DimensionError(f"joint attention expects dims ({self.dim_h}, {self.dim_g}), "
                                 f"got ({h.shape[2]}, {g.shape[2]})")
        # s1[b, i, j] pairs key h_i with query g_j
        s1 = np.tanh((h @ self.W1.value.T)[:, :, None, :] + (g @ self.W2.value.T)[:, None, :, :])
        e = s1 @ self.v.value
        alpha = softmax(e, axis=1)
        o_h = np.einsum("bij,bid->bjd", alpha, h)
        # s2[b, i, j] pairs key g_j with query h_i
        s2 = np.tanh((g @ self.W3.value.T)[:, None, :, :] + (h @ self.W4.value.T)[:, :, None, :])
        f = s2 @ self.u.value
        beta = softmax(f, axis=2)
        o_g = np.einsum("bij,bjd->bid", beta, g)
        self._cache = (h, g, s1, s2, alpha, beta)
        return o_h, o_g, (e, f, alpha, beta)

    def backward(self, d_oh: np.ndarray, d_og: np.ndarray):
        if self._cache is None:
            raise StateError("joint attention backward called before forward")
        h, g, s1, s2, alpha, beta = self._cache
        self._cache = None

        d_alpha = np.einsum("bid,bjd->bij", h, d_oh)
        dh = np.einsum("bij,bjd->bid", alpha, d_oh)
        de = softmax_backward(alpha, d_alpha, axis=1)
        self.v.grad += np.einsum("bij,bija->a", de, s1)
        dpre = de[..., None] * self.v.value * (1.0 - s1 * s1)
        dph = dpre.sum(axis=2)
        dqg = dpre.sum(axis=1)
        self.W1.grad += np.einsum("bta,btd->ad", dph, h)
        self.W2.grad += np.einsum("bta,btd->ad", dqg, g)
        dh += dph @ self.W1.value
        dg = dqg @ self.W2.value

        d_beta = np.einsum("bid,bjd->bij", d_og, g)
        dg += np.einsum("bij,bid->bjd", beta, d_og)
        df = softmax_backward(beta, d_beta, axis=2)
        self.u.grad += np.einsum("bij,bija->a", df, s2)
        dpre = df[..., None] * self.u.value * (1.0 - s2 * s2)
        dpg = dpre.sum(axis=1)
        dqh = dpre.sum(axis=2)
        self.W3.grad += np.einsum("bta,btd->ad", dpg, g)
        self.W4.grad += np.einsum("bta,btd->ad", dqh, h)
        dg += dpg @ self.W3.value
        dh += dqh @ self.W4.value
        return dh, dg


def jna_forward(params: JointAttention, h, g):
    """Unbatched joint attention on ``(T, Hh)`` and ``(T, Hg)`` sequences.

    Returns ``(o_h, o_g, trace)``; the forward cache stays on ``params`` for
    :func:`jna_backward`.
    """
    h = np.asarray(h, dtype=DTYPE)
    g = np.asarray(g, dtype=DTYPE)
    if h.ndim != 2 or g.ndim != 2:
        raise DimensionError("jna_forward expects (T, dim) sequences")
    if h.shape[0] != g.shape[0]:
        raise ValueError(f"stream lengths differ: {h.shape[0]} vs {g.shape[0]}")
    o_h, o_g, (e, f, a, b) = params.forward(h[None], g[None])
    return o_h[0], o_g[0], AttentionTrace(e[0], f[0], a[0], b[0])


def jna_backward(params: JointAttention, d_oh, d_og):
    """Backward for :func:`jna_forward`; returns ``(dh, dg)``."""
    dh, dg = params.backward(np.asarray(d_oh, dtype=DTYPE)[None], np.asarray(d_og, dtype=DTYPE)[None])
    return dh[0], dg[0]


def _entropy(p: np.ndarray, axis: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=axis)


def gate_concentration(trace: AttentionTrace) -> tuple[float, float, float]:
    """Mean entropy of alpha columns, of beta rows, and mean effective support exp(H)."""
    h_alpha = _entropy(trace.alpha, axis=0)
    h_beta = _entropy(trace.beta, axis=1)
    support = float(np.mean(np.exp(np.concatenate([h_alpha, h_beta]))))
    return float(h_alpha.mean()), float(h_beta.mean()), support
