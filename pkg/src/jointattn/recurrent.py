"""GRU cells and stacked GRU sequence encoders with full BPTT.

All arrays carry a leading batch axis internally: inputs ``(B, T, D)``,
hidden states ``(B, T, H)``. The module-level functions accept unbatched
``(T, D)`` sequences as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_core import DTYPE, DimensionError, Param, StateError, glorot_uniform, sigmoid

GATES = ("z", "r", "h")


class GruCell:
    """Standard GRU cell.

    z = sigmoid(Wz x + Uz h + bz)
    r = sigmoid(Wr x + Ur h + br)
    c = tanh(Wh x + Uh (r * h) + bh)
    h' = (1 - z) * h + z * c
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 name: str = "gru"):
        if input_dim < 1 or hidden_dim < 1:
            raise DimensionError(f"GRU dims must be positive, got {input_dim}->{hidden_dim}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.name = name
        self.params: dict[str, Param] = {}
        for gate in GATES:
            for kind, shape in (("W", (hidden_dim, input_dim)), ("U", (hidden_dim, hidden_dim))):
                value = glorot_uniform(rng, *shape) if rng is not None else np.zeros(shape)
                self.params[f"{kind}{gate}"] = Param(f"{name}.{kind}{gate}", value)
            self.params[f"b{gate}"] = Param(f"{name}.b{gate}", np.zeros(hidden_dim))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key].value

    def step(self, x: np.ndarray, h_prev: np.ndarray):
        """One batched step. Returns ``(h, cache)``."""
        p = self
        az = x @ p["Wz"].T + h_prev @ p["Uz"].T + p["bz"]
        ar = x @ p["Wr"].T + h_prev @ p["Ur"].T + p["br"]
        z = sigmoid(az)
        r = sigmoid(ar)
        rh = r * h_prev
        c = np.tanh(x @ p["Wh"].T + rh @ p["Uh"].T + p["bh"])
        h = h_prev + z * (c - h_prev)
        return h, (x, h_prev, z, r, rh, c)

    def step_backward(self, cache, dh: np.ndarray):
        """Accumulate parameter grads; return ``(dx, dh_prev)``."""
        x, h_prev, z, r, rh, c = cache
        g = {k: v.grad for k, v in self.params.items()}
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        dac = dc * (1.0 - c * c)
        g["Wh"] += dac.T @ x
        g["Uh"] += dac.T @ rh
        g["bh"] += dac.sum(axis=0)
        dx = dac @ self["Wh"]
        drh = dac @ self["Uh"]
        dr = drh * h_prev
        dh_prev += drh * r

        daz = dz * z * (1.0 - z)
        g["Wz"] += daz.T @ x
        g["Uz"] += daz.T @ h_prev
        g["bz"] += daz.sum(axis=0)
        dx += daz @ self["Wz"]
        dh_prev += daz @ self["Uz"]

        dar = dr * r * (1.0 - r)
        g["Wr"] += dar.T @ x
        g["Ur"] += dar.T @ h_prev
        g["br"] += dar.sum(axis=0)
        dx += dar @ self["Wr"]
        dh_prev += dar @ self["Ur"]
        return dx, dh_prev


@dataclass
class EncoderCache:
    step_caches: list  # [layer][t]
    batch: int
    steps: int


class GruEncoder:
    """Stack of GRU layers; returns the last layer's states for every timestep."""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], rng: np.random.Generator | None = None,
                 name: str = "enc"):
        if len(hidden_dims) == 0:
            raise DimensionError("an encoder needs at least one GRU layer")
        self.cells: list[GruCell] = []
        d = input_dim
        for k, hdim in enumerate(hidden_dims):
            self.cells.append(GruCell(d, hdim, rng, name=f"{name}.{k}"))
            d = hdim
        self._cache: EncoderCache | None = None

    @property
    def input_dim(self) -> int:
        return self.cells[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.cells[-1].hidden_dim

    @property
    def params(self) -> list[Param]:
        return [p for cell in self.cells for p in cell.params.values()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        states, self._cache = _encode(self.cells, x)
        return states

    def backward(self, d_states: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("encoder backward called before forward")
        dx = _encode_backward(self.cells, self._cache, d_states)
        self._cache = None
        return dx


def _check_chain(cells: Sequence[GruCell], input_dim: int) -> None:
    d = input_dim
    for k, cell in enumerate(cells):
        if cell.input_dim != d:
            raise DimensionError(f"layer {k} expects input dim {cell.input_dim}, receives {d}")
        d = cell.hidden_dim


def _encode(cells: Sequence[GruCell], x: np.ndarray):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise DimensionError(f"expected (batch, T, dim) input, got shape {x.shape}")
    b, t_len, d = x.shape
    if t_len == 0:
        raise ValueError("cannot encode an empty sequence")
    _check_chain(cells, d)
    caches = []
    layer_in = x
    for cell in cells:
        h = np.zeros((b, cell.hidden_dim), dtype=DTYPE)
        out = np.empty((b, t_len, cell.hidden_dim), dtype=DTYPE)
        layer_caches = []
        for t in range(t_len):
            h, c = cell.step(layer_in[:, t], h)
            out[:, t] = h
            layer_caches.append(c)
        caches.append(layer_caches)
        layer_in = out
    return layer_in, EncoderCache(caches, b, t_len)


def _encode_backward(cells: Sequence[GruCell], cache: EncoderCache, d_states: np.ndarray) -> np.ndarray:
    d_out = np.asarray(d_states, dtype=DTYPE)
    for cell, layer_caches in zip(reversed(cells), reversed(cache.step_caches)):
        d_in = np.empty((cache.batch, cache.steps, cell.input_dim), dtype=DTYPE)
        dh = np.zeros((cache.batch, cell.hidden_dim), dtype=DTYPE)
        for t in range(cache.steps - 1, -1, -1):
            dx, dh = cell.step_backward(layer_caches[t], dh + d_out[:, t])
            d_in[:, t] = dx
        d_out = d_in
    return d_out


def gru_step(cell: GruCell, x, h_prev) -> np.ndarray:
    """Single unbatched GRU step on vectors."""
    x = np.asarray(x, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    if x.shape != (cell.input_dim,) or h_prev.shape != (cell.hidden_dim,):
        raise DimensionError(
            f"gru_step expects x of ({cell.input_dim},) and h of ({cell.hidden_dim},), "
            f"got {x.shape} and {h_prev.shape}")
    h, _ = cell.step(x[None], h_prev[None])
    return h[0]


def encode_sequence(cells: Sequence[GruCell], seq):
    """Encode a ``(T, D)`` sequence (or a batch) from a zero initial state.

    Returns ``(states, cache)``; pass the cache to :func:`encode_backward`.
    """
    seq = np.asarray(seq, dtype=DTYPE)
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    states, cache = _encode(cells, seq)
    return (states[0] if single else states), cache


def encode_backward(cells: Sequence[GruCell], cache: EncoderCache | None, d_states) -> np.ndarray:
    """BPTT through :func:`encode_sequence`; accumulates into the cells' grads."""
    if cache is None:
        raise StateError("encode_backward needs the cache returned by encode_sequence")
    d_states = np.asarray(d_states, dtype=DTYPE)
    single = d_states.ndim == 2
    if single:
        d_states = d_states[None]
    dx = _encode_backward(cells, cache, d_states)
    return dx[0] if single else dx
