"""The column lattice: per-patch stacks of K+1 level vectors and their
iterative consensus dynamics.

Every spatial position (h, w) owns a column of level vectors l^0..l^K, each
of dimension d. One update step recomputes every level synchronously from
the previous step's values as a weighted arithmetic average of up to four
contributions:

    previous value of the level itself        (weight mix[k, 0])
    bottom-up encoder of the level below      (weight mix[k, 1])
    top-down decoder of the level above       (weight mix[k, 2])
    attention readout over the same layer     (weight mix[k, 3])

The average divides by the number of contributions actually present: the
top layer has no decoder above it, so it averages three terms. The bottom
layer is pinned: it is refreshed from the token grid before every step and
carried through the step unchanged. (Its averaged update would be discarded
by the next refresh, and nothing downstream reads it, so it is omitted; the
decoder parameter set into layer 0 still exists for checkpoint-layout
stability but receives no gradient.)

Encoders use a sine nonlinearity, decoders use gelu; each layer pair has a
single parameter set shared across all columns. Attention is a softmax over
scaled dot products between positions of the same layer, either across the
full grid or within a square window.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

# columns of the per-layer mixing quadruple
MIX_PREV, MIX_BU, MIX_TD, MIX_ATT = 0, 1, 2, 3


@dataclass
class LatticeState:
    """All level vectors at one time step: layers[k] has shape (B, h, w, d)."""

    layers: list[Tensor]
    t: int

    @property
    def num_levels(self) -> int:
        return len(self.layers)

    def levels_array(self) -> np.ndarray:
        """Stack to (B, h, w, K+1, d); detached copy for analysis code."""
        return np.stack([l.value for l in self.layers], axis=3)


def init_state(batch: int, h: int, w: int, num_layers: int, d: int,
               gen: np.random.Generator, dtype=np.float32) -> LatticeState:
    """Every level vector i.i.d. normal with std 1/sqrt(d), so E|v|^2 = 1."""
    sigma = 1.0 / np.sqrt(d)
    layers = [Tensor(gen.normal(0.0, sigma, size=(batch, h, w, d)).astype(dtype))
              for _ in range(num_layers)]
    return LatticeState(layers=layers, t=0)


def embed_bottom(state: LatticeState, tokens: Tensor) -> LatticeState:
    """Overwrite layer 0 with the token grid; layers k >= 1 untouched."""
    if tokens.shape != state.layers[0].shape:
        raise T.ShapeError(f"embed_bottom: token grid {tokens.shape} does not match "
                           f"lattice layer {state.layers[0].shape}")
    return LatticeState(layers=[tokens] + state.layers[1:], t=state.t)


@lru_cache(maxsize=16)
def _neighborhood_mask(h: int, w: int, radius: int) -> np.ndarray:
    """(P, P) additive mask: 0 within the square window, -1e30 outside."""
    rows, cols = np.divmod(np.arange(h * w), w)
    near = (np.abs(rows[:, None] - rows[None, :]) <= radius) & \
           (np.abs(cols[:, None] - cols[None, :]) <= radius)
    return np.where(near, 0.0, -1e30).astype(np.float32)


def attention(layer: Tensor, beta: float, neighborhood="full") -> Tensor:
    """Consensus readout for one layer.

    For each position p, weights over neighborhood positions q are
    softmax_q(beta * <l_q, l_p>); the output at p is the weighted sum of the
    l_q. Weights sum to 1 per position. `neighborhood` is "full" or a square
    radius (Chebyshev distance, position included in its own window).
    """
    if beta <= 0:
        raise ValueError(f"attention sharpness beta must be positive, got {beta}")
    b, h, w, d = layer.shape
    x = T.reshape(layer, (b, h * w, d))
    logits = T.matmul(x, T.transpose(x, (0, 2, 1))) * float(beta)
    if neighborhood != "full":
        mask = _neighborhood_mask(h, w, int(neighborhood)).astype(layer.dtype)
        logits = logits + Tensor(mask)
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, x)
    return T.reshape(out, (b, h, w, d))


def attention_weights(layer_values: np.ndarray, beta: float, neighborhood="full") -> np.ndarray:
    """(B, P, P) attention weight rows for inspection; rows sum to 1."""
    with T.no_grad():
        b, h, w, d = layer_values.shape
        x = layer_values.reshape(b, h * w, d)
        logits = np.einsum("bpd,bqd->bpq", x, x) * float(beta)
        if neighborhood != "full":
            logits = logits + _neighborhood_mask(h, w, int(neighborhood))
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)


def init_lattice_weights(d: int, num_levels: int, gen: np.random.Generator,
                         dtype=np.float32, linear_columns: bool = False) -> dict[str, Tensor]:
    """Per-layer-pair encoder/decoder parameters plus mixing scalars.

    Keys: bu.k.* for k in 1..K (encoder into layer k), td.k.* for k in
    0..K-1 (decoder into layer k), and mix of shape (K+1, 4) initialized
    to 1. Encoders get the sinusoidal first-layer init, uniform
    +-sqrt(6/fan_in); decoders get Glorot uniform.
    """
    K = num_levels - 1
    hidden = 4 * d
    params: dict[str, Tensor] = {}

    def linear(name, fan_in, fan_out, limit):
        w = gen.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True,
                                     name=f"{name}.b")

    for k in range(1, K + 1):
        if linear_columns:
            linear(f"bu.{k}.fc", d, d, np.sqrt(6.0 / d))
        else:
            linear(f"bu.{k}.fc1", d, hidden, np.sqrt(6.0 / d))
            linear(f"bu.{k}.fc2", hidden, d, np.sqrt(6.0 / hidden))
    for k in range(K):
        if linear_columns:
            linear(f"td.{k}.fc", d, d, np.sqrt(6.0 / d))
        else:
            linear(f"td.{k}.fc1", d, hidden, np.sqrt(6.0 / (d + hidden)))
            linear(f"td.{k}.fc2", hidden, d, np.sqrt(6.0 / (d + hidden)))
    params["mix"] = Tensor(np.ones((num_levels, 4), dtype=dtype), requires_grad=True, name="mix")
    return params


def _column_mlp(level: Tensor, params: dict[str, Tensor], key: str, activation,
                dropout_p: float, gen, train: bool) -> Tensor:
    """Shared per-position MLP, linear(d->4d) -> activation -> linear(4d->d)."""
    b, h, w, d = level.shape
    x = T.reshape(level, (b * h * w, d))
    if f"{key}.fc.w" in params:  # linear-columns ablation
        out = x @ params[f"{key}.fc.w"] + params[f"{key}.fc.b"]
        return T.reshape(out, (b, h, w, d))
    hidden = x @ params[f"{key}.fc1.w"] + params[f"{key}.fc1.b"]
    hidden = activation(hidden)
    hidden = T.dropout(hidden, dropout_p, gen, train)
    out = hidden @ params[f"{key}.fc2.w"] + params[f"{key}.fc2.b"]
    return T.reshape(out, (b, h, w, d))


def bottom_up(level: Tensor, params: dict[str, Tensor], k: int, *,
              activation=T.sine, dropout_p: float = 0.0, gen=None,
              train: bool = False) -> Tensor:
    """Encoder lifting layer k-1 values into layer k (sine by default)."""
    return _column_mlp(level, params, f"bu.{k}", activation, dropout_p, gen, train)


def top_down(level: Tensor, params: dict[str, Tensor], k: int, *,
             activation=T.gelu, dropout_p: float = 0.0, gen=None,
             train: bool = False) -> Tensor:
    """Decoder projecting layer k+1 values into layer k (gelu by default)."""
    return _column_mlp(level, params, f"td.{k}", activation, dropout_p, gen, train)


def _mix_scalar(mix: Tensor, k: int, col: int) -> Tensor:
    return T.take(T.take(mix, k, axis=0), col, axis=0)


def step(state: LatticeState, params: dict[str, Tensor], cfg, *,
         gen=None, train: bool = False) -> LatticeState:
    """One synchronous update: every new level reads only t-1 values.

    cfg provides beta, neighborhood, dropout, use_attention and the column
    activation; see config.TrainConfig.
    """
    K = state.num_levels - 1
    mix = params["mix"]
    bu_act, td_act = cfg.column_activations()
    old = state.layers
    new_layers = [old[0]]  # bottom layer pinned between token refreshes
    for k in range(1, K + 1):
        terms = [_mix_scalar(mix, k, MIX_PREV) * old[k]]
        up = bottom_up(old[k - 1], params, k, activation=bu_act,
                       dropout_p=cfg.dropout, gen=gen, train=train)
        terms.append(_mix_scalar(mix, k, MIX_BU) * up)
        if k <= K - 1:
            down = top_down(old[k + 1], params, k, activation=td_act,
                            dropout_p=cfg.dropout, gen=gen, train=train)
            terms.append(_mix_scalar(mix, k, MIX_TD) * down)
        if cfg.use_attention:
            att = attention(old[k], cfg.beta, cfg.neighborhood)
            terms.append(_mix_scalar(mix, k, MIX_ATT) * att)
        total = terms[0]
        for t_ in terms[1:]:
            total = total + t_
        new_layers.append(total * (1.0 / len(terms)))
    return LatticeState(layers=new_layers, t=state.t + 1)


def propagate(tokens: Tensor, params: dict[str, Tensor], steps: int, cfg, *,
              init_gen: np.random.Generator | None = None, dropout_gen=None,
              train: bool = False, initial_state: LatticeState | None = None
              ) -> LatticeState:
    """Random init, then `steps` rounds of {refresh bottom layer; step}.

    Differentiable through the whole unrolled sequence. Same generators,
    same result. `initial_state` substitutes the random init (for replaying
    a known starting point).
    """
    if steps < 1:
        raise ValueError(f"propagation needs at least one step, got {steps}")
    b, h, w, d = tokens.shape
    if initial_state is not None:
        state = initial_state
    else:
        if init_gen is None:
            raise ValueError("propagate needs init_gen or initial_state")
        state = init_state(b, h, w, cfg.K + 1, d, init_gen, dtype=tokens.value.dtype)
    for _ in range(steps):
        state = embed_bottom(state, tokens)
        state = step(state, params, cfg, gen=dropout_gen, train=train)
    return state
