"""Dynamic-width residual RNN layer.

A shared recurrent cell feeds ``W`` expert FC branches. Expert ``i`` emits a
residual candidate ``A_i`` (``N`` channels) and a reweighting feature ``G_i``
(``H`` channels). The features are mean-pooled over time and passed through
a transform-average-concatenate (TAC) block, tanh after each of its three
FCs, that yields one logit per expert; a softmax over the ``w`` active
experts gives scalars ``Q_i`` and the layer returns ``X + sum_i Q_i * A_i``.

Only the first ``w`` experts are evaluated, so any width ``w <= W`` can be
run from the same parameters. Because TAC averages over the active experts,
``Q`` changes with ``w`` instead of being a truncation.

With ``tac=False`` (the ablation) each expert emits a single gate channel
instead of ``G_i``, and ``Q_i = sigmoid(mean_t gate_i)`` independently per
expert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class GRUParams:
    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    def named_parameters(self, prefix: str):
        for name in ("w_ih", "w_hh", "b_ih", "b_hh"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class TACParams:
    fc1: Linear  # H -> H_tac, shared by all experts
    fc2: Linear  # H_tac -> H_tac, on the mean over experts
    fc3: Linear  # 2 H_tac -> 1, on [per-expert, mean]

    def named_parameters(self, prefix: str):
        for name in ("fc1", "fc2", "fc3"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")


@dataclass
class DynamicLayerParams:
    rnn: list[GRUParams]  # one cell, or two for bidirectional
    experts: list[Linear]  # each R_out -> N + H  (N + 1 without TAC)
    tac: TACParams | None
    n_features: int
    reweight_dim: int = field(default=0)

    @property
    def max_width(self) -> int:
        return len(self.experts)

    @property
    def rnn_out(self) -> int:
        return sum(c.hidden for c in self.rnn)

    def named_parameters(self, prefix: str = "layer"):
        for i, cell in enumerate(self.rnn):
            yield from cell.named_parameters(f"{prefix}.rnn.{i}")
        for i, ex in enumerate(self.experts):
            yield from ex.named_parameters(f"{prefix}.expert.{i}")
        if self.tac is not None:
            yield from self.tac.named_parameters(f"{prefix}.tac")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def truncated(self, w: int) -> DynamicLayerParams:
        """Same tensors, only the first ``w`` experts kept."""
        _check_width(w, self.max_width)
        return DynamicLayerParams(self.rnn, self.experts[:w], self.tac, self.n_features, self.reweight_dim)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float64, zero_bias: bool = False) -> Linear:
    w = _uniform(rng, (n_in, n_out), n_in, dtype)
    if zero_bias:
        b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    else:
        b = _uniform(rng, (n_out,), n_in, dtype)
    return Linear(w, b)


def init_gru(rng: np.random.Generator, n_in: int, hidden: int, dtype=np.float64) -> GRUParams:
    return GRUParams(
        _uniform(rng, (n_in, 3 * hidden), hidden, dtype),
        _uniform(rng, (hidden, 3 * hidden), hidden, dtype),
        _uniform(rng, (3 * hidden,), hidden, dtype),
        _uniform(rng, (3 * hidden,), hidden, dtype),
    )


def init_dynamic_layer(
    rng: np.random.Generator,
    n_features: int,
    reweight_dim: int,
    max_width: int,
    rnn_hidden: int,
    tac_hidden: int,
    *,
    bidirectional: bool = False,
    tac: bool = True,
    dtype=np.float64,
) -> DynamicLayerParams:
    if min(n_features, reweight_dim, max_width, rnn_hidden, tac_hidden) < 1:
        raise ValueError("all layer dimensions must be >= 1")
    cells = [init_gru(rng, n_features, rnn_hidden, dtype) for _ in range(2 if bidirectional else 1)]
    r_out = rnn_hidden * len(cells)
    head = n_features + (reweight_dim if tac else 1)
    experts = [init_linear(rng, r_out, head, dtype) for _ in range(max_width)]
    tac_params = None
    if tac:
        tac_params = TACParams(
            init_linear(rng, reweight_dim, tac_hidden, dtype),
            init_linear(rng, tac_hidden, tac_hidden, dtype),
            init_linear(rng, 2 * tac_hidden, 1, dtype, zero_bias=True),
        )
    return DynamicLayerParams(cells, experts, tac_params, n_features, reweight_dim if tac else 0)


def _check_width(w: int, max_width: int) -> None:
    if not 1 <= w <= max_width:
        raise ValueError(f"width {w} out of range [1, {max_width}]")


def tac_reweight(G, tac: TACParams) -> Tensor:
    """Reweighting scalars from pooled expert features.

    ``G`` is a tensor ``[S, w, H]`` (or a list of ``w`` H-vectors, treated as
    ``S = 1``). Returns ``Q`` of shape ``[S, w]`` whose rows sum to one.
    """
    if not isinstance(G, Tensor):
        if len(G) == 0:
            raise ValueError("tac_reweight needs at least one expert")
        G = Tensor(np.stack([g.data if isinstance(g, Tensor) else np.asarray(g) for g in G])[None])
    if G.ndim != 3 or G.shape[1] == 0:
        raise ValueError(f"tac_reweight expects [S, w, H] with w >= 1, got {G.shape}")
    s, w, _ = G.shape
    h = T.tanh(tac.fc1(G))  # [S, w, Ht]
    ht = h.shape[-1]
    m = T.tanh(tac.fc2(T.mean(h, axis=1)))  # [S, Ht]
    m = T.broadcast_to(T.reshape(m, (s, 1, ht)), (s, w, ht))
    # the shared mean only survives the softmax through this nonlinearity
    logits = T.tanh(tac.fc3(T.concat([h, m], axis=-1)))  # [S, w, 1]
    return T.softmax(T.reshape(logits, (s, w)), axis=1)


def dynamic_layer_forward(X: Tensor, params: DynamicLayerParams, w: int, return_weights: bool = False):
    """Apply the layer at width ``w`` to ``X[S, T, N]`` (S independent sequences).

    Returns ``[S, T, N]``, plus ``Q[S, w]`` when ``return_weights`` is set.
    """
    _check_width(w, params.max_width)
    if X.ndim != 3 or X.shape[-1] != params.n_features:
        raise T.ShapeError("dynamic_layer", X.shape, detail=f"expected [S, T, {params.n_features}]")
    s, t, n = X.shape

    outs = [T.gru(X, c.w_ih, c.w_hh, c.b_ih, c.b_hh, reverse=(i == 1)) for i, c in enumerate(params.rnn)]
    h = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)

    active = params.experts[:w]
    weight = T.concat([e.weight for e in active], axis=1)
    bias = T.concat([e.bias for e in active], axis=0)
    head = weight.shape[1] // w
    y = T.reshape(T.bias_add(T.matmul(h, weight), bias), (s, t, w, head))
    A = T.slice_axis(y, -1, 0, n)  # [S, T, w, N]
    G = T.mean(T.slice_axis(y, -1, n, head), axis=1)  # [S, w, H]

    if params.tac is not None:
        Q = tac_reweight(G, params.tac)
    else:
        Q = T.sigmoid(T.reshape(G, (s, w)))

    Qb = T.broadcast_to(T.reshape(Q, (s, 1, w, 1)), (s, t, w, n))
    out = T.add(X, T.sum(T.mul(Qb, A), axis=2))
    return (out, Q) if return_weights else out


def layer_param_count(params: DynamicLayerParams, w: int) -> int:
    """Parameters used by the layer at width ``w`` (counted from dimensions)."""
    _check_width(w, params.max_width)
    return layer_param_count_dims(
        params.n_features, params.reweight_dim, params.rnn[0].hidden, len(params.rnn),
        params.tac.fc1.weight.shape[1] if params.tac else 0, w, params.tac is not None,
    )


def layer_param_count_dims(n, h, r, n_dirs, h_tac, w, tac=True) -> int:
    rnn = n_dirs * (3 * r * n + 3 * r * r + 6 * r)
    head = n + (h if tac else 1)
    experts = w * (n_dirs * r * head + head)
    tac_p = (h * h_tac + h_tac) + (h_tac * h_tac + h_tac) + (2 * h_tac + 1) if tac else 0
    return rnn + experts + tac_p


def layer_macs(params: DynamicLayerParams, w: int, frames: float) -> float:
    """Multiply-accumulates for one sequence of ``frames`` steps at width ``w``."""
    _check_width(w, params.max_width)
    return layer_macs_dims(
        params.n_features, params.reweight_dim, params.rnn[0].hidden, len(params.rnn),
        params.tac.fc1.weight.shape[1] if params.tac else 0, w, frames, params.tac is not None,
    )


def layer_macs_dims(n, h, r, n_dirs, h_tac, w, frames, tac=True) -> float:
    # only matmul work counts; activations, additions, pooling and elementwise products excluded
    rnn = n_dirs * frames * (3 * r * n + 3 * r * r)
    head = n + (h if tac else 1)
    experts = w * frames * n_dirs * r * head
    # TAC runs once per sequence on time-pooled features
    tac_m = (w * h * h_tac + h_tac * h_tac + w * 2 * h_tac) if tac else 0
    return rnn + experts + tac_m
