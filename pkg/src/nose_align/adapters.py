"""Trainable projection heads and deep adapters with hand-written gradients.

Two adapter families map frozen molecular embeddings into the shared
alignment space:

* description adapter: a stack of pre-LN residual MLP blocks
  (x + contract(GELU(expand(LN(x))))) followed by an output linear layer,
  high capacity (default 12 blocks, expansion 4);
* receptor adapter: a bottleneck MLP (d -> d/4 -> d/4 -> d) with GELU and
  heavy inverted dropout after each hidden activation, to resist overfitting
  on the much smaller receptor pairing data.

Partner modalities go through two-layer projection heads
(linear -> GELU -> linear).

There is no general autodiff here: every forward keeps a cache and every
backward is derived by hand, validated against central finite differences.
Weights initialize to N(0, 2/(fan_in+fan_out)); residual contract layers
start at zero so each block begins as the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import NumericError
from .linalg import Rng, check_finite

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return cdf + x * phi


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5


@dataclass
class ResBlockParams:
    norm: LayerNormParams
    expand: LinearLayer   # d -> e*d
    contract: LinearLayer  # e*d -> d


@dataclass
class Head:
    """Two-layer projection head: linear -> GELU -> linear."""

    layer1: LinearLayer
    layer2: LinearLayer


@dataclass
class DescAdapterParams:
    blocks: list[ResBlockParams]
    out: LinearLayer


@dataclass
class RecAdapterParams:
    lin_in: LinearLayer      # d -> bottleneck
    lin_hidden: LinearLayer  # bottleneck -> bottleneck
    lin_out: LinearLayer     # bottleneck -> d
    dropout_rate: float = 0.5


@dataclass
class AdapterConfig:
    """Shapes for the full trainable stack; desk-scale defaults."""

    dim: int = 64
    desc_depth: int = 12
    desc_expansion: int = 4
    rec_bottleneck: int = 0      # 0 -> max(1, dim // 4)
    dropout_rate: float = 0.5
    desc_in_dim: int = 0         # partner (descriptor) embedding dim; 0 -> dim
    rec_in_dim: int = 0          # partner (receptor) embedding dim; 0 -> dim
    head_hidden: int = 0         # 0 -> dim

    def resolved(self) -> "AdapterConfig":
        return AdapterConfig(
            dim=self.dim,
            desc_depth=self.desc_depth,
            desc_expansion=self.desc_expansion,
            rec_bottleneck=self.rec_bottleneck or max(1, self.dim // 4),
            dropout_rate=self.dropout_rate,
            desc_in_dim=self.desc_in_dim or self.dim,
            rec_in_dim=self.rec_in_dim or self.dim,
            head_hidden=self.head_hidden or self.dim,
        )

    def to_dict(self) -> dict:
        r = self.resolved()
        return {
            "dim": r.dim, "desc_depth": r.desc_depth,
            "desc_expansion": r.desc_expansion,
            "rec_bottleneck": r.rec_bottleneck,
            "dropout_rate": r.dropout_rate,
            "desc_in_dim": r.desc_in_dim, "rec_in_dim": r.rec_in_dim,
            "head_hidden": r.head_hidden,
        }

    @staticmethod
    def from_dict(d: dict) -> "AdapterConfig":
        return AdapterConfig(**d)


@dataclass
class AdapterParams:
    """Every trainable tensor of the alignment stage."""

    desc_adapter: DescAdapterParams
    rec_adapter: RecAdapterParams
    head_rec: Head
    head_desc: Head
    config: AdapterConfig = field(default_factory=AdapterConfig)

    def tensors(self) -> dict[str, np.ndarray]:
        """Live, ordered name -> array views over every parameter tensor."""
        out: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.desc_adapter.blocks):
            p = f"desc_adapter.block{i:02d}"
            out[f"{p}.norm.gamma"] = blk.norm.gamma
            out[f"{p}.norm.beta"] = blk.norm.beta
            out[f"{p}.expand.W"] = blk.expand.W
            out[f"{p}.expand.b"] = blk.expand.b
            out[f"{p}.contract.W"] = blk.contract.W
            out[f"{p}.contract.b"] = blk.contract.b
        out["desc_adapter.out.W"] = self.desc_adapter.out.W
        out["desc_adapter.out.b"] = self.desc_adapter.out.b
        for name, lin in (("lin_in", self.rec_adapter.lin_in),
                          ("lin_hidden", self.rec_adapter.lin_hidden),
                          ("lin_out", self.rec_adapter.lin_out)):
            out[f"rec_adapter.{name}.W"] = lin.W
            out[f"rec_adapter.{name}.b"] = lin.b
        for hname, head in (("head_rec", self.head_rec),
                            ("head_desc", self.head_desc)):
            out[f"{hname}.layer1.W"] = head.layer1.W
            out[f"{hname}.layer1.b"] = head.layer1.b
            out[f"{hname}.layer2.W"] = head.layer2.W
            out[f"{hname}.layer2.b"] = head.layer2.b
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def copy(self) -> "AdapterParams":
        src = self.tensors()
        clone = init_adapter_params(self.config, Rng(0))
        for name, t in clone.tensors().items():
            t[...] = src[name]
        return clone


GradientSet = dict[str, np.ndarray]


def zero_gradients(params: AdapterParams) -> GradientSet:
    return {k: np.zeros_like(v) for k, v in params.tensors().items()}


def _init_linear(rng: Rng, out_dim: int, in_dim: int, zero: bool = False) -> LinearLayer:
    if zero:
        w = np.zeros((out_dim, in_dim))
    else:
        sigma = np.sqrt(2.0 / (in_dim + out_dim))
        w = rng.normal_matrix(out_dim, in_dim, sigma)
    return LinearLayer(W=w, b=np.zeros(out_dim))


def init_adapter_params(config: AdapterConfig, rng: Rng) -> AdapterParams:
    """Seeded initialization; contract layers start at zero (identity blocks)."""
    c = config.resolved()
    d, e = c.dim, c.desc_expansion
    blocks = []
    for _ in range(c.desc_depth):
        blocks.append(ResBlockParams(
            norm=LayerNormParams(gamma=np.ones(d), beta=np.zeros(d)),
            expand=_init_linear(rng, e * d, d),
            contract=_init_linear(rng, d, e * d, zero=True),
        ))
    desc = DescAdapterParams(blocks=blocks, out=_init_linear(rng, d, d))
    nb = c.rec_bottleneck
    rec = RecAdapterParams(
        lin_in=_init_linear(rng, nb, d),
        lin_hidden=_init_linear(rng, nb, nb),
        lin_out=_init_linear(rng, d, nb),
        dropout_rate=c.dropout_rate,
    )
    head_rec = Head(_init_linear(rng, c.head_hidden, c.rec_in_dim),
                    _init_linear(rng, d, c.head_hidden))
    head_desc = Head(_init_linear(rng, c.head_hidden, c.desc_in_dim),
                     _init_linear(rng, d, c.head_hidden))
    return AdapterParams(desc_adapter=desc, rec_adapter=rec,
                         head_rec=head_rec, head_desc=head_desc, config=c)


# --------------------------------------------------------------------------
# primitive layers (forward keeps a cache, backward consumes it)


def _linear_fwd(x: np.ndarray, lin: LinearLayer):
    if x.shape[1] != lin.in_dim:
        raise ValueError(f"linear expects {lin.in_dim} inputs, got {x.shape[1]}")
    return x @ lin.W.T + lin.b, x


def _linear_bwd(g: np.ndarray, x: np.ndarray, lin: LinearLayer):
    dW = g.T @ x
    db = g.sum(axis=0)
    dx = g @ lin.W
    return dx, dW, db


def _layernorm_fwd(x: np.ndarray, p: LayerNormParams):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mu) * inv
    return p.gamma * xhat + p.beta, (xhat, inv)


def _layernorm_bwd(g: np.ndarray, cache, p: LayerNormParams):
    xhat, inv = cache
    d = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * p.gamma
    dx = inv / d * (d * gx - gx.sum(axis=1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=1, keepdims=True))
    return dx, dgamma, dbeta


def _dropout_mask(rng: Rng, shape: tuple[int, int], p: float) -> np.ndarray:
    """Inverted dropout mask with entries in {0, 1/(1-p)}."""
    if p <= 0.0:
        return np.ones(shape)
    keep = 1.0 - p
    n = shape[0] * shape[1]
    u = np.fromiter((rng.uniform() for _ in range(n)), dtype=np.float64, count=n)
    return (u >= p).astype(np.float64).reshape(shape) / keep


# --------------------------------------------------------------------------
# heads


def forward_head(x, head: Head) -> np.ndarray:
    """layer2(GELU(layer1(x))); deterministic."""
    y, cache = head_forward(np.asarray(x, dtype=np.float64), head)
    return y


def head_forward(x: np.ndarray, head: Head):
    h1, x_in = _linear_fwd(x, head.layer1)
    a1 = gelu(h1)
    y, _ = _linear_fwd(a1, head.layer2)
    check_finite("head output", y)
    return y, (x_in, h1, a1)


def head_backward(cache, head: Head, upstream: np.ndarray):
    x_in, h1, a1 = cache
    da1, dW2, db2 = _linear_bwd(upstream, a1, head.layer2)
    dh1 = da1 * gelu_grad(h1)
    dx, dW1, db1 = _linear_bwd(dh1, x_in, head.layer1)
    grads = {"layer1.W": dW1, "layer1.b": db1, "layer2.W": dW2, "layer2.b": db2}
    return dx, grads


# --------------------------------------------------------------------------
# adapters


def forward_adapter(x, params, dropout_rng: Rng | None = None):
    """Run one adapter over a row batch; returns (output, cache).

    ``params`` selects the path: DescAdapterParams runs the residual stack
    (no dropout, rng ignored), RecAdapterParams runs the bottleneck with
    inverted dropout when ``dropout_rng`` is given (training mode).
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(params, DescAdapterParams):
        return _desc_forward(x, params)
    if isinstance(params, RecAdapterParams):
        return _rec_forward(x, params, dropout_rng)
    raise TypeError(f"unknown adapter params type {type(params)!r}")


def backward_adapter(cache, upstream: np.ndarray):
    """Exact reverse-mode gradients for a forward_adapter call.

    Returns (dx, grads) with gradient names matching the adapter-relative
    tensor names (e.g. "block00.expand.W", "lin_in.b").
    """
    kind = cache[0]
    if kind == "desc":
        return _desc_backward(cache, np.asarray(upstream, dtype=np.float64))
    if kind == "rec":
        return _rec_backward(cache, np.asarray(upstream, dtype=np.float64))
    raise ValueError("stale or unrecognized adapter cache")


def _desc_forward(x: np.ndarray, params: DescAdapterParams):
    h = x
    block_caches = []
    for blk in params.blocks:
        ln, ln_cache = _layernorm_fwd(h, blk.norm)
        e1, _ = _linear_fwd(ln, blk.expand)
        a1 = gelu(e1)
        r, _ = _linear_fwd(a1, blk.contract)
        block_caches.append((h, ln, ln_cache, e1, a1))
        h = h + r
    y, _ = _linear_fwd(h, params.out)
    check_finite("description adapter output", y)
    return y, ("desc", params, block_caches, h)


def _desc_backward(cache, upstream: np.ndarray):
    _, params, block_caches, h_final = cache
    grads: GradientSet = {}
    dh, dWo, dbo = _linear_bwd(upstream, h_final, params.out)
    grads["out.W"] = dWo
    grads["out.b"] = dbo
    for i in range(len(params.blocks) - 1, -1, -1):
        blk = params.blocks[i]
        h_in, ln, ln_cache, e1, a1 = block_caches[i]
        # residual: h_out = h_in + contract(gelu(expand(LN(h_in))))
        da1, dWc, dbc = _linear_bwd(dh, a1, blk.contract)
        de1 = da1 * gelu_grad(e1)
        dln, dWe, dbe = _linear_bwd(de1, ln, blk.expand)
        dx_branch, dgamma, dbeta = _layernorm_bwd(dln, ln_cache, blk.norm)
        p = f"block{i:02d}"
        grads[f"{p}.contract.W"] = dWc
        grads[f"{p}.contract.b"] = dbc
        grads[f"{p}.expand.W"] = dWe
        grads[f"{p}.expand.b"] = dbe
        grads[f"{p}.norm.gamma"] = dgamma
        grads[f"{p}.norm.beta"] = dbeta
        dh = dh + dx_branch
    return dh, grads


def _rec_forward(x: np.ndarray, params: RecAdapterParams, rng: Rng | None):
    p = params.dropout_rate
    h1, _ = _linear_fwd(x, params.lin_in)
    a1 = gelu(h1)
    m1 = _dropout_mask(rng, a1.shape, p) if rng is not None else None
    d1 = a1 * m1 if m1 is not None else a1
    h2, _ = _linear_fwd(d1, params.lin_hidden)
    a2 = gelu(h2)
    m2 = _dropout_mask(rng, a2.shape, p) if rng is not None else None
    d2 = a2 * m2 if m2 is not None else a2
    y, _ = _linear_fwd(d2, params.lin_out)
    check_finite("receptor adapter output", y)
    return y, ("rec", params, x, h1, a1, m1, d1, h2, a2, m2, d2)


def _rec_backward(cache, upstream: np.ndarray):
    _, params, x, h1, a1, m1, d1, h2, a2, m2, d2 = cache
    grads: GradientSet = {}
    dd2, dWo, dbo = _linear_bwd(upstream, d2, params.lin_out)
    grads["lin_out.W"] = dWo
    grads["lin_out.b"] = dbo
    da2 = dd2 * m2 if m2 is not None else dd2
    dh2 = da2 * gelu_grad(h2)
    dd1, dWh, dbh = _linear_bwd(dh2, d1, params.lin_hidden)
    grads["lin_hidden.W"] = dWh
    grads["lin_hidden.b"] = dbh
    da1 = dd1 * m1 if m1 is not None else dd1
    dh1 = da1 * gelu_grad(h1)
    dx, dWi, dbi = _linear_bwd(dh1, x, params.lin_in)
    grads["lin_in.W"] = dWi
    grads["lin_in.b"] = dbi
    return dx, grads


# --------------------------------------------------------------------------
# verification oracle


def finite_diff_gradient(loss_fn: Callable[[], float], tensors: dict[str, np.ndarray],
                         h: float = 1e-5) -> GradientSet:
    """Central-difference gradient of loss_fn for every entry of every tensor.

    ``tensors`` must hold live views (they are perturbed in place and
    restored); ``loss_fn`` takes no arguments and must be deterministic,
    so any dropout masks have to be frozen or re-seeded inside it.
    """
    grads: GradientSet = {}
    for name, t in tensors.items():
        g = np.zeros_like(t)
        flat = t.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: GradientSet, numeric: GradientSet,
                       floor: float = 1e-6) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) across all tensors."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
