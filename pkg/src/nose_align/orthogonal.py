"""Orthogonal decoupling of adapter outputs from the frozen molecular embedding.

Two mechanisms, usable separately or together:

* hard orthogonalization: per-sample Gram-Schmidt rejection of the adapter
  output against its molecule embedding (a geometric guarantee);
* soft orthogonality loss: mean over batch rows of the summed squared
  pairwise cosines among {z_mol, a_r, a_d}, penalizing residual correlation
  during optimization.

Gradients never flow into z_mol; the molecular encoder is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DEGENERATE_NORM


@dataclass
class OrthoConfig:
    eps: float = 1e-8
    lambda_orth: float = 2.0
    pair_mode: str = "unordered"  # "unordered" (3 pairs) or "ordered" (6)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"need eps > 0, got {self.eps}")
        if self.pair_mode not in ("unordered", "ordered"):
            raise ValueError(f"unknown pair_mode {self.pair_mode!r}")


def hard_orthogonalize(a, z_mol, eps: float = 1e-8) -> np.ndarray:
    """a minus its projection onto z_mol: a - (a.z)/(|z|^2 + eps) z.

    Accepts single vectors or row batches (orthogonalized row-by-row).
    Near-zero z_mol rows leave a unchanged thanks to the eps guard.
    """
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z_mol, dtype=np.float64)
    if a.shape != z.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {z.shape}")
    if a.ndim == 1:
        coef = float(a @ z) / (float(z @ z) + eps)
        return a - coef * z
    coef = np.sum(a * z, axis=1, keepdims=True) / (
        np.sum(z * z, axis=1, keepdims=True) + eps)
    return a - coef * z


def hard_orthogonalize_backward(a, z_mol, eps: float, upstream) -> np.ndarray:
    """Gradient through hard_orthogonalize with respect to a only.

    The rejection is linear and self-adjoint in a, so the backward pass is
    the same projector applied to the upstream gradient. z_mol is frozen and
    receives nothing.
    """
    return hard_orthogonalize(upstream, z_mol, eps)


def _row_cos_sq_with_grads(u: np.ndarray, v: np.ndarray):
    """Per-row squared cosine and its gradients wrt u and v.

    Rows where either norm is < 1e-12 contribute 0 with zero gradient,
    matching the degenerate-cosine convention.
    """
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    ok = (nu >= DEGENERATE_NORM) & (nv >= DEGENERATE_NORM)
    safe_nu = np.where(ok, nu, 1.0)
    safe_nv = np.where(ok, nv, 1.0)
    dot = np.sum(u * v, axis=1)
    c = np.where(ok, dot / (safe_nu * safe_nv), 0.0)
    # d(c^2)/du = 2c * (v/(|u||v|) - c*u/|u|^2), rows masked when degenerate
    two_c = (2.0 * c)[:, None]
    du = two_c * (v / (safe_nu * safe_nv)[:, None] - (c / safe_nu**2)[:, None] * u)
    dv = two_c * (u / (safe_nu * safe_nv)[:, None] - (c / safe_nv**2)[:, None] * v)
    du[~ok] = 0.0
    dv[~ok] = 0.0
    return c * c, du, dv


def soft_orthogonality_loss(z_mol, a_r, a_d, pair_mode: str = "unordered"):
    """Mean over rows of summed squared pairwise cosines among the three parts.

    Returns (loss, grad_a_r, grad_a_d). z_mol is frozen: the (z, a_r) and
    (z, a_d) pairs only push gradient into the adapter side. "ordered" mode
    counts each pair twice, exactly doubling loss and gradients.
    """
    z = np.asarray(z_mol, dtype=np.float64)
    ar = np.asarray(a_r, dtype=np.float64)
    ad = np.asarray(a_d, dtype=np.float64)
    if not (z.shape == ar.shape == ad.shape):
        raise ValueError(
            f"shape mismatch: z {z.shape}, a_r {ar.shape}, a_d {ad.shape}")
    if pair_mode not in ("unordered", "ordered"):
        raise ValueError(f"unknown pair_mode {pair_mode!r}")
    n = z.shape[0]
    c2_zr, _, d_ar_1 = _row_cos_sq_with_grads(z, ar)
    c2_zd, _, d_ad_1 = _row_cos_sq_with_grads(z, ad)
    c2_rd, d_ar_2, d_ad_2 = _row_cos_sq_with_grads(ar, ad)
    loss = float((c2_zr + c2_zd + c2_rd).sum()) / n
    g_ar = (d_ar_1 + d_ar_2) / n
    g_ad = (d_ad_1 + d_ad_2) / n
    if pair_mode == "ordered":
        loss *= 2.0
        g_ar = g_ar * 2.0
        g_ad = g_ad * 2.0
    return loss, g_ar, g_ad
