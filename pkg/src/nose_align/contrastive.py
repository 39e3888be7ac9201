"""Soft positive-weight matrices and the symmetric weighted InfoNCE objective.

Positive structure inside a batch of (molecule, partner) pairs:

* weight 1.0 for any candidate sharing the anchor's molecule id (including
  the anchor itself);
* weight 0.5 (configurable) for weak positives: candidates whose descriptor
  is listed under the anchor's descriptor in the weak-positive lexicon;
* weight 0 otherwise (in-batch negative).

The per-direction loss averages weighted log-softmax terms over anchors with
at least one positive; the full pair loss is the four-term sum of both
cross-modal directions plus both intra-modal directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyPositiveSetError, NumericError
from .linalg import as_matrix, log_softmax_rows, normalize_rows, normalize_rows_backward

Lexicon = Mapping[str, frozenset[str]]


@dataclass
class BatchMeta:
    """Identity metadata needed to build one direction's weight matrix."""

    anchor_mol_ids: Sequence[str]
    candidate_mol_ids: Sequence[str]
    anchor_desc_ids: Sequence[str] | None = None
    candidate_desc_ids: Sequence[str] | None = None


@dataclass
class LossBreakdown:
    inter_ab: float
    inter_ba: float
    intra_a: float
    intra_b: float

    @property
    def total(self) -> float:
        return self.inter_ab + self.inter_ba + self.intra_a + self.intra_b


def build_weight_matrix(meta: BatchMeta, lexicon: Lexicon | None,
                        use_weak: bool, weak_weight: float = 0.5) -> np.ndarray:
    """n x N positive-weight matrix with entries in {0, weak_weight, 1}.

    Molecule-sharing always wins over a weak link. Requesting weak positives
    without descriptor ids on both sides is an error.
    """
    n = len(meta.anchor_mol_ids)
    m = len(meta.candidate_mol_ids)
    w = np.zeros((n, m))
    cand_mols = list(meta.candidate_mol_ids)
    if use_weak:
        if lexicon is None:
            raise ValueError("use_weak requires a weak-positive lexicon")
        if meta.anchor_desc_ids is None or meta.candidate_desc_ids is None:
            raise ValueError("use_weak requires descriptor ids on both sides")
        cand_descs = list(meta.candidate_desc_ids)
    for i, mol in enumerate(meta.anchor_mol_ids):
        if use_weak:
            neighbors = lexicon.get(meta.anchor_desc_ids[i], frozenset())
        for j in range(m):
            if cand_mols[j] == mol:
                w[i, j] = 1.0
            elif use_weak and cand_descs[j] in neighbors:
                w[i, j] = weak_weight
    return w


def soft_infonce(sim: np.ndarray, weights: np.ndarray, tau: float):
    """Weighted multi-positive InfoNCE over a similarity matrix.

    loss = -(1/|V|) sum_{i in V} (sum_j w_ij logsoftmax_j(s_i/tau)) / sum_j w_ij
    where V is the set of rows with positive weight mass. Returns
    (loss, dsim) with dsim the exact gradient of the loss wrt sim.

    Raises EmptyPositiveSetError when no row has a positive.
    """
    sim = as_matrix(sim)
    weights = as_matrix(weights)
    if sim.shape != weights.shape:
        raise ValueError(f"shape mismatch: sim {sim.shape} vs W {weights.shape}")
    if tau <= 0:
        raise ValueError(f"need tau > 0, got {tau}")
    row_mass = weights.sum(axis=1)
    valid = row_mass > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyPositiveSetError("no anchor has a positive sample")
    logp = log_softmax_rows(sim, tau)
    per_row = -(weights * logp).sum(axis=1) / np.where(valid, row_mass, 1.0)
    loss = float(per_row[valid].sum()) / n_valid
    if not np.isfinite(loss):
        raise NumericError("non-finite contrastive loss")
    # d loss / d s_ik = (p_ik - w_ik / mass_i) / (tau * |V|) on valid rows
    p = np.exp(logp)
    dsim = (p - weights / np.where(valid, row_mass, 1.0)[:, None]) / (tau * n_valid)
    dsim[~valid] = 0.0
    return loss, dsim


def _mask_self_only_rows(w: np.ndarray) -> np.ndarray:
    """Zero intra rows whose only positive is the self match.

    Such rows carry no learning signal; with them removed the anchor set V
    keeps only informative intra anchors.
    """
    w = w.copy()
    off_diag_mass = w.sum(axis=1) - np.diag(w)
    w[off_diag_mass == 0.0, :] = 0.0
    return w


def _cosine_forward(x: np.ndarray, y: np.ndarray):
    xn, xnorm = normalize_rows(x)
    yn, ynorm = normalize_rows(y)
    return xn @ yn.T, (xn, xnorm, yn, ynorm)


def _cosine_backward(dsim: np.ndarray, cache):
    xn, xnorm, yn, ynorm = cache
    dx = normalize_rows_backward(dsim @ yn, xn, xnorm)
    dy = normalize_rows_backward(dsim.T @ xn, yn, ynorm)
    return dx, dy


def _self_cosine_forward(x: np.ndarray):
    xn, xnorm = normalize_rows(x)
    return xn @ xn.T, (xn, xnorm)


def _self_cosine_backward(dsim: np.ndarray, cache):
    xn, xnorm = cache
    return normalize_rows_backward(dsim @ xn + dsim.T @ xn, xn, xnorm)


def symmetric_pair_loss(z_a, z_b, meta: BatchMeta, lexicon: Lexicon | None,
                        tau: float, use_intra: bool = True, use_weak: bool = False,
                        weak_weight: float = 0.5):
    """Four-term contrastive loss for one batch of aligned pairs.

    ``z_a`` holds the molecule-side alignment vectors and ``z_b`` the partner
    side of the same pairs, so meta's anchor and candidate id lists coincide
    per side. Weak positives (when enabled) act in both cross-modal
    directions and in the partner-side intra direction; the molecule-side
    intra direction only uses molecule identity. Intra rows whose only
    positive is themselves are dropped; an intra direction with no informative
    anchor contributes 0.

    Returns (LossBreakdown, dz_a, dz_b).
    """
    za = as_matrix(z_a)
    zb = as_matrix(z_b)
    n = za.shape[0]
    if zb.shape[0] != n or len(meta.anchor_mol_ids) != n:
        raise ValueError("batch size mismatch between embeddings and meta")
    has_desc = meta.anchor_desc_ids is not None
    weak = bool(use_weak and has_desc)

    w_cross = build_weight_matrix(meta, lexicon, weak, weak_weight)
    dz_a = np.zeros_like(za)
    dz_b = np.zeros_like(zb)

    sim_ab, cache_ab = _cosine_forward(za, zb)
    loss_ab, dsim_ab = soft_infonce(sim_ab, w_cross, tau)
    ga, gb = _cosine_backward(dsim_ab, cache_ab)
    dz_a += ga
    dz_b += gb

    sim_ba, cache_ba = _cosine_forward(zb, za)
    loss_ba, dsim_ba = soft_infonce(sim_ba, w_cross.T, tau)
    gb, ga = _cosine_backward(dsim_ba, cache_ba)
    dz_b += gb
    dz_a += ga

    loss_aa = 0.0
    loss_bb = 0.0
    if use_intra:
        mol_meta = BatchMeta(meta.anchor_mol_ids, meta.candidate_mol_ids)
        w_aa = _mask_self_only_rows(build_weight_matrix(mol_meta, None, False))
        if w_aa.sum() > 0:
            sim_aa, cache_aa = _self_cosine_forward(za)
            loss_aa, dsim_aa = soft_infonce(sim_aa, w_aa, tau)
            dz_a += _self_cosine_backward(dsim_aa, cache_aa)
        # candidate side b shares the pair list, so its intra weights match w_cross
        w_bb = _mask_self_only_rows(w_cross)
        if w_bb.sum() > 0:
            sim_bb, cache_bb = _self_cosine_forward(zb)
            loss_bb, dsim_bb = soft_infonce(sim_bb, w_bb, tau)
            dz_b += _self_cosine_backward(dsim_bb, cache_bb)

    breakdown = LossBreakdown(inter_ab=loss_ab, inter_ba=loss_ba,
                              intra_a=loss_aa, intra_b=loss_bb)
    return breakdown, dz_a, dz_b


def total_objective(loss_desc: float, loss_rec: float, loss_orth: float,
                    lambdas: tuple[float, float, float]) -> float:
    """Weighted sum lambda1*L_desc + lambda2*L_rec + lambda3*L_orth."""
    for name, v in (("desc", loss_desc), ("rec", loss_rec), ("orth", loss_orth)):
        if not np.isfinite(v):
            raise NumericError(f"non-finite {name} loss component: {v}")
    l1, l2, l3 = lambdas
    return l1 * loss_desc + l2 * loss_rec + l3 * loss_orth
