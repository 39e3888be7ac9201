"""Retrieval and geometry evaluations: rank statistics, compositional
(vector-arithmetic) retrieval, two-hop bridge retrieval, neighborhood
consistency, Jaccard-vs-cosine binning, clustering indices, and the analytic
random baselines the trend checks compare against.

Ranking convention everywhere: rank = 1 + (number of candidates with cosine
strictly greater than the target's), so ties resolve optimistically and the
result is independent of candidate order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .datahub import EmbeddingTable
from .errors import DataFormatError
from .linalg import DEGENERATE_NORM, Rng, cosine_similarity, pairwise_similarity

HITS_K_GRID = (1, 5, 10, 20, 50, 100, 200, 300, 400, 500)


# --------------------------------------------------------------------------
# rank statistics


def rank_from_sims(sims: np.ndarray, target_idx: int) -> int:
    """1 + count of strictly greater similarities."""
    return int((sims > sims[target_idx]).sum()) + 1


def rank_target(query_vec, candidates: EmbeddingTable, target_id: str) -> int:
    """Rank of target_id among all candidate rows by cosine with the query."""
    target_idx = candidates.row_index(target_id)
    sims = pairwise_similarity(np.asarray(query_vec, dtype=np.float64)[None, :],
                               candidates.matrix)[0]
    return rank_from_sims(sims, target_idx)


def mrr(ranks) -> float:
    ranks = list(ranks)
    if not ranks:
        raise ValueError("empty rank list")
    return float(np.mean([1.0 / r for r in ranks]))


def hits_at_k(ranks, k: int) -> float:
    """Percentage of ranks <= k."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("empty rank list")
    return 100.0 * sum(1 for r in ranks if r <= k) / len(ranks)


@dataclass
class RankResult:
    query_id: str
    target_ids: list[str]
    ranks: list[int]
    pool_size: int

    @property
    def best_rank(self) -> int:
        return min(self.ranks)


def build_retrieval_report(results: list[RankResult],
                           k_grid=HITS_K_GRID) -> dict:
    """Per-query best ranks, MRR, and the Hits@k grid, JSON-ready."""
    best = [r.best_rank for r in results]
    return {
        "n_queries": len(results),
        "per_query": [{"query": r.query_id, "targets": r.target_ids,
                       "ranks": r.ranks, "pool_size": r.pool_size}
                      for r in results],
        "mrr": mrr(best),
        "hits": {f"hits@{k}": hits_at_k(best, k) for k in k_grid},
    }


def cross_modal_mrr(mol_vecs: np.ndarray, mol_ids: list[str],
                    partner_vecs: np.ndarray, partner_ids: list[str],
                    eval_pairs) -> dict:
    """Bidirectional retrieval MRR for one partition's evaluation pairs.

    Both directions rank against the full opposite-side pool (molecule
    anchors against every partner, partner anchors against every molecule);
    per-anchor best ranks feed the MRR. The analytic random baseline applies
    the same best-of-m ranking to a uniformly random ordering. The symmetric
    "mrr"/"baseline" values average the two directions.
    """
    mol_index = {m: i for i, m in enumerate(mol_ids)}
    partner_index = {p: i for i, p in enumerate(partner_ids)}

    def one_direction(anchor_vecs, anchor_index, pool_vecs, pool_index, pairs):
        groups: dict[str, set[str]] = {}
        for a, t in pairs:
            groups.setdefault(a, set()).add(t)
        anchors = sorted(groups)
        sims = pairwise_similarity(anchor_vecs[[anchor_index[a] for a in anchors]],
                                   pool_vecs)
        best = [min(rank_from_sims(sims[i], pool_index[t]) for t in groups[a])
                for i, a in enumerate(anchors)]
        baseline = float(np.mean([
            expected_random_mrr(len(pool_index), len(groups[a])) for a in anchors]))
        return mrr(best), baseline

    fwd = [(m, p) for m, p in eval_pairs]
    bwd = [(p, m) for m, p in eval_pairs]
    fwd_mrr, fwd_base = one_direction(mol_vecs, mol_index, partner_vecs,
                                      partner_index, fwd)
    bwd_mrr, bwd_base = one_direction(partner_vecs, partner_index, mol_vecs,
                                      mol_index, bwd)
    return {
        "forward_mrr": fwd_mrr, "backward_mrr": bwd_mrr,
        "forward_baseline": fwd_base, "backward_baseline": bwd_base,
        "mrr": 0.5 * (fwd_mrr + bwd_mrr),
        "baseline": 0.5 * (fwd_base + bwd_base),
    }


# --------------------------------------------------------------------------
# compositional retrieval


@dataclass
class CompositionalQuery:
    anchor: str
    operation: str  # "plus" | "minus"
    operand: str
    expected: list[str]

    def __post_init__(self):
        if self.operation not in ("plus", "minus"):
            raise ValueError(f"unknown operation {self.operation!r}")
        if self.anchor == self.operand:
            raise ValueError("anchor and operand must differ")


def parse_compositional_queries(path) -> list[CompositionalQuery]:
    """TSV rows ``anchor<TAB>op(+|-)<TAB>operand<TAB>expected_csv``."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing query file {path}")
    queries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 4 or cols[1] not in "+-":
            raise DataFormatError(f"{path}:{lineno}: malformed query {line!r}")
        expected = [e.strip() for e in cols[3].split(",") if e.strip()]
        if not expected:
            raise DataFormatError(f"{path}:{lineno}: no expected answers")
        queries.append(CompositionalQuery(
            anchor=cols[0], operation="plus" if cols[1] == "+" else "minus",
            operand=cols[2], expected=expected))
    if not queries:
        raise DataFormatError(f"{path}: no queries found")
    return queries


@dataclass
class CompositionalResult:
    query: CompositionalQuery
    expected_ranks: dict[str, int]
    pool_size: int
    degenerate: bool

    @property
    def best_rank(self) -> int:
        return min(self.expected_ranks.values())


def compositional_retrieve(query: CompositionalQuery, desc_table: EmbeddingTable,
                           vectors: np.ndarray | None = None) -> CompositionalResult:
    """Rank the expected answers for normalize(v_anchor +/- v_operand).

    Candidates are the full vocabulary minus the anchor and operand. Pass
    ``vectors`` to rank in a transformed space (rows aligned with the table);
    defaults to the table's own embeddings. A zero query vector is flagged
    degenerate: every cosine is 0, so all candidates tie at rank 1.
    """
    mat = desc_table.matrix if vectors is None else np.asarray(vectors, dtype=np.float64)
    if mat.shape[0] != len(desc_table):
        raise ValueError("vector rows must align with the descriptor table")
    ai = desc_table.row_index(query.anchor)
    oi = desc_table.row_index(query.operand)
    v = mat[ai] + mat[oi] if query.operation == "plus" else mat[ai] - mat[oi]
    norm = float(np.linalg.norm(v))
    degenerate = norm < DEGENERATE_NORM
    if not degenerate:
        v = v / norm
    keep = [i for i in range(len(desc_table)) if i not in (ai, oi)]
    pool_ids = [desc_table.ids[i] for i in keep]
    pool_index = {p: i for i, p in enumerate(pool_ids)}
    sims = pairwise_similarity(v[None, :], mat[keep])[0]
    ranks = {}
    for exp in query.expected:
        if exp not in pool_index:
            raise DataFormatError(
                f"expected answer {exp!r} not in the candidate vocabulary")
        ranks[exp] = rank_from_sims(sims, pool_index[exp])
    return CompositionalResult(query=query, expected_ranks=ranks,
                               pool_size=len(keep), degenerate=degenerate)


# --------------------------------------------------------------------------
# bridge retrieval


@dataclass
class AlignedMolecules:
    """Molecule vectors in the shared space, one matrix per partner modality
    (the components training aligned with receptors and descriptors)."""

    ids: list[str]
    rec_component: np.ndarray
    desc_component: np.ndarray


@dataclass
class BridgeResult:
    nearest_mol_id: str
    bridge_sims: np.ndarray  # query -> molecule -> target-modality sims
    direct_sims: np.ndarray  # query -> target-modality sims


def bridge_retrieve(query_vec, query_modality: str, aligned: AlignedMolecules,
                    target_vectors: np.ndarray) -> BridgeResult:
    """Two-hop retrieval through the molecular hub, plus the direct baseline.

    The query first retrieves its nearest molecule within the query-modality
    component; that molecule's other component then scores the target pool.
    ``target_vectors`` holds the target modality's vectors in the shared
    space (rows = candidates).
    """
    if query_modality not in ("receptor", "descriptor"):
        raise ValueError(f"unknown query modality {query_modality!r}")
    if len(aligned.ids) == 0:
        raise ValueError("empty molecule table")
    q = np.asarray(query_vec, dtype=np.float64)[None, :]
    hop1 = (aligned.rec_component if query_modality == "receptor"
            else aligned.desc_component)
    hop2 = (aligned.desc_component if query_modality == "receptor"
            else aligned.rec_component)
    mol_sims = pairwise_similarity(q, hop1)[0]
    nearest = int(np.argmax(mol_sims))  # argmax takes the first of any ties
    bridge_sims = pairwise_similarity(hop2[nearest][None, :], target_vectors)[0]
    direct_sims = pairwise_similarity(q, target_vectors)[0]
    return BridgeResult(nearest_mol_id=aligned.ids[nearest],
                        bridge_sims=bridge_sims, direct_sims=direct_sims)


# --------------------------------------------------------------------------
# neighborhood consistency and Jaccard-vs-cosine


def neighborhood_precision(mol_embs, descriptor_sets, k: int) -> float:
    """Mean fraction of each molecule's k cosine-nearest neighbors (self
    excluded) that share at least one descriptor with it."""
    mat = np.asarray(mol_embs, dtype=np.float64)
    n = mat.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the molecule count {n}")
    sets = list(descriptor_sets)
    if len(sets) != n:
        raise ValueError("one descriptor set per molecule required")
    sims = pairwise_similarity(mat, mat)
    fractions = []
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        # stable ordering: by descending similarity, then index
        neighbors = np.lexsort((np.arange(n), -row))[:k]
        share = sum(1 for j in neighbors if sets[i] & sets[j])
        fractions.append(share / k)
    return float(np.mean(fractions))


def jaccard(a, b) -> float:
    """|a & b| / |a | b|, with 0 for an empty union."""
    union = len(a | b)
    return len(a & b) / union if union else 0.0


@dataclass
class JaccardBin:
    lo: float
    hi: float
    count: int
    mean_jaccard: float  # nan when empty


def jaccard_vs_cosine(mol_embs, descriptor_sets, n_pairs: int, bin_width: float,
                      rng: Rng) -> list[JaccardBin]:
    """Sample unordered molecule pairs, bin them by cosine (half-open bins
    covering [-1, 1], cosine 1.0 clamps into the last bin), and report each
    bin's pair count and mean descriptor-set Jaccard."""
    mat = np.asarray(mol_embs, dtype=np.float64)
    n = mat.shape[0]
    if n < 2:
        raise ValueError("need at least 2 molecules")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    sets = list(descriptor_sets)
    n_bins = int(np.ceil(2.0 / bin_width))
    counts = np.zeros(n_bins, dtype=np.int64)
    sums = np.zeros(n_bins)
    for _ in range(n_pairs):
        i = rng.randbelow(n)
        j = rng.randbelow(n - 1)
        if j >= i:
            j += 1
        c = cosine_similarity(mat[i], mat[j])
        b = min(int((c + 1.0) / bin_width), n_bins - 1)
        counts[b] += 1
        sums[b] += jaccard(sets[i], sets[j])
    bins = []
    for b in range(n_bins):
        bins.append(JaccardBin(
            lo=-1.0 + b * bin_width, hi=min(-1.0 + (b + 1) * bin_width, 1.0),
            count=int(counts[b]),
            mean_jaccard=float(sums[b] / counts[b]) if counts[b] else float("nan")))
    return bins


def bin_monotonicity(bins: list[JaccardBin]) -> float:
    """Spearman correlation of bin index vs mean Jaccard over non-empty bins."""
    occupied = [(i, b.mean_jaccard) for i, b in enumerate(bins) if b.count > 0]
    if len(occupied) < 2:
        raise ValueError("need at least two non-empty bins")
    idx, means = zip(*occupied)
    rho = spearmanr(idx, means).statistic
    return float(rho)


# --------------------------------------------------------------------------
# clustering indices


def clustering_metrics(points, labels) -> dict:
    """Euclidean silhouette, Davies-Bouldin, and Calinski-Harabasz.

    Needs >= 2 non-empty clusters; a singleton cluster's silhouette term is 0.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(list(labels))
    n = x.shape[0]
    uniq = sorted(set(labels.tolist()))
    if len(uniq) < 2:
        raise ValueError("need at least two clusters")
    if n < 2:
        raise ValueError("need at least two points")
    members = {c: np.where(labels == c)[0] for c in uniq}

    diffs = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diffs * diffs, axis=2))

    sil_terms = []
    for i in range(n):
        own = members[labels[i]]
        if len(own) == 1:
            sil_terms.append(0.0)
            continue
        a = float(dist[i, own].sum() / (len(own) - 1))
        b = min(float(dist[i, members[c]].mean()) for c in uniq if c != labels[i])
        sil_terms.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    silhouette = float(np.mean(sil_terms))

    centroids = {c: x[members[c]].mean(axis=0) for c in uniq}
    scatter = {c: float(np.mean(np.linalg.norm(x[members[c]] - centroids[c], axis=1)))
               for c in uniq}
    db_terms = []
    for ci in uniq:
        worst = max(
            (scatter[ci] + scatter[cj])
            / float(np.linalg.norm(centroids[ci] - centroids[cj]))
            for cj in uniq if cj != ci)
        db_terms.append(worst)
    davies_bouldin = float(np.mean(db_terms))

    overall = x.mean(axis=0)
    between = sum(len(members[c]) * float(np.sum((centroids[c] - overall) ** 2))
                  for c in uniq)
    within = sum(float(np.sum((x[members[c]] - centroids[c]) ** 2)) for c in uniq)
    k = len(uniq)
    calinski = ((between / (k - 1)) / (within / (n - k))) if within > 0 else float("inf")
    return {"silhouette": silhouette, "davies_bouldin": davies_bouldin,
            "calinski_harabasz": calinski}


# --------------------------------------------------------------------------
# analytic random baselines


def expected_random_mrr(pool_size: int, n_targets: int) -> float:
    """E[1 / best rank] when n_targets positives are placed uniformly among
    pool_size candidates and ranked randomly."""
    if not 1 <= n_targets <= pool_size:
        raise ValueError("need 1 <= n_targets <= pool_size")
    # P(best rank = 1) = m/N; P(r+1)/P(r) = (N-r-m+1)/(N-r)
    m, n = n_targets, pool_size
    p = m / n
    total = 0.0
    for r in range(1, n - m + 2):
        total += p / r
        if r < n - m + 1:
            p *= (n - r - m + 1) / (n - r)
    return total


def random_hits_probability(pool_size: int, n_targets: int, k: int) -> float:
    """P(at least one of n_targets positives lands in a random top-k)."""
    if not 1 <= n_targets <= pool_size:
        raise ValueError("need 1 <= n_targets <= pool_size")
    k = min(k, pool_size)
    miss = 1.0
    for i in range(n_targets):
        miss *= (pool_size - k - i) / (pool_size - i) if pool_size - k - i > 0 else 0.0
    return 1.0 - miss


# --------------------------------------------------------------------------
# projection export


def pca_project(points, n_components: int = 2) -> np.ndarray:
    """Deterministic PCA coordinates (largest-|loading| entry of each
    component is made positive so signs are reproducible)."""
    x = np.asarray(points, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, order]
    for j in range(comps.shape[1]):
        pivot = int(np.argmax(np.abs(comps[:, j])))
        if comps[pivot, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps
