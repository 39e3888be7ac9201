"""Ingestion of embedding tables, pair files, and the weak-positive lexicon,
plus deterministic splitting, dual-partition batch sampling, and synthetic
tri-modal world generation.

File formats (all little-endian, UTF-8):

* embedding container: ``<name>.manifest.json`` with keys
  {"magic": "NOSEEMB1", "dim", "count", "dtype": "f32le", "ids", "data",
  "modality"}; the ids file holds one identifier per line (LF), the data file
  holds exactly 4*count*dim bytes of row-major float32;
* pair file: TSV with header ``mol_id<TAB>partner_id``;
* weak-positive lexicon: JSON object mapping a descriptor to an array of
  descriptor strings (no self references, no dangling ids);
* descriptor-set file: TSV ``mol_id<TAB>desc_id``, one membership per row.

Identifiers are opaque strings throughout; nothing here parses chemistry.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .linalg import Rng, check_finite

log = logging.getLogger(__name__)

MAGIC = "NOSEEMB1"
MODALITIES = ("molecule", "receptor", "descriptor")


# --------------------------------------------------------------------------
# embedding tables


@dataclass
class EmbeddingTable:
    ids: list[str]
    matrix: np.ndarray  # (n, dim) float64
    modality: str
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0]:
            raise DataFormatError(
                f"id count {len(self.ids)} != row count {self.matrix.shape[0]}")
        if self.modality not in MODALITIES:
            raise DataFormatError(f"unknown modality {self.modality!r}")
        self._index = {}
        for i, ident in enumerate(self.ids):
            if ident in self._index:
                raise DataFormatError(f"duplicate id {ident!r}")
            self._index[ident] = i

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, ident: str) -> np.ndarray:
        return self.matrix[self.row_index(ident)]

    def row_index(self, ident: str) -> int:
        try:
            return self._index[ident]
        except KeyError:
            raise KeyError(f"unknown {self.modality} id {ident!r}") from None

    def has(self, ident: str) -> bool:
        return ident in self._index

    def rows(self, idents: list[str]) -> np.ndarray:
        return self.matrix[[self.row_index(i) for i in idents]]


def save_embedding_table(table: EmbeddingTable, out_dir, name: str) -> Path:
    """Write the three-file container; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids_name = f"{name}.ids.txt"
    data_name = f"{name}.data.bin"
    (out_dir / ids_name).write_bytes(
        "".join(f"{i}\n" for i in table.ids).encode("utf-8"))
    payload = table.matrix.astype("<f4").tobytes()
    (out_dir / data_name).write_bytes(payload)
    manifest = {
        "magic": MAGIC,
        "dim": table.dim,
        "count": len(table),
        "dtype": "f32le",
        "ids": ids_name,
        "data": data_name,
        "modality": table.modality,
    }
    path = out_dir / f"{name}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def load_embedding_table(manifest_path) -> EmbeddingTable:
    """Load and validate a container; payload converts f32le -> float64."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataFormatError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"unreadable manifest {manifest_path}: {e}") from e
    if manifest.get("magic") != MAGIC:
        raise DataFormatError(
            f"{manifest_path}: bad magic {manifest.get('magic')!r}")
    if manifest.get("dtype") != "f32le":
        raise DataFormatError(
            f"{manifest_path}: unsupported dtype {manifest.get('dtype')!r}")
    dim = int(manifest["dim"])
    count = int(manifest["count"])
    ids_path = manifest_path.parent / manifest["ids"]
    data_path = manifest_path.parent / manifest["data"]
    for p in (ids_path, data_path):
        if not p.exists():
            raise DataFormatError(f"{manifest_path}: missing file {p}")
    ids = ids_path.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise DataFormatError(
            f"{ids_path}: {len(ids)} ids but manifest declares {count}")
    raw = data_path.read_bytes()
    expected = 4 * count * dim
    if len(raw) != expected:
        raise DataFormatError(
            f"{data_path}: {len(raw)} bytes, expected {expected}")
    matrix = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(count, dim)
    try:
        check_finite(str(data_path), matrix)
    except Exception as e:
        raise DataFormatError(str(e)) from e
    return EmbeddingTable(ids=ids, matrix=matrix, modality=manifest["modality"])


# --------------------------------------------------------------------------
# pairs


@dataclass
class PairSet:
    pairs: list[tuple[str, str]]
    splits: list[str] = field(default_factory=list)  # per-pair train/val/test

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, split: str) -> "PairSet":
        if not self.splits:
            raise ValueError("pairs have not been split yet")
        keep = [p for p, s in zip(self.pairs, self.splits) if s == split]
        return PairSet(pairs=keep, splits=[split] * len(keep))

    def mol_ids(self) -> list[str]:
        return [m for m, _ in self.pairs]

    def partner_ids(self) -> list[str]:
        return [p for _, p in self.pairs]


def load_pairs(tsv_path, mol_table: EmbeddingTable, partner_table: EmbeddingTable,
               strict: bool = True) -> tuple[PairSet, list[str]]:
    """Read a pair TSV; returns (pairs, rejection report).

    Strict mode aborts on the first unresolved id or malformed row; lenient
    mode skips them, listing each in the report.
    """
    tsv_path = Path(tsv_path)
    if not tsv_path.exists():
        raise DataFormatError(f"missing pair file {tsv_path}")
    lines = tsv_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t")[:2] != ["mol_id", "partner_id"]:
        raise DataFormatError(f"{tsv_path}: expected header 'mol_id\\tpartner_id'")
    pairs: list[tuple[str, str]] = []
    report: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0] or not cols[1]:
            msg = f"{tsv_path}:{lineno}: malformed row {line!r}"
            if strict:
                raise DataFormatError(msg)
            report.append(msg)
            continue
        mol, partner = cols
        missing = None
        if not mol_table.has(mol):
            missing = f"unknown mol id {mol!r}"
        elif not partner_table.has(partner):
            missing = f"unknown partner id {partner!r}"
        if missing:
            msg = f"{tsv_path}:{lineno}: {missing}"
            if strict:
                raise DataFormatError(msg)
            report.append(msg)
            continue
        pairs.append((mol, partner))
    if not pairs:
        report.append(f"{tsv_path}: no pairs loaded")
        log.warning("%s: no pairs loaded", tsv_path)
    return PairSet(pairs=pairs), report


def split_pairs(pairs: PairSet, ratios: tuple[float, float, float], seed: int,
                by_molecule: bool = False) -> PairSet:
    """Deterministic shuffle then contiguous train/val/test assignment.

    Default splits by pair, so a molecule may appear in several splits
    through different pairs; ``by_molecule=True`` assigns every pair of a
    molecule to the same split (the strict zero-shot regime).
    """
    if len(pairs) == 0:
        raise DataFormatError("cannot split an empty pair set")
    if any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be non-negative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    rng = Rng(seed)
    names = ("train", "val", "test")
    if by_molecule:
        mols = sorted({m for m, _ in pairs.pairs})
        rng.shuffle(mols)
        n = len(mols)
        n_train = math.floor(n * ratios[0])
        n_val = math.floor(n * ratios[1])
        assign = {}
        for i, m in enumerate(mols):
            if i < n_train:
                assign[m] = "train"
            elif i < n_train + n_val:
                assign[m] = "val"
            else:
                assign[m] = "test"
        splits = [assign[m] for m, _ in pairs.pairs]
        return PairSet(pairs=list(pairs.pairs), splits=splits)
    order = list(range(len(pairs)))
    rng.shuffle(order)
    n = len(order)
    n_train = math.floor(n * ratios[0])
    n_val = math.floor(n * ratios[1])
    splits = [""] * n
    for pos, idx in enumerate(order):
        if pos < n_train:
            splits[idx] = names[0]
        elif pos < n_train + n_val:
            splits[idx] = names[1]
        else:
            splits[idx] = names[2]
    return PairSet(pairs=list(pairs.pairs), splits=splits)


# --------------------------------------------------------------------------
# weak-positive lexicon


@dataclass
class WeakPositiveLexicon:
    neighbors: dict[str, frozenset[str]]

    def get(self, key: str, default=frozenset()) -> frozenset[str]:
        return self.neighbors.get(key, default)

    def __len__(self) -> int:
        return len(self.neighbors)


def load_lexicon(path, desc_table: EmbeddingTable) -> WeakPositiveLexicon:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing lexicon file {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"unreadable lexicon {path}: {e}") from e
    if not isinstance(raw, dict):
        raise DataFormatError(f"{path}: lexicon must be a JSON object")
    neighbors: dict[str, frozenset[str]] = {}
    for key, values in raw.items():
        if not desc_table.has(key):
            raise DataFormatError(f"{path}: dangling descriptor id {key!r}")
        vals = set()
        for v in values:
            if v == key:
                raise DataFormatError(f"{path}: self reference under {key!r}")
            if not desc_table.has(v):
                raise DataFormatError(
                    f"{path}: dangling descriptor id {v!r} under {key!r}")
            vals.add(v)
        neighbors[key] = frozenset(vals)
    return WeakPositiveLexicon(neighbors=neighbors)


def save_lexicon(lexicon: WeakPositiveLexicon, path) -> None:
    payload = {k: sorted(v) for k, v in sorted(lexicon.neighbors.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_descriptor_sets(path, mol_table: EmbeddingTable,
                         desc_table: EmbeddingTable) -> dict[str, frozenset[str]]:
    """Read the mol_id -> descriptor-set memberships TSV."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"missing descriptor-set file {path}")
    sets: dict[str, set[str]] = {m: set() for m in mol_table.ids}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or (lineno == 1 and line.startswith("mol_id")):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise DataFormatError(f"{path}:{lineno}: malformed row {line!r}")
        mol, desc = cols
        if not mol_table.has(mol):
            raise DataFormatError(f"{path}:{lineno}: unknown mol id {mol!r}")
        if not desc_table.has(desc):
            raise DataFormatError(f"{path}:{lineno}: unknown desc id {desc!r}")
        sets[mol].add(desc)
    return {m: frozenset(s) for m, s in sets.items()}


def save_descriptor_sets(sets: dict[str, frozenset[str]], path) -> None:
    lines = ["mol_id\tdesc_id"]
    for mol in sorted(sets):
        for desc in sorted(sets[mol]):
            lines.append(f"{mol}\t{desc}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# batching


@dataclass
class TriModalBatch:
    """One training iteration's samples from both pair partitions."""

    desc_mol_ids: list[str]
    desc_partner_ids: list[str]
    rec_mol_ids: list[str]
    rec_partner_ids: list[str]


def sample_dual_batch(rng: Rng, desc_pairs: PairSet, rec_pairs: PairSet,
                      desc_batch: int, rec_batch: int) -> TriModalBatch:
    """Uniform without-replacement sample from each partition.

    A request larger than its partition falls back to the full partition
    (logged once per call).
    """
    if len(desc_pairs) == 0 or len(rec_pairs) == 0:
        raise ValueError("both partitions must be non-empty")

    def take(pairs: PairSet, k: int, name: str) -> list[tuple[str, str]]:
        if k > len(pairs):
            log.warning("%s batch %d exceeds partition size %d; using all",
                        name, k, len(pairs))
            k = len(pairs)
        idx = rng.sample_indices(len(pairs), k)
        return [pairs.pairs[i] for i in idx]

    d = take(desc_pairs, desc_batch, "descriptor")
    r = take(rec_pairs, rec_batch, "receptor")
    return TriModalBatch(
        desc_mol_ids=[m for m, _ in d], desc_partner_ids=[p for _, p in d],
        rec_mol_ids=[m for m, _ in r], rec_partner_ids=[p for _, p in r])


def epoch_batches(rng: Rng, desc_pairs: PairSet, rec_pairs: PairSet,
                  desc_batch: int, rec_batch: int) -> list[TriModalBatch]:
    """One epoch: a shuffled pass over descriptor pairs, chunked into batches,
    with receptor batches drawn cyclically from their own shuffled order
    (reshuffled on exhaustion)."""
    if len(desc_pairs) == 0 or len(rec_pairs) == 0:
        raise ValueError("both partitions must be non-empty")
    desc_batch = min(desc_batch, len(desc_pairs))
    rec_batch = min(rec_batch, len(rec_pairs))
    desc_order = list(range(len(desc_pairs)))
    rng.shuffle(desc_order)
    rec_order = list(range(len(rec_pairs)))
    rng.shuffle(rec_order)
    rec_pos = 0
    batches = []
    for start in range(0, len(desc_order), desc_batch):
        d_idx = desc_order[start:start + desc_batch]
        r_idx = []
        while len(r_idx) < rec_batch:
            if rec_pos == len(rec_order):
                rng.shuffle(rec_order)
                rec_pos = 0
            r_idx.append(rec_order[rec_pos])
            rec_pos += 1
        d = [desc_pairs.pairs[i] for i in d_idx]
        r = [rec_pairs.pairs[i] for i in r_idx]
        batches.append(TriModalBatch(
            desc_mol_ids=[m for m, _ in d], desc_partner_ids=[p for _, p in d],
            rec_mol_ids=[m for m, _ in r], rec_partner_ids=[p for _, p in r]))
    return batches


# --------------------------------------------------------------------------
# synthetic world


@dataclass
class SynthSpec:
    n_clusters: int = 8
    n_molecules: int = 256
    n_receptors: int = 32
    n_descriptors: int = 64
    dim: int = 64
    noise_sigma: float = 0.1
    bridge_fraction: float = 0.25
    seed: int = 42
    pairs_per_molecule: int = 2
    receptors_per_molecule: int = 2
    subgroups_per_cluster: int = 2
    subgroup_fidelity: float = 0.7
    lexicon_degree: int = 6

    def validate(self) -> None:
        if min(self.n_clusters, self.n_molecules, self.n_receptors,
               self.n_descriptors) < 1:
            raise ValueError("all entity counts must be >= 1")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.n_clusters > min(self.n_molecules, self.n_receptors,
                                 self.n_descriptors):
            raise ValueError("more clusters than entities is infeasible")
        if self.n_clusters > self.dim:
            raise ValueError("need n_clusters <= dim for separable centroids")
        if not 0.0 <= self.bridge_fraction <= 1.0:
            raise ValueError("bridge_fraction must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SynthWorld:
    mol_table: EmbeddingTable
    rec_table: EmbeddingTable
    desc_table: EmbeddingTable
    desc_pairs: PairSet
    rec_pairs: PairSet
    lexicon: WeakPositiveLexicon
    descriptor_sets: dict[str, frozenset[str]]
    mol_clusters: list[int]
    rec_clusters: list[int]
    desc_clusters: list[int]
    spec: SynthSpec


def _orthonormal_rows(rng: Rng, k: int, dim: int) -> np.ndarray:
    """k orthonormal rows from Gram-Schmidt over Gaussian draws."""
    out = np.empty((k, dim))
    for i in range(k):
        while True:
            v = rng.normal(dim)
            for j in range(i):
                v = v - float(v @ out[j]) * out[j]
            norm = float(np.linalg.norm(v))
            if norm > 1e-6:
                out[i] = v / norm
                break
    return out


def _noisy(rng: Rng, base: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return base.copy()
    return base + rng.normal(base.size, sigma)


def generate_synthetic_world(spec: SynthSpec) -> SynthWorld:
    """Planted-cluster tri-modal world, a pure function of its spec.

    Entities of each modality sit near one of n_clusters orthonormal
    centroids (receptors through a fixed orthonormal map, so their raw
    geometry differs from the molecule space). Each cluster's descriptors
    are divided into subgroups; a molecule draws its descriptor partners
    from its own subgroup with probability subgroup_fidelity, else from the
    whole cluster, so shared-descriptor structure is finer than the raw
    embedding clusters. The first ceil(bridge_fraction * n_molecules)
    molecules (in seeded shuffled order) also get receptor pairs and act as
    bridges between the two partitions.
    """
    spec.validate()
    rng = Rng(spec.seed)
    k = spec.n_clusters
    centroids = _orthonormal_rows(rng, k, spec.dim)
    rec_map = _orthonormal_rows(rng, spec.dim, spec.dim)

    def build_entities(prefix: str, count: int, base_rows: np.ndarray):
        ids = [f"{prefix}{i:04d}" for i in range(count)]
        clusters = [i % k for i in range(count)]
        mat = np.empty((count, spec.dim))
        for i, c in enumerate(clusters):
            mat[i] = _noisy(rng, base_rows[c], spec.noise_sigma)
        return ids, clusters, mat

    mol_ids, mol_clusters, mol_mat = build_entities("mol", spec.n_molecules, centroids)
    desc_ids, desc_clusters, desc_mat = build_entities(
        "desc", spec.n_descriptors, centroids)
    rec_base = centroids @ rec_map
    rec_ids, rec_clusters, rec_mat = build_entities("rec", spec.n_receptors, rec_base)

    mol_table = EmbeddingTable(mol_ids, mol_mat, "molecule")
    desc_table = EmbeddingTable(desc_ids, desc_mat, "descriptor")
    rec_table = EmbeddingTable(rec_ids, rec_mat, "receptor")

    by_cluster_desc: list[list[int]] = [[] for _ in range(k)]
    for i, c in enumerate(desc_clusters):
        by_cluster_desc[c].append(i)
    by_cluster_rec: list[list[int]] = [[] for _ in range(k)]
    for i, c in enumerate(rec_clusters):
        by_cluster_rec[c].append(i)

    n_sub = max(1, spec.subgroups_per_cluster)
    desc_subgroup = {}
    for c in range(k):
        for pos, di in enumerate(by_cluster_desc[c]):
            desc_subgroup[di] = pos % n_sub

    # partners follow geometry: a molecule pairs with its nearest in-pool
    # entities by cosine, so held-out partners stay predictable from the
    # molecule's own embedding (binding and perception are functions of
    # structure, not arbitrary labels)
    desc_pairs_list: list[tuple[str, str]] = []
    descriptor_sets: dict[str, set[str]] = {m: set() for m in mol_ids}
    mol_subgroup = [i % n_sub for i in range(spec.n_molecules)]
    for i, mol in enumerate(mol_ids):
        c = mol_clusters[i]
        pool = by_cluster_desc[c]
        sub_pool = [d for d in pool if desc_subgroup[d] == mol_subgroup[i]] or pool
        chosen: set[int] = set()
        want = min(spec.pairs_per_molecule, len(pool))
        while len(chosen) < want:
            src = sub_pool if rng.uniform() < spec.subgroup_fidelity else pool
            open_pool = [d for d in src if d not in chosen]
            if not open_pool:
                open_pool = [d for d in pool if d not in chosen]
            sims = desc_mat[open_pool] @ mol_mat[i]
            chosen.add(open_pool[int(np.argmax(sims))])
        for di in sorted(chosen):
            desc_pairs_list.append((mol, desc_ids[di]))
            descriptor_sets[mol].add(desc_ids[di])

    # receptor affinity lives on the molecule's residual structure (its
    # embedding minus the cluster centroid) mapped into receptor space, so
    # which same-cluster receptor binds is molecule-specific, not a
    # cluster-level constant
    order = list(range(spec.n_molecules))
    rng.shuffle(order)
    n_bridge = max(1, math.ceil(spec.bridge_fraction * spec.n_molecules))
    rec_pairs_list: list[tuple[str, str]] = []
    for i in order[:n_bridge]:
        c = mol_clusters[i]
        pool = by_cluster_rec[c]
        want = min(spec.receptors_per_molecule, len(pool))
        affinity = rec_mat[pool] @ ((mol_mat[i] - centroids[c]) @ rec_map)
        chosen = {pool[j] for j in np.argsort(-affinity)[:want]}
        for ri in sorted(chosen):
            rec_pairs_list.append((mol_ids[i], rec_ids[ri]))

    neighbors: dict[str, frozenset[str]] = {}
    for di, desc in enumerate(desc_ids):
        pool = [d for d in by_cluster_desc[desc_clusters[di]] if d != di]
        want = min(spec.lexicon_degree, len(pool))
        chosen = {pool[j] for j in rng.sample_indices(len(pool), want)} if want else set()
        neighbors[desc] = frozenset(desc_ids[j] for j in sorted(chosen))

    return SynthWorld(
        mol_table=mol_table, rec_table=rec_table, desc_table=desc_table,
        desc_pairs=PairSet(pairs=desc_pairs_list),
        rec_pairs=PairSet(pairs=rec_pairs_list),
        lexicon=WeakPositiveLexicon(neighbors=neighbors),
        descriptor_sets={m: frozenset(s) for m, s in descriptor_sets.items()},
        mol_clusters=mol_clusters, rec_clusters=rec_clusters,
        desc_clusters=desc_clusters, spec=spec)


def save_pairs(pairs: PairSet, path) -> None:
    lines = ["mol_id\tpartner_id"]
    lines.extend(f"{m}\t{p}" for m, p in pairs.pairs)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
