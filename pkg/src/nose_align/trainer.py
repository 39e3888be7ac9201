"""Alignment training loop: Adam with warmup, dual-partition batches,
orthogonality modes, early stopping on a validation retrieval score, and
binary checkpointing.

Per iteration: sample one batch from each pair partition, run both adapters
on the union of batch molecules, optionally hard-orthogonalize the aligned
components against the molecule embeddings, score both partitions with the
four-term contrastive loss, add the soft orthogonality penalty over
{z_mol, a_r, a_d} of all batch molecules, and take one bias-corrected Adam
step on the weighted total.

Everything is bit-reproducible from TrainConfig.seed; evaluation consumes no
randomness.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import contrastive, orthogonal
from .adapters import (AdapterConfig, AdapterParams, GradientSet, backward_adapter,
                       forward_adapter, head_backward, head_forward,
                       init_adapter_params, zero_gradients)
from .datahub import (EmbeddingTable, PairSet, TriModalBatch, WeakPositiveLexicon,
                      epoch_batches)
from .errors import DataFormatError, NumericError
from .linalg import Rng, cosine_similarity, pairwise_similarity

ORTHO_MODES = ("none", "hard", "soft", "hard+soft")

CKPT_MAGIC = "NOSECKPT1"


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    warmup_epochs: int = 20
    tau: float = 0.07
    lambda_desc: float = 2.0
    lambda_rec: float = 1.0
    lambda_orth: float = 2.0
    desc_batch: int = 64
    rec_batch: int = 16
    patience: int = 10
    max_epochs: int = 100
    seed: int = 42
    use_weak: bool = True
    use_intra: bool = True
    ortho_mode: str = "hard+soft"
    ortho_eps: float = 1e-8
    pair_mode: str = "unordered"
    weak_weight: float = 0.5
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def __post_init__(self):
        if self.ortho_mode not in ORTHO_MODES:
            raise ValueError(f"unknown ortho_mode {self.ortho_mode!r}")
        for name in ("base_lr", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_desc", "lambda_rec", "lambda_orth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def hard(self) -> bool:
        return self.ortho_mode in ("hard", "hard+soft")

    @property
    def soft(self) -> bool:
        return self.ortho_mode in ("soft", "hard+soft")


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6

    @staticmethod
    def for_tensors(tensors: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(m={k: np.zeros_like(t) for k, t in tensors.items()},
                         v={k: np.zeros_like(t) for k, t in tensors.items()})


def adam_step(tensors: dict[str, np.ndarray], grads: GradientSet,
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    theta -= lr * mhat / (sqrt(vhat) + eps); eps sits outside the root.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, theta in tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def warmup_lr(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear ramp to base_lr over warmup_epochs, constant afterwards."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if warmup_epochs <= 0:
        return base_lr
    return base_lr * min(1.0, (epoch + 1) / warmup_epochs)


# --------------------------------------------------------------------------
# model wrapper


@dataclass
class TrainedModel:
    """Frozen-encoder alignment model: parameters plus the config that
    determines how molecules map into each aligned component."""

    params: AdapterParams
    config: TrainConfig
    fusion_logits: np.ndarray | None = None

    def encode_molecules(self, x: np.ndarray):
        """Returns (a_r, a_d, z_r, z_d) for a batch of molecule embeddings."""
        a_d, _ = forward_adapter(x, self.params.desc_adapter)
        a_r, _ = forward_adapter(x, self.params.rec_adapter)
        if self.config.hard:
            z_r = orthogonal.hard_orthogonalize(a_r, x, self.config.ortho_eps)
            z_d = orthogonal.hard_orthogonalize(a_d, x, self.config.ortho_eps)
        else:
            z_r, z_d = a_r, a_d
        return a_r, a_d, z_r, z_d

    def encode_receptors(self, x: np.ndarray) -> np.ndarray:
        y, _ = head_forward(np.asarray(x, dtype=np.float64), self.params.head_rec)
        return y

    def encode_descriptors(self, x: np.ndarray) -> np.ndarray:
        y, _ = head_forward(np.asarray(x, dtype=np.float64), self.params.head_desc)
        return y


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_desc: float
    loss_rec: float
    loss_orth: float
    val_score: float
    max_hard_cos: float = 0.0  # diagnostic, not part of the history CSV


@dataclass
class EarlyStopState:
    best_score: float = np.inf
    best_epoch: int = -1
    epochs_since_improve: int = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record one epoch; returns True when this is a new best."""
        if score < self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.epochs_since_improve = 0
            return True
        self.epochs_since_improve += 1
        return False


# --------------------------------------------------------------------------
# validation score


def _group_pairs(pairs: PairSet) -> tuple[dict[str, list[str]], list[str]]:
    """anchor molecule -> partner ids, plus the deduplicated candidate pool
    (in first-appearance order)."""
    groups: dict[str, list[str]] = {}
    pool: list[str] = []
    seen = set()
    for mol, partner in pairs.pairs:
        groups.setdefault(mol, []).append(partner)
        if partner not in seen:
            seen.add(partner)
            pool.append(partner)
    return groups, pool


def _side_mean_percentile(mol_aligned: np.ndarray, anchors: list[str],
                          mol_index: dict[str, int], partner_vecs: np.ndarray,
                          pool_index: dict[str, int],
                          groups: dict[str, list[str]]) -> float:
    sims = pairwise_similarity(mol_aligned, partner_vecs)
    n_pool = partner_vecs.shape[0]
    percentiles = []
    for a in anchors:
        row = sims[mol_index[a]]
        target_cols = [pool_index[p] for p in groups[a]]
        best = min(int((row > row[c]).sum()) + 1 for c in target_cols)
        percentiles.append(best / n_pool)
    return float(np.mean(percentiles))


def validation_score(model: TrainedModel, desc_val: PairSet, rec_val: PairSet,
                     mol_table: EmbeddingTable, rec_table: EmbeddingTable,
                     desc_table: EmbeddingTable) -> float:
    """Sum over both partitions of the mean best-partner rank percentile.

    For every validation anchor molecule, its best true partner is ranked by
    cosine among the validation partition's deduplicated partner pool;
    percentile = rank / pool size, so lower is better and a perfect model
    scores 2/pool size.
    """
    if len(desc_val) == 0 or len(rec_val) == 0:
        raise ValueError("validation sets must be non-empty")
    score = 0.0
    for pairs, table, side in ((desc_val, desc_table, "desc"),
                               (rec_val, rec_table, "rec")):
        groups, pool = _group_pairs(pairs)
        anchors = sorted(groups)
        mol_vecs = mol_table.rows(anchors)
        _, _, z_r, z_d = model.encode_molecules(mol_vecs)
        aligned = z_d if side == "desc" else z_r
        partner_vecs = table.rows(pool)
        encoded = (model.encode_descriptors(partner_vecs) if side == "desc"
                   else model.encode_receptors(partner_vecs))
        mol_index = {a: i for i, a in enumerate(anchors)}
        pool_index = {p: i for i, p in enumerate(pool)}
        score += _side_mean_percentile(aligned, anchors, mol_index, encoded,
                                       pool_index, groups)
    return score


# --------------------------------------------------------------------------
# training


@dataclass
class WorldData:
    """Loaded inputs for one training run."""

    mol_table: EmbeddingTable
    rec_table: EmbeddingTable
    desc_table: EmbeddingTable
    desc_pairs: PairSet  # split labels required
    rec_pairs: PairSet
    lexicon: WeakPositiveLexicon | None = None


def _step(params: AdapterParams, batch: TriModalBatch, world: WorldData,
          config: TrainConfig, dropout_rng: Rng | None):
    """Forward + backward for one dual batch.

    Returns (grads, loss_desc, loss_rec, loss_orth, max_hard_cos).
    Pass dropout_rng=None for a deterministic (eval-mode) step, e.g. during
    gradient checks.
    """
    x_d = world.mol_table.rows(batch.desc_mol_ids)
    x_r = world.mol_table.rows(batch.rec_mol_ids)
    d_emb = world.desc_table.rows(batch.desc_partner_ids)
    r_emb = world.rec_table.rows(batch.rec_partner_ids)
    n_d = x_d.shape[0]
    x_all = np.vstack([x_d, x_r])

    a_d_all, cache_d = forward_adapter(x_all, params.desc_adapter)
    a_r_all, cache_r = forward_adapter(x_all, params.rec_adapter, dropout_rng)
    a_d = a_d_all[:n_d]
    a_r = a_r_all[n_d:]

    if config.hard:
        z_d = orthogonal.hard_orthogonalize(a_d, x_d, config.ortho_eps)
        z_r = orthogonal.hard_orthogonalize(a_r, x_r, config.ortho_eps)
    else:
        z_d, z_r = a_d, a_r

    max_cos = 0.0
    if config.hard:
        for z, x in ((z_d, x_d), (z_r, x_r)):
            for i in range(z.shape[0]):
                if np.linalg.norm(x[i]) >= 1e-3:
                    max_cos = max(max_cos, abs(cosine_similarity(z[i], x[i])))

    h_desc, cache_hd = head_forward(d_emb, params.head_desc)
    h_rec, cache_hr = head_forward(r_emb, params.head_rec)

    desc_meta = contrastive.BatchMeta(
        anchor_mol_ids=batch.desc_mol_ids, candidate_mol_ids=batch.desc_mol_ids,
        anchor_desc_ids=batch.desc_partner_ids,
        candidate_desc_ids=batch.desc_partner_ids)
    rec_meta = contrastive.BatchMeta(
        anchor_mol_ids=batch.rec_mol_ids, candidate_mol_ids=batch.rec_mol_ids)

    desc_losses, dz_d, dh_desc = contrastive.symmetric_pair_loss(
        z_d, h_desc, desc_meta, world.lexicon, config.tau,
        use_intra=config.use_intra, use_weak=config.use_weak,
        weak_weight=config.weak_weight)
    rec_losses, dz_r, dh_rec = contrastive.symmetric_pair_loss(
        z_r, h_rec, rec_meta, None, config.tau,
        use_intra=config.use_intra, use_weak=False)

    loss_orth = 0.0
    g_ar_all = g_ad_all = None
    if config.soft:
        loss_orth, g_ar_all, g_ad_all = orthogonal.soft_orthogonality_loss(
            x_all, a_r_all, a_d_all, config.pair_mode)

    for name, v in (("mol-desc contrastive", desc_losses.total),
                    ("mol-rec contrastive", rec_losses.total),
                    ("orthogonality", loss_orth)):
        if not np.isfinite(v):
            raise NumericError(f"{name} loss became non-finite")

    # backward, scaling each branch by its objective weight
    dz_d = dz_d * config.lambda_desc
    dh_desc = dh_desc * config.lambda_desc
    dz_r = dz_r * config.lambda_rec
    dh_rec = dh_rec * config.lambda_rec

    if config.hard:
        da_d = orthogonal.hard_orthogonalize_backward(a_d, x_d, config.ortho_eps, dz_d)
        da_r = orthogonal.hard_orthogonalize_backward(a_r, x_r, config.ortho_eps, dz_r)
    else:
        da_d, da_r = dz_d, dz_r

    da_d_all = np.zeros_like(a_d_all)
    da_d_all[:n_d] += da_d
    da_r_all = np.zeros_like(a_r_all)
    da_r_all[n_d:] += da_r
    if config.soft:
        da_r_all += config.lambda_orth * g_ar_all
        da_d_all += config.lambda_orth * g_ad_all

    grads = zero_gradients(params)
    _, g_desc = backward_adapter(cache_d, da_d_all)
    for k, v in g_desc.items():
        grads[f"desc_adapter.{k}"] += v
    _, g_rec = backward_adapter(cache_r, da_r_all)
    for k, v in g_rec.items():
        grads[f"rec_adapter.{k}"] += v
    _, g_hd = head_backward(cache_hd, params.head_desc, dh_desc)
    for k, v in g_hd.items():
        grads[f"head_desc.{k}"] += v
    _, g_hr = head_backward(cache_hr, params.head_rec, dh_rec)
    for k, v in g_hr.items():
        grads[f"head_rec.{k}"] += v

    return grads, desc_losses.total, rec_losses.total, loss_orth, max_cos


def batch_objective(params: AdapterParams, batch: TriModalBatch, world: WorldData,
                    config: TrainConfig) -> float:
    """Deterministic (eval-mode) total objective for one batch; the loss
    closure used by finite-difference checks."""
    _, loss_desc, loss_rec, loss_orth, _ = _step(params, batch, world, config, None)
    return contrastive.total_objective(
        loss_desc, loss_rec, loss_orth,
        (config.lambda_desc, config.lambda_rec, config.lambda_orth))


def batch_gradients(params: AdapterParams, batch: TriModalBatch, world: WorldData,
                    config: TrainConfig) -> GradientSet:
    """Analytic gradients of batch_objective (eval mode)."""
    grads, *_ = _step(params, batch, world, config, None)
    return grads


def train(config: TrainConfig, world: WorldData):
    """Full training protocol; returns (TrainedModel, history).

    The model carries the best-epoch parameters (float64 snapshot), so
    re-evaluating validation_score on it reproduces the best score exactly.
    """
    if not world.desc_pairs.splits or not world.rec_pairs.splits:
        raise ValueError("pair sets must carry split labels; run split_pairs first")
    desc_train = world.desc_pairs.subset("train")
    rec_train = world.rec_pairs.subset("train")
    desc_val = world.desc_pairs.subset("val")
    rec_val = world.rec_pairs.subset("val")

    adapter_cfg = AdapterConfig(**{**config.adapter.to_dict(),
                                   "dim": world.mol_table.dim,
                                   "desc_in_dim": world.desc_table.dim,
                                   "rec_in_dim": world.rec_table.dim})
    rng = Rng(config.seed)
    params = init_adapter_params(adapter_cfg, rng)
    state = AdamState.for_tensors(params.tensors())
    stopper = EarlyStopState()
    best_params = params.copy()
    history: list[EpochStats] = []

    for epoch in range(config.max_epochs):
        lr = warmup_lr(epoch, config.base_lr, config.warmup_epochs)
        sums = np.zeros(4)
        max_cos = 0.0
        batches = epoch_batches(rng, desc_train, rec_train,
                                config.desc_batch, config.rec_batch)
        for batch in batches:
            grads, loss_desc, loss_rec, loss_orth, batch_cos = _step(
                params, batch, world, config, rng)
            total = contrastive.total_objective(
                loss_desc, loss_rec, loss_orth,
                (config.lambda_desc, config.lambda_rec, config.lambda_orth))
            sums += (total, loss_desc, loss_rec, loss_orth)
            max_cos = max(max_cos, batch_cos)
            adam_step(params.tensors(), grads, state, lr)
        model = TrainedModel(params=params, config=config)
        score = validation_score(model, desc_val, rec_val, world.mol_table,
                                 world.rec_table, world.desc_table)
        n_b = len(batches)
        history.append(EpochStats(
            epoch=epoch, loss_total=float(sums[0]) / n_b,
            loss_desc=float(sums[1]) / n_b, loss_rec=float(sums[2]) / n_b,
            loss_orth=float(sums[3]) / n_b,
            val_score=score, max_hard_cos=max_cos))
        if stopper.update(epoch, score):
            best_params = params.copy()
        elif stopper.epochs_since_improve >= config.patience:
            break

    return TrainedModel(params=best_params, config=config), history


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_total", "loss_desc", "loss_rec",
                         "loss_orth", "val_score"])
        for h in history:
            writer.writerow([h.epoch, repr(h.loss_total), repr(h.loss_desc),
                             repr(h.loss_rec), repr(h.loss_orth),
                             repr(h.val_score)])


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TrainedModel, prefix) -> tuple[Path, Path]:
    """Write <prefix>.ckpt.json (manifest) + <prefix>.ckpt.bin (f32le tensors,
    concatenated in manifest order)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.params.tensors())
    if model.fusion_logits is not None:
        tensors["fusion_logits"] = np.asarray(model.fusion_logits, dtype=np.float64)
    entries = []
    blob = bytearray()
    for name, t in tensors.items():
        raw = t.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape),
                        "offset": len(blob), "bytes": len(raw)})
        blob.extend(raw)
    manifest = {
        "magic": CKPT_MAGIC,
        "dtype": "f32le",
        "adapter_config": model.params.config.to_dict(),
        "ortho_mode": model.config.ortho_mode,
        "ortho_eps": model.config.ortho_eps,
        "tensors": entries,
    }
    json_path = prefix.with_suffix(".ckpt.json")
    bin_path = prefix.with_suffix(".ckpt.bin")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    bin_path.write_bytes(bytes(blob))
    return json_path, bin_path


def load_checkpoint(prefix) -> TrainedModel:
    prefix = Path(prefix)
    json_path = prefix.with_suffix(".ckpt.json")
    bin_path = prefix.with_suffix(".ckpt.bin")
    for p in (json_path, bin_path):
        if not p.exists():
            raise DataFormatError(f"missing checkpoint file {p}")
    manifest = json.loads(json_path.read_text(encoding="utf-8"))
    if manifest.get("magic") != CKPT_MAGIC:
        raise DataFormatError(f"{json_path}: bad magic {manifest.get('magic')!r}")
    blob = bin_path.read_bytes()
    adapter_cfg = AdapterConfig.from_dict(manifest["adapter_config"])
    params = init_adapter_params(adapter_cfg, Rng(0))
    tensors = params.tensors()
    fusion_logits = None
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["bytes"]]
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        arr = arr.reshape(entry["shape"]) if entry["shape"] else arr.reshape(())
        if entry["name"] == "fusion_logits":
            fusion_logits = arr
            continue
        if entry["name"] not in tensors:
            raise DataFormatError(f"{json_path}: unknown tensor {entry['name']!r}")
        if list(tensors[entry["name"]].shape) != entry["shape"]:
            raise DataFormatError(
                f"{json_path}: shape mismatch for {entry['name']!r}")
        tensors[entry["name"]][...] = arr
    config = TrainConfig(ortho_mode=manifest.get("ortho_mode", "hard+soft"),
                         ortho_eps=manifest.get("ortho_eps", 1e-8),
                         adapter=adapter_cfg)
    return TrainedModel(params=params, config=config, fusion_logits=fusion_logits)
