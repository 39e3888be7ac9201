"""Downstream inference: gated softmax fusion, mixture encoding, linear
probes, and the task metrics they report.

The fused representation is a convex combination
Z = w1*z_mol + w2*a_r + w3*a_d with (w1, w2, w3) = softmax(logits); the three
logits are the only fusion parameters and are trained jointly with the probe
head. Binary-mixture inputs concatenate the two per-molecule vectors with no
interaction module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .linalg import Rng
from .adapters import gelu, gelu_grad
from .trainer import AdamState, adam_step

TASK_KINDS = ("regression", "multilabel-regression", "multilabel-classification")
HIGHER_BETTER = {"pearson", "r2", "auc_macro", "auprc_macro", "mcc"}
LOWER_BETTER = {"mae", "mse"}


@dataclass
class FusionWeights:
    logits: np.ndarray  # (3,) for z_mol, a_r, a_d

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(3)

    @property
    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


def fuse(z_mol, a_r, a_d, weights: FusionWeights) -> np.ndarray:
    """Softmax-weighted convex combination of the three components.

    Accepts single vectors or row batches of equal shape.
    """
    parts = [np.asarray(p, dtype=np.float64) for p in (z_mol, a_r, a_d)]
    if not (parts[0].shape == parts[1].shape == parts[2].shape):
        raise ValueError(f"component shape mismatch: "
                         f"{[p.shape for p in parts]}")
    w = weights.weights
    return w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2]


def encode_mixture(v1, v2) -> np.ndarray:
    """Concatenate two component vectors; order is significant."""
    a = np.asarray(v1, dtype=np.float64)
    b = np.asarray(v2, dtype=np.float64)
    return np.concatenate([a, b], axis=-1)


# --------------------------------------------------------------------------
# probes


@dataclass
class ProbeConfig:
    lr: float = 1e-2
    weight_decay: float = 0.01
    max_steps: int = 500
    patience: int = 50
    val_fraction: float = 0.2
    metric: str = "r2"
    seed: int = 42
    data_fraction: float = 1.0
    input_mode: str = "gated"  # "gated" (fused dim) or "concat" (3x dim)
    hidden_depth: int = 0      # 0 -> linear head

    def __post_init__(self):
        if self.input_mode not in ("gated", "concat"):
            raise ValueError(f"unknown input_mode {self.input_mode!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.metric not in HIGHER_BETTER | LOWER_BETTER:
            raise ValueError(f"unknown early-stop metric {self.metric!r}")


@dataclass
class ProbeHead:
    """Probe head: optional GELU hidden layers then a linear output map."""

    layers: list[tuple[np.ndarray, np.ndarray]]  # [(W, b), ...], last is output
    task: str

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for W, b in self.layers[:-1]:
            h = gelu(h @ W.T + b)
        W, b = self.layers[-1]
        return h @ W.T + b


ComponentTriple = tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class ProbeInputs:
    """One or more slots of (z_mol, a_r, a_d); multi-slot inputs (mixtures)
    are fused per slot with shared weights, then concatenated."""

    slots: list[ComponentTriple]

    @property
    def n_samples(self) -> int:
        return self.slots[0][0].shape[0]

    @property
    def component_dim(self) -> int:
        return self.slots[0][0].shape[1]


def build_probe_inputs(inputs: ProbeInputs, logits: np.ndarray,
                       mode: str) -> np.ndarray:
    """Design matrix for the probe: gated fusion per slot or flat concat."""
    if mode == "concat":
        return np.hstack([np.hstack(slot) for slot in inputs.slots])
    w = FusionWeights(logits).weights
    return np.hstack([w[0] * m + w[1] * r + w[2] * d
                      for (m, r, d) in inputs.slots])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bce(scores: np.ndarray, labels: np.ndarray) -> float:
    # log(1+exp(-|x|)) form avoids overflow
    return float(np.mean(np.log1p(np.exp(-np.abs(scores)))
                         + np.maximum(scores, 0) - scores * labels))


@dataclass
class ProbeReport:
    metrics: dict
    fusion_weights: list[float]
    seed: int
    data_fraction: float
    task: str
    steps_run: int
    best_step: int
    flags: dict = field(default_factory=dict)


def fit_probe(inputs: ProbeInputs, targets, task: str, config: ProbeConfig):
    """Jointly fit the head and fusion logits by full-batch AdamW.

    Regression tasks minimize MSE, classification per-label BCE on logits.
    Early stopping watches config.metric on a held-out fraction; weight decay
    applies to head weight matrices only. Deterministic given config.seed.

    Returns (ProbeHead, FusionWeights, ProbeReport).
    """
    if task not in TASK_KINDS:
        raise ValueError(f"unknown task kind {task!r}")
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = inputs.n_samples
    if y.shape[0] != n:
        raise ValueError(f"targets rows {y.shape[0]} != inputs rows {n}")
    flags = {}
    if task != "multilabel-classification" and float(np.var(y)) == 0.0:
        flags["degenerate_targets"] = True

    rng = Rng(config.seed)
    order = list(range(n))
    rng.shuffle(order)
    if config.data_fraction < 1.0:
        keep = max(2, int(round(n * config.data_fraction)))
        order = order[:keep]
    n_kept = len(order)
    n_val = max(1, int(round(n_kept * config.val_fraction))) if n_kept > 2 else 1
    val_idx = np.array(order[:n_val])
    train_idx = np.array(order[n_val:]) if n_kept - n_val > 0 else np.array(order)

    def gather(idx):
        return ProbeInputs([(m[idx], r[idx], d[idx]) for m, r, d in inputs.slots]), y[idx]

    tr_in, tr_y = gather(train_idx)
    va_in, va_y = gather(val_idx)

    in_dim = inputs.component_dim * len(inputs.slots)
    if config.input_mode == "concat":
        in_dim *= 3
    out_dim = y.shape[1]
    sizes = [in_dim] + [in_dim] * config.hidden_depth + [out_dim]
    layers = []
    for i in range(len(sizes) - 1):
        sigma = math.sqrt(2.0 / (sizes[i] + sizes[i + 1]))
        layers.append((rng.normal_matrix(sizes[i + 1], sizes[i], sigma),
                       np.zeros(sizes[i + 1])))
    logits = np.zeros(3)

    tensors: dict[str, np.ndarray] = {}
    for i, (W, b) in enumerate(layers):
        tensors[f"layer{i}.W"] = W
        tensors[f"layer{i}.b"] = b
    if config.input_mode == "gated":
        tensors["fusion.logits"] = logits
    state = AdamState.for_tensors(tensors)

    classification = task == "multilabel-classification"
    better = ((lambda a, b: a > b) if config.metric in HIGHER_BETTER
              else (lambda a, b: a < b))
    best_metric = -np.inf if config.metric in HIGHER_BETTER else np.inf
    best_snapshot = {k: t.copy() for k, t in tensors.items()}
    best_step = 0
    since_best = 0
    steps = 0

    for step in range(1, config.max_steps + 1):
        steps = step
        grads = _probe_grads(tr_in, tr_y, layers, logits, config, classification)
        adam_step(tensors, grads, state, config.lr)
        if config.weight_decay > 0:
            for i in range(len(layers)):
                tensors[f"layer{i}.W"] -= config.lr * config.weight_decay * tensors[f"layer{i}.W"]
        x_va = build_probe_inputs(va_in, logits, config.input_mode)
        pred = ProbeHead(layers, task).forward(x_va)
        metric = _early_stop_metric(pred, va_y, config.metric, classification)
        if better(metric, best_metric):
            best_metric = metric
            best_snapshot = {k: t.copy() for k, t in tensors.items()}
            best_step = step
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    for k, t in tensors.items():
        t[...] = best_snapshot[k]
    head = ProbeHead(layers=layers, task=task)
    fusion = FusionWeights(logits if config.input_mode == "gated" else np.zeros(3))

    x_all = build_probe_inputs(inputs, fusion.logits, config.input_mode)
    pred_all = head.forward(x_all)
    if classification:
        metrics = classification_metrics(pred_all, y)
    else:
        metrics = regression_metrics(pred_all, y)
    report = ProbeReport(metrics=metrics,
                         fusion_weights=[float(w) for w in fusion.weights],
                         seed=config.seed, data_fraction=config.data_fraction,
                         task=task, steps_run=steps, best_step=best_step,
                         flags=flags)
    return head, fusion, report


def _probe_grads(inputs: ProbeInputs, y: np.ndarray,
                 layers: list[tuple[np.ndarray, np.ndarray]],
                 logits: np.ndarray, config: ProbeConfig,
                 classification: bool) -> dict[str, np.ndarray]:
    n = y.shape[0]
    x = build_probe_inputs(inputs, logits, config.input_mode)
    acts = [x]
    pre = []
    h = x
    for W, b in layers[:-1]:
        z = h @ W.T + b
        pre.append(z)
        h = gelu(z)
        acts.append(h)
    W_out, b_out = layers[-1]
    scores = h @ W_out.T + b_out

    if classification:
        p = _sigmoid(scores)
        dscores = (p - y) / (n * y.shape[1])
    else:
        dscores = 2.0 * (scores - y) / (n * y.shape[1])

    grads: dict[str, np.ndarray] = {}
    g = dscores
    grads[f"layer{len(layers)-1}.W"] = g.T @ acts[-1]
    grads[f"layer{len(layers)-1}.b"] = g.sum(axis=0)
    dx = g @ W_out
    for i in range(len(layers) - 2, -1, -1):
        dz = dx * gelu_grad(pre[i])
        grads[f"layer{i}.W"] = dz.T @ acts[i]
        grads[f"layer{i}.b"] = dz.sum(axis=0)
        dx = dz @ layers[i][0]

    if config.input_mode == "gated":
        w = FusionWeights(logits).weights
        dim = inputs.component_dim
        dw = np.zeros(3)
        for s, slot in enumerate(inputs.slots):
            dslot = dx[:, s * dim:(s + 1) * dim]
            for kcomp in range(3):
                dw[kcomp] += float(np.sum(dslot * slot[kcomp]))
        dlogits = w * (dw - float(w @ dw))
        grads["fusion.logits"] = dlogits
    return grads


def _early_stop_metric(pred: np.ndarray, y: np.ndarray, metric: str,
                       classification: bool) -> float:
    if classification:
        return classification_metrics(pred, y)[metric]
    return regression_metrics(pred, y)[metric]


# --------------------------------------------------------------------------
# metrics


def _pearson(pred: np.ndarray, target: np.ndarray) -> tuple[float, bool]:
    sp = float(np.std(pred))
    st = float(np.std(target))
    if sp == 0.0 or st == 0.0:
        return 0.0, True
    c = float(np.mean((pred - pred.mean()) * (target - target.mean())) / (sp * st))
    return c, False


def regression_metrics(pred, target) -> dict:
    """pearson / r2 / mae / mse; 2-D inputs are macro-averaged per column.

    Zero-variance columns report pearson (and r2 on zero-variance targets)
    as 0 and are flagged, never raised.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.ndim == 1:
        p = p[:, None]
        t = t[:, None]
    if p.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    pearsons, r2s, flagged = [], [], 0
    for j in range(p.shape[1]):
        c, flag = _pearson(p[:, j], t[:, j])
        flagged += flag
        pearsons.append(c)
        ss_tot = float(np.sum((t[:, j] - t[:, j].mean()) ** 2))
        ss_res = float(np.sum((t[:, j] - p[:, j]) ** 2))
        r2s.append(1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0)
    return {
        "pearson": float(np.mean(pearsons)),
        "r2": float(np.mean(r2s)),
        "mae": float(np.mean(np.abs(p - t))),
        "mse": float(np.mean((p - t) ** 2)),
        "zero_variance_columns": flagged,
    }


def _rank_with_ties(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties get the average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels > 0.5
    m = int(pos.sum())
    n_neg = len(labels) - m
    ranks = _rank_with_ties(scores)
    return (float(ranks[pos].sum()) - m * (m + 1) / 2.0) / (m * n_neg)


def _average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-interpolated area under the precision-recall curve."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    l = labels[order] > 0.5
    total_pos = int(l.sum())
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    prev_recall = 0.0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(l[i:j + 1].sum())
        seen = j + 1
        recall = tp / total_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def _mcc(scores: np.ndarray, labels: np.ndarray) -> float:
    pred = _sigmoid(scores) >= 0.5
    actual = labels > 0.5
    tp = float(np.sum(pred & actual))
    tn = float(np.sum(~pred & ~actual))
    fp = float(np.sum(pred & ~actual))
    fn = float(np.sum(~pred & actual))
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return (tp * tn - fp * fn) / denom if denom > 0 else 0.0


def classification_metrics(scores, labels) -> dict:
    """Macro AUC (tie-averaged rank statistic), AUPRC (step interpolation),
    and MCC at the sigmoid-0.5 threshold.

    Label columns that are all-positive or all-negative are skipped and
    counted; if every column is degenerate the metrics are undefined.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {y.shape}")
    if s.ndim == 1:
        s = s[:, None]
        y = y[:, None]
    aucs, aps, mccs, skipped = [], [], [], 0
    for j in range(s.shape[1]):
        col = y[:, j] > 0.5
        if col.all() or not col.any():
            skipped += 1
            continue
        aucs.append(_auc_rank(s[:, j], y[:, j]))
        aps.append(_average_precision(s[:, j], y[:, j]))
        mccs.append(_mcc(s[:, j], y[:, j]))
    if not aucs:
        raise NumericError("every label column is all-positive or all-negative")
    return {
        "auc_macro": float(np.mean(aucs)),
        "auprc_macro": float(np.mean(aps)),
        "mcc": float(np.mean(mccs)),
        "skipped_columns": skipped,
    }
