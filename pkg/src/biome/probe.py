"""Frozen-encoder evaluation: clip embeddings, linear probes, metrics,
saliency maps and a PCA + depth-3 decision-tree separability check."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import torch
from scipy.stats import rankdata
from torch.nn import functional as F

from . import dsp
from .encoder import BioMEEncoder, pool

KINDS = ("binary_classification", "multiclass", "regression", "detection")
METRICS = ("accuracy", "mAP", "roc_auc", "mae", "f1")


@dataclass
class ProbeTask:
    kind: str
    embeddings: np.ndarray  # [N, d]
    labels: np.ndarray  # [N] ints/floats, or [N, C] multi-hot for detection
    metric: str = "accuracy"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise ValueError("embeddings must be [N, d] and aligned with labels")
        if self.kind in ("binary_classification", "multiclass"):
            classes, counts = np.unique(self.labels, return_counts=True)
            if classes.size < 2:
                raise ValueError("classification task needs at least two classes")
            if self.kind == "binary_classification" and classes.size != 2:
                raise ValueError("binary task must have exactly two classes")
            if counts.min() < 2:
                raise ValueError("every class needs at least two examples")
        elif self.kind == "detection":
            if self.labels.ndim != 2:
                raise ValueError("detection labels must be a [N, C] multi-hot matrix")
        elif len(self.labels) < 2:
            raise ValueError("regression needs at least two examples")


@dataclass
class LinearProbe:
    kind: str
    weight: np.ndarray  # [d, out]
    bias: np.ndarray  # [out]
    mean: np.ndarray
    scale: np.ndarray
    classes: Optional[np.ndarray] = None

    def scores(self, embeddings) -> np.ndarray:
        z = (np.asarray(embeddings, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight + self.bias

    def predict_proba(self, embeddings) -> np.ndarray:
        s = self.scores(embeddings)
        if self.kind == "detection":
            return 1.0 / (1.0 + np.exp(-s))
        if self.kind == "regression":
            return s[:, 0]
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, embeddings) -> np.ndarray:
        if self.kind == "regression":
            return self.scores(embeddings)[:, 0]
        if self.kind == "detection":
            return (self.predict_proba(embeddings) >= 0.5).astype(int)
        return self.classes[np.argmax(self.scores(embeddings), axis=1)]


# ---------------------------------------------------------------- embeddings


def model_inputs(clip: dsp.AudioClip, msab_nfft: int = dsp.MSAB_NFFT, dtype=torch.float32):
    mel = torch.as_tensor(dsp.mel_spectrogram(clip).values, dtype=dtype)
    h = torch.as_tensor(dsp.msab_features(clip, msab_nfft).values, dtype=dtype)
    return mel, h


def clip_embedding(model: BioMEEncoder, clip: dsp.AudioClip, pooling: str = "mean", condition: bool = True,
                   msab_nfft: int = dsp.MSAB_NFFT) -> np.ndarray:
    """Pooled final-layer representation of one clip (mean over tokens by default)."""
    dtype = next(model.parameters()).dtype
    mel, h = model_inputs(clip, msab_nfft, dtype)
    with torch.no_grad():
        final = model.forward_mel(mel, h, condition)[-1]
    return pool(final, pooling, model.cfg.cls_token).numpy()


# ---------------------------------------------------------------- probes


def fit_linear_probe(task: ProbeTask, l2: Optional[float] = None, max_iter: int = 200, seed: int = 0) -> LinearProbe:
    """Affine head on standardized frozen embeddings, fit full-batch with L-BFGS.

    Cross-entropy for classification, per-class logistic loss for detection,
    squared error for regression. ``l2`` defaults to 1e-3 for classification
    and 0 for regression.
    """
    x = task.embeddings
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = torch.as_tensor((x - mean) / scale)
    classes = None
    if task.kind in ("binary_classification", "multiclass"):
        classes, y_idx = np.unique(task.labels, return_inverse=True)
        target = torch.as_tensor(y_idx)
        n_out = classes.size
    elif task.kind == "detection":
        target = torch.as_tensor(task.labels, dtype=torch.float64)
        n_out = target.shape[1]
    else:
        target = torch.as_tensor(task.labels, dtype=torch.float64)
        n_out = 1
    if l2 is None:
        l2 = 0.0 if task.kind == "regression" else 1e-3

    gen = torch.Generator().manual_seed(seed)
    w = (0.01 * torch.randn(z.shape[1], n_out, generator=gen, dtype=torch.float64)).requires_grad_()
    b = torch.zeros(n_out, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], lr=1.0, max_iter=max_iter, tolerance_grad=1e-12, tolerance_change=1e-15,
                            history_size=20, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        out = z @ w + b
        if task.kind == "regression":
            loss = F.mse_loss(out[:, 0], target)
        elif task.kind == "detection":
            loss = F.binary_cross_entropy_with_logits(out, target)
        else:
            loss = F.cross_entropy(out, target)
        loss = loss + l2 * (w * w).sum()
        loss.backward()
        return loss

    opt.step(closure)
    return LinearProbe(task.kind, w.detach().numpy(), b.detach().numpy(), mean, scale, classes)


def evaluate_probe(probe: LinearProbe, embeddings, labels, metric: str) -> float:
    if metric in ("roc_auc", "mAP"):
        preds = probe.predict_proba(embeddings)
    elif metric == "f1" and probe.kind == "binary_classification":
        preds = probe.predict_proba(embeddings)[:, 1]
        labels = (np.asarray(labels) == probe.classes[1]).astype(int)
    else:
        preds = probe.predict(embeddings)
    if metric == "roc_auc" and preds.ndim == 2 and preds.shape[1] == 2:
        preds = preds[:, 1]
        labels = (np.asarray(labels) == probe.classes[1]).astype(int)
    return compute_metric(preds, labels, metric)


# ---------------------------------------------------------------- metrics


def roc_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc is undefined with a single class")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if not y.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # evaluate only at the last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1
    return out


def compute_metric(predictions, labels, metric: str) -> float:
    """accuracy | mAP | roc_auc | mae | f1 on aligned predictions and labels.

    ``accuracy`` takes predicted labels or a score matrix (argmax). ``mAP``
    takes a score matrix and multi-hot (or integer) labels and averages AP
    over classes with positives. ``f1`` thresholds scores at 0.5 and is
    macro-averaged over columns for 2-D inputs.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.size == 0 or y.size == 0:
        raise ValueError("empty predictions or labels")
    if len(p) != len(y):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(y)} labels")
    if metric == "accuracy":
        if p.ndim == 2 and y.ndim == 1:
            p = np.argmax(p, axis=1)
        return float(np.mean(p == y))
    if metric == "mae":
        return float(np.mean(np.abs(p.astype(np.float64) - y.astype(np.float64))))
    if metric == "roc_auc":
        return roc_auc(p, y)
    if metric == "mAP":
        if p.ndim == 1:
            p = p[:, None]
        if y.ndim == 1:
            y = _one_hot(y.astype(int), p.shape[1])
        aps = [average_precision(p[:, c], y[:, c]) for c in range(y.shape[1]) if y[:, c].any()]
        if not aps:
            raise ValueError("mAP needs at least one positive label")
        return float(np.mean(aps))
    if metric == "f1":
        pred = (p >= 0.5).astype(int)
        yy = y.astype(int)
        if pred.ndim == 1:
            pred, yy = pred[:, None], yy[:, None]
        f1s = []
        for c in range(pred.shape[1]):
            tp = np.sum((pred[:, c] == 1) & (yy[:, c] == 1))
            fp = np.sum((pred[:, c] == 1) & (yy[:, c] == 0))
            fn = np.sum((pred[:, c] == 0) & (yy[:, c] == 1))
            f1s.append(1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        return float(np.mean(f1s))
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- saliency


@dataclass
class SaliencyMap:
    values: np.ndarray  # |d target / d mel|, max-abs normalized
    raw: np.ndarray  # un-normalized signed gradient


Selector = Union[str, Callable[[torch.Tensor], torch.Tensor]]


def embedding_norm(final_tokens: torch.Tensor) -> torch.Tensor:
    return pool(final_tokens).norm()


def probe_logit(probe: LinearProbe, index: int = 0) -> Callable[[torch.Tensor], torch.Tensor]:
    """Selector returning one logit of a fitted probe on the mean-pooled embedding."""
    w = torch.as_tensor(probe.weight[:, index])
    mean, scale = torch.as_tensor(probe.mean), torch.as_tensor(probe.scale)

    def select(final_tokens):
        e = pool(final_tokens)
        return ((e - mean.to(e.dtype)) / scale.to(e.dtype)) @ w.to(e.dtype) + float(probe.bias[index])

    return select


def saliency_target(model: BioMEEncoder, mel: torch.Tensor, h: Optional[torch.Tensor], selector: Selector,
                    condition: bool = True) -> torch.Tensor:
    if selector == "embedding_norm":
        selector = embedding_norm
    elif isinstance(selector, str):
        raise ValueError(f"unknown target selector {selector!r}")
    return selector(model.forward_mel(mel, h, condition)[-1])


def saliency_map(model: BioMEEncoder, clip: dsp.AudioClip, target_selector: Selector = "embedding_norm",
                 condition: bool = True, msab_nfft: int = dsp.MSAB_NFFT) -> SaliencyMap:
    """Absolute gradient of the selected scalar with respect to each log-mel cell.

    Cells outside the 16x16 patch grid get zero. The map is scaled to
    max-abs 1 unless it is identically zero.
    """
    dtype = next(model.parameters()).dtype
    mel, h = model_inputs(clip, msab_nfft, dtype)
    mel.requires_grad_(True)
    target = saliency_target(model, mel, h, target_selector, condition)
    if target.numel() != 1 or not target.requires_grad:
        raise ValueError("target selector must return a differentiable scalar")
    (grad,) = torch.autograd.grad(target, mel, allow_unused=True)
    raw = np.zeros(tuple(mel.shape)) if grad is None else grad.detach().numpy().astype(np.float64)
    values = np.abs(raw)
    peak = values.max()
    if peak > 0:
        values = values / peak
    return SaliencyMap(values, raw)


# ---------------------------------------------------------------- separability


def pca_2d(x) -> np.ndarray:
    """Projection on the top two principal components, sign fixed so each axis' largest loading is positive."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(comps.shape[0]), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1
    proj = xc @ (comps * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def _gini(counts: np.ndarray) -> np.ndarray:
    n = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(n > 0, counts / n, 0.0)
    return 1.0 - (p * p).sum(axis=-1)


@dataclass
class TreeNode:
    prediction: int
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.left is None:
            return np.full(len(x), self.prediction)
        go_left = x[:, self.feature] <= self.threshold
        out = np.empty(len(x), dtype=int)
        out[go_left] = self.left.predict(x[go_left])
        out[~go_left] = self.right.predict(x[~go_left])
        return out


def fit_tree(x: np.ndarray, y: np.ndarray, max_depth: int = 3, n_classes: Optional[int] = None) -> TreeNode:
    """Axis-aligned tree grown greedily by exhaustive Gini threshold search over midpoints."""
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=n_classes)
    node = TreeNode(prediction=int(np.argmax(counts)))
    if max_depth == 0 or np.count_nonzero(counts) <= 1:
        return node
    parent = _gini(counts) * len(y)
    best = None
    onehot = np.eye(n_classes, dtype=np.int64)[y]
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="mergesort")
        xs = x[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = counts - left
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        nl = np.arange(1, len(y))
        impurity = _gini(left) * nl + _gini(right) * (len(y) - nl)
        impurity = np.where(valid, impurity, np.inf)
        i = int(np.argmin(impurity))
        if best is None or impurity[i] < best[0] - 1e-12:
            best = (impurity[i], f, 0.5 * (xs[i] + xs[i + 1]))
    if best is None or best[0] >= parent - 1e-12:
        return node
    _, f, thr = best
    mask = x[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = fit_tree(x[mask], y[mask], max_depth - 1, n_classes)
    node.right = fit_tree(x[~mask], y[~mask], max_depth - 1, n_classes)
    return node


def separability_probe(embeddings, labels, max_depth: int = 3, project: bool = True):
    """PCA to 2-D, then the training accuracy of a depth-limited decision tree.

    Returns ``(projection_2d, tree_accuracy)``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    classes, y = np.unique(np.asarray(labels), return_inverse=True)
    if classes.size < 2:
        raise ValueError("separability probe needs at least two distinct labels")
    if np.bincount(y).min() < 3:
        raise ValueError("separability probe needs at least three points per class")
    proj = pca_2d(x) if project else x
    tree = fit_tree(proj, y, max_depth, classes.size)
    return proj, float(np.mean(tree.predict(proj) == y))
