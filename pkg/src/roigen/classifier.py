"""Downstream imbalanced two-class harness: a small 3D residual classifier,
focal loss, traditional augmentations, the (a)/(b)/(c) training protocols
and multi-trial evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage
from scipy.stats import rankdata


# ---------------------------------------------------------------------------
# Losses and weights

def focal_loss(probs: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0,
               class_weights=None) -> torch.Tensor:
    """mean of -alpha_y (1 - p_y)^gamma log p_y over samples.

    `probs` are per-class probabilities in (0, 1); gamma=0 with equal
    weights reduces to plain cross-entropy.
    """
    if probs.dim() == 1:
        probs = torch.stack([1 - probs, probs], dim=1)
    labels = labels.long()
    p_y = probs.gather(1, labels.unsqueeze(1)).squeeze(1).clamp_min(1e-12)
    if class_weights is None:
        alpha = torch.ones_like(p_y)
    else:
        w = torch.as_tensor(class_weights, dtype=probs.dtype)
        alpha = w[labels]
    return (-alpha * (1 - p_y) ** gamma * torch.log(p_y)).mean()


def class_weights(labels, mode: str = "paper") -> dict:
    """Per-class weight n_c / N; mode="inverse" gives 1 - n_c / N."""
    labels = list(labels)
    if not labels:
        raise ValueError("no samples")
    classes = sorted(set(labels))
    n = len(labels)
    out = {}
    for c in classes:
        n_c = labels.count(c)
        if n_c == 0:
            raise ValueError(f"empty class {c!r}")
        out[c] = n_c / n if mode == "paper" else 1.0 - n_c / n
    return out


# ---------------------------------------------------------------------------
# Traditional augmentations (in-plane = axial plane, axes 0 and 1)

def rotate_inplane(v: np.ndarray, degrees: float) -> np.ndarray:
    out = ndimage.rotate(v, degrees, axes=(0, 1), reshape=False, order=1,
                         mode="constant", cval=-1.0)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def scale_inplane(v: np.ndarray, factor: float = 1.5) -> np.ndarray:
    zoomed = ndimage.zoom(v, (factor, factor, 1.0), order=1, mode="constant", cval=-1.0)
    out = np.full_like(v, -1.0)
    for ax in (0, 1):
        n, m = v.shape[ax], zoomed.shape[ax]
        if m >= n:
            start = (m - n) // 2
            zoomed = np.take(zoomed, range(start, start + n), axis=ax)
    out[: zoomed.shape[0], : zoomed.shape[1], :] = zoomed
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def flip_lr(v: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(v[:, ::-1, :])


def elastic_deform(v: np.ndarray, seed: int, sigma: float = 2.0,
                   control_points: int = 4) -> np.ndarray:
    """Coarse random displacement field upsampled trilinearly, then warped."""
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.0, sigma, size=(3, control_points, control_points, control_points))
    zoom = [s / control_points for s in v.shape]
    disp = np.stack([ndimage.zoom(c, zoom, order=1) for c in coarse])
    grid = np.meshgrid(*[np.arange(s) for s in v.shape], indexing="ij")
    coords = [g + d for g, d in zip(grid, disp)]
    out = ndimage.map_coordinates(v, coords, order=1, mode="constant", cval=-1.0)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def augment_traditional(v: np.ndarray, seed: int) -> np.ndarray:
    """Random composition of 30-degree rotation, 1.5x scaling, left-right
    flip and elastic deformation; shape preserved, range clamped."""
    rng = np.random.default_rng(seed)
    out = np.asarray(v, np.float32)
    if rng.random() < 0.5:
        out = rotate_inplane(out, 30.0 if rng.random() < 0.5 else -30.0)
    if rng.random() < 0.5:
        out = scale_inplane(out, 1.5)
    if rng.random() < 0.5:
        out = flip_lr(out)
    if rng.random() < 0.5:
        out = elastic_deform(out, int(rng.integers(1 << 31)))
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# 3D residual classifier

class _BasicBlock3d(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        self.short = None
        if stride != 1 or in_ch != out_ch:
            self.short = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch))

    def forward(self, x):
        identity = self.short(x) if self.short else x
        h = F.relu(self.bn1(self.conv1(x)))
        return F.relu(identity + self.bn2(self.conv2(h)))


class _Bottleneck3d(nn.Module):
    expansion = 4

    def __init__(self, in_ch, width, stride=1):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv3d(in_ch, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = nn.Conv3d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_ch)
        self.short = None
        if stride != 1 or in_ch != out_ch:
            self.short = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch))

    def forward(self, x):
        identity = self.short(x) if self.short else x
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        return F.relu(identity + self.bn3(self.conv3(h)))


class ResNet3dClassifier(nn.Module):
    """Residual 3D classifier.

    preset="toy": three basic-block stages (~1M parameters), for desk-scale
    runs. preset="full": 50-layer bottleneck layout [3, 4, 6, 3].
    """

    def __init__(self, preset: str = "toy", num_classes: int = 2):
        super().__init__()
        if preset == "toy":
            widths, blocks, block_cls, stem = (16, 32, 64), (1, 1, 1), _BasicBlock3d, 16
        elif preset == "full":
            widths, blocks, block_cls, stem = (64, 128, 256, 512), (3, 4, 6, 3), _Bottleneck3d, 64
        else:
            raise ValueError(f"unknown preset {preset!r}")
        self.stem = nn.Sequential(
            nn.Conv3d(1, stem, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm3d(stem), nn.ReLU())
        layers = []
        in_ch = stem
        for w, n in zip(widths, blocks):
            for i in range(n):
                layers.append(block_cls(in_ch, w, stride=2 if i == 0 else 1))
                in_ch = w * getattr(block_cls, "expansion", 1)
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        if x.dim() == 4:
            x = x[:, None]
        h = self.body(self.stem(x))
        return self.fc(h.mean(dim=(-3, -2, -1)))


# ---------------------------------------------------------------------------
# Evaluation metrics

def binary_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """AUC plus threshold metrics; scores are probabilities of class 1."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, np.int64)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = (tp + tn) / len(labels) if len(labels) else 0.0
    return {"auc": auc(scores, labels), "f1": f1, "accuracy": acc,
            "precision": prec, "recall": rec}


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with average-rank tie handling."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Trial protocols

@dataclass
class TrialPlan:
    protocol: str = "a"  # a: imbalanced real, b: augment-balanced, c: synthetic pretrain
    trials: int = 3
    split_fraction: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in ("a", "b", "c"):
            raise ValueError("protocol must be 'a', 'b' or 'c'")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")


@dataclass
class ClassifierConfig:
    preset: str = "toy"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-3
    finetune_epochs: int = 10
    focal_gamma: float = 2.0
    use_class_weights: bool = True
    threshold: float = 0.5


def _train(model, samples, epochs, lr, batch_size, seed, gamma, weights):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    vols = torch.from_numpy(np.stack([s[0] for s in samples])).float()
    labels = torch.tensor([s[1] for s in samples], dtype=torch.long)
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            logits = model(vols[idx])
            probs = F.softmax(logits, dim=1)
            loss = focal_loss(probs, labels[idx], gamma=gamma, class_weights=weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def predict_scores(model, volumes) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.stack(volumes)).float()
        return F.softmax(model(x), dim=1)[:, 1].numpy()


def make_validation_folds(indices_by_class: dict, trials: int, fraction: float,
                          rng: np.random.Generator):
    """Pairwise-disjoint class-balanced validation subsets, one per trial."""
    n_total = sum(len(v) for v in indices_by_class.values())
    n_val = max(2, int(round((1 - fraction) * n_total)))
    per_class = max(1, n_val // len(indices_by_class))
    smallest = min(len(v) for v in indices_by_class.values())
    if per_class * trials > smallest:
        per_class = smallest // trials
    if per_class < 1:
        raise ValueError(
            f"too few samples for {trials} disjoint balanced validation sets")
    folds = []
    shuffled = {c: rng.permutation(v).tolist() for c, v in indices_by_class.items()}
    for t in range(trials):
        fold = []
        for c in shuffled:
            fold.extend(shuffled[c][t * per_class:(t + 1) * per_class])
        folds.append(sorted(fold))
    return folds


def run_protocol(plan: TrialPlan, cfg: ClassifierConfig, data: dict) -> dict:
    """Train and evaluate one protocol over `plan.trials` trials.

    `data` maps "train" and "test" to lists of (volume, label) pairs with
    labels in {0, 1} (1 = minority); protocol (c) additionally needs
    "synthetic": minority-class volumes for pretraining.
    """
    train = data["train"]
    test = data["test"]
    by_class = {}
    for i, (_, lab) in enumerate(train):
        by_class.setdefault(int(lab), []).append(i)
    if len(by_class) < 2:
        raise ValueError("training data must contain both classes")
    rng = np.random.default_rng(plan.seed)
    folds = make_validation_folds(by_class, plan.trials, plan.split_fraction, rng)

    test_vols = [v for v, _ in test]
    test_labels = [int(l) for _, l in test]
    results = []
    for t, fold in enumerate(folds):
        torch.manual_seed(plan.seed * 1000 + t)
        fit_idx = [i for i in range(len(train)) if i not in set(fold)]
        fit = [train[i] for i in fit_idx]
        trial_seed = plan.seed * 100 + t

        if plan.protocol == "a":
            samples = fit
            model = _fit_once(cfg, samples, cfg.epochs, cfg.lr, trial_seed)
        elif plan.protocol == "b":
            samples = _balance_by_augmentation(fit, trial_seed)
            model = _fit_once(cfg, samples, cfg.epochs, cfg.lr, trial_seed)
        else:
            synth = data.get("synthetic")
            if not synth:
                raise ValueError("protocol (c) needs data['synthetic']")
            majority = [s for s in fit if s[1] == 0]
            pre = majority[: len(synth)] + [(v, 1) for v in synth]
            model = _fit_once(cfg, pre, cfg.epochs, cfg.pretrain_lr, trial_seed)
            minority = [s for s in fit if s[1] == 1]
            balanced = majority[: len(minority)] + minority
            weights = _weights_for(cfg, balanced)
            model = _train(model, balanced, cfg.finetune_epochs, cfg.finetune_lr,
                           cfg.batch_size, trial_seed + 7, cfg.focal_gamma, weights)

        scores = predict_scores(model, test_vols)
        m = binary_metrics(scores, test_labels, threshold=cfg.threshold)
        m["trial"] = t
        m["validation_indices"] = fold
        results.append(m)

    keys = ("auc", "f1", "accuracy", "precision", "recall")
    agg = {k: (float(np.mean([r[k] for r in results])),
               float(np.std([r[k] for r in results]))) for k in keys}
    return {"trials": results, "aggregate": agg}


def _weights_for(cfg: ClassifierConfig, samples):
    if not cfg.use_class_weights:
        return None
    w = class_weights([int(l) for _, l in samples])
    return [w.get(0, 0.0), w.get(1, 0.0)]


def _fit_once(cfg: ClassifierConfig, samples, epochs, lr, seed):
    model = ResNet3dClassifier(preset=cfg.preset)
    return _train(model, samples, epochs, lr, cfg.batch_size, seed,
                  cfg.focal_gamma, _weights_for(cfg, samples))


def _balance_by_augmentation(samples, seed):
    by_class = {}
    for v, l in samples:
        by_class.setdefault(int(l), []).append(v)
    counts = {c: len(v) for c, v in by_class.items()}
    n_max = max(counts.values())
    out = list(samples)
    rng = np.random.default_rng(seed)
    for c, vols in by_class.items():
        need = n_max - len(vols)
        for k in range(need):
            src = vols[k % len(vols)]
            out.append((augment_traditional(src, int(rng.integers(1 << 31))), c))
    return out
