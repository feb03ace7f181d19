"""Downstream protocols and generative metrics."""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .config import TrainConfig
from .diffusion import NoiseSchedule
from .model import MacDiffNet
from .sampling import build_augmented_set, precompute_conditions, to_model_frames
from .skeleton import NormalizationStats, augment, normalize, random_crop_resize
from .training import lr_at


@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or not np.all(np.isfinite(self.features)):
            raise ValueError("features must be a finite (n, C) matrix")

    def __len__(self):
        return len(self.features)


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


@dataclass
class MetricReport:
    metrics: dict
    fingerprint: str = ""
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)
    timestamp: float = field(default_factory=time.time)

    def to_json(self, include_timestamp: bool = True) -> str:
        d = {"metrics": self.metrics, "fingerprint": self.fingerprint, "seed": self.seed, "extra": self.extra}
        if include_timestamp:
            d["timestamp"] = self.timestamp
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["metrics"], d.get("fingerprint", ""), d.get("seed"), d.get("extra", {}),
                   d.get("timestamp", 0.0))


@torch.no_grad()
def extract_features(model: MacDiffNet, X: np.ndarray, stats: NormalizationStats,
                     batch_size: int = 128, source: str = "real") -> FeatureSet:
    """Pooled encoder output with every token visible."""
    model.eval()
    X = to_model_frames(X, model.config.num_frames)
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(X), batch_size):
        x = torch.from_numpy(normalize(X[start:start + batch_size], stats).astype(np.float32)).to(dtype)
        out.append(model.encode(x)[1].double().numpy())
    return FeatureSet(np.concatenate(out) if out else np.zeros((0, model.config.embed_dim)), source)


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Softmax regression trained by minibatch SGD with momentum on frozen features.

    Features are standardized with training-set statistics first (a non-affine
    batch norm folded into the linear layer).
    """

    def __init__(self, epochs=100, lr=0.1, momentum=0.9, batch_size=32, standardize=True, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.standardize = standardize
        self.random_state = random_state

    def _scale(self, X):
        return (X - self.mean_) / self.scale_

    def fit(self, X, y, eval_set=None):
        """``eval_set=(X_val, y_val)`` records per-epoch validation accuracy in ``history_``."""
        X, y = check_X_y(X, y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("linear probe needs at least two classes in the training set")
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(X.shape[1])
        self.scale_ = X.std(axis=0) + 1e-6 if self.standardize else np.ones(X.shape[1])
        X = self._scale(X)
        rng = np.random.default_rng(self.random_state)
        n, d = X.shape
        k = len(self.classes_)
        W = np.zeros((d, k))
        b = np.zeros(k)
        vW, vb = np.zeros_like(W), np.zeros_like(b)
        onehot = np.eye(k)[yi]
        self.history_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                p = _softmax(X[idx] @ W + b)
                g = (p - onehot[idx]) / len(idx)
                vW = self.momentum * vW + X[idx].T @ g
                vb = self.momentum * vb + g.sum(axis=0)
                W -= self.lr * vW
                b -= self.lr * vb
            if eval_set is not None:
                self.coef_, self.intercept_ = W.T, b
                self.history_.append(self.score(*eval_set))
        self.coef_, self.intercept_ = W.T, b
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        return _softmax(self._scale(np.asarray(X, dtype=np.float64)) @ self.coef_.T + self.intercept_)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_features, train_labels, test_features, test_labels, epochs: int = 100,
                 lr: float = 0.1, seed: int = 0) -> float:
    clf = LinearProbeClassifier(epochs=epochs, lr=lr, random_state=seed)
    clf.fit(_feats(train_features), train_labels)
    return float(clf.score(_feats(test_features), test_labels))


def stratified_subset(y: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """``floor(fraction * n_c)`` random indices per class, sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    y = np.asarray(y)
    picked = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        k = math.floor(fraction * len(idx) + 1e-9)
        if k < 1:
            raise ValueError(f"fraction {fraction} leaves class {c} without samples")
        picked.append(rng.choice(idx, k, replace=False))
    return np.sort(np.concatenate(picked))


class FinetuneNet(nn.Module):
    def __init__(self, backbone: MacDiffNet, n_classes: int):
        super().__init__()
        c = backbone.config.embed_dim
        self.backbone = backbone
        self.head = nn.Sequential(nn.Linear(c, c), nn.GELU(), nn.Linear(c, n_classes))

    def forward(self, x):
        return self.head(self.backbone.encode(x)[1])


@dataclass
class FinetuneResult:
    accuracy: float
    train_size: int
    history: list


def finetune(model: MacDiffNet, X_train, y_train, X_test, y_test, stats: NormalizationStats,
             fraction: float = 1.0, epochs: int = 100, lr_start: float = 3e-4, lr_end: float = 1e-5,
             batch_size: int = 64, seed: int = 0, freeze_encoder: bool = False,
             augment_ratio: float = 0.0, t_s: int = 500, schedule: Optional[NoiseSchedule] = None,
             train_config: Optional[TrainConfig] = None, online: bool = True) -> FinetuneResult:
    """MLP head on pooled features; the encoder copy is trained too unless frozen.

    With ``augment_ratio > 0`` the labeled subset is extended by one-step-denoised
    samples from the (frozen) pre-trained decoder, regenerated each epoch when ``online``.
    """
    ss = np.random.SeedSequence(seed)
    subset_seed, train_seed, head_seed, aug_seed = ss.spawn(4)
    y_train = np.asarray(y_train)
    sub = stratified_subset(y_train, fraction, np.random.default_rng(subset_seed))
    Xs = to_model_frames(np.asarray(X_train)[sub], model.config.num_frames)
    ys = y_train[sub]
    classes = np.unique(y_train)
    label_of = {c: i for i, c in enumerate(classes)}
    ys_i = np.array([label_of[c] for c in ys])
    tc = train_config or TrainConfig(model=model.config)

    backbone = copy.deepcopy(model)
    backbone.freeze_encoder(freeze_encoder)
    with torch.random.fork_rng():
        torch.manual_seed(int(head_seed.generate_state(1)[0]))
        net = FinetuneNet(backbone, len(classes))
    opt = torch.optim.AdamW([p for p in net.parameters() if p.requires_grad], lr=lr_start, weight_decay=0.05)
    rng = np.random.default_rng(train_seed)

    aug_rng = np.random.default_rng(aug_seed)
    generator = conditions = None
    if augment_ratio > 0:
        if schedule is None:
            raise ValueError("augmentation needs the diffusion schedule")
        generator = copy.deepcopy(model).eval()
        conditions = precompute_conditions(generator, Xs, stats, tc.mask, aug_rng)
    cached = None

    def training_set(epoch):
        nonlocal cached
        if generator is None:
            return Xs, ys_i
        if cached is None or online:
            cached = build_augmented_set(Xs, ys_i, augment_ratio, t_s, generator, schedule, stats,
                                         aug_rng, conditions)[:2]
        return cached

    n_train = len(Xs) + (math.ceil(augment_ratio * len(Xs) - 1e-9) if augment_ratio > 0 else 0)
    total = epochs * math.ceil(n_train / batch_size)
    sched_cfg = TrainConfig(lr_start=lr_start, lr_end=lr_end, warmup_frac=0.0)
    history, step = [], 0
    mc = model.config
    for epoch in range(epochs):
        Xe, ye = training_set(epoch)
        net.train()
        order = rng.permutation(len(Xe))
        for start in range(0, len(Xe), batch_size):
            idx = order[start:start + batch_size]
            views = []
            for x in Xe[idx]:
                x = random_crop_resize(x, mc.num_frames, tc.crop_ratio, rng)
                views.append(normalize(augment(x, tc.rotation_max, 0.0, rng)[1], stats))
            xb = torch.from_numpy(np.stack(views).astype(np.float32))
            loss = F.cross_entropy(net(xb), torch.as_tensor(ye[idx], dtype=torch.long))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            step += 1
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total, sched_cfg)
            opt.step()
            history.append(float(loss.detach()))
    acc = evaluate_classifier(net, X_test, y_test, stats, classes)
    return FinetuneResult(acc, n_train, history)


@torch.no_grad()
def evaluate_classifier(net: FinetuneNet, X, y, stats, classes) -> float:
    net.eval()
    X = to_model_frames(np.asarray(X), net.backbone.config.num_frames)
    preds = []
    for start in range(0, len(X), 256):
        xb = torch.from_numpy(normalize(X[start:start + 256], stats).astype(np.float32))
        preds.append(net(xb).argmax(dim=1).numpy())
    pred = classes[np.concatenate(preds)]
    return float(np.mean(pred == np.asarray(y)))


@dataclass
class SemiSupervisedResult:
    augmented: FinetuneResult
    baseline: FinetuneResult

    @property
    def gain(self) -> float:
        return self.augmented.accuracy - self.baseline.accuracy


def semi_supervised_run(model, X_train, y_train, X_test, y_test, stats, schedule, fraction: float,
                        ratio: float, t_s: int = 500, seed: int = 0, **kwargs) -> SemiSupervisedResult:
    """Paired fine-tuning runs on the same labeled subset, with and without diffusion augmentation."""
    base = finetune(model, X_train, y_train, X_test, y_test, stats, fraction, seed=seed, **kwargs)
    if ratio == 0:
        aug = base
    else:
        aug = finetune(model, X_train, y_train, X_test, y_test, stats, fraction, seed=seed,
                       augment_ratio=ratio, t_s=t_s, schedule=schedule, **kwargs)
    return SemiSupervisedResult(aug, base)


def mpjpe(pred, target, region_mask=None) -> float:
    """Mean Euclidean joint error over the ``(..., T0, V)`` entries selected by ``region_mask``."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    dist = np.linalg.norm(pred - target, axis=-1)
    if region_mask is None:
        region = np.ones(dist.shape, dtype=bool)
    else:
        region = np.broadcast_to(np.asarray(region_mask, dtype=bool), dist.shape)
    if not region.any():
        raise ValueError("MPJPE region is empty")
    return float(dist[region].mean())


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(real, gen, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    a, b = _feats(real), _feats(gen)
    d = a.shape[1]
    if a.ndim != 2 or b.ndim != 2 or b.shape[1] != d:
        raise ValueError("feature sets must be (n, C) with equal C")
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least C + 1 = {d + 1} rows per set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite features")
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.cov(a, rowvar=False) + eps * np.eye(d)
    cb = np.cov(b, rowvar=False) + eps * np.eye(d)
    root_a = _sqrtm_psd(ca)
    cross = _sqrtm_psd(root_a @ cb @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2 * np.trace(cross))
    return max(value, 0.0)


def kid(real, gen) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel ``(x . y / C + 1) ** 3``."""
    a, b = _feats(real), _feats(gen)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("KID needs at least two rows per set")
    d = a.shape[1]
    kaa = (a @ a.T / d + 1) ** 3
    kbb = (b @ b.T / d + 1) ** 3
    kab = (a @ b.T / d + 1) ** 3
    return float((kaa.sum() - np.trace(kaa)) / (m * (m - 1)) + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
                 - 2 * kab.mean())


def diversity_pairs(n: int, pairs: int, rng: np.random.Generator):
    if n < 2:
        raise ValueError("diversity needs at least two rows")
    if n >= 2 * pairs:
        perm = rng.permutation(n)[: 2 * pairs]
        return perm[:pairs], perm[pairs:]
    i = rng.integers(0, n, size=pairs)
    j = (i + rng.integers(1, n, size=pairs)) % n
    return i, j


def diversity(gen, pairs: int = 100, rng: Optional[np.random.Generator] = None) -> float:
    """Mean distance between randomly paired rows (disjoint pairs when enough rows exist)."""
    f = _feats(gen)
    i, j = diversity_pairs(len(f), pairs, rng if rng is not None else np.random.default_rng(0))
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


def _pairwise(a, b):
    return cdist(a, b)


def _knn_radius(x, k):
    dist = _pairwise(x, x)
    return np.sort(dist, axis=1)[:, k]


def _coverage(points, centers, radii):
    d = _pairwise(points, centers)
    return float(np.mean((d <= radii[None, :]).any(axis=1)))


def precision_recall(real, gen, k: int = 3) -> tuple[float, float]:
    """k-NN manifold precision (gen inside real balls) and recall (real inside gen balls)."""
    a, b = _feats(real), _feats(gen)
    if len(a) < k + 1 or len(b) < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} rows per set")
    return _coverage(b, a, _knn_radius(a, k)), _coverage(a, b, _knn_radius(b, k))


def generative_report(real, gen, rng=None, **extra) -> MetricReport:
    p, r = precision_recall(real, gen)
    metrics = {"fid": fid(real, gen), "kid": kid(real, gen), "diversity": diversity(gen, rng=rng),
               "precision": p, "recall": r}
    return MetricReport(metrics, extra=extra)
