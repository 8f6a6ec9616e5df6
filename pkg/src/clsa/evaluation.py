"""Frozen-feature evaluation: KNN, linear probe, and similarity-distribution diagnostics."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from .augment import IMAGENET_MEAN, IMAGENET_STD, StrongAugConfig, WeakAugConfig, center_view, strong_augment, weak_augment
from .data import Dataset
from .encoder import Encoder, EncoderPair, encode
from .losses import conditional_distribution

VIEW_MODES = ("center_crop", "strong")


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, d_feat)
    labels: np.ndarray  # (N,)
    view_mode: str

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels differ in length")
        if self.view_mode not in VIEW_MODES:
            raise ValueError(f"view_mode must be one of {VIEW_MODES}")

    def __len__(self):
        return self.features.shape[0]


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def extract_features(
    encoder: Encoder,
    dataset: Dataset,
    view_mode: str = "center_crop",
    seed: int = 0,
    crop_size: int = 32,
    strong: StrongAugConfig | None = None,
    center_fraction: float = 0.875,
    use_projector: bool = False,
    batch_size: int = 256,
) -> FeatureSet:
    """Pooled backbone features of every image (projector output if ``use_projector``).

    ``center_crop`` is deterministic. ``strong`` draws one strong view per image
    from ``default_rng([seed, index])``.
    """
    if view_mode not in VIEW_MODES:
        raise ValueError(f"view_mode must be one of {VIEW_MODES}")
    if isinstance(encoder, EncoderPair):
        encoder = encoder.query
    was_training = encoder.training
    encoder.eval()
    if view_mode == "strong":
        strong = dataclasses.replace(strong or StrongAugConfig(), crop_sizes=(crop_size,))
        mean, std = strong.mean, strong.std
    else:
        mean, std = IMAGENET_MEAN, IMAGENET_STD

    chunks = []
    for start in range(0, len(dataset), batch_size):
        views = []
        for i in range(start, min(start + batch_size, len(dataset))):
            img = dataset.images[i]
            if view_mode == "center_crop":
                views.append(center_view(img, crop_size, center_fraction, mean, std))
            else:
                views.append(strong_augment(img, strong, crop_size, np.random.default_rng([seed, i])))
        x = torch.from_numpy(np.stack(views))
        param = next(encoder.parameters())
        x = x.to(param.dtype)
        out = encoder(x) if use_projector else encoder.features(x)
        chunks.append(out.cpu().numpy())
    encoder.train(was_training)
    feats = np.concatenate(chunks) if chunks else np.zeros((0, 0), np.float32)
    return FeatureSet(feats, np.asarray(dataset.labels, dtype=np.int64), view_mode)


def knn_predict(train_feats, train_labels, test_feats, k: int = 20, weighted: bool = True, num_classes: int | None = None):
    """Cosine KNN vote.

    Weighted votes add each neighbour's cosine similarity to its class; plain
    votes count neighbours and break ties by summed similarity. Remaining
    ties go to the lowest class index. Among equally similar neighbours the
    lower training index wins.
    """
    n_train = len(train_feats)
    if k > n_train:
        raise ValueError(f"k={k} exceeds the number of training points ({n_train})")
    train = F.normalize(torch.as_tensor(np.asarray(train_feats), dtype=torch.float64), dim=1)
    test = F.normalize(torch.as_tensor(np.asarray(test_feats), dtype=torch.float64), dim=1)
    labels = torch.as_tensor(np.asarray(train_labels), dtype=torch.int64)
    c = int(num_classes if num_classes is not None else labels.max().item() + 1)
    sims = test @ train.T
    order = torch.argsort(-sims, dim=1, stable=True)[:, :k]
    top_sims = torch.gather(sims, 1, order)
    top_labels = labels[order]
    sim_votes = torch.zeros(len(test), c, dtype=torch.float64).scatter_add_(1, top_labels, top_sims)
    if weighted:
        return sim_votes.argmax(1).numpy()
    counts = torch.zeros(len(test), c, dtype=torch.float64).scatter_add_(1, top_labels, torch.ones_like(top_sims))
    # counts are integers, so a tie-break term smaller than 1 never reorders them
    score = counts + (sim_votes + k) / (2 * k + 1)
    return score.argmax(1).numpy()


def knn_eval(train: FeatureSet, test: FeatureSet, k: int = 20, weighted: bool = True) -> float:
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError("train and test features differ in dimension")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    pred = knn_predict(train.features, train.labels, test.features, k, weighted, num_classes)
    return float((pred == test.labels).mean())


# --------------------------------------------------------------------------
# Linear probe


@dataclass(frozen=True)
class ProbeConfig:
    """Linear classifier protocol; defaults are the full-scale values."""

    epochs: int = 100
    lr: float = 10.0
    lr_floor: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 256
    normalize: bool = True
    seed: int = 0


def train_linear_classifier(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Fit one linear layer on ``train`` features and return accuracy on ``test``."""
    x_train = torch.as_tensor(train.features, dtype=torch.float32)
    x_test = torch.as_tensor(test.features, dtype=torch.float32)
    if cfg.normalize:
        x_train, x_test = F.normalize(x_train, dim=1), F.normalize(x_test, dim=1)
    y_train = torch.as_tensor(train.labels)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1

    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        clf = torch.nn.Linear(x_train.shape[1], num_classes)
    opt = torch.optim.SGD(clf.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    n = len(x_train)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1 + np.cos(np.pi * step / total))
            for group in opt.param_groups:
                group["lr"] = lr
            loss = F.cross_entropy(clf(x_train[idx]), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        pred = clf(x_test).argmax(1).numpy()
    return float((pred == test.labels).mean())


def linear_probe(
    encoder: Encoder,
    train: Dataset,
    test: Dataset,
    cfg: ProbeConfig = ProbeConfig(),
    crop_size: int = 32,
) -> float:
    """Linear-probe accuracy on frozen centre-crop backbone features."""
    if isinstance(encoder, EncoderPair):
        encoder = encoder.query
    before = parameter_hash(encoder)
    acc = train_linear_classifier(
        extract_features(encoder, train, "center_crop", crop_size=crop_size),
        extract_features(encoder, test, "center_crop", crop_size=crop_size),
        cfg,
    )
    if parameter_hash(encoder) != before:
        raise RuntimeError("backbone parameters changed during linear probing")
    return acc


# --------------------------------------------------------------------------
# Distribution diagnostics


@dataclass
class DistributionDiagnostics:
    p_pos_weak: np.ndarray
    p_pos_strong: np.ndarray
    var_neg_weak: np.ndarray
    var_neg_strong: np.ndarray
    pos_edges: np.ndarray
    var_edges: np.ndarray
    hist_pos_weak: np.ndarray
    hist_pos_strong: np.ndarray
    hist_var_weak: np.ndarray
    hist_var_strong: np.ndarray

    @property
    def ks_pos(self) -> float:
        return float(stats.ks_2samp(self.p_pos_weak, self.p_pos_strong).statistic)

    @property
    def ks_var(self) -> float:
        return float(stats.ks_2samp(self.var_neg_weak, self.var_neg_strong).statistic)

    def summary(self) -> dict:
        return {
            "p_pos_weak_mean": float(self.p_pos_weak.mean()),
            "p_pos_strong_mean": float(self.p_pos_strong.mean()),
            "var_neg_weak_mean": float(self.var_neg_weak.mean()),
            "var_neg_strong_mean": float(self.var_neg_strong.mean()),
            "ks_pos": self.ks_pos,
            "ks_var": self.ks_var,
        }


def _histogram(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
    return counts / max(1, counts.sum())


def _shared_edges(a: np.ndarray, b: np.ndarray, bins: int) -> np.ndarray:
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi <= lo:
        pad = max(abs(lo) * 1e-6, 1e-12)
        lo, hi = lo - pad, hi + pad
    return np.linspace(lo, hi, bins + 1)


@torch.no_grad()
def distribution_diagnostics(
    pair: EncoderPair,
    bank,
    dataset: Dataset,
    n_samples: int,
    seed: int = 0,
    weak: WeakAugConfig | None = None,
    strong: StrongAugConfig | None = None,
    tau: float = 0.2,
    bins: int = 50,
    batch_size: int = 256,
) -> DistributionDiagnostics:
    """Positive-slot probability and negative-slot variance for weak and strong queries.

    For each sampled image: weak query ``T'(x)`` and strong query ``S(x)``
    through the query encoder, key ``T(x)`` through the key encoder, all
    scored against one snapshot of ``bank``.
    """
    if n_samples > len(dataset):
        raise ValueError(f"n_samples={n_samples} exceeds dataset size {len(dataset)}")
    weak = weak or WeakAugConfig()
    strong = strong or StrongAugConfig()
    crop = strong.crop_sizes[0]
    snapshot = bank.snapshot() if hasattr(bank, "snapshot") else torch.as_tensor(bank)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(dataset), size=n_samples, replace=False)

    modes = (pair.query.training, pair.key.training)
    pair.eval()
    p_w, p_s, v_w, v_s = [], [], [], []
    for start in range(0, n_samples, batch_size):
        q_views, s_views, k_views = [], [], []
        for j in picks[start:start + batch_size]:
            r = np.random.default_rng([seed, int(j)])
            img = dataset.images[int(j)]
            q_views.append(weak_augment(img, weak, r))
            k_views.append(weak_augment(img, weak, r))
            s_views.append(strong_augment(img, strong, crop, r))
        z_q = encode(pair.query, q_views)
        z_s = encode(pair.query, s_views)
        z_k = encode(pair.key, k_views)
        for z, p_out, v_out in ((z_q, p_w, v_w), (z_s, p_s, v_s)):
            dist = conditional_distribution(z, z_k, snapshot, tau)
            p_out.append(dist.p_pos.double().numpy())
            v_out.append(dist.p_neg.double().var(dim=-1, unbiased=False).numpy())
    pair.query.train(modes[0])
    pair.key.train(modes[1])

    p_w, p_s, v_w, v_s = (np.concatenate(x) for x in (p_w, p_s, v_w, v_s))
    pos_edges = _shared_edges(p_w, p_s, bins)
    var_edges = _shared_edges(v_w, v_s, bins)
    return DistributionDiagnostics(
        p_w, p_s, v_w, v_s, pos_edges, var_edges,
        _histogram(p_w, pos_edges), _histogram(p_s, pos_edges),
        _histogram(v_w, var_edges), _histogram(v_s, var_edges),
    )


# --------------------------------------------------------------------------
# Plots


def plot_diagnostics(diag: DistributionDiagnostics, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, edges, hw, hs, label in (
        (axes[0], diag.pos_edges, diag.hist_pos_weak, diag.hist_pos_strong, "positive probability"),
        (axes[1], diag.var_edges, diag.hist_var_weak, diag.hist_var_strong, "variance of negative probabilities"),
    ):
        centers = 0.5 * (edges[1:] + edges[:-1])
        width = edges[1] - edges[0]
        ax.bar(centers, hw, width=width, alpha=0.6, label="weak query")
        ax.bar(centers, hs, width=width, alpha=0.6, label="strong query")
        ax.set_xlabel(label)
        ax.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_knn_summary(results: dict, path) -> None:
    """Bar chart of ``{"weak": {...}, "strong": {...}}`` accuracies per model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = list(results)
    models = sorted({m for g in groups for m in results[g]})
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(models))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, model in enumerate(models):
        ax.bar(x + i * width, [results[g].get(model, 0.0) for g in groups], width, label=model)
    ax.set_xticks(x + width * (len(models) - 1) / 2)
    ax.set_xticklabels(groups)
    ax.set_ylabel("KNN accuracy (k=20)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
