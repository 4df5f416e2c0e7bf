"""Supervised contrastive loss with closed-form pair gradients.

For anchors i with positive sets P(i) and negatives N(i) over cosine
similarities s of unit embeddings,

    L = sum_i (-1/|P(i)|) sum_{p in P(i)}
        log[ exp(s_ip/tau) / sum_{a in A(i)} exp(s_ia/tau) ],  A = P u N.

The exact partial derivatives are

    dL/ds_ip = (1/tau) (softmax_i(s_ip/tau) - 1/|P(i)|)
    dL/ds_in = (1/tau)  softmax_i(s_in/tau)

where softmax_i runs over A(i); with a single positive the first reduces to
the familiar (1/tau)(softmax - 1) form. Embedding gradients follow from
dL/dZ = G Z + G^T Z with G the matrix of pair partials.

Also here: the temperature-gradient curve simulator (both pair kinds over a
configurable background population, evaluated in log space so tau = 0.005
cannot overflow), the flip/jitter/grayscale augmentation pipeline, and
contrastive training of the toy network on its normalized linear2 embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn as _nn
from .errors import TrainingDiverged

__all__ = [
    "AugmentPolicy",
    "ContrastiveBatch",
    "DEFAULT_TAUS",
    "GradientCurve",
    "PairGradients",
    "SimulationPopulation",
    "augment",
    "build_contrastive_batch",
    "build_contrastive_views",
    "loss_and_embedding_grad",
    "simulate_gradient_curves",
    "supcon_loss",
    "supcon_pair_gradients",
    "train_supcon",
    "write_curves_csv",
]

DEFAULT_TAUS = (1.0, 0.5, 0.1, 0.05, 0.01, 0.005)
UNIT_NORM_TOL = 1e-6


@dataclass
class ContrastiveBatch:
    """Unit-norm embeddings with labels and explicit anchor indices.

    P(i) is every other same-label row, N(i) every different-label row.
    Anchors default to all rows that have at least one positive; rows
    without positives still serve as candidates for other anchors.
    """

    z: np.ndarray  # (n, d), rows unit L2 norm within 1e-6
    labels: np.ndarray  # (n,)
    anchors: tuple[int, ...] | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.labels = np.asarray(self.labels).ravel()
        if self.z.ndim != 2 or self.z.shape[0] != self.labels.shape[0]:
            raise ValueError("need one label per embedding row")
        norms = np.linalg.norm(self.z, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("contrastive embeddings must be unit norm within 1e-6")
        same = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(same, False)
        if self.anchors is None:
            self.anchors = tuple(int(i) for i in np.flatnonzero(same.any(axis=1)))
        else:
            self.anchors = tuple(int(i) for i in self.anchors)
            for i in self.anchors:
                if not 0 <= i < len(self.labels):
                    raise ValueError(f"anchor index {i} out of range")
                if not same[i].any():
                    raise ValueError(f"anchor {i} has no positives")
        if not self.anchors:
            raise ValueError("batch contains no usable anchors (no same-label pairs)")
        self._same = same

    def positives(self, i: int) -> np.ndarray:
        return np.flatnonzero(self._same[i])

    def negatives(self, i: int) -> np.ndarray:
        mask = ~self._same[i]
        mask[i] = False
        return np.flatnonzero(mask)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise ValueError("temperature must be positive")
    return tau


def _anchor_softmax(batch: ContrastiveBatch, tau: float):
    """Per-anchor softmax over A(i) plus the similarity matrix."""
    sims = batch.z @ batch.z.T
    rows = {}
    for i in batch.anchors:
        others = np.flatnonzero(np.arange(len(batch.labels)) != i)
        logits = sims[i, others] / tau
        shifted = logits - logits.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        rows[i] = (others, probs)
    return sims, rows


def supcon_loss(batch: ContrastiveBatch, tau: float) -> float:
    """Evaluate the loss summed over anchors (log-sum-exp stabilized)."""
    tau = _check_tau(tau)
    sims = batch.z @ batch.z.T
    total = 0.0
    for i in batch.anchors:
        others = np.flatnonzero(np.arange(len(batch.labels)) != i)
        logits = sims[i, others] / tau
        m = logits.max()
        lse = m + np.log(np.exp(logits - m).sum())
        pos = batch.positives(i)
        total += float(np.mean(lse - sims[i, pos] / tau))
    return total


@dataclass(frozen=True)
class PairGradients:
    """Closed-form partials per ordered (anchor, partner) pair plus the
    chain-ruled embedding gradient."""

    positive_pairs: np.ndarray  # (m_p, 2) int anchor/partner indices
    positive_values: np.ndarray  # (m_p,)
    negative_pairs: np.ndarray  # (m_n, 2)
    negative_values: np.ndarray  # (m_n,)
    embedding_grad: np.ndarray  # (n, d)

    def positive(self, i: int, p: int) -> float:
        hit = np.all(self.positive_pairs == (i, p), axis=1)
        return float(self.positive_values[hit][0])

    def negative(self, i: int, n: int) -> float:
        hit = np.all(self.negative_pairs == (i, n), axis=1)
        return float(self.negative_values[hit][0])


def supcon_pair_gradients(batch: ContrastiveBatch, tau: float) -> PairGradients:
    tau = _check_tau(tau)
    n = len(batch.labels)
    _, rows = _anchor_softmax(batch, tau)
    g = np.zeros((n, n))
    pos_pairs, pos_vals, neg_pairs, neg_vals = [], [], [], []
    for i in batch.anchors:
        others, probs = rows[i]
        softmax = np.zeros(n)
        softmax[others] = probs
        p_set = batch.positives(i)
        inv_p = 1.0 / p_set.size
        for p in p_set:
            val = (softmax[p] - inv_p) / tau
            g[i, p] = val
            pos_pairs.append((i, p))
            pos_vals.append(val)
        for m in batch.negatives(i):
            val = softmax[m] / tau
            g[i, m] = val
            neg_pairs.append((i, m))
            neg_vals.append(val)
    embedding_grad = g @ batch.z + g.T @ batch.z
    return PairGradients(
        positive_pairs=np.array(pos_pairs, dtype=np.int64).reshape(-1, 2),
        positive_values=np.array(pos_vals),
        negative_pairs=np.array(neg_pairs, dtype=np.int64).reshape(-1, 2),
        negative_values=np.array(neg_vals),
        embedding_grad=embedding_grad,
    )


def loss_and_embedding_grad(z: np.ndarray, labels: np.ndarray, tau: float):
    """Loss and dL/dz for a batch given as raw arrays (training entry point)."""
    batch = ContrastiveBatch(z=z, labels=labels)
    return supcon_loss(batch, tau), supcon_pair_gradients(batch, tau).embedding_grad


# ----------------------------------------------------------------- simulator

@dataclass(frozen=True)
class SimulationPopulation:
    """Fixed similarities completing the softmax denominator in the curve
    simulator. The anchor's positive sits at 1.0 by default; placing it
    lower (e.g. 0.9) leaves the small-tau negative curves visibly nonzero
    near the top of the range."""

    anchor_positive: float = 1.0
    background_count: int = 62
    background_similarity: float = 0.4


@dataclass(frozen=True)
class GradientCurve:
    """Sampled dL/ds values for one pair kind at one temperature."""

    kind: str  # positive | negative
    tau: float
    s: np.ndarray
    grads: np.ndarray

    def __post_init__(self):
        if self.kind not in ("positive", "negative"):
            raise ValueError("curve kind must be positive or negative")
        if np.any(np.diff(self.s) <= 0):
            raise ValueError("similarity grid must be strictly ascending")
        if self.kind == "positive" and np.any(self.grads > 0):
            raise ValueError("positive-pair gradients must be <= 0")
        if self.kind == "negative" and np.any(self.grads < 0):
            raise ValueError("negative-pair gradients must be >= 0")


def _log_softmax_of_first(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """log(w0 e^{v0} / sum_j w_j e^{v_j}) per column, computed stably."""
    m = values.max(axis=0)
    lse = m + np.log(np.sum(weights[:, None] * np.exp(values - m), axis=0))
    return values[0] - lse


def simulate_gradient_curves(
    taus=DEFAULT_TAUS,
    s_ip_range: tuple[float, float] = (0.8, 1.0),
    s_in_range: tuple[float, float] = (0.0, 0.8),
    population: SimulationPopulation = SimulationPopulation(),
    grid_points: int = 81,
) -> list[GradientCurve]:
    """Sample both pair-gradient curves on uniform grids for each tau.

    The positive-pair denominator holds the grid positive against the
    background negatives; the negative-pair denominator holds one fixed
    positive plus the grid negative against the background.
    """
    if grid_points < 2:
        raise ValueError("need at least 2 grid points")
    for lo, hi in (s_ip_range, s_in_range):
        if not hi > lo:
            raise ValueError("similarity ranges must be nonempty (hi > lo)")
    if population.background_count < 0:
        raise ValueError("background count cannot be negative")
    curves = []
    bg_w = float(population.background_count)
    for tau in taus:
        tau = _check_tau(tau)
        s_ip = np.linspace(*s_ip_range, grid_points)
        vals = np.stack([s_ip / tau, np.full_like(s_ip, population.background_similarity / tau)])
        log_sm = _log_softmax_of_first(vals, np.array([1.0, bg_w]))
        # expm1 keeps (softmax - 1) accurate where the softmax saturates
        curves.append(GradientCurve("positive", tau, s_ip, np.expm1(log_sm) / tau))
        s_in = np.linspace(*s_in_range, grid_points)
        vals = np.stack(
            [
                s_in / tau,
                np.full_like(s_in, population.anchor_positive / tau),
                np.full_like(s_in, population.background_similarity / tau),
            ]
        )
        log_sm = _log_softmax_of_first(vals, np.array([1.0, 1.0, bg_w]))
        curves.append(GradientCurve("negative", tau, s_in, np.exp(log_sm) / tau))
    return curves


def write_curves_csv(path, curves) -> None:
    with open(path, "w") as fh:
        fh.write("kind,tau,s,grad\n")
        for c in curves:
            for s, grad in zip(c.s, c.grads):
                fh.write(f"{c.kind},{c.tau:.17g},{s:.17g},{grad:.17g}\n")


# -------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    """Flip + color jitter + grayscale, with the usual contrastive strengths."""

    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2


_LUMA = np.array([0.299, 0.587, 0.114])


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    return np.choose(i[..., None], choices)


def augment(image: np.ndarray, policy: AugmentPolicy, seed) -> np.ndarray:
    """One stochastic view of an image, deterministic per seed.

    Draw order is fixed (flip, brightness, contrast, saturation, hue,
    grayscale); no-op draws skip their transform entirely so an identity
    policy returns the input bitwise.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    img = np.asarray(image, dtype=np.float64)
    if rng.random() < policy.flip_p:
        img = img[:, ::-1, :]
    f = rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness)
    if f != 1.0:
        img = img * f
    f = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
    if f != 1.0:
        mean = float((img @ _LUMA).mean())
        img = f * img + (1.0 - f) * mean
    f = rng.uniform(1.0 - policy.saturation, 1.0 + policy.saturation)
    if f != 1.0:
        gray = (img @ _LUMA)[..., None]
        img = f * img + (1.0 - f) * gray
    shift = rng.uniform(-policy.hue, policy.hue)
    if shift != 0.0:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        img = _hsv_to_rgb(hsv)
    if rng.random() < policy.grayscale_p:
        img = np.repeat((img @ _LUMA)[..., None], 3, axis=-1)
    return np.clip(img, 0.0, 1.0)


def build_contrastive_views(images, labels, indices, policy: AugmentPolicy, seed):
    """Two augmented views per selected image; views are interleaved and
    each has its own derived seed so construction parallelizes."""
    out = np.empty((2 * len(indices),) + images.shape[1:], dtype=np.float64)
    out_labels = np.empty(2 * len(indices), dtype=np.int64)
    for m, idx in enumerate(indices):
        for v in range(2):
            child = np.random.default_rng(np.random.SeedSequence([int(seed), int(idx), v]))
            out[2 * m + v] = augment(images[idx], policy, child)
            out_labels[2 * m + v] = labels[idx]
    return out, out_labels


def build_contrastive_batch(
    params, ds, batch_size: int, policy: AugmentPolicy, seed: int
) -> ContrastiveBatch:
    """Sample images, make two views each, and embed them with the model
    (normalized linear2 activation)."""
    if batch_size < 2:
        raise ValueError("contrastive batches need at least 2 images")
    images, labels = ds.subset("train")
    if batch_size > len(images):
        raise ValueError("batch_size exceeds the training split")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E1EC7]))
    chosen = rng.choice(len(images), size=batch_size, replace=False)
    views, view_labels = build_contrastive_views(images, labels, chosen, policy, seed)
    _, acts = _nn.forward(params, views)
    z, _ = _nn.normalized_embedding(acts)
    return ContrastiveBatch(z=z, labels=view_labels)


def train_supcon(ds, tau: float, cfg: "_nn.TrainConfig | None" = None) -> "_nn.ModelParams":
    """Contrastive training on the normalized linear2 embedding. linear3
    stays at initialization (classification is kNN-based downstream)."""
    tau = _check_tau(tau)
    if cfg is None:
        cfg = _nn.TrainConfig(epochs=100, loss="supcon", tau=tau)
    else:
        cfg = replace(cfg, loss="supcon", tau=tau)
    images, labels = ds.subset("train")
    if len(images) == 0:
        raise ValueError("dataset has no training images")
    params = _nn.init_params(_nn.NetworkConfig(num_classes=ds.inlier_class_count), seed=cfg.seed)
    policy = AugmentPolicy()

    def batch_builder(idx, rng):
        seed = int(rng.integers(0, 2**63 - 1))
        return build_contrastive_views(images, labels, idx, policy, seed)

    return _nn._train_loop(params, images, labels, cfg, batch_builder=batch_builder)
