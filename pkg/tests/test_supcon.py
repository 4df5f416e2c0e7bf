"""Contrastive loss closed forms vs finite differences, simulator shapes,
and the augmentation pipeline."""

import numpy as np
import pytest

from osrlab.nn import NetworkConfig, TrainConfig, extract_representation, init_params
from osrlab.supcon import (
    AugmentPolicy,
    ContrastiveBatch,
    DEFAULT_TAUS,
    SimulationPopulation,
    augment,
    build_contrastive_batch,
    build_contrastive_views,
    loss_and_embedding_grad,
    simulate_gradient_curves,
    supcon_loss,
    supcon_pair_gradients,
    train_supcon,
    write_curves_csv,
)

IDENTITY_POLICY = AugmentPolicy(
    flip_p=0.0, brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0, grayscale_p=0.0
)


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def loss_from_sims(sims, labels, anchors, tau):
    """Direct transcription of the loss from a free similarity matrix; the
    independent oracle for value and finite-difference checks."""
    total = 0.0
    n = len(labels)
    for i in anchors:
        others = [j for j in range(n) if j != i]
        pos = [j for j in others if labels[j] == labels[i]]
        denom = sum(np.exp(sims[i, j] / tau) for j in others)
        contrib = sum(np.log(np.exp(sims[i, p] / tau) / denom) for p in pos)
        total += -contrib / len(pos)
    return total


# ------------------------------------------------------------ batch structure

def test_batch_builds_index_sets():
    z = np.eye(4)
    batch = ContrastiveBatch(z=z, labels=np.array([0, 0, 1, 1]))
    assert batch.anchors == (0, 1, 2, 3)
    assert batch.positives(0).tolist() == [1]
    assert batch.negatives(0).tolist() == [2, 3]
    # P and N partition everyone but the anchor
    for i in batch.anchors:
        p, n = set(batch.positives(i)), set(batch.negatives(i))
        assert p.isdisjoint(n)
        assert p | n == set(range(4)) - {i}


def test_batch_excludes_positive_less_rows_from_anchors():
    batch = ContrastiveBatch(z=np.eye(3), labels=np.array([0, 0, 1]))
    assert batch.anchors == (0, 1)
    with pytest.raises(ValueError):
        ContrastiveBatch(z=np.eye(3), labels=np.array([0, 0, 1]), anchors=(2,))
    with pytest.raises(ValueError):
        ContrastiveBatch(z=np.eye(3), labels=np.array([0, 1, 2]))


def test_batch_rejects_non_unit_rows():
    with pytest.raises(ValueError):
        ContrastiveBatch(z=2.0 * np.eye(2), labels=np.array([0, 0]))


# --------------------------------------------------------------------- loss

def test_loss_identical_positive_is_zero():
    z = np.vstack([np.eye(1, 4), np.eye(1, 4)])
    assert supcon_loss(ContrastiveBatch(z=z, labels=np.array([0, 0])), tau=0.5) == 0.0


def test_loss_hand_value():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 0, 1])
    single = ContrastiveBatch(z=z, labels=labels, anchors=(0,))
    expected = np.log(1.0 + np.exp(-1.0))
    assert abs(supcon_loss(single, tau=1.0) - expected) < 1e-12
    # default anchor set: both same-label rows contribute symmetrically
    full = ContrastiveBatch(z=z, labels=labels)
    assert abs(supcon_loss(full, tau=1.0) - 2.0 * expected) < 1e-12


def test_loss_matches_similarity_oracle_and_permutation_invariance():
    rng = np.random.default_rng(20)
    for _ in range(20):
        n = int(rng.integers(4, 16))
        z = unit_rows(rng, n, 6)
        labels = rng.integers(0, 3, size=n)
        if not any(np.sum(labels == c) >= 2 for c in np.unique(labels)):
            labels[1] = labels[0]
        batch = ContrastiveBatch(z=z, labels=labels)
        got = supcon_loss(batch, tau=0.7)
        oracle = loss_from_sims(z @ z.T, labels, batch.anchors, 0.7)
        assert abs(got - oracle) < 1e-10 * max(1.0, abs(oracle))
        perm = rng.permutation(n)
        permuted = ContrastiveBatch(z=z[perm], labels=labels[perm])
        assert abs(supcon_loss(permuted, tau=0.7) - got) < 1e-10


def test_loss_validates_temperature():
    batch = ContrastiveBatch(z=np.vstack([np.eye(1, 3)] * 2), labels=np.array([0, 0]))
    for tau in (0.0, -1.0):
        with pytest.raises(ValueError):
            supcon_loss(batch, tau)


# ---------------------------------------------------------------- gradients

def test_pair_gradient_hand_values():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    batch = ContrastiveBatch(z=z, labels=np.array([0, 0, 1]), anchors=(0,))
    grads = supcon_pair_gradients(batch, tau=1.0)
    expected = 1.0 / (1.0 + np.e)  # 0.26894...
    assert abs(grads.positive(0, 1) - (-expected)) < 1e-12
    assert abs(grads.negative(0, 2) - expected) < 1e-12


def test_pair_gradients_signs_with_single_positive():
    rng = np.random.default_rng(21)
    for _ in range(20):
        # one view pair per class: |P(i)| = 1 for every anchor
        z = unit_rows(rng, 8, 5)
        labels = np.repeat(np.arange(4), 2)
        grads = supcon_pair_gradients(ContrastiveBatch(z=z, labels=labels), tau=0.4)
        assert np.all(grads.positive_values <= 0.0)
        assert np.all(grads.negative_values >= 0.0)


def test_pair_gradients_match_similarity_finite_differences():
    rng = np.random.default_rng(22)
    h = 1e-5  # total loss is O(10); smaller steps leave FD roundoff-bound
    for _ in range(8):
        n = int(rng.integers(4, 16))
        z = unit_rows(rng, n, 6)
        labels = rng.integers(0, 3, size=n)
        labels[1] = labels[0]
        batch = ContrastiveBatch(z=z, labels=labels)
        grads = supcon_pair_gradients(batch, tau=0.5)
        sims = z @ z.T
        for pairs, values in (
            (grads.positive_pairs, grads.positive_values),
            (grads.negative_pairs, grads.negative_values),
        ):
            for (i, j), val in zip(pairs[:6], values[:6]):
                bumped = sims.copy()
                bumped[i, j] += h
                up = loss_from_sims(bumped, labels, batch.anchors, 0.5)
                bumped[i, j] -= 2 * h
                down = loss_from_sims(bumped, labels, batch.anchors, 0.5)
                fd = (up - down) / (2 * h)
                assert abs(val - fd) / max(abs(val), abs(fd), 1e-3) < 1e-6


def test_embedding_gradients_match_finite_differences():
    rng = np.random.default_rng(23)
    h = 1e-6
    for trial in range(4):
        z = unit_rows(rng, 10, 8)
        labels = rng.integers(0, 3, size=10)
        labels[1] = labels[0]
        loss, grad = loss_and_embedding_grad(z, labels, tau=0.6)
        anchors = ContrastiveBatch(z=z, labels=labels).anchors
        for flat in rng.choice(z.size, size=15, replace=False):
            zp = z.copy()
            zp.flat[flat] += h
            up = supcon_loss(ContrastiveBatch(z=zp, labels=labels, anchors=anchors), 0.6)
            zp.flat[flat] -= 2 * h
            down = supcon_loss(ContrastiveBatch(z=zp, labels=labels, anchors=anchors), 0.6)
            fd = (up - down) / (2 * h)
            ana = grad.flat[flat]
            assert abs(ana - fd) / max(abs(ana), abs(fd), 1e-2) < 1e-6


# ---------------------------------------------------------------- simulator

def test_simulator_small_tau_negative_curves_overlap():
    curves = simulate_gradient_curves(taus=(0.01, 0.005))
    neg = {c.tau: c for c in curves if c.kind == "negative"}
    diff = np.max(np.abs(neg[0.01].grads - neg[0.005].grads))
    assert diff < 1e-3
    assert np.array_equal(neg[0.01].s, neg[0.005].s)


def test_simulator_sign_and_monotonicity():
    for c in simulate_gradient_curves(taus=DEFAULT_TAUS):
        if c.kind == "positive":
            assert np.all(c.grads <= 0.0)
            # pulled pairs relax (grad rises toward 0) as similarity grows;
            # at tau <= 0.01 the whole curve has already vanished
            assert np.all(np.diff(c.grads) >= 0.0)
            if c.tau >= 0.05:
                assert abs(c.grads[-1]) < abs(c.grads[0])
        else:
            assert np.all(c.grads >= 0.0)
            assert np.all(np.diff(c.grads) >= 0.0)


def test_simulator_temperature_scaling():
    # scaling tau and every similarity by c leaves the softmax argument
    # fixed, so gradients scale by 1/c
    base = simulate_gradient_curves(
        taus=(0.4,), s_ip_range=(0.8, 1.0), s_in_range=(0.0, 0.8),
        population=SimulationPopulation(1.0, 62, 0.4),
    )
    scaled = simulate_gradient_curves(
        taus=(0.2,), s_ip_range=(0.4, 0.5), s_in_range=(0.0, 0.4),
        population=SimulationPopulation(0.5, 62, 0.2),
    )
    for b, s in zip(base, scaled):
        assert np.allclose(s.grads, 2.0 * b.grads, rtol=1e-12, atol=0)


def test_simulator_no_overflow_at_extreme_temperature():
    curves = simulate_gradient_curves(taus=(0.005,))
    for c in curves:
        assert np.isfinite(c.grads).all()


def test_simulator_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        simulate_gradient_curves(taus=(0.0,))
    with pytest.raises(ValueError):
        simulate_gradient_curves(s_ip_range=(1.0, 0.8))
    with pytest.raises(ValueError):
        simulate_gradient_curves(grid_points=1)
    with pytest.raises(ValueError):
        simulate_gradient_curves(population=SimulationPopulation(background_count=-1))
    path = tmp_path / "curves.csv"
    write_curves_csv(path, simulate_gradient_curves(taus=(0.5,), grid_points=3))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "kind,tau,s,grad"
    assert len(lines) == 1 + 2 * 3
    assert lines[1].startswith("positive,0.5,")


# -------------------------------------------------------------- augmentation

def test_augment_identity_policy_is_bitwise_noop():
    img = np.random.default_rng(0).uniform(size=(64, 64, 3))
    assert np.array_equal(augment(img, IDENTITY_POLICY, seed=5), img)


def test_augment_forced_flip_is_involution():
    policy = AugmentPolicy(flip_p=1.0, brightness=0, contrast=0, saturation=0, hue=0, grayscale_p=0)
    img = np.random.default_rng(1).uniform(size=(64, 64, 3))
    once = augment(img, policy, seed=0)
    assert not np.array_equal(once, img)
    assert np.array_equal(augment(once, policy, seed=1), img)


def test_augment_forced_grayscale_equalizes_channels():
    policy = AugmentPolicy(flip_p=0, brightness=0, contrast=0, saturation=0, hue=0, grayscale_p=1.0)
    img = np.random.default_rng(2).uniform(size=(64, 64, 3))
    gray = augment(img, policy, seed=3)
    assert np.array_equal(gray[..., 0], gray[..., 1])
    assert np.array_equal(gray[..., 1], gray[..., 2])
    luma = img @ np.array([0.299, 0.587, 0.114])
    assert np.allclose(gray[..., 0], luma, rtol=0, atol=1e-15)


def test_augment_preserves_shape_and_range():
    img = np.random.default_rng(3).uniform(size=(64, 64, 3))
    policy = AugmentPolicy()
    for seed in range(1000):
        out = augment(img, policy, seed)
        assert out.shape == (64, 64, 3)
        assert np.isfinite(out).all()
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_deterministic_per_seed():
    img = np.random.default_rng(4).uniform(size=(64, 64, 3))
    policy = AugmentPolicy()
    assert np.array_equal(augment(img, policy, 99), augment(img, policy, 99))
    assert not np.array_equal(augment(img, policy, 99), augment(img, policy, 100))


# ------------------------------------------------------- batches and training

def test_contrastive_views_duplicate_labels():
    rng = np.random.default_rng(6)
    images = rng.uniform(size=(5, 64, 64, 3))
    labels = np.array([0, 1, 0, 1, 2])
    views, vlabels = build_contrastive_views(images, labels, [0, 3, 4], AugmentPolicy(), seed=8)
    assert views.shape == (6, 64, 64, 3)
    assert vlabels.tolist() == [0, 0, 1, 1, 2, 2]


def test_build_contrastive_batch_structure(micro_e1):
    params = init_params(NetworkConfig(num_classes=2), seed=0)
    batch = build_contrastive_batch(params, micro_e1, batch_size=6, policy=AugmentPolicy(), seed=14)
    assert len(batch.labels) == 12
    assert np.allclose(np.linalg.norm(batch.z, axis=1), 1.0, atol=1e-12)
    # each view's sibling is a positive, and every cross-label view a negative
    for m in range(6):
        a, b = 2 * m, 2 * m + 1
        assert b in batch.positives(a)
        for n_idx in batch.negatives(a):
            assert batch.labels[n_idx] != batch.labels[a]
    with pytest.raises(ValueError):
        build_contrastive_batch(params, micro_e1, batch_size=1, policy=AugmentPolicy(), seed=0)
    with pytest.raises(ValueError):
        build_contrastive_batch(params, micro_e1, batch_size=999, policy=AugmentPolicy(), seed=0)


def test_train_supcon_deterministic_and_validates(micro_e1):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=5, loss="supcon", tau=0.5)
    a = train_supcon(micro_e1, tau=0.5, cfg=cfg)
    b = train_supcon(micro_e1, tau=0.5, cfg=cfg)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    with pytest.raises(ValueError):
        train_supcon(micro_e1, tau=0.0, cfg=cfg)


def test_train_supcon_separates_classes(micro_e1):
    cfg = TrainConfig(epochs=8, batch_size=6, seed=3, loss="supcon", tau=0.5)
    params = train_supcon(micro_e1, tau=0.5, cfg=cfg)
    images, labels = micro_e1.subset("train")
    emb = extract_representation(params, images, "linear2", labels=labels)
    z = emb.matrix / np.linalg.norm(emb.matrix, axis=1, keepdims=True)
    sims = z @ z.T
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra = sims[same].mean()
    inter = sims[~same & off_diag].mean()
    assert intra > inter
