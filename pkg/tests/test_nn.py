"""Network forward/backward correctness, training plumbing, and params io."""

import numpy as np
import pytest

from osrlab.errors import ModelIOError
from osrlab.nn import (
    ModelParams,
    NetworkConfig,
    TrainConfig,
    backward,
    cross_entropy_loss,
    extract_representation,
    finetune_frozen,
    forward,
    init_params,
    load_params,
    normalized_embedding,
    predict,
    save_params,
    train_classifier,
)
from fd_utils import gradcheck


@pytest.mark.parametrize("loss_kind,tau", [("cross-entropy", None), ("supcon", 0.5)])
def test_backprop_matches_central_differences(loss_kind, tau):
    rng = np.random.default_rng(42)
    params = init_params(NetworkConfig(num_classes=3), seed=7)
    batch = rng.uniform(0.0, 1.0, size=(4, 64, 64, 3))
    labels = np.array([0, 1, 2, 0])
    worst, details = gradcheck(params, batch, labels, loss_kind, tau, rng=rng)
    for name, (checked, count) in details.items():
        assert checked >= max(1, int(0.6 * count)), (
            f"{name}: too many kink-contaminated coordinates ({checked}/{count} clean)"
        )
    assert worst < 1e-4, f"{loss_kind}: worst relative error {worst:.3e}"


def test_forward_shapes_and_zero_network():
    config = NetworkConfig(num_classes=5)
    params = init_params(config, seed=0)
    batch = np.random.default_rng(0).uniform(size=(3, 64, 64, 3))
    logits, acts = forward(params, batch)
    assert logits.shape == (3, 5)
    assert acts["conv1"].shape == (3, 64, 64, 10)
    assert acts["pool"].shape == (3, 32, 32, 10)
    assert acts["linear2"].shape == (3, 20)

    zeroed = ModelParams(config, {k: np.zeros_like(v) for k, v in params.tensors.items()})
    logits, _ = forward(zeroed, np.zeros((2, 64, 64, 3)))
    assert np.all(logits == 0.0)


def test_forward_batch_order_equivariance():
    params = init_params(NetworkConfig(num_classes=3), seed=1)
    batch = np.random.default_rng(5).uniform(size=(6, 64, 64, 3))
    perm = np.array([4, 0, 5, 2, 1, 3])
    direct, _ = forward(params, batch)
    permuted, _ = forward(params, batch[perm])
    assert np.allclose(permuted, direct[perm], rtol=0, atol=1e-12)


def test_forward_rejects_bad_shapes():
    params = init_params(NetworkConfig(num_classes=2), seed=0)
    with pytest.raises(ValueError):
        forward(params, np.zeros((2, 32, 32, 3)))
    with pytest.raises(ValueError):
        forward(params, np.zeros((0, 64, 64, 3)))


def test_duplicate_sample_contributions_match():
    params = init_params(NetworkConfig(num_classes=2), seed=3)
    x = np.random.default_rng(1).uniform(size=(1, 64, 64, 3))
    labels1 = np.array([1])
    _, g1 = backward(params, x, labels1)
    _, g2 = backward(params, np.concatenate([x, x]), np.array([1, 1]))
    # mean-normalized loss: duplicating the sample leaves gradients unchanged
    for name in g1:
        assert np.allclose(g1[name], g2[name], rtol=1e-12, atol=1e-14)


def test_frozen_layers_yield_no_gradients():
    params = init_params(NetworkConfig(num_classes=2), seed=2)
    params.frozen = frozenset({"conv1"})
    x = np.random.default_rng(2).uniform(size=(2, 64, 64, 3))
    _, grads = backward(params, x, np.array([0, 1]))
    assert not any(k.startswith("conv1.") for k in grads)
    assert any(k.startswith("linear1.") for k in grads)


def test_cross_entropy_validates_labels():
    logits = np.zeros((2, 3))
    with pytest.raises(ValueError):
        cross_entropy_loss(logits, np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy_loss(logits, np.array([0]))


def test_normalized_embedding_clamps_collapsed_rows():
    h = np.zeros((2, 20))
    h[1, 3] = 2.0
    z, norms = normalized_embedding({"linear2": h})
    assert np.array_equal(z[0], np.zeros(20))
    assert norms[0] == 1e-12
    assert abs(np.linalg.norm(z[1]) - 1.0) < 1e-12
    assert norms[1] == 2.0


def test_supcon_backward_ignores_collapsed_rows(micro_e1):
    # a sample whose linear2 activation is all zero must contribute no
    # gradient (dead ReLU path) while the rest of the batch still learns
    params = init_params(NetworkConfig(num_classes=3), seed=0)
    images, labels = micro_e1.subset("train")
    x = images[:4]
    y = np.array([0, 0, 1, 1])
    _, acts = forward(params, x)
    dead = {k: v.copy() for k, v in acts.items()}
    dead["linear2_pre"][0] = -np.abs(dead["linear2_pre"][0]) - 1.0
    dead["linear2"][0] = 0.0
    loss, grads = backward(params, x, y, loss_kind="supcon", tau=0.5, acts=dead)
    assert np.isfinite(loss)
    for g in grads.values():
        assert np.all(np.isfinite(g))
    assert np.any(grads["linear2.weight"] != 0.0)


# ------------------------------------------------------------ training paths

def test_training_is_deterministic(micro_e1):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=9)
    a = train_classifier(micro_e1, cfg)
    b = train_classifier(micro_e1, cfg)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_single_class_training_is_trivially_perfect(single_class_ds):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
    params = train_classifier(single_class_ds, cfg)
    images, labels = single_class_ds.subset("test_inlier")
    assert np.mean(predict(params, images) == labels) == 1.0


def test_finetune_freezing_keeps_early_layers_bitwise(micro_e1):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=4)
    base = train_classifier(micro_e1, cfg)
    tuned = finetune_frozen(base, "linear1", micro_e1, cfg)
    for layer in ("conv1", "linear1"):
        assert np.array_equal(tuned.tensors[f"{layer}.weight"], base.tensors[f"{layer}.weight"])
        assert np.array_equal(tuned.tensors[f"{layer}.bias"], base.tensors[f"{layer}.bias"])
    assert not np.array_equal(tuned.tensors["linear3.weight"], base.tensors["linear3.weight"])
    assert tuned.frozen == frozenset({"conv1", "linear1"})


def test_finetune_freeze_everything_is_identity(micro_e1):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=4)
    base = train_classifier(micro_e1, cfg)
    tuned = finetune_frozen(base, "linear3", micro_e1, cfg)
    for name in base.tensors:
        assert np.array_equal(tuned.tensors[name], base.tensors[name])


def test_finetune_unknown_layer(micro_e1):
    params = init_params(NetworkConfig(num_classes=2), seed=0)
    with pytest.raises(ValueError):
        finetune_frozen(params, "conv9", micro_e1, TrainConfig(epochs=1))


def test_finetune_retargets_head_on_class_count_change(micro_e1, micro_outline):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=4)
    base = init_params(NetworkConfig(num_classes=3), seed=0)
    tuned = finetune_frozen(base, "linear2", micro_outline, cfg)
    assert tuned.config.num_classes == micro_outline.inlier_class_count == 2
    assert tuned.tensors["linear3.weight"].shape == (20, 2)
    for layer in ("conv1", "linear1", "linear2"):
        assert np.array_equal(tuned.tensors[f"{layer}.weight"], base.tensors[f"{layer}.weight"])
        assert np.array_equal(tuned.tensors[f"{layer}.bias"], base.tensors[f"{layer}.bias"])
    preds = predict(tuned, micro_outline.subset("test_inlier")[0])
    assert np.all((preds >= 0) & (preds < 2))
    # a frozen head cannot be retargeted
    with pytest.raises(ValueError, match="retargeting"):
        finetune_frozen(base, "linear3", micro_outline, cfg)
    # matched class counts keep the trained head as the starting point
    same = finetune_frozen(init_params(NetworkConfig(num_classes=2), seed=0), "linear2", micro_e1, cfg)
    assert same.config.num_classes == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")
    with pytest.raises(ValueError):
        TrainConfig(loss="supcon")  # needs a temperature


# ------------------------------------------------------------ representations

def test_extract_representation_dims_and_determinism():
    params = init_params(NetworkConfig(num_classes=2), seed=0)
    img = np.random.default_rng(3).uniform(size=(1, 64, 64, 3))
    batch = np.concatenate([img, img])
    for layer, dim in (("linear2", 20), ("linear1", 1000), ("logits", 2)):
        emb = extract_representation(params, batch, layer)
        assert emb.matrix.shape == (2, dim)
        assert np.array_equal(emb.matrix[0], emb.matrix[1])
        assert emb.provenance == f"layer={layer}"
    with pytest.raises(ValueError):
        extract_representation(params, batch, "linear9")


# -------------------------------------------------------------------- params io

def test_params_roundtrip(tmp_path):
    params = init_params(NetworkConfig(num_classes=3), seed=11)
    params.frozen = frozenset({"conv1"})
    path = tmp_path / "model.npz"
    save_params(path, params)
    back = load_params(path)
    assert back.config == params.config
    assert back.frozen == params.frozen
    for name in params.tensors:
        assert np.array_equal(back.tensors[name], params.tensors[name])


def test_params_io_errors(tmp_path):
    params = init_params(NetworkConfig(num_classes=3), seed=0)
    path = tmp_path / "model.npz"
    save_params(path, params)
    with pytest.raises(ModelIOError):
        load_params(tmp_path / "absent.npz")
    with pytest.raises(ModelIOError):
        load_params(path, expect_num_classes=2)
    corrupt = tmp_path / "corrupt.npz"
    corrupt.write_bytes(b"not a zip archive")
    with pytest.raises(ModelIOError):
        load_params(corrupt)


def test_model_params_shape_validation():
    config = NetworkConfig(num_classes=2)
    tensors = {k: np.zeros(v) for k, v in config.shapes().items()}
    tensors["linear3.weight"] = np.zeros((20, 5))
    with pytest.raises(ValueError):
        ModelParams(config, tensors)
