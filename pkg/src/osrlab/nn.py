"""Minimal convolutional network with hand-written backpropagation.

Fixed architecture for the 64x64x3 toy protocols:

    conv1   5x5, 3->10 channels, stride 1, pad 2   (ReLU)
    avgpool 2x2, stride 2
    flatten 32*32*10 = 10240
    linear1 10240 -> 1000                          (ReLU)
    linear2 1000  -> 20                            (ReLU)
    linear3 20    -> num_classes                   (logits)

Everything runs in numpy double precision so analytic gradients can be
checked against central finite differences tightly. The convolution is an
im2col matmul; no input gradient is needed since conv1 is the first layer.
Contrastive training treats the L2-normalized linear2 activation as the
embedding and never touches linear3.
"""

from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass

import numpy as np

from .errors import ModelIOError, TrainingDiverged
from .osr import UNLABELED, EmbeddingBatch

__all__ = [
    "Adam",
    "LAYER_ORDER",
    "ModelParams",
    "NetworkConfig",
    "TrainConfig",
    "backward",
    "cross_entropy_loss",
    "extract_representation",
    "finetune_frozen",
    "forward",
    "init_params",
    "load_params",
    "predict",
    "save_params",
    "train_classifier",
]

INPUT_SIZE = 64
CONV_KERNEL = 5
CONV_PAD = 2
CONV_IN = 3
CONV_OUT = 10
POOL = 2
POOLED_SIZE = INPUT_SIZE // POOL
FLAT_DIM = POOLED_SIZE * POOLED_SIZE * CONV_OUT  # 10240
HIDDEN_DIM = 1000
EMBED_DIM = 20

LAYER_ORDER = ("conv1", "linear1", "linear2", "linear3")
_FORMAT = "osrlab-params-v1"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture descriptor; only the class count varies."""

    num_classes: int

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {
            "conv1.weight": (CONV_KERNEL, CONV_KERNEL, CONV_IN, CONV_OUT),
            "conv1.bias": (CONV_OUT,),
            "linear1.weight": (FLAT_DIM, HIDDEN_DIM),
            "linear1.bias": (HIDDEN_DIM,),
            "linear2.weight": (HIDDEN_DIM, EMBED_DIM),
            "linear2.bias": (EMBED_DIM,),
            "linear3.weight": (EMBED_DIM, self.num_classes),
            "linear3.bias": (self.num_classes,),
        }


@dataclass
class ModelParams:
    """Named parameter tensors plus the set of frozen layer names."""

    config: NetworkConfig
    tensors: dict[str, np.ndarray]
    frozen: frozenset[str] = frozenset()

    def __post_init__(self):
        expected = self.config.shapes()
        if set(self.tensors) != set(expected):
            raise ValueError("parameter tensor names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")
        bad = self.frozen - set(LAYER_ORDER)
        if bad:
            raise ValueError(f"unknown frozen layer names {sorted(bad)}")

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            frozen=self.frozen,
        )


def init_params(config: NetworkConfig, seed: int) -> ModelParams:
    """Fan-in-scaled uniform init, deterministic per seed."""
    rng = np.random.default_rng(seed)
    fan_in = {
        "conv1": CONV_KERNEL * CONV_KERNEL * CONV_IN,
        "linear1": FLAT_DIM,
        "linear2": HIDDEN_DIM,
        "linear3": EMBED_DIM,
    }
    tensors = {}
    for name, shape in config.shapes().items():
        bound = 1.0 / np.sqrt(fan_in[name.split(".")[0]])
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config=config, tensors=tensors)


def _check_batch(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1:] != (INPUT_SIZE, INPUT_SIZE, CONV_IN):
        raise ValueError(
            f"batch must have shape (n, {INPUT_SIZE}, {INPUT_SIZE}, {CONV_IN}), got {batch.shape}"
        )
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return batch


def _im2col(batch: np.ndarray) -> np.ndarray:
    """(n, 64, 64, 3) -> (n*64*64, 75) patch matrix, rows in (kh, kw, c) order."""
    n = batch.shape[0]
    padded = np.pad(batch, ((0, 0), (CONV_PAD, CONV_PAD), (CONV_PAD, CONV_PAD), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(padded, (CONV_KERNEL, CONV_KERNEL), axis=(1, 2))
    # view axes: (n, y, x, c, kh, kw) -> (n, y, x, kh, kw, c)
    cols = view.transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * INPUT_SIZE * INPUT_SIZE, CONV_KERNEL * CONV_KERNEL * CONV_IN)


def forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run the network; returns logits and all cached activations."""
    batch = _check_batch(batch)
    n = batch.shape[0]
    t = params.tensors

    cols = _im2col(batch)
    w1 = t["conv1.weight"].reshape(-1, CONV_OUT)
    conv_pre = (cols @ w1 + t["conv1.bias"]).reshape(n, INPUT_SIZE, INPUT_SIZE, CONV_OUT)
    conv = np.maximum(conv_pre, 0.0)

    pool = conv.reshape(n, POOLED_SIZE, POOL, POOLED_SIZE, POOL, CONV_OUT).mean(axis=(2, 4))
    flat = pool.reshape(n, FLAT_DIM)

    l1_pre = flat @ t["linear1.weight"] + t["linear1.bias"]
    l1 = np.maximum(l1_pre, 0.0)
    l2_pre = l1 @ t["linear2.weight"] + t["linear2.bias"]
    l2 = np.maximum(l2_pre, 0.0)
    logits = l2 @ t["linear3.weight"] + t["linear3.bias"]

    acts = {
        "cols": cols,
        "conv1_pre": conv_pre,
        "conv1": conv,
        "pool": pool,
        "flat": flat,
        "linear1_pre": l1_pre,
        "linear1": l1,
        "linear2_pre": l2_pre,
        "linear2": l2,
        "logits": logits,
    }
    return logits, acts


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its logit gradient."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError("one label per batch row required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label outside class range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_z[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def normalized_embedding(acts: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalized linear2 activation and the clamped row norms it was
    scaled by. A row whose activation collapsed to the zero vector (every
    pre-activation negative) normalizes to zero instead of raising; its
    gradient dies at the ReLU mask, so it is inert rather than divergent."""
    h = acts["linear2"]
    norms = np.maximum(np.linalg.norm(h, axis=1), 1e-12)
    return h / norms[:, None], norms


def backward(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "cross-entropy",
    tau: float | None = None,
    acts: dict[str, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value plus gradients for every non-frozen parameter tensor."""
    if acts is None:
        _, acts = forward(params, batch)
    n = acts["logits"].shape[0]
    t = params.tensors

    if loss_kind == "cross-entropy":
        loss, dlogits = cross_entropy_loss(acts["logits"], labels)
        dl2 = dlogits @ t["linear3.weight"].T
        grads = {
            "linear3.weight": acts["linear2"].T @ dlogits,
            "linear3.bias": dlogits.sum(axis=0),
        }
    elif loss_kind == "supcon":
        if tau is None or tau <= 0.0:
            raise ValueError("supcon backward needs a positive temperature")
        from .supcon import loss_and_embedding_grad  # deferred: supcon imports nn

        z, norms = normalized_embedding(acts)
        loss, dz = loss_and_embedding_grad(z, np.asarray(labels), tau)
        # through the normalization z = h/|h|: dh = (dz - (z . dz) z) / |h|
        dl2 = (dz - (dz * z).sum(axis=1, keepdims=True) * z) / norms[:, None]
        grads = {
            "linear3.weight": np.zeros_like(t["linear3.weight"]),
            "linear3.bias": np.zeros_like(t["linear3.bias"]),
        }
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    dl2_pre = dl2 * (acts["linear2_pre"] > 0)
    grads["linear2.weight"] = acts["linear1"].T @ dl2_pre
    grads["linear2.bias"] = dl2_pre.sum(axis=0)

    dl1 = dl2_pre @ t["linear2.weight"].T
    dl1_pre = dl1 * (acts["linear1_pre"] > 0)
    grads["linear1.weight"] = acts["flat"].T @ dl1_pre
    grads["linear1.bias"] = dl1_pre.sum(axis=0)

    dflat = dl1_pre @ t["linear1.weight"].T
    dpool = dflat.reshape(n, POOLED_SIZE, POOLED_SIZE, CONV_OUT)
    dconv = np.repeat(np.repeat(dpool, POOL, axis=1), POOL, axis=2) / (POOL * POOL)
    dconv_pre = (dconv * (acts["conv1_pre"] > 0)).reshape(-1, CONV_OUT)
    grads["conv1.weight"] = (acts["cols"].T @ dconv_pre).reshape(t["conv1.weight"].shape)
    grads["conv1.bias"] = dconv_pre.sum(axis=0)

    for layer in params.frozen:
        grads.pop(f"{layer}.weight", None)
        grads.pop(f"{layer}.bias", None)
    return loss, grads


class Adam:
    """Standard Adam with bias correction; state keyed by tensor name."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            params.tensors[name] -= self.lr * update


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for both loss kinds."""

    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    loss: str = "cross-entropy"
    tau: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.loss not in ("cross-entropy", "supcon"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.loss == "supcon" and (self.tau is None or self.tau <= 0):
            raise ValueError("supcon training needs a positive temperature")


def _train_loop(params, images, labels, cfg, batch_builder=None):
    """Shared epoch/shuffle/step loop; `batch_builder` may expand an index
    selection into (inputs, labels), as contrastive training does."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB41C]))
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if batch_builder is None:
                xb, yb = images[idx], labels[idx]
            else:
                xb, yb = batch_builder(idx, rng)
            loss, grads = backward(params, xb, yb, loss_kind=cfg.loss, tau=cfg.tau)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss!r} during training")
            opt.step(params, grads)
    return params


def train_classifier(ds, cfg: TrainConfig) -> ModelParams:
    """Train from scratch with cross-entropy on the dataset's train split."""
    if cfg.loss != "cross-entropy":
        raise ValueError("train_classifier is the cross-entropy path")
    images, labels = ds.subset("train")
    if len(images) == 0:
        raise ValueError("dataset has no training images")
    params = init_params(NetworkConfig(num_classes=ds.inlier_class_count), seed=cfg.seed)
    return _train_loop(params, images, labels, cfg)


def finetune_frozen(params: ModelParams, freeze_until: str, ds, cfg: TrainConfig) -> ModelParams:
    """Freeze every layer up to and including `freeze_until`, then train the
    rest on the given dataset's train split.

    When the dataset's class count differs from the model's head (transfer
    onto a new label space, e.g. the colorless shape sets), linear3 is
    re-initialized at the new size; every other tensor keeps its trained
    values, and frozen layers stay bitwise unchanged through training.
    """
    if freeze_until not in LAYER_ORDER:
        raise ValueError(f"freeze_until must be one of {LAYER_ORDER}")
    cutoff = LAYER_ORDER.index(freeze_until)
    tuned = params.copy()
    classes = ds.inlier_class_count
    if classes != tuned.config.num_classes:
        if freeze_until == "linear3":
            raise ValueError("cannot freeze linear3 while retargeting the head")
        rng = np.random.default_rng(cfg.seed)
        bound = 1.0 / np.sqrt(EMBED_DIM)
        tensors = {k: v for k, v in tuned.tensors.items() if not k.startswith("linear3.")}
        tensors["linear3.weight"] = rng.uniform(-bound, bound, size=(EMBED_DIM, classes))
        tensors["linear3.bias"] = rng.uniform(-bound, bound, size=(classes,))
        tuned = ModelParams(config=NetworkConfig(num_classes=classes), tensors=tensors)
    tuned.frozen = frozenset(LAYER_ORDER[: cutoff + 1])
    if len(tuned.frozen) == len(LAYER_ORDER):
        return tuned  # everything frozen: nothing to train
    images, labels = ds.subset("train")
    return _train_loop(tuned, images, labels, cfg)


def predict(params: ModelParams, images: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, images)
    return np.argmax(logits, axis=1)


_EXTRACT_LAYERS = ("conv1", "pool", "linear1", "linear2", "logits")


def extract_representation(
    params: ModelParams, images: np.ndarray, layer: str, labels=None
) -> EmbeddingBatch:
    """Activation matrix at a layer, one row per image (spatial layers are
    flattened)."""
    if layer not in _EXTRACT_LAYERS:
        raise ValueError(f"layer must be one of {_EXTRACT_LAYERS}")
    _, acts = forward(params, images)
    mat = acts[layer].reshape(len(images), -1)
    if labels is None:
        labels = np.full(len(images), UNLABELED)
    return EmbeddingBatch(matrix=mat, labels=np.asarray(labels), provenance=f"layer={layer}")


def save_params(path, params: ModelParams) -> None:
    meta = {
        "format": _FORMAT,
        "num_classes": params.config.num_classes,
        "frozen": sorted(params.frozen),
    }
    np.savez(
        path,
        __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **params.tensors,
    )


def load_params(path, expect_num_classes: int | None = None) -> ModelParams:
    if not os.path.isfile(path):
        raise ModelIOError(f"parameter file {path} not found")
    try:
        with np.load(path) as data:
            if "__meta__" not in data:
                raise ModelIOError(f"{path}: missing parameter-file header")
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != _FORMAT:
                raise ModelIOError(f"{path}: unsupported format {meta.get('format')!r}")
            config = NetworkConfig(num_classes=int(meta["num_classes"]))
            tensors = {k: data[k] for k in data.files if k != "__meta__"}
    except (ValueError, KeyError, json.JSONDecodeError, zipfile.BadZipFile) as e:
        raise ModelIOError(f"{path}: corrupt parameter file ({e})") from e
    if expect_num_classes is not None and config.num_classes != expect_num_classes:
        raise ModelIOError(
            f"{path}: model has {config.num_classes} classes, expected {expect_num_classes}"
        )
    try:
        return ModelParams(config=config, tensors=tensors, frozen=frozenset(meta.get("frozen", ())))
    except ValueError as e:
        raise ModelIOError(f"{path}: {e}") from e
