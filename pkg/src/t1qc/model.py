"""Conv5FC3 binary classifier: architecture, weighted BCE, training with
early stopping, 5-fold model selection, FC-only transfer fine-tuning, and
inference.

Checkpoints use a versioned container: an 8-byte magic, a little-endian
uint64 header length, a JSON header (config, metadata, section index) and
raw little-endian arrays in state-dict order (float32 for weights and
batch-norm statistics, int64 for counters).

Training is deterministic for a fixed seed: weight init, batch order and
dropout all flow from it, and no wall-clock state is recorded.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from t1qc.dataset import TaskSamples
from t1qc.errors import DataError, NumericalError
from t1qc.volume import Volume3D, load_nifti

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "Checkpoint",
    "build_conv5fc3",
    "param_count",
    "flatten_width",
    "weighted_bce",
    "training_loss",
    "class_weights_from_labels",
    "train",
    "cross_validate",
    "finetune",
    "predict",
    "predict_samples",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ModelConfig:
    input_dims: tuple[int, int, int] = (32, 32, 32)
    conv_channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    kernel: tuple[int, int, int] = (3, 3, 3)
    pool: tuple[int, int, int] = (2, 2, 2)
    fc_widths: tuple[int, int] = (1300, 50)
    dropout_rate: float = 0.0
    resize_policy: str = "strict"  # strict | crop_pad

    def __post_init__(self) -> None:
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.kernel = tuple(int(k) for k in self.kernel)
        self.pool = tuple(int(p) for p in self.pool)
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        if len(self.input_dims) != 3 or any(d < 1 for d in self.input_dims):
            raise DataError("input_dims must be 3 positive integers")
        if any(c < 1 for c in self.conv_channels) or any(w < 1 for w in self.fc_widths):
            raise DataError("channel and FC widths must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError("dropout_rate must be in [0, 1)")
        if self.resize_policy not in ("strict", "crop_pad"):
            raise DataError("resize_policy must be 'strict' or 'crop_pad'")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 6
    max_epochs: int = 30
    patience: int = 5
    class_weights: tuple[float, float] | None = None  # None -> inverse frequency
    folds: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise DataError("learning_rate, batch_size and max_epochs must be positive")
        if self.class_weights is not None:
            w0, w1 = self.class_weights
            if w0 <= 0 or w1 <= 0 or not (math.isfinite(w0) and math.isfinite(w1)):
                raise DataError("class weights must be positive and finite")


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# Architecture


def _pool_schedule(cfg: ModelConfig) -> tuple[list[tuple[int, int, int]], tuple[int, int, int]]:
    """Per-block pool kernels (pooling stops on axes already at size 1)
    and the final spatial dims."""
    dims = list(cfg.input_dims)
    kernels = []
    for _ in cfg.conv_channels:
        k = tuple(p if d >= p else 1 for p, d in zip(cfg.pool, dims))
        dims = [d // kk for d, kk in zip(dims, k)]
        if any(d < 1 for d in dims):
            raise DataError(f"input_dims {cfg.input_dims} collapse below 1 under pooling")
        kernels.append(k)
    return kernels, tuple(dims)


def flatten_width(cfg: ModelConfig) -> int:
    _, dims = _pool_schedule(cfg)
    return cfg.conv_channels[-1] * dims[0] * dims[1] * dims[2]


def param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count (conv + batch-norm affine +
    fully connected layers)."""
    total = 0
    k = cfg.kernel[0] * cfg.kernel[1] * cfg.kernel[2]
    prev = 1
    for ch in cfg.conv_channels:
        total += prev * ch * k + ch  # conv weight + bias
        total += 2 * ch  # batch-norm gamma + beta
        prev = ch
    widths = [flatten_width(cfg), *cfg.fc_widths, 1]
    for a, b in zip(widths[:-1], widths[1:]):
        total += a * b + b
    return total


def build_conv5fc3(cfg: ModelConfig, seed: int | None = None) -> nn.Module:
    """Five [conv3d -> batch-norm -> ReLU -> max-pool] blocks followed by
    three fully connected layers ending in a single logit."""
    if seed is not None:
        torch.manual_seed(seed)
    kernels, _ = _pool_schedule(cfg)
    padding = tuple(k // 2 for k in cfg.kernel)
    layers: "OrderedDict[str, nn.Module]" = OrderedDict()
    prev = 1
    for i, (ch, pool_k) in enumerate(zip(cfg.conv_channels, kernels), start=1):
        layers[f"conv{i}"] = nn.Conv3d(prev, ch, cfg.kernel, stride=1, padding=padding)
        layers[f"bn{i}"] = nn.BatchNorm3d(ch)
        layers[f"relu{i}"] = nn.ReLU()
        layers[f"pool{i}"] = nn.MaxPool3d(pool_k)
        prev = ch
    layers["flatten"] = nn.Flatten()
    if cfg.dropout_rate > 0:
        layers["dropout"] = nn.Dropout(cfg.dropout_rate)
    widths = [flatten_width(cfg), *cfg.fc_widths]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        layers[f"fc{i}"] = nn.Linear(a, b)
        layers[f"relu_fc{i}"] = nn.ReLU()
    layers["fc3"] = nn.Linear(widths[-1], 1)
    return nn.Sequential(layers)


def _conv_block_param(name: str) -> bool:
    return name.split(".")[0].startswith(("conv", "bn"))


# --------------------------------------------------------------------------
# Loss


def weighted_bce(logit, label, weights: tuple[float, float] = (1.0, 1.0)):
    """Class-weighted binary cross entropy on logits,
    w1*y*softplus(-x) + w0*(1-y)*softplus(x), numerically stabilized."""
    w0, w1 = weights
    if w0 <= 0 or w1 <= 0:
        raise DataError("class weights must be positive")
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)

    def softplus(t):
        return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))

    out = w1 * y * softplus(-x) + w0 * (1.0 - y) * softplus(x)
    return float(out) if out.ndim == 0 else out


def training_loss(
    model: nn.Module, x: torch.Tensor, y: torch.Tensor, weights: tuple[float, float]
) -> torch.Tensor:
    """Mean weighted BCE over a batch; the torch twin of
    :func:`weighted_bce` used by the training loop."""
    logits = model(x).squeeze(-1)
    w0, w1 = weights
    per = w1 * y * nn.functional.softplus(-logits) + w0 * (1.0 - y) * nn.functional.softplus(logits)
    return per.mean()


def class_weights_from_labels(labels: np.ndarray) -> tuple[float, float]:
    """Inverse-class-frequency weights renormalized to mean 1."""
    labels = np.asarray(labels)
    n = len(labels)
    n1 = int(labels.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DataError("single-class training set")
    w0, w1 = n / (2.0 * n0), n / (2.0 * n1)
    scale = 2.0 / (w0 + w1)
    return (w0 * scale, w1 * scale)


# --------------------------------------------------------------------------
# Data handling


def _fit_dims(data: np.ndarray, target: tuple[int, int, int], policy: str) -> np.ndarray:
    if data.shape == tuple(target):
        return data
    if policy == "strict":
        raise DataError(f"volume dims {data.shape} do not match model input dims {tuple(target)}")
    out = np.zeros(target, dtype=data.dtype)
    src, dst = [], []
    for have, want in zip(data.shape, target):
        if have >= want:
            start = (have - want) // 2
            src.append(slice(start, start + want))
            dst.append(slice(0, want))
        else:
            start = (want - have) // 2
            src.append(slice(0, have))
            dst.append(slice(start, start + have))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _normalize_input(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        return np.zeros_like(data, dtype=np.float32)
    return ((data - lo) / (hi - lo)).astype(np.float32)


def _prepare_volume(vol: Volume3D, cfg: ModelConfig) -> np.ndarray:
    data = _fit_dims(np.asarray(vol.data, dtype=np.float32), cfg.input_dims, cfg.resize_policy)
    return _normalize_input(data)


def load_dataset(samples: TaskSamples, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Load, resize and per-volume min-max normalize every sample into one
    float32 tensor of shape (N, 1, D, H, W)."""
    if not samples.paths:
        raise DataError(f"no samples for task {samples.task}")
    arrays = [_prepare_volume(load_nifti(p), cfg) for p in samples.paths]
    x = torch.from_numpy(np.stack(arrays)[:, np.newaxis])
    y = torch.from_numpy(samples.labels.astype(np.float32))
    return x, y


# --------------------------------------------------------------------------
# Training


def _state_to_numpy(model: nn.Module) -> "OrderedDict[str, np.ndarray]":
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        out[name] = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f4")
    return out


def _load_state(model: nn.Module, weights: "OrderedDict[str, np.ndarray]") -> None:
    state = {k: torch.from_numpy(np.asarray(v).copy()) for k, v in weights.items()}
    model.load_state_dict(state)


@torch.no_grad()
def _evaluate_loss(
    model: nn.Module, x: torch.Tensor, y: torch.Tensor, weights: tuple[float, float], batch: int
) -> float:
    was_training = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(x), batch):
        xb, yb = x[i : i + batch], y[i : i + batch]
        total += float(training_loss(model, xb, yb, weights)) * len(xb)
    if was_training:
        model.train()
    return total / len(x)


def train(
    model: nn.Module,
    train_samples: TaskSamples,
    val_samples: TaskSamples,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    freeze_conv: bool = False,
    log_path: str | Path | None = None,
    data: tuple | None = None,
) -> Checkpoint:
    """Adam optimization of the weighted BCE with early stopping; the
    returned checkpoint is the epoch (including the initial state) with
    the lowest validation loss. ``data`` may carry preloaded
    (x_train, y_train, x_val, y_val) tensors to skip disk reads."""
    if data is not None:
        x_tr, y_tr, x_va, y_va = data
    else:
        x_tr, y_tr = load_dataset(train_samples, model_cfg)
        x_va, y_va = load_dataset(val_samples, model_cfg)
    labels = y_tr.numpy()
    if len(np.unique(labels)) < 2:
        raise DataError("single-class training set")
    weights = cfg.class_weights or class_weights_from_labels(labels)

    if freeze_conv:
        for name, p in model.named_parameters():
            if _conv_block_param(name):
                p.requires_grad_(False)
    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate)

    def set_train_mode() -> None:
        model.train()
        if freeze_conv:
            for name, module in model.named_modules():
                if name.startswith("bn"):
                    module.eval()  # keep running statistics frozen

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xB41C])))
    best_loss = _evaluate_loss(model, x_va, y_va, weights, cfg.batch_size)
    best_state = _state_to_numpy(model)
    best_epoch = 0
    history = [{"epoch": 0, "train_loss": None, "val_loss": best_loss}]
    stall = 0
    for epoch in range(1, cfg.max_epochs + 1):
        set_train_mode()
        order = rng.permutation(len(x_tr))
        # a remainder batch of one sample breaks batch-norm statistics
        if len(order) > cfg.batch_size and len(order) % cfg.batch_size == 1:
            order = order[:-1]
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[i : i + cfg.batch_size].copy())
            opt.zero_grad()
            loss = training_loss(model, x_tr[idx], y_tr[idx], weights)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        train_loss = total / len(order)
        val_loss = _evaluate_loss(model, x_va, y_va, weights, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, _state_to_numpy(model)
            stall = 0
        else:
            stall += 1
            if stall > cfg.patience:
                break
    model.eval()

    if log_path is not None:
        with open(log_path, "w") as f:
            for entry in history:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    metadata = {
        "task": train_samples.task,
        "fold": None,
        "best_val_loss": best_loss,
        "best_epoch": best_epoch,
        "epochs_run": len(history) - 1,
        "seed": cfg.seed,
        "class_weights": list(weights),
        "frozen_conv": freeze_conv,
        "history": history,
    }
    return Checkpoint(config=model_cfg, weights=best_state, metadata=metadata)


def _fold_split(samples: TaskSamples, fold: int) -> tuple[np.ndarray, np.ndarray]:
    folds = np.array([-1 if f is None else f for f in samples.folds])
    val = folds == fold
    train_mask = ~val & (folds >= 0)
    return train_mask, val


def cross_validate(
    samples: TaskSamples,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    init: Checkpoint | None = None,
    freeze_conv: bool = False,
    log_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[Checkpoint]]:
    """One model per fold (fold k validates on fold k); the final model is
    the one with the lowest validation loss, ties to the lowest fold."""
    fold_ids = sorted({f for f in samples.folds if f is not None})
    if len(fold_ids) < 2:
        raise DataError(f"cross-validation needs populated folds, found {fold_ids}")
    x_all, y_all = load_dataset(samples, model_cfg)
    checkpoints = []
    for fold in fold_ids:
        train_mask, val_mask = _fold_split(samples, fold)
        if not train_mask.any() or not val_mask.any():
            raise DataError(f"fold {fold} leaves an empty train or validation set")
        tr_idx = torch.from_numpy(np.flatnonzero(train_mask))
        va_idx = torch.from_numpy(np.flatnonzero(val_mask))
        # folds share the seed: identical fold corpora then train identically,
        # which makes the lowest-fold tie-break well defined
        model = build_conv5fc3(model_cfg, seed=train_cfg.seed)
        if init is not None:
            _load_state(model, init.weights)
        fold_cfg = train_cfg
        log_path = None
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(log_dir) / f"{samples.task}_fold{fold}.jsonl"
        ckpt = train(
            model,
            samples.subset(train_mask),
            samples.subset(val_mask),
            fold_cfg,
            model_cfg,
            freeze_conv=freeze_conv,
            log_path=log_path,
            data=(x_all[tr_idx], y_all[tr_idx], x_all[va_idx], y_all[va_idx]),
        )
        ckpt.metadata["fold"] = fold
        checkpoints.append(ckpt)
    best = min(checkpoints, key=lambda c: (c.metadata["best_val_loss"], c.metadata["fold"]))
    return best, checkpoints


def finetune(
    pretrained: Checkpoint,
    samples: TaskSamples,
    cfg: TrainConfig,
    log_dir: str | Path | None = None,
) -> Checkpoint:
    """Transfer to a new corpus with every convolutional block (weights
    and batch-norm statistics) frozen bit-exactly; only the fully
    connected layers are retrained. Model selection again picks the fold
    with the lowest validation loss."""
    best, _ = cross_validate(
        samples, pretrained.config, cfg, init=pretrained, freeze_conv=True, log_dir=log_dir
    )
    best.metadata["finetuned_from"] = pretrained.metadata.get("task")
    return best


# --------------------------------------------------------------------------
# Inference


def _model_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    model = build_conv5fc3(ckpt.config)
    _load_state(model, ckpt.weights)
    model.eval()
    return model


@torch.no_grad()
def predict(ckpt: Checkpoint, vol: Volume3D) -> tuple[float, int]:
    """Probability (sigmoid of the logit) and hard label at threshold 0.5
    (probability 0.5 maps to label 1)."""
    model = _model_from_checkpoint(ckpt)
    data = _prepare_volume(vol, ckpt.config)
    x = torch.from_numpy(data[np.newaxis, np.newaxis])
    prob = float(torch.sigmoid(model(x).squeeze()))
    return prob, int(prob >= 0.5)


@torch.no_grad()
def predict_samples(
    ckpt: Checkpoint, samples: TaskSamples, batch: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and hard labels for every image in a task view."""
    model = _model_from_checkpoint(ckpt)
    x, _ = load_dataset(samples, ckpt.config)
    probs = []
    for i in range(0, len(x), batch):
        logits = model(x[i : i + batch]).squeeze(-1)
        probs.append(torch.sigmoid(logits).numpy())
    probs = np.concatenate(probs)
    return probs, (probs >= 0.5).astype(int)


# --------------------------------------------------------------------------
# Checkpoint container


_MAGIC = b"T1QCCKP1"


def _expected_param_count(weights: "OrderedDict[str, np.ndarray]") -> int:
    total = 0
    for name, arr in weights.items():
        leaf = name.split(".")[-1]
        if leaf in ("weight", "bias"):
            total += int(np.prod(np.asarray(arr).shape))
    return total


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if _expected_param_count(ckpt.weights) != param_count(ckpt.config):
        raise DataError("checkpoint weight count does not match its config")
    sections = []
    blobs = []
    offset = 0
    for name, arr in ckpt.weights.items():
        arr = np.asarray(arr)
        arr = arr.astype("<i8") if arr.dtype.kind in "iu" else arr.astype("<f4")
        raw = arr.tobytes()
        sections.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "format_version": 1,
            "config": asdict(ckpt.config),
            "metadata": ckpt.metadata,
            "sections": sections,
        },
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {path.parent} does not exist")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    blob = path.read_bytes()
    if blob[:8] != _MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    if header.get("format_version") != 1:
        raise DataError(f"unsupported checkpoint format version {header.get('format_version')}")
    cfg_fields = dict(header["config"])
    cfg = ModelConfig(**cfg_fields)
    data_start = 16 + header_len
    weights: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for sec in header["sections"]:
        dtype = np.dtype(sec["dtype"])
        n = int(np.prod(sec["shape"])) if sec["shape"] else 1
        start = data_start + sec["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=n, offset=start).reshape(sec["shape"])
        weights[sec["name"]] = arr.copy()
    ckpt = Checkpoint(config=cfg, weights=weights, metadata=header["metadata"])
    if _expected_param_count(ckpt.weights) != param_count(cfg):
        raise DataError("checkpoint weight count does not match its config")
    return ckpt
