"""Weighted binary cross-entropy, three optimizers, and checkpointing.

The training loop is deliberately plain: shuffle with the run PRNG, walk
the epoch in batches, take one optimizer step per batch, and report exact
per-sample means.  Everything that evolves during a run (parameters, BN
running stats, optimizer slots, the PRNG counter, the epoch counter) is
captured in a checkpoint, so a resumed run is bit-identical to an
uninterrupted one.  Optimizer state is stored in float32 between steps
for the same reason: what a checkpoint writes is exactly what the next
step would have read.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import ManifestDataset
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    NumericError,
    StateError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .regnet3d import RegNet3d, RegNetConfig
from .tensor import Rng, Tensor

OPTIMIZER_KINDS = ("sgd", "adam", "novograd")

_BETA2_DEFAULTS = {"sgd": 0.0, "adam": 0.999, "novograd": 0.25}


@dataclass
class OptimizerConfig:
    """Hyperparameters shared by the three update rules.

    `beta2` left as None resolves to the per-kind default (0.999 for
    adam, 0.25 for novograd); `momentum` only matters for sgd and the
    betas only for the adaptive kinds, but all fields are kept so a
    config round-trips through serialization unchanged.
    """

    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float | None = None
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.beta2 is None and self.kind in _BETA2_DEFAULTS:
            self.beta2 = _BETA2_DEFAULTS[self.kind]

    def validate(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(
                f"optimizer kind must be one of {', '.join(OPTIMIZER_KINDS)}, got {self.kind!r}"
            )
        # zero is allowed so a no-op step stays expressible
        if not float(self.learning_rate) >= 0.0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= float(self.momentum) < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if not 0.0 <= float(self.beta1) < 1.0:
            raise ConfigError(f"beta1 must be in [0,1), got {self.beta1}")
        if not 0.0 <= float(self.beta2) < 1.0:
            raise ConfigError(f"beta2 must be in [0,1), got {self.beta2}")
        if not float(self.epsilon) > 0.0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not float(self.weight_decay) >= 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "learning_rate": float(self.learning_rate),
            "momentum": float(self.momentum),
            "beta1": float(self.beta1),
            "beta2": float(self.beta2),
            "epsilon": float(self.epsilon),
            "weight_decay": float(self.weight_decay),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {"kind", "learning_rate", "momentum", "beta1", "beta2", "epsilon", "weight_decay"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer fields: {', '.join(sorted(unknown))}")
        cfg = cls(
            kind=str(d.get("kind", "adam")),
            learning_rate=float(d.get("learning_rate", 1e-3)),
            momentum=float(d.get("momentum", 0.9)),
            beta1=float(d.get("beta1", 0.9)),
            beta2=None if d.get("beta2") is None else float(d["beta2"]),
            epsilon=float(d.get("epsilon", 1e-8)),
            weight_decay=float(d.get("weight_decay", 0.0)),
        )
        cfg.validate()
        return cfg


@dataclass
class LossConfig:
    """Binary cross-entropy settings; pos_weight scales the positive term."""

    pos_weight: float = 1.0

    def validate(self) -> None:
        if not float(self.pos_weight) > 0.0:
            raise ConfigError(f"pos_weight must be > 0, got {self.pos_weight}")

    def to_dict(self) -> dict:
        return {"pos_weight": float(self.pos_weight)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {"pos_weight"}
        if unknown:
            raise ConfigError(f"unknown loss fields: {', '.join(sorted(unknown))}")
        cfg = cls(pos_weight=float(d.get("pos_weight", 1.0)))
        cfg.validate()
        return cfg


def _softplus(t: float) -> float:
    """log(1 + e^t) without overflow for large |t|."""
    return max(t, 0.0) + math.log1p(math.exp(-abs(t)))


def sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def weighted_bce_with_logit(logit: float, label: int, pos_weight: float = 1.0):
    """Loss and dloss/dlogit for one sample, in 64-bit.

    loss = -[pos_weight * y * log sigma(z) + (1-y) * log(1 - sigma(z))]
    evaluated through softplus so saturated logits stay finite.  The
    positive branch is pos_weight * softplus(-z), which makes the
    pos_weight scaling exact, not just approximate.
    """
    z = float(logit)
    if not math.isfinite(z):
        raise NumericError(f"non-finite logit {z!r}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    w = float(pos_weight)
    # grad uses sigma(-z) on the positive branch so the label symmetry
    # loss(z,1) == loss(-z,0) carries over to gradients bit-for-bit
    if label == 1:
        loss = w * _softplus(-z)
        grad = -w * sigmoid(-z)
    else:
        loss = _softplus(z)
        grad = sigmoid(z)
    return loss, grad


class _Optimizer:
    """Bookkeeping shared by the update rules.

    Parameters are bound by name at construction; `step()` validates
    every gradient before mutating anything, so a rejected step leaves
    parameters and state untouched.  State lives in float32 between
    steps (the math runs in float64) so checkpoints capture it exactly.
    """

    kind = ""
    slots: tuple = ()

    def __init__(self, config: OptimizerConfig, named_params):
        config.validate()
        if config.kind != self.kind:
            raise ConfigError(f"config kind {config.kind!r} does not match {self.kind!r}")
        self.config = config
        pairs = list(named_params)
        self.names = [name for name, _ in pairs]
        self.params = [tensor for _, tensor in pairs]
        if not self.params:
            raise ConfigError("optimizer needs at least one parameter")
        self.step_count = 0
        self.state = {slot: [self._initial(slot, t) for t in self.params] for slot in self.slots}

    def _initial(self, slot: str, tensor: Tensor) -> np.ndarray:
        return np.zeros_like(tensor.data)

    def step(self) -> None:
        grads = []
        for name, tensor in zip(self.names, self.params):
            if tensor.grad is None:
                raise StateError(f"parameter {name} has no gradient; run backward first")
            if not np.all(np.isfinite(tensor.grad)):
                raise NumericError(f"non-finite gradient in {name}; step aborted")
            grads.append(tensor.grad.astype(np.float64))
        self._update(grads)
        self.step_count += 1

    def _update(self, grads) -> None:
        raise NotImplementedError


class Sgd(_Optimizer):
    """v <- momentum*v + g, p <- p - lr*v."""

    kind = "sgd"
    slots = ("v",)

    def _update(self, grads) -> None:
        lr = float(self.config.learning_rate)
        mu = float(self.config.momentum)
        wd = float(self.config.weight_decay)
        for tensor, v, g in zip(self.params, self.state["v"], grads):
            p = tensor.data.astype(np.float64)
            if wd:
                g = g + wd * p
            vn = mu * v.astype(np.float64) + g
            v[...] = vn.astype(np.float32)
            tensor.data[...] = (p - lr * vn).astype(np.float32)


class Adam(_Optimizer):
    """Bias-corrected first and second moments, elementwise."""

    kind = "adam"
    slots = ("m", "v")

    def _update(self, grads) -> None:
        cfg = self.config
        lr = float(cfg.learning_rate)
        b1, b2 = float(cfg.beta1), float(cfg.beta2)
        t = self.step_count + 1
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for tensor, m, v, g in zip(self.params, self.state["m"], self.state["v"], grads):
            p = tensor.data.astype(np.float64)
            if cfg.weight_decay:
                g = g + float(cfg.weight_decay) * p
            mn = b1 * m.astype(np.float64) + (1.0 - b1) * g
            vn = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
            m[...] = mn.astype(np.float32)
            v[...] = vn.astype(np.float32)
            update = (mn / c1) / (np.sqrt(vn / c2) + float(cfg.epsilon))
            tensor.data[...] = (p - lr * update).astype(np.float32)


class NovoGrad(_Optimizer):
    """Per-tensor gradient normalization before the momentum average.

    The second moment is one scalar per parameter tensor, seeded with the
    first gradient's squared norm (an EMA from zero would misscale every
    early step), then averaged with beta2.  The normalized gradient
    g / (sqrt(v) + eps) feeds a beta1 momentum sum, and parameters move
    by -lr times that sum.
    """

    kind = "novograd"
    slots = ("m", "v")

    def _initial(self, slot: str, tensor: Tensor) -> np.ndarray:
        if slot == "v":
            return np.zeros(1, dtype=np.float32)
        return np.zeros_like(tensor.data)

    def _update(self, grads) -> None:
        cfg = self.config
        lr = float(cfg.learning_rate)
        b1, b2 = float(cfg.beta1), float(cfg.beta2)
        eps = float(cfg.epsilon)
        first = self.step_count == 0
        for tensor, m, v, g in zip(self.params, self.state["m"], self.state["v"], grads):
            p = tensor.data.astype(np.float64)
            norm2 = float(np.sum(g * g))
            vn = norm2 if first else b2 * float(v[0]) + (1.0 - b2) * norm2
            v[0] = np.float32(vn)
            scaled = g / (math.sqrt(vn) + eps)
            if cfg.weight_decay:
                scaled = scaled + float(cfg.weight_decay) * p
            mn = b1 * m.astype(np.float64) + scaled
            m[...] = mn.astype(np.float32)
            tensor.data[...] = (p - lr * mn).astype(np.float32)


_OPTIMIZERS = {"sgd": Sgd, "adam": Adam, "novograd": NovoGrad}


def make_optimizer(config: OptimizerConfig, named_params) -> _Optimizer:
    config.validate()
    return _OPTIMIZERS[config.kind](config, named_params)


def sgd_step(params, grads, state, config: OptimizerConfig):
    """One functional SGD update; see Sgd for the rule."""
    return _functional_step(Sgd, params, grads, state, config)


def adam_step(params, grads, state, config: OptimizerConfig):
    """One functional Adam update; see Adam for the rule."""
    return _functional_step(Adam, params, grads, state, config)


def novograd_step(params, grads, state, config: OptimizerConfig):
    """One functional NovoGrad update; see NovoGrad for the rule."""
    return _functional_step(NovoGrad, params, grads, state, config)


def _functional_step(cls, params, grads, state, config):
    """Adapter from (params, grads, state, config) to the class form.

    `params` is a list of float32 arrays, updated in place.  `state` is
    either None (first step) or the dict a previous call returned.
    """
    tensors = [Tensor(np.asarray(p, dtype=np.float32)) for p in params]
    opt = cls(config, [(f"p{i}", t) for i, t in enumerate(tensors)])
    if state is not None:
        opt.step_count = int(state["step"])
        for slot in cls.slots:
            for held, stored in zip(opt.state[slot], state[slot]):
                held[...] = stored
    for tensor, g in zip(tensors, grads):
        tensor.grad = np.asarray(g, dtype=np.float32)
    opt.step()
    for p, tensor in zip(params, tensors):
        np.asarray(p)[...] = tensor.data
    out_state = {"step": opt.step_count}
    for slot in cls.slots:
        out_state[slot] = [arr.copy() for arr in opt.state[slot]]
    return params, out_state


@dataclass
class EpochStats:
    """Exact per-sample means for one pass over the training set."""

    epoch: int
    mean_loss: float
    train_accuracy: float
    sample_count: int


def train_epoch(
    model: RegNet3d,
    dataset: ManifestDataset,
    optimizer: _Optimizer,
    loss_config: LossConfig,
    rng: Rng,
    epoch: int,
    batch_size: int = 2,
) -> EpochStats:
    """One shuffled pass; one optimizer step per batch.

    The shuffle order comes from `rng` (which therefore advances), while
    augmentation noise is keyed by (dataset seed, epoch, sample index)
    inside the dataset.  Reported stats are means over all samples, not
    means of batch means, so an uneven last batch does not skew them.
    """
    loss_config.validate()
    if int(batch_size) < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if int(model.config.num_classes) != 1:
        raise ConfigError("training expects a single-logit model")
    n = len(dataset)
    order = rng.permutation(n)
    pos_weight = float(loss_config.pos_weight)

    total_loss = 0.0
    correct = 0

    def run_batch(batch) -> None:
        nonlocal total_loss, correct
        size = len(batch)
        x = Tensor(np.stack([sample.data for _, sample, _ in batch]))
        logits = model.forward(x, mode="train")
        grad = np.zeros((size, 1), dtype=np.float32)
        for row, (index, _, label) in enumerate(batch):
            z = float(logits.data[row, 0])
            try:
                loss, dz = weighted_bce_with_logit(z, int(label), pos_weight)
            except NumericError as exc:
                raise NumericError(
                    f"sample {index} ({dataset.entries[index].sample_id}): {exc}"
                ) from None
            total_loss += loss
            correct += int((z >= 0.0) == bool(label))
            grad[row, 0] = dz / size
        model.zero_grads()
        model.backward(Tensor(grad))
        try:
            optimizer.step()
        except NumericError as exc:
            ids = ", ".join(str(i) for i, _, _ in batch)
            raise NumericError(f"batch of samples [{ids}]: {exc}") from None

    batch = []
    for sample in dataset.train_samples(epoch, order):
        batch.append(sample)
        if len(batch) == int(batch_size):
            run_batch(batch)
            batch = []
    if batch:
        run_batch(batch)

    return EpochStats(
        epoch=int(epoch),
        mean_loss=total_loss / n,
        train_accuracy=correct / n,
        sample_count=n,
    )


def run_training(
    model: RegNet3d,
    dataset: ManifestDataset,
    optimizer: _Optimizer,
    loss_config: LossConfig,
    rng: Rng,
    epochs: int,
    batch_size: int = 2,
    start_epoch: int = 0,
    on_epoch=None,
) -> list[EpochStats]:
    """Epochs `start_epoch` .. `epochs`-1; `on_epoch(stats)` may stop early.

    Resuming a run means calling this again with start_epoch set to the
    checkpointed epoch counter and the restored model/optimizer/rng; the
    remaining epochs then replay bit-identically.
    """
    if int(epochs) < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    history: list[EpochStats] = []
    for epoch in range(int(start_epoch), int(epochs)):
        stats = train_epoch(model, dataset, optimizer, loss_config, rng, epoch, batch_size)
        history.append(stats)
        if on_epoch is not None and on_epoch(stats):
            break
    return history


TRAIN_LOG_HEADER = ("epoch", "mean_loss", "train_accuracy")


def write_train_log(path, history: list[EpochStats]) -> None:
    """CSV of per-epoch stats; epoch column is the 1-based completed count."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRAIN_LOG_HEADER) + "\n")
        for stats in history:
            fh.write(f"{stats.epoch + 1},{stats.mean_loss!r},{stats.train_accuracy!r}\n")


CHECKPOINT_MAGIC = b"VNT1"
CHECKPOINT_VERSION = 1

# sanity bound on tensor record shapes; nothing real comes close
_MAX_RANK = 16


@dataclass
class Checkpoint:
    """Everything a paused run needs to continue bit-exactly.

    `tensors` is an ordered list of (name, float32 array): parameters
    under `param/`, BN running stats under `bn/`, optimizer slots under
    `opt/<slot>/`.  `optimizer_state` carries the hyperparameters plus
    the step counter; `rng_state` is the PRNG counter as a decimal
    string; `extra` is for caller bookkeeping (data/loss config).
    """

    config: RegNetConfig
    epoch: int
    tensors: list
    optimizer_state: dict
    rng_state: str
    extra: dict = field(default_factory=dict)


def snapshot(model, optimizer, epoch: int, rng: Rng, extra: dict | None = None) -> Checkpoint:
    """Copy the live training state into a Checkpoint."""
    tensors = [("param/" + name, t.data.copy()) for name, t in model.named_parameters()]
    tensors += [("bn/" + name, t.data.copy()) for name, t in model.named_buffers()]
    for slot in optimizer.slots:
        tensors += [
            (f"opt/{slot}/{name}", arr.copy())
            for name, arr in zip(optimizer.names, optimizer.state[slot])
        ]
    state = optimizer.config.to_dict()
    state["step"] = int(optimizer.step_count)
    return Checkpoint(
        config=model.config,
        epoch=int(epoch),
        tensors=tensors,
        optimizer_state=state,
        rng_state=str(rng.state),
        extra=dict(extra or {}),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "architecture": ckpt.config.to_dict(),
        "epoch": int(ckpt.epoch),
        "optimizer": ckpt.optimizer_state,
        "rng_state": str(ckpt.rng_state),
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, arr in ckpt.tensors:
            encoded = name.encode("utf-8")
            payload = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", payload.ndim))
            fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            fh.write(payload.tobytes())


class _Reader:
    """Cursor over checkpoint bytes that fails loudly on short reads."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        end = self.pos + count
        if end > len(self.data):
            raise TruncatedCheckpointError(
                f"{self.path}: needed {count} bytes at offset {self.pos}, "
                f"file ends at {len(self.data)}"
            )
        out = self.data[self.pos : end]
        self.pos = end
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw, path)
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} is not {CHECKPOINT_MAGIC!r}")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    meta_len = reader.u32()
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed metadata block: {exc}") from None
    for key in ("architecture", "epoch", "optimizer", "rng_state", "extra"):
        if key not in meta:
            raise CheckpointError(f"{path}: metadata is missing {key!r}")
    count = reader.u32()
    tensors = []
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        if rank > _MAX_RANK:
            raise CheckpointError(f"{path}: tensor {name!r} claims rank {rank}")
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        size = 1
        for extent in shape:
            size *= extent
        arr = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).copy()
        tensors.append((name, arr))
    if reader.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - reader.pos} trailing bytes after last tensor")
    return Checkpoint(
        config=RegNetConfig.from_dict(meta["architecture"]),
        epoch=int(meta["epoch"]),
        tensors=tensors,
        optimizer_state=dict(meta["optimizer"]),
        rng_state=str(meta["rng_state"]),
        extra=dict(meta["extra"]),
    )


def _tensor_map(ckpt: Checkpoint) -> dict:
    return dict(ckpt.tensors)


def apply_checkpoint(ckpt: Checkpoint, model: RegNet3d, optimizer: _Optimizer | None = None) -> None:
    """Copy checkpointed tensors into a model (and optionally optimizer).

    The model must have been built from the checkpoint's architecture
    config; names and shapes are cross-checked in both directions.
    """
    held = _tensor_map(ckpt)
    used = set()

    def pull(name: str, target: np.ndarray) -> None:
        if name not in held:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = held[name]
        if arr.shape != target.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, model expects {target.shape}"
            )
        target[...] = arr
        used.add(name)

    for name, tensor in model.named_parameters():
        pull("param/" + name, tensor.data)
    for name, tensor in model.named_buffers():
        pull("bn/" + name, tensor.data)
    if optimizer is not None:
        stored_kind = ckpt.optimizer_state.get("kind")
        if stored_kind != optimizer.kind:
            raise CheckpointError(
                f"checkpoint holds {stored_kind!r} state, optimizer is {optimizer.kind!r}"
            )
        for slot in optimizer.slots:
            for name, arr in zip(optimizer.names, optimizer.state[slot]):
                pull(f"opt/{slot}/{name}", arr)
        optimizer.step_count = int(ckpt.optimizer_state["step"])
        leftover = set(held) - used
    else:
        leftover = {name for name in set(held) - used if not name.startswith("opt/")}
    if leftover:
        raise CheckpointError(f"checkpoint holds unknown tensors: {', '.join(sorted(leftover))}")


def optimizer_config_from_checkpoint(ckpt: Checkpoint) -> OptimizerConfig:
    state = dict(ckpt.optimizer_state)
    state.pop("step", None)
    return OptimizerConfig.from_dict(state)


def rng_from_checkpoint(ckpt: Checkpoint) -> Rng:
    rng = Rng(0)
    rng.state = int(ckpt.rng_state) & ((1 << 64) - 1)
    return rng


def restore_model(ckpt: Checkpoint) -> RegNet3d:
    """Model carrying exactly the checkpointed parameters and BN stats."""
    model = RegNet3d(ckpt.config, Rng(0))
    apply_checkpoint(ckpt, model, optimizer=None)
    return model


def restore_training_state(ckpt: Checkpoint):
    """(model, optimizer, rng) ready to continue from ckpt.epoch."""
    model = RegNet3d(ckpt.config, Rng(0))
    optimizer = make_optimizer(optimizer_config_from_checkpoint(ckpt), model.named_parameters())
    apply_checkpoint(ckpt, model, optimizer)
    return model, optimizer, rng_from_checkpoint(ckpt)
