"""Loss, optimizer, the shard/streak training schedule, and checkpoints.

Training follows the shard regime: the patch pool is shuffled once,
split into ``shard_count`` contiguous shards of ``shard_size``, and each
shard is trained for ``epochs_per_shard`` epochs before moving to the
next; one pass over all shards is a streak. The sequential order is kept
as stated even though it is prone to catastrophic forgetting; an
interleaved alternative (round-robin shards per epoch) sits behind
``TrainSchedule.interleaved``.

Everything is deterministic: data order derives from
``TrainSchedule.shuffle_seed`` and dropout from the caller's Rng, both
through labeled child streams, so resuming from a checkpoint reproduces
the uninterrupted parameter trajectory bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import MAGIC_CHECKPOINT, read_container, write_container
from .errors import ConfigError, NonFiniteLossError, ShapeError, VersionError
from .model import Model, ModelConfig
from .tensor import DEFAULT_DTYPE, Rng

CHECKPOINT_VERSION = 1


def softmax(logits):
    """Row-wise softmax via the max-shift stable form."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over a batch of one-hot labels.

    Args:
        logits: [N, K] real scores.
        labels: [N, K] rows that are exactly one-hot.

    Returns:
        (loss, grad_logits) with grad_logits = (softmax - labels) / N,
        computed through log-sum-exp so huge logits cannot overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ShapeError(
            f"logits {logits.shape} and one-hot labels {labels.shape} "
            "must both be [N, K]"
        )
    onehot = np.isin(labels, (0.0, 1.0)).all(axis=1) & (labels.sum(axis=1) == 1.0)
    if not onehot.all():
        bad = int(np.flatnonzero(~onehot)[0])
        raise ValueError(f"label row {bad} is not one-hot: {labels[bad]}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    loss = -(labels * log_probs).sum() / n
    grad = (np.exp(log_probs) - labels) / n
    return loss, grad


class Adam:
    """Adam with bias correction; updates parameters in place.

    param -= lr * m_hat / (sqrt(v_hat) + eps) with the usual moment
    estimates m_hat = m/(1-b1^t), v_hat = v/(1-b2^t).
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params}
        self.v = {name: np.zeros_like(arr) for name, arr in params}

    def step(self, params, grads) -> None:
        """One update over [(name, param)] with grads[name] aligned."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params:
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} != param shape {p.shape} for {name}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_meta(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}

    @classmethod
    def from_state(cls, meta: dict, m: dict, v: dict) -> "Adam":
        opt = cls([], lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"],
                  eps=meta["eps"])
        opt.t = int(meta["t"])
        opt.m = m
        opt.v = v
        return opt


@dataclass(frozen=True)
class TrainSchedule:
    """Shard/streak plan; defaults are the full-scale regime."""

    shard_count: int = 5
    shard_size: int = 40000
    epochs_per_shard: int = 500
    streaks: int = 3
    batch_size: int = 50
    shuffle_seed: int = 0
    interleaved: bool = False

    def validate(self) -> None:
        for name in ("shard_count", "shard_size", "epochs_per_shard",
                     "streaks", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule field {name} must be positive")
        if self.shard_size % self.batch_size != 0:
            raise ConfigError(
                f"shard_size {self.shard_size} must be divisible by "
                f"batch_size {self.batch_size}"
            )

    @property
    def total_patches(self) -> int:
        return self.shard_count * self.shard_size

    @property
    def total_shard_epochs(self) -> int:
        return self.streaks * self.shard_count * self.epochs_per_shard

    @property
    def reported_epochs(self) -> int:
        # the "trained for N epochs" figure: streaks x epochs_per_shard
        return self.streaks * self.epochs_per_shard

    def positions(self):
        """Yield (streak, shard, epoch) in execution order."""
        for streak in range(self.streaks):
            if self.interleaved:
                for epoch in range(self.epochs_per_shard):
                    for shard in range(self.shard_count):
                        yield streak, shard, epoch
            else:
                for shard in range(self.shard_count):
                    for epoch in range(self.epochs_per_shard):
                        yield streak, shard, epoch

    def to_dict(self) -> dict:
        return {
            "shard_count": self.shard_count, "shard_size": self.shard_size,
            "epochs_per_shard": self.epochs_per_shard, "streaks": self.streaks,
            "batch_size": self.batch_size, "shuffle_seed": self.shuffle_seed,
            "interleaved": self.interleaved,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**d)


@dataclass
class Checkpoint:
    """Full training snapshot; round-trips bit-exactly through disk."""

    config: ModelConfig
    schedule: TrainSchedule
    model_state: dict
    adam_meta: dict
    adam_m: dict
    adam_v: dict
    position: tuple[int, int, int] | None  # last completed (streak, shard, epoch)
    rng_state: dict
    history: list  # rows of [streak, shard, epoch, loss, train_accuracy]
    dtype: str = "float64"
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> Model:
        model = Model(self.config, rng=Rng(0), dtype=np.dtype(self.dtype))
        model.load_state(self.model_state)
        return model

    def build_adam(self) -> Adam:
        return Adam.from_state(
            self.adam_meta,
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
        )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "adam": ckpt.adam_meta,
        "position": list(ckpt.position) if ckpt.position is not None else None,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "dtype": ckpt.dtype,
    }
    tensors = {}
    for name, arr in ckpt.model_state.items():
        tensors[f"model/{name}"] = arr
    for name, arr in ckpt.adam_m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in ckpt.adam_v.items():
        tensors[f"adam_v/{name}"] = arr
    write_container(path, MAGIC_CHECKPOINT, meta, tensors)


def load_checkpoint(path) -> Checkpoint:
    meta, tensors = read_container(path, MAGIC_CHECKPOINT)
    if meta["version"] > CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: checkpoint version {meta['version']} is newer than "
            f"supported version {CHECKPOINT_VERSION}"
        )
    groups = {"model": {}, "adam_m": {}, "adam_v": {}}
    for key, arr in tensors.items():
        group, _, name = key.partition("/")
        groups[group][name] = arr
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        schedule=TrainSchedule.from_dict(meta["schedule"]),
        model_state=groups["model"],
        adam_meta=meta["adam"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        position=tuple(meta["position"]) if meta["position"] is not None else None,
        rng_state=meta["rng_state"],
        history=meta["history"],
        dtype=meta["dtype"],
        version=meta["version"],
    )


@dataclass
class EpochEvent:
    """Yielded by ``train`` after every shard-epoch."""

    streak: int
    shard: int
    epoch: int
    loss: float
    train_accuracy: float
    checkpoint: Checkpoint


def _batch_pixels(pixels, dtype):
    """Patch pixels as floats in [0,1]; uint8 archives are scaled down."""
    if pixels.dtype == np.uint8:
        return pixels.astype(dtype) / 255.0
    return pixels.astype(dtype, copy=False)


def _accuracy(model, pixels, labels, indices, batch_size, dtype):
    correct = 0
    for start in range(0, len(indices), batch_size):
        idx = indices[start : start + batch_size]
        x = _batch_pixels(pixels[idx], dtype)
        logits = model.forward(x, training=False)
        pred = logits.argmax(axis=1)
        correct += int((pred == labels[idx].argmax(axis=1)).sum())
    return correct / len(indices)


def train(patches, config: ModelConfig, schedule: TrainSchedule, rng: Rng,
          dtype=DEFAULT_DTYPE, adam_kwargs=None, resume: Checkpoint | None = None):
    """Generator over shard-epochs; yields an EpochEvent after each.

    ``patches`` is a PatchSet (or anything with ``pixels``/``labels``
    arrays). The pool must hold at least shard_count * shard_size
    records; scale the schedule down explicitly for smaller pools.
    Aborts with NonFiniteLossError if the loss diverges.
    """
    schedule.validate()
    config.validate()
    needed = schedule.total_patches
    if len(patches.pixels) < needed:
        raise ConfigError(
            f"schedule needs {needed} patches "
            f"({schedule.shard_count} shards x {schedule.shard_size}) but the "
            f"set has {len(patches.pixels)}; scale the schedule down explicitly"
        )

    pixels = patches.pixels
    labels = np.asarray(patches.labels)

    order_root = Rng(schedule.shuffle_seed)
    global_order = order_root.split("shards").permutation(len(pixels))[:needed]
    shards = np.asarray(global_order).reshape(schedule.shard_count,
                                              schedule.shard_size)

    if resume is not None:
        if resume.config.to_dict() != config.to_dict():
            raise ConfigError("resume checkpoint has a different model config")
        if resume.schedule.to_dict() != schedule.to_dict():
            raise ConfigError("resume checkpoint has a different schedule")
        model = resume.build_model()
        adam = resume.build_adam()
        rng = Rng.from_state(resume.rng_state)
        history = [list(row) for row in resume.history]
        done_after = resume.position
    else:
        model = Model(config, rng=rng.split("init"), dtype=dtype)
        adam = Adam(model.param_items(), **(adam_kwargs or {}))
        history = []
        done_after = None

    train_rng = rng  # root stream; per-epoch children are label-derived
    dtype = model.dtype
    batches_per_epoch = schedule.shard_size // schedule.batch_size

    skipping = done_after is not None
    for streak, shard_i, epoch in schedule.positions():
        if skipping:
            if (streak, shard_i, epoch) == done_after:
                skipping = False
            continue

        shard_idx = shards[shard_i]
        ep_label = f"streak{streak}/shard{shard_i}/epoch{epoch}"
        drop_rng = train_rng.split(ep_label).split("dropout")
        perm = order_root.split(f"order/{ep_label}").permutation(
            schedule.shard_size
        )
        loss_sum = 0.0
        for b in range(batches_per_epoch):
            take = perm[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            idx = shard_idx[take]
            x = _batch_pixels(pixels[idx], dtype)
            y = labels[idx]
            logits = model.forward(x, training=True, rng=drop_rng)
            loss, grad = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NonFiniteLossError(streak, shard_i, epoch, b, loss)
            model.backward(grad)
            adam.step(model.param_items(), dict(model.grad_items()))
            loss_sum += loss

        mean_loss = loss_sum / batches_per_epoch
        accuracy = _accuracy(model, pixels, labels, shard_idx,
                             schedule.batch_size, dtype)
        history.append([streak, shard_i, epoch, float(mean_loss), float(accuracy)])

        ckpt = Checkpoint(
            config=config,
            schedule=schedule,
            model_state={k: v.copy() for k, v in model.state_items()},
            adam_meta=adam.state_meta(),
            adam_m={k: v.copy() for k, v in adam.m.items()},
            adam_v={k: v.copy() for k, v in adam.v.items()},
            position=(streak, shard_i, epoch),
            rng_state=train_rng.state(),
            history=[list(row) for row in history],
            dtype=str(np.dtype(dtype)),
        )
        yield EpochEvent(streak, shard_i, epoch, float(mean_loss),
                         float(accuracy), ckpt)
