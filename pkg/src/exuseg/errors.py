"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A public operation produced NaN or Inf."""


class ConfigError(ValueError):
    """A model / schedule / run configuration violates its invariants."""


class ContainerError(ValueError):
    """A binary archive is corrupt, truncated, or has a bad magic."""


class VersionError(ContainerError):
    """A binary archive was written by an unsupported format version."""


class DecodeError(ValueError):
    """An image file could not be decoded."""


class LayerError(RuntimeError):
    """A layer failed inside a model forward/backward pass.

    Carries ``layer_index`` so failures inside a stack are attributable.
    """

    def __init__(self, layer_index, kind, original):
        self.layer_index = layer_index
        self.kind = kind
        self.original = original
        super().__init__(f"layer {layer_index} ({kind}): {original}")


class NonFiniteLossError(NonFiniteError):
    """Training hit a non-finite loss; carries the offending position."""

    def __init__(self, streak, shard, epoch, batch, loss):
        self.streak = streak
        self.shard = shard
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite loss {loss!r} at streak={streak} shard={shard} "
            f"epoch={epoch} batch={batch}"
        )
