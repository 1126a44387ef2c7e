"""Dense tensor primitives and the deterministic RNG.

Tensors are plain C-contiguous (row-major) numpy arrays; this module owns
the contracts around them: explicit shapes, no implicit broadcasting, and
finite values after every public operation. Computation defaults to
float64; float32 is available where callers can afford it (gradient
checking cannot).
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import NonFiniteError, ShapeError

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64

_ELEMENTWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Materialize ``data`` as a row-major array of the engine dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return np.ones(shape, dtype=dtype)


def check_finite(t: Tensor, context: str = "") -> Tensor:
    """Raise NonFiniteError if ``t`` contains NaN or Inf; returns ``t``."""
    if not np.all(np.isfinite(t)):
        where = "" if not context else f" in {context}"
        raise NonFiniteError(f"non-finite values{where}")
    return t


def element_count(shape) -> int:
    n = 1
    for e in shape:
        if e < 0:
            raise ShapeError(f"negative extent in shape {tuple(shape)}")
        n *= int(e)
    return n


def reshape(t: Tensor, new_shape) -> Tensor:
    """Reinterpret the row-major element sequence of ``t`` under ``new_shape``."""
    new_shape = tuple(int(e) for e in new_shape)
    if element_count(new_shape) != t.size:
        raise ShapeError(
            f"cannot reshape {t.shape} ({t.size} elements) to {new_shape} "
            f"({element_count(new_shape)} elements)"
        )
    return np.ascontiguousarray(t).reshape(new_shape)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Apply ``op`` in {add, sub, mul, div} to identically shaped tensors."""
    if op not in _ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _ELEMENTWISE_OPS[op](a, b)
    return check_finite(out, f"elementwise {op}")


def broadcast_to(t: Tensor, shape) -> Tensor:
    """Explicitly broadcast ``t`` over trailing axes to ``shape``."""
    shape = tuple(int(e) for e in shape)
    try:
        return np.ascontiguousarray(np.broadcast_to(t, shape))
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}: {e}") from None


class Rng:
    """Counter-based deterministic random stream.

    Every draw call hashes (seed, stream path, call index) into a Philox
    key, so the value of a call depends only on those three things: the
    sizes of earlier draws never shift later ones, and results are
    identical across platforms. Child streams are split off by label and
    can never alias the parent (labels are length-prefixed into the hash).

    A stream is single-owner; share work across threads by splitting one
    labeled child per unit of work.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = (), calls: int = 0):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(str(p) for p in path)
        self.calls = int(calls)

    def split(self, label: str) -> "Rng":
        """Derive an independent child stream named ``label``."""
        return Rng(self.seed, self.path + (str(label),))

    def clone(self) -> "Rng":
        """Copy this stream, including its call counter."""
        return Rng(self.seed, self.path, self.calls)

    def state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "calls": self.calls}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], tuple(state["path"]), state["calls"])

    def _generator(self) -> np.random.Generator:
        h = hashlib.sha256()
        h.update(self.seed.to_bytes(8, "little"))
        for label in self.path:
            raw = label.encode("utf-8")
            h.update(len(raw).to_bytes(4, "little"))
            h.update(raw)
        h.update(b"#")
        h.update(self.calls.to_bytes(8, "little"))
        self.calls += 1
        key = int.from_bytes(h.digest()[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def uniform(self, shape=(), lo: float = 0.0, hi: float = 1.0) -> Tensor:
        """Draws in [lo, hi), float64."""
        if not lo < hi:
            raise ValueError(f"invalid range: lo={lo} must be < hi={hi}")
        u = self._generator().random(size=shape, dtype=np.float64)
        return lo + (hi - lo) * u

    def normal(self, shape=(), mean: float = 0.0, stddev: float = 1.0) -> Tensor:
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        z = self._generator().standard_normal(size=shape, dtype=np.float64)
        return mean + stddev * z

    def integers(self, n: int, size=()) -> Tensor:
        """Uniform integers in [0, n)."""
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        return self._generator().integers(0, n, size=size)

    def permutation(self, n: int) -> Tensor:
        return self._generator().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> Tensor:
        """Sample ``size`` indices from range(n)."""
        if not replace and size > n:
            raise ValueError(f"cannot draw {size} from {n} without replacement")
        return self._generator().choice(n, size=size, replace=replace)
