"""Dense float32 tensors and the deterministic PRNG they are seeded from.

The engine stores everything as row-major (C-order) 32-bit floats and
accumulates reductions in 64-bit, which keeps memory realistic while
letting gradient checks pass at tight tolerances.  Randomness comes from
a fixed SplitMix64 sequence so that a seed reproduces bit-identical
results on every platform.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError, SizeError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Largest element count a tensor may hold (buffer bytes must stay addressable).
_MAX_ELEMENTS = np.iinfo(np.intp).max // 4


def _mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed, giving independent child streams.

    Used to give every (epoch, sample) its own augmentation stream so that
    parallel and serial data loading draw identical numbers.
    """
    h = seed & _MASK64
    for k in keys:
        h = _mix64((h + _GOLDEN) & _MASK64) ^ _mix64((k + _GOLDEN) & _MASK64)
    return h


class Rng:
    """SplitMix64 generator: output i is mix64(seed + (i+1)*golden).

    The counter-based form makes bulk generation (`next_u64s`) produce the
    exact same sequence as repeated scalar calls.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def next_u64s(self, count: int) -> np.ndarray:
        """Vectorized draw of `count` u64 values, identical to scalar calls."""
        with np.errstate(over="ignore"):
            idx = np.arange(1, count + 1, dtype=np.uint64)
            states = np.uint64(self.state) + idx * np.uint64(_GOLDEN)
            z = (states ^ (states >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * _GOLDEN) & _MASK64
        return z

    def next_float(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def floats(self, count: int) -> np.ndarray:
        return (self.next_u64s(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n).  Modulo bias is < n / 2**64."""
        if n < 1:
            raise ValueError(f"next_below needs n >= 1, got {n}")
        return self.next_u64() % n

    def normals(self, count: int) -> np.ndarray:
        """Standard normal draws via Box-Muller over consecutive u64 pairs.

        Consumes 2*ceil(count/2) raw values; u1 is shifted into (0, 1] so
        the log never sees zero.
        """
        pairs = (count + 1) // 2
        raw = self.next_u64s(2 * pairs)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def derive(self, *keys: int) -> "Rng":
        """Child generator keyed off the current state; does not advance it."""
        return Rng(derive_seed(self.state, *keys))


def _checked_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(e) for e in shape)
    if any(e < 0 for e in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    total = 1
    for e in shape:
        total *= e
        if total > _MAX_ELEMENTS:
            raise SizeError(f"shape {shape} exceeds addressable size")
    return shape


class Tensor:
    """Row-major float32 array with an optional same-shape gradient buffer.

    `data` is a C-contiguous ndarray; `data.ravel()` is the flat buffer with
    the last axis fastest.  The empty shape () is a scalar of length 1.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: np.ndarray | None = None):
        # note: not ascontiguousarray, which would promote 0-d to 1-d
        self.data = np.array(data, dtype=np.float32, order="C", copy=None)
        if grad is not None:
            grad = np.array(grad, dtype=np.float32, order="C", copy=None)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"grad shape {grad.shape} != data shape {self.data.shape}"
                )
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def flatten(self) -> "Tensor":
        return Tensor(self.data.reshape(-1).copy())

    def reshape(self, shape) -> "Tensor":
        shape = _checked_shape(shape)
        total = 1
        for e in shape:
            total *= e
        if total != self.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(self.data.reshape(shape).copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(_checked_shape(shape), dtype=np.float32))


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(_checked_shape(shape), value, dtype=np.float32))


def he_normal_init(shape, fan_in: int, rng: Rng) -> Tensor:
    """I.i.d. normal samples with mean 0 and variance 2/fan_in."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    shape = _checked_shape(shape)
    count = 1
    for e in shape:
        count *= e
    std = math.sqrt(2.0 / fan_in)
    samples = rng.normals(count) * std
    return Tensor(samples.reshape(shape).astype(np.float32))


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return Tensor(a.data + b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return Tensor(a.data * b.data)


def scale(a: Tensor, alpha: float) -> Tensor:
    return Tensor(a.data * np.float32(alpha))


def _axes(t: Tensor, axes) -> tuple[int, ...] | None:
    if axes is None:
        return None
    axes = tuple(sorted(int(a) for a in axes))
    for a in axes:
        if not 0 <= a < t.data.ndim:
            raise ShapeError(f"axis {a} out of range for shape {t.shape}")
    return axes


def reduce_sum(t: Tensor, axes=None) -> Tensor:
    """Sum over the given axes (all axes when None); 64-bit accumulation."""
    out = np.sum(t.data, axis=_axes(t, axes), dtype=np.float64)
    return Tensor(np.asarray(out, dtype=np.float32))


def reduce_mean(t: Tensor, axes=None) -> Tensor:
    """Mean over the given axes (all axes when None); 64-bit accumulation."""
    out = np.mean(t.data, axis=_axes(t, axes), dtype=np.float64)
    return Tensor(np.asarray(out, dtype=np.float32))
