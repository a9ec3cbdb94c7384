"""Deterministic numeric kernels: seeded Gaussian streams, norms, ball
projections, and value clamping.

Everything here is pure except :class:`RngStream` advancement, and an
RngStream's output is a pure function of ``(master_seed, stream_id)``.
Derived streams let parallel experiments stay schedule-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_MASK64 = (1 << 64) - 1


def mix64(*parts: int) -> int:
    """Fold integers into a single 64-bit value (splitmix64 finalizer chain).

    Used to derive child stream ids; distinct argument tuples map to
    distinct-looking ids with avalanche behaviour.
    """
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = (acc + (p & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        acc ^= acc >> 30
        acc = (acc * 0xBF58476D1CE4E5B9) & _MASK64
        acc ^= acc >> 27
        acc = (acc * 0x94D049BB133111EB) & _MASK64
        acc ^= acc >> 31
    return acc


class RngStream:
    """Counter-based random source identified by (master_seed, stream_id).

    The Philox generator underneath is splittable: streams with distinct
    ids derived from the same master seed are statistically independent.
    ``counter`` tracks how many scalars have been drawn; it exists so a
    run can be audited, not to index into the stream.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = 0
        seq = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_id,)
        )
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "RngStream":
        """Derive an independent stream from this stream's id and ``key``."""
        return RngStream(self.master_seed, mix64(self.stream_id, *key))

    def _count(self, size) -> int:
        if size is None:
            return 1
        if isinstance(size, int):
            return size
        n = 1
        for s in size:
            n *= s
        return n

    def normal(self, size=None):
        """Standard-normal draws; scalar when ``size`` is None."""
        self.counter += self._count(size)
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += self._count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.counter += self._count(size)
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    def rademacher(self, size=None):
        """Uniform ±1 draws."""
        self.counter += self._count(size)
        return self._gen.integers(0, 2, size) * 2 - 1

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"RngStream(master_seed={self.master_seed}, "
            f"stream_id={self.stream_id}, counter={self.counter})"
        )


class Norm(str, Enum):
    L2 = "L2"
    LINF = "LINF"


@dataclass(frozen=True)
class Vector:
    """A flattened input point with optional image-shape metadata.

    ``values`` is a read-only float64 1-D array; ``shape`` is an optional
    (height, width, channels) triple whose product must equal the length.
    """

    values: np.ndarray
    shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if arr.size == 0:
            raise ValueError("Vector must have positive dimension")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        if self.shape is not None:
            h, w, c = self.shape
            if h * w * c != arr.size:
                raise ValueError(
                    f"shape {self.shape} does not match dimension {arr.size}"
                )
            object.__setattr__(self, "shape", (int(h), int(w), int(c)))

    @property
    def d(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "Vector":
        """Same metadata, new coordinates."""
        return Vector(values, self.shape)


@dataclass(frozen=True)
class NormBall:
    """An lp ball around a benign example."""

    center: Vector
    radius: float
    kind: Norm

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def contains(self, x: Vector, tol: float = 1e-9) -> bool:
        return norm_array(x.values - self.center.values, self.kind) <= self.radius + tol


def sample_gaussian(rng: RngStream, d: int) -> Vector:
    """d independent standard-normal draws from ``rng``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return Vector(rng.normal(d))


def norm_array(x: np.ndarray, kind: Norm) -> float:
    if kind == Norm.L2:
        return float(np.linalg.norm(x))
    return float(np.max(np.abs(x))) if x.size else 0.0


def norm(x: Vector, kind: Norm) -> float:
    """Standard l2 or l-infinity norm."""
    return norm_array(x.values, kind)


def project_array(
    center: np.ndarray, radius: float, kind: Norm, x: np.ndarray
) -> np.ndarray:
    """Nearest point of the ball to ``x`` in the ball's norm.

    L2 uses radial scaling (a no-op at the center), LINF a per-coordinate
    clamp. Idempotent; points already inside come back unchanged.
    """
    if x.shape != center.shape:
        raise ValueError(
            f"dimension mismatch: point has {x.shape}, ball center {center.shape}"
        )
    delta = x - center
    if kind == Norm.LINF:
        return center + np.clip(delta, -radius, radius)
    dist = np.linalg.norm(delta)
    if dist <= radius:
        return x
    return center + delta * (radius / dist)


def project(ball: NormBall, x: Vector) -> Vector:
    return x.with_values(project_array(ball.center.values, ball.radius, ball.kind, x.values))


def clamp01_array(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def clamp01(x: Vector) -> Vector:
    """Map every coordinate into the valid [0, 1] range."""
    return x.with_values(clamp01_array(x.values))


def feasible_array(
    center: np.ndarray, radius: float, kind: Norm, x: np.ndarray
) -> np.ndarray:
    """Project onto the ball, then clamp to [0, 1].

    Clamping last can move a point slightly interior to the ball; the ball
    constraint stays satisfied because clamping shrinks per-coordinate
    deviations when the center itself lies in [0, 1]^d.
    """
    return clamp01_array(project_array(center, radius, kind, x))


def feasible(ball: NormBall, x: Vector) -> Vector:
    return x.with_values(feasible_array(ball.center.values, ball.radius, ball.kind, x.values))


def unit_diagonal(d: int, rng: RngStream) -> np.ndarray:
    """A unit vector with all coordinates of equal magnitude and random signs."""
    return rng.rademacher(d).astype(np.float64) / math.sqrt(d)
