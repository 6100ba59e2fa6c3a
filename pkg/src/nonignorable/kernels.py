"""Univariate kernels, product kernels and Nadaraya-Watson smoothing."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError, EmptyNeighborhood

# (a + b t^2) * triweight(t), with a, b fixed by int K = 1 and int t^2 K = 0.
# Triweight moments are 1/9 (second) and 1/33 (fourth).
TRIWEIGHT4_A = 27.0 / 16.0
TRIWEIGHT4_B = -99.0 / 16.0

_ORDERS = {"gaussian": 2, "triweight": 2, "triweight4": 4}


def gaussian(t):
    return np.exp(-0.5 * t * t) / np.sqrt(2.0 * np.pi)


def triweight(t):
    s = np.clip(1.0 - t * t, 0.0, None)
    return (35.0 / 32.0) * s ** 3


def triweight4(t):
    return (TRIWEIGHT4_A + TRIWEIGHT4_B * t * t) * triweight(t)


KERNELS = {"gaussian": gaussian, "triweight": triweight, "triweight4": triweight4}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus the bandwidth rule ``scale * n ** -exponent``."""

    family: str = "gaussian"
    scale: float = 1.5
    exponent: float = 1.0 / 3.0

    def __post_init__(self):
        if self.family not in KERNELS:
            raise ConfigurationError(
                f"unknown kernel family {self.family!r}; choose from {sorted(KERNELS)}"
            )
        if not self.scale > 0:
            raise ConfigurationError(f"bandwidth scale must be positive, got {self.scale}")
        if not self.exponent > 0:
            raise ConfigurationError(f"bandwidth exponent must be positive, got {self.exponent}")

    @property
    def order(self) -> int:
        return _ORDERS[self.family]

    @property
    def nonnegative(self) -> bool:
        return self.order == 2

    def bandwidth(self, n: int) -> float:
        return self.scale * float(n) ** (-self.exponent)

    def __call__(self, t):
        return KERNELS[self.family](np.asarray(t, dtype=float))

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Read ``family[:scale[:exponent]]``, e.g. ``triweight4:1.0:1/6``."""
        parts = [p.strip() for p in text.split(":")]
        if not parts[0] or len(parts) > 3:
            raise ConfigurationError(f"malformed kernel spec {text!r}")
        try:
            scale = float(parts[1]) if len(parts) > 1 else 1.5
            exponent = float(Fraction(parts[2])) if len(parts) > 2 else 1.0 / 3.0
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"malformed number in kernel spec {text!r}") from exc
        return cls(parts[0], scale, exponent)

    def describe(self) -> str:
        return f"{self.family}:{self.scale:g}:{self.exponent:.6g}"


def product_weights(points, queries, kernel: KernelSpec, bandwidth: float) -> np.ndarray:
    """Unnormalised product-kernel weights, shape ``(n_queries, n_points)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if points.shape[1] != queries.shape[1]:
        raise ConfigurationError("points and queries differ in dimension")
    if kernel.family == "gaussian":
        # one exp instead of a product of exps
        d2 = np.zeros((queries.shape[0], points.shape[0]))
        for j in range(points.shape[1]):
            d2 += ((queries[:, j, None] - points[None, :, j]) / bandwidth) ** 2
        return np.exp(-0.5 * d2)
    W = np.ones((queries.shape[0], points.shape[0]))
    for j in range(points.shape[1]):
        W *= kernel((queries[:, j, None] - points[None, :, j]) / bandwidth)
    return W


def smoother_matrix(points, queries, kernel: KernelSpec, bandwidth: float) -> np.ndarray:
    """Row-normalised Nadaraya-Watson weights; raises on empty neighbourhoods."""
    W = product_weights(points, queries, kernel, bandwidth)
    tot = W.sum(axis=1)
    bad = ~(np.abs(tot) > 1e-300)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EmptyNeighborhood(
            f"no kernel mass at query {np.atleast_2d(queries)[i].tolist()} "
            f"(bandwidth {bandwidth:.4g}, {kernel.family})"
        )
    return W / tot[:, None]


def nw_regress(targets, points, query, kernel: KernelSpec, bandwidth: float):
    """Nadaraya-Watson estimate at a single query point.

    ``targets`` may be a vector (one value per point) or a matrix whose rows
    are per-point target vectors.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    query = np.atleast_1d(np.asarray(query, dtype=float))[None, :]
    S = smoother_matrix(points, query, kernel, bandwidth)
    return (S @ np.asarray(targets, dtype=float))[0]
