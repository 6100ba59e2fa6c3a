"""Observations, the tilt family h(y, beta) and working functions g*(u)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit as _expit

from .errors import ConfigurationError, DataError, MissingOutcomeError


def expit(t):
    """Logistic function ``1 / (1 + exp(-t))``; saturates without overflow."""
    return _expit(t)


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    """One record (x, r, r*y).

    ``x`` is the full covariate vector; ``u_idx`` and ``z_idx`` pick out the
    part entering the propensity and the instrument.
    """

    x: tuple
    u_idx: tuple
    z_idx: tuple
    r: int
    _y: Optional[float] = field(default=None, repr=False)

    def __post_init__(self):
        if self.r not in (0, 1):
            raise DataError(f"r must be 0 or 1, got {self.r!r}")
        if (self.r == 1) != (self._y is not None):
            raise DataError("y must be present exactly when r = 1")
        _check_partition(self.u_idx, self.z_idx, len(self.x))

    @property
    def y(self) -> float:
        if self.r != 1:
            raise MissingOutcomeError("y is not observed for a record with r = 0")
        return self._y

    @property
    def u(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float)[list(self.u_idx)]

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float)[list(self.z_idx)]


def _check_partition(u_idx, z_idx, p):
    joined = sorted(list(u_idx) + list(z_idx))
    if joined != list(range(p)):
        raise ConfigurationError(
            f"u_idx {tuple(u_idx)} and z_idx {tuple(z_idx)} must partition 0..{p - 1}"
        )


class Sample:
    """Column-oriented collection of observations sharing one layout.

    ``y`` holds NaN wherever ``r == 0``. ``y_latent`` optionally keeps the
    unobserved outcomes of simulated data so the full-data mean can be
    computed; it is never consulted by the estimators.
    """

    def __init__(self, X, r, y, u_idx: Sequence[int], z_idx: Sequence[int], y_latent=None):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        r = np.asarray(r).astype(int)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        if r.shape != (n,) or y.shape != (n,):
            raise DataError("X, r and y must describe the same number of rows")
        if not np.isin(r, (0, 1)).all():
            raise DataError("r must be binary")
        if not np.isfinite(X).all():
            raise DataError("covariates must be finite and fully observed")
        if not np.isfinite(y[r == 1]).all():
            raise DataError("y must be finite wherever r = 1")
        _check_partition(u_idx, z_idx, p)
        y = np.where(r == 1, y, np.nan)
        self.X = _readonly(X)
        self.r = r.copy()
        self.r.setflags(write=False)
        self.y = _readonly(y)
        self.u_idx = tuple(int(i) for i in u_idx)
        self.z_idx = tuple(int(i) for i in z_idx)
        self.y_latent = None if y_latent is None else _readonly(y_latent)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> "Sample":
        if not observations:
            raise DataError("a sample needs at least one observation")
        first = observations[0]
        for ob in observations:
            if ob.u_idx != first.u_idx or ob.z_idx != first.z_idx or len(ob.x) != len(first.x):
                raise DataError("observations do not share one covariate layout")
        X = np.array([ob.x for ob in observations], dtype=float)
        r = np.array([ob.r for ob in observations])
        y = np.array([ob._y if ob.r == 1 else np.nan for ob in observations])
        return cls(X, r, y, first.u_idx, first.z_idx)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return len(self.u_idx)

    @property
    def U(self) -> np.ndarray:
        return self.X[:, self.u_idx]

    @property
    def Z(self) -> np.ndarray:
        return self.X[:, self.z_idx]

    @property
    def respondents(self) -> np.ndarray:
        return self.r == 1

    @property
    def y_filled(self) -> np.ndarray:
        """Outcomes with zeros in place of the unobserved entries."""
        return np.where(self.r == 1, self.y, 0.0)

    @property
    def observations(self) -> list:
        out = []
        for x, r, y in zip(self.X, self.r, self.y):
            out.append(Observation(tuple(x), self.u_idx, self.z_idx, int(r), float(y) if r == 1 else None))
        return out

    def take(self, idx) -> "Sample":
        idx = np.asarray(idx)
        latent = None if self.y_latent is None else self.y_latent[idx]
        return Sample(self.X[idx], self.r[idx], self.y[idx], self.u_idx, self.z_idx, latent)

    def check_estimable(self):
        n_resp = int(self.r.sum())
        if n_resp == 0 or n_resp == self.N:
            raise DataError(
                f"estimation needs respondents and nonrespondents; got {n_resp} of {self.N} observed"
            )

    def __len__(self):
        return self.N

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.u_idx == other.u_idx
            and self.z_idx == other.z_idx
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.y, other.y, equal_nan=True)
        )

    def __repr__(self):
        return f"Sample(N={self.N}, p={self.p}, q={self.q}, observed={int(self.r.sum())})"


@dataclass(frozen=True)
class HFamily:
    """The known tilt h(y, beta) and its gradient in beta.

    ``eval(y, beta)`` maps an array of outcomes to an array of the same shape;
    ``grad(y, beta)`` appends a trailing axis of length ``dim``.
    """

    kind: str
    eval: Callable
    grad: Callable
    dim: int

    @classmethod
    def linear(cls) -> "HFamily":
        return cls("linear", _linear_eval, _linear_grad, 1)

    @classmethod
    def custom(cls, eval: Callable, grad: Callable, dim: int) -> "HFamily":
        return cls("custom", eval, grad, int(dim))

    def check_gradient(self, probes_y, probes_beta, step=1e-6) -> float:
        """Largest relative error between ``grad`` and central differences."""
        worst = 0.0
        for y, beta in zip(probes_y, probes_beta):
            beta = np.atleast_1d(np.asarray(beta, dtype=float))
            g = np.asarray(self.grad(np.asarray(y, dtype=float), beta), dtype=float).reshape(-1)
            fd = np.empty(self.dim)
            for k in range(self.dim):
                e = np.zeros(self.dim)
                e[k] = step * max(1.0, abs(beta[k]))
                fd[k] = (self.eval(np.asarray(y), beta + e) - self.eval(np.asarray(y), beta - e)) / (2 * e[k])
            scale = np.maximum(np.abs(fd), 1e-8)
            worst = max(worst, float(np.max(np.abs(g - fd) / scale)))
        return worst


def _linear_eval(y, beta):
    return -np.asarray(beta, dtype=float).reshape(-1)[0] * np.asarray(y, dtype=float)


def _linear_grad(y, beta):
    return -np.asarray(y, dtype=float)[..., None]


def h_linear_eval_grad(y: float, beta: float):
    """Value and derivative of h(y, beta) = -beta * y."""
    return -beta * y, -y


@dataclass(frozen=True)
class GFunction:
    """Working or true g(u): affine, diagonal quadratic, or a callback.

    Evaluates ``const + sum_k linear[k] u_k + sum_k quad[k] u_k^2``.
    """

    kind: str
    const: float = 0.0
    linear: tuple = ()
    quad: tuple = ()
    func: Optional[Callable] = field(default=None, compare=False, repr=False)

    @classmethod
    def affine(cls, const, linear) -> "GFunction":
        return cls("affine", float(const), tuple(float(v) for v in np.atleast_1d(linear)))

    @classmethod
    def quadratic(cls, const, linear, quad) -> "GFunction":
        lin = tuple(float(v) for v in np.atleast_1d(linear))
        sq = tuple(float(v) for v in np.atleast_1d(quad))
        if len(lin) != len(sq):
            raise ConfigurationError("linear and squared coefficient lists differ in length")
        return cls("quadratic-diagonal", float(const), lin, sq)

    @classmethod
    def zero(cls, q: int) -> "GFunction":
        return cls.affine(0.0, [0.0] * q)

    @classmethod
    def custom(cls, func: Callable) -> "GFunction":
        return cls("custom", func=func)

    @property
    def q(self) -> Optional[int]:
        return None if self.kind == "custom" else len(self.linear)

    def __call__(self, U) -> np.ndarray:
        # 0-d or 1-d input is one point; 2-d input is a batch of rows
        U = np.asarray(U, dtype=float)
        if U.ndim == 0:
            U = U.reshape(1)
        single = U.ndim == 1
        U2 = U[None, :] if single else U
        if self.kind == "custom":
            out = np.asarray(self.func(U2), dtype=float).reshape(U2.shape[0])
        else:
            if U2.shape[-1] != len(self.linear):
                raise ConfigurationError(
                    f"g expects u of dimension {len(self.linear)}, got {U2.shape[-1]}"
                )
            out = self.const + U2 @ np.asarray(self.linear)
            if self.kind == "quadratic-diagonal":
                out = out + (U2 ** 2) @ np.asarray(self.quad)
        return out[0] if single else out

    def describe(self) -> str:
        if self.kind == "custom":
            return "custom"
        terms = [f"{self.const:g}"]
        for k, c in enumerate(self.linear):
            terms.append(f"{c:+g}*u{k + 1}")
        for k, c in enumerate(self.quad):
            terms.append(f"{c:+g}*u{k + 1}^2")
        return "".join(terms)


@dataclass(frozen=True)
class ModelSpec:
    h: HFamily
    g_star: GFunction

    def __post_init__(self):
        probe = np.asarray(self.h.grad(np.array([0.5]), np.zeros(self.h.dim)))
        if probe.shape[-1] != self.h.dim:
            raise ConfigurationError("h.grad returns a vector whose length differs from h.dim")

    @property
    def beta_dim(self) -> int:
        return self.h.dim


def propensity(y, u, beta, g: GFunction, h: HFamily):
    """P(R = 1 | y, u) = expit{h(y, beta) + g(u)}."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (h.dim,):
        raise ConfigurationError(f"beta has length {beta.size}, h expects {h.dim}")
    return expit(h.eval(np.asarray(y, dtype=float), beta) + g(u))
