"""Conditional expectations among respondents.

Three backends answer the same two kinds of query:

* inner moments given x, ``E{e^{-h(Y)} | x, R=1}``, ``E{e^{-2h(Y)} | x, R=1}``
  and ``E{e^{-h(Y)} h'(Y) | x, R=1}``, plus tilted means
  ``E{f(Y) e^{-h(Y)} | x, 1} / E{e^{-h(Y)} | x, 1}``;
* outer expectations of functions of x given u among respondents.

Kernel weights, fitted means and posterior weights do not depend on beta,
so ``inner_at`` and ``outer_rule`` precompute them once and the returned
objects are evaluated cheaply at every beta the solver visits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import ConfigurationError, DataError, DegenerateConditional, NotFitted
from .kernels import KernelSpec, smoother_matrix
from .model import HFamily, Sample

EXP_CLIP = 700.0
_GH_T, _GH_W = np.polynomial.hermite.hermgauss(64)
_GH_W = _GH_W / np.sqrt(np.pi)


def exp_neg(v):
    """``exp(-v)`` with the exponent clipped to +-700."""
    return np.exp(np.clip(-np.asarray(v, dtype=float), -EXP_CLIP, EXP_CLIP))


def saturated(v) -> bool:
    """True when some exponent lies beyond the +-700 clip."""
    return bool(np.any(np.abs(np.asarray(v)) > EXP_CLIP))


@dataclass(frozen=True)
class DeltaTriple:
    """``d1``, ``d2`` have shape (n,), ``d3`` has shape (n, d).

    ``clipped`` records that an exponent was clipped, so the values are
    not trustworthy.
    """

    d1: np.ndarray
    d2: np.ndarray
    d3: np.ndarray
    clipped: bool = False

    def __getitem__(self, i):
        return DeltaTriple(self.d1[i], self.d2[i], self.d3[i], self.clipped)


# --------------------------------------------------------------------------
# inner evaluators


class GaussianInner:
    """Moments under Y | x, R=1 ~ Normal(mean(x), sigma2)."""

    def __init__(self, X, mean, sigma2, h: HFamily):
        self.X = X
        self.mean = np.asarray(mean, dtype=float)
        self.sigma2 = float(sigma2)
        self.h = h

    def __call__(self, beta) -> DeltaTriple:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        m, s2 = self.mean, self.sigma2
        if self.h.kind == "linear":
            b = beta[0]
            a1, a2 = b * m + 0.5 * b * b * s2, 2 * b * m + 2 * b * b * s2
            d1 = np.exp(np.clip(a1, -EXP_CLIP, EXP_CLIP))
            d2 = np.exp(np.clip(a2, -EXP_CLIP, EXP_CLIP))
            d3 = (-(m + b * s2) * d1)[:, None]
            return DeltaTriple(d1, d2, d3, saturated(a2))
        Y = m[:, None] + np.sqrt(2 * s2) * _GH_T[None, :]
        hv = self.h.eval(Y, beta)
        e = exp_neg(hv)
        d1 = e @ _GH_W
        d2 = (e * e) @ _GH_W
        d3 = np.einsum("nk,nkd,k->nd", e, self.h.grad(Y, beta), _GH_W)
        return DeltaTriple(d1, d2, d3, saturated(2 * hv))

    def tilted(self, beta, fn: Callable) -> np.ndarray:
        """``E{f e^{-h}} / E{e^{-h}}``; ``fn(Xb, Y)`` sees ``Xb`` of shape (n, 1, p)."""
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        Xb = self.X[:, None, :]
        if self.h.kind == "linear":
            # exponential tilting of a normal law only shifts its mean
            Y = (self.mean + beta[0] * self.sigma2)[:, None] + np.sqrt(2 * self.sigma2) * _GH_T[None, :]
            vals = np.asarray(fn(Xb, Y), dtype=float)
            return np.einsum("k,nk...->n...", _GH_W, vals)
        Y = self.mean[:, None] + np.sqrt(2 * self.sigma2) * _GH_T[None, :]
        e = exp_neg(self.h.eval(Y, beta)) * _GH_W[None, :]
        vals = np.asarray(fn(Xb, Y), dtype=float)
        num = np.einsum("nk,nk...->n...", e, vals)
        den = e.sum(axis=1)
        return num / den.reshape((-1,) + (1,) * (num.ndim - 1))


class KernelInner:
    """Nadaraya-Watson moments over the respondents, smoothing in x."""

    def __init__(self, X, S, y_resp, h: HFamily):
        self.X = X
        self.S = S
        self.y_resp = y_resp
        self.h = h

    def __call__(self, beta) -> DeltaTriple:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        hv = self.h.eval(self.y_resp, beta)
        e = exp_neg(hv)
        grad = np.asarray(self.h.grad(self.y_resp, beta), dtype=float)
        return DeltaTriple(self.S @ e, self.S @ (e * e), self.S @ (e[:, None] * grad), saturated(2 * hv))

    def tilted(self, beta, fn: Callable) -> np.ndarray:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        e = exp_neg(self.h.eval(self.y_resp, beta))
        vals = np.asarray(fn(self.X[:, None, :], self.y_resp[None, :]), dtype=float)
        vals = np.broadcast_to(vals, (self.X.shape[0], self.y_resp.size) + vals.shape[2:])
        Se = self.S * e[None, :]
        num = np.einsum("nj,nj...->n...", Se, vals)
        den = Se.sum(axis=1)
        return num / den.reshape((-1,) + (1,) * (num.ndim - 1))


# --------------------------------------------------------------------------
# outer rules


class DenseRule:
    """Weighted averages over a shared node set: ``W @ values``."""

    def __init__(self, nodes, W):
        self.nodes = nodes
        self.W = W

    def apply(self, values):
        return self.W @ np.asarray(values, dtype=float)


class BlockRule:
    """Each query owns ``L`` nodes: query i uses nodes ``i*L .. i*L+L-1``."""

    def __init__(self, nodes, weights):
        self.nodes = nodes
        self.weights = weights

    def apply(self, values):
        n, L = self.weights.shape
        v = np.asarray(values, dtype=float).reshape((n, L) + np.shape(values)[1:])
        return np.einsum("nl,nl...->n...", self.weights, v)


def _assemble(U, Zcats, u_idx, z_idx):
    """All (u_i, z_l) combinations as full x rows, query-major."""
    n, L = U.shape[0], Zcats.shape[0]
    X = np.empty((n * L, len(u_idx) + len(z_idx)))
    X[:, list(u_idx)] = np.repeat(U, L, axis=0)
    X[:, list(z_idx)] = np.tile(Zcats, (n, 1))
    return X


def _normalise_posterior(P):
    tot = P.sum(axis=1, keepdims=True)
    if not (tot > 0).all() or not np.isfinite(tot).all():
        raise DegenerateConditional("posterior over instrument categories has no mass")
    return P / tot


# --------------------------------------------------------------------------
# providers


def _require_respondents(sample: Sample):
    if sample.r.sum() == 0:
        raise DataError("conditional moments among respondents need at least one respondent")


class TruthLaw(Protocol):
    """What the oracle backend needs to know about a data-generating design."""

    z_support: np.ndarray  # (L, p - q)
    z_probs: np.ndarray  # (L,)
    sigma2: float

    def mean(self, X) -> np.ndarray: ...

    def u_density(self, U, Z) -> np.ndarray: ...

    def response_prob(self, X) -> np.ndarray: ...


class MomentProvider:
    """Common interface; concrete backends override the three hooks."""

    kind = "abstract"

    def fit(self, sample: Sample) -> "MomentProvider":
        raise NotImplementedError

    def inner_at(self, X, h: HFamily):
        raise NotImplementedError

    def outer_rule(self, U):
        raise NotImplementedError

    @property
    def fitted(self) -> bool:
        return getattr(self, "_layout", None) is not None

    def _require_fit(self):
        if not self.fitted:
            raise NotFitted(f"{self.kind} provider used before fit()")
        return self._layout


class OracleProvider(MomentProvider):
    """Closed-form truth for a registered simulation design with discrete Z.

    The outer law of Z given (u, R=1) is proportional to
    ``P(z) f(u | z) P(R=1 | u, z)``, all taken from the true design.
    """

    kind = "oracle"

    def __init__(self, law: TruthLaw, _layout=None):
        self.law = law
        self._layout = _layout

    def fit(self, sample: Sample) -> "OracleProvider":
        return OracleProvider(self.law, (sample.u_idx, sample.z_idx))

    def inner_at(self, X, h: HFamily) -> GaussianInner:
        self._require_fit()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return GaussianInner(X, self.law.mean(X), self.law.sigma2, h)

    def outer_rule(self, U) -> BlockRule:
        u_idx, z_idx = self._require_fit()
        U = np.atleast_2d(np.asarray(U, dtype=float))
        Zc = np.asarray(self.law.z_support, dtype=float).reshape(len(self.law.z_probs), -1)
        nodes = _assemble(U, Zc, u_idx, z_idx)
        L = Zc.shape[0]
        prior = np.tile(np.asarray(self.law.z_probs, dtype=float), U.shape[0])
        P = prior * self.law.u_density(nodes[:, list(u_idx)], nodes[:, list(z_idx)])
        P = P * self.law.response_prob(nodes)
        return BlockRule(nodes, _normalise_posterior(P.reshape(-1, L)))


# ---- parametric backend ---------------------------------------------------


@dataclass(frozen=True)
class Basis:
    """Named regression basis ``fn(X, u_idx, z_idx) -> (n, k)``."""

    name: str
    fn: Callable

    def __call__(self, X, u_idx, z_idx):
        return self.fn(np.atleast_2d(X), u_idx, z_idx)


def _basis_linear(X, u_idx, z_idx):
    return np.column_stack([np.ones(len(X)), X])


def _basis_quadratic(X, u_idx, z_idx):
    return np.column_stack([np.ones(len(X)), X, X ** 2])


def _basis_sqdist(X, u_idx, z_idx):
    if len(z_idx) != 1:
        raise ConfigurationError("the sqdist basis needs exactly one instrument column")
    z = X[:, z_idx[0]]
    cols = [np.ones(len(X))] + [(X[:, k] - z) ** 2 for k in u_idx]
    return np.column_stack(cols)


BASES = {
    "linear": Basis("linear", _basis_linear),
    "quadratic": Basis("quadratic", _basis_quadratic),
    "sqdist": Basis("sqdist", _basis_sqdist),
}


def _poly_features(U, degree):
    n, q = U.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(q), deg):
            cols.append(np.prod(U[:, list(combo)], axis=1))
    return np.column_stack(cols)


def _softmax_probs(F, theta):
    # theta: (L-1, b); category 0 is the reference
    eta = np.column_stack([np.zeros(F.shape[0]), F @ theta.T])
    eta -= eta.max(axis=1, keepdims=True)
    P = np.exp(eta)
    return P / P.sum(axis=1, keepdims=True)


def _fit_mnlogit(F, labels, L, ridge=1e-6, max_iter=100):
    """Multinomial logit by damped Newton; returns (theta, total Hessian, scores)."""
    n, b = F.shape
    k = (L - 1) * b
    Yoh = np.eye(L)[labels][:, 1:]
    theta = np.zeros((L - 1, b))

    def nll(th):
        P = _softmax_probs(F, th)
        return -np.log(P[np.arange(n), labels] + 1e-300).sum() + ridge * (th ** 2).sum()

    def grad_hess(th):
        P = _softmax_probs(F, th)[:, 1:]
        resid = Yoh - P
        scores = (resid[:, :, None] * F[:, None, :]).reshape(n, k)
        g = -scores.sum(axis=0) + 2 * ridge * th.reshape(-1)
        H = np.zeros((k, k))
        for a_ in range(L - 1):
            for c_ in range(L - 1):
                wgt = P[:, a_] * ((a_ == c_) - P[:, c_])
                H[a_ * b:(a_ + 1) * b, c_ * b:(c_ + 1) * b] = (F * wgt[:, None]).T @ F
        H += 2 * ridge * np.eye(k)
        return g, H, scores

    f = nll(theta)
    for _ in range(max_iter):
        g, H, _ = grad_hess(theta)
        step = np.linalg.solve(H, g).reshape(L - 1, b)
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = nll(cand)
            if fc <= f:
                break
            t *= 0.5
        theta, f_old, f = cand, f, fc
        if np.max(np.abs(t * step)) < 1e-10 or abs(f_old - f) < 1e-12 * (1 + abs(f)):
            break
    g, H, scores = grad_hess(theta)
    return theta, H, scores


class ParametricProvider(MomentProvider):
    """Gaussian linear-in-basis law for Y | x, R=1 and a multinomial logit for Z | u, R=1.

    The parameter vector alpha stacks the mean coefficients, the residual
    variance and the logit coefficients (reference category first).
    """

    kind = "parametric"

    def __init__(self, mean_basis="sqdist", outer_degree: int = 3, _layout=None, _state=None):
        self.mean_basis = BASES[mean_basis] if isinstance(mean_basis, str) else mean_basis
        self.outer_degree = int(outer_degree)
        self._layout = _layout
        self._state = _state

    def _config(self):
        return dict(mean_basis=self.mean_basis, outer_degree=self.outer_degree)

    def fit(self, sample: Sample) -> "ParametricProvider":
        _require_respondents(sample)
        u_idx, z_idx = sample.u_idx, sample.z_idx
        resp = sample.respondents
        Xr, yr = sample.X[resp], sample.y[resp]
        B = self.mean_basis(Xr, u_idx, z_idx)
        coef, *_ = np.linalg.lstsq(B, yr, rcond=None)
        resid = yr - B @ coef
        sigma2 = float(np.mean(resid ** 2))

        Zc, labels_all = np.unique(sample.Z, axis=0, return_inverse=True)
        labels_all = np.asarray(labels_all).reshape(-1)
        if Zc.shape[0] > 20:
            raise ConfigurationError(
                "the parametric outer model needs a discrete instrument (at most 20 categories)"
            )
        if Zc.shape[0] < 2:
            raise ConfigurationError("the instrument takes a single value")
        Ur = sample.U[resp]
        centre, spread = Ur.mean(axis=0), Ur.std(axis=0)
        spread[spread == 0] = 1.0
        F = _poly_features((Ur - centre) / spread, self.outer_degree)
        theta, H, scores = _fit_mnlogit(F, labels_all[resp], Zc.shape[0])

        state = dict(
            coef=coef, sigma2=sigma2, theta=theta, Zc=Zc, centre=centre, spread=spread,
            n=sample.N, H=H, scores=scores, B=B, resid=resid, resp=resp,
        )
        return ParametricProvider(**self._config(), _layout=(u_idx, z_idx), _state=state)

    # alpha handling, used for the estimated-nuisance variance correction
    @property
    def alpha(self) -> np.ndarray:
        s = self._state
        if s is None:
            raise NotFitted("parametric provider used before fit()")
        return np.concatenate([s["coef"], [s["sigma2"]], s["theta"].reshape(-1)])

    def with_alpha(self, alpha) -> "ParametricProvider":
        s = dict(self._state)
        alpha = np.asarray(alpha, dtype=float)
        k = s["coef"].size
        s["coef"] = alpha[:k]
        s["sigma2"] = float(alpha[k])
        s["theta"] = alpha[k + 1:].reshape(s["theta"].shape)
        return ParametricProvider(**self._config(), _layout=self._layout, _state=s)

    def alpha_influence(self) -> np.ndarray:
        """Rows ``r_i * phi_alpha_i`` so that ``alpha_hat - alpha ~ mean(rows)``."""
        s = self._state
        if s is None:
            raise NotFitted("parametric provider used before fit()")
        n = s["n"]
        resp = s["resp"]
        B, e = s["B"], s["resid"]
        phi_mean = np.linalg.solve(B.T @ B / n, (B * e[:, None]).T).T
        phi_var = (e ** 2 - s["sigma2"]) / (resp.sum() / n)
        phi_logit = np.linalg.solve(s["H"] / n, s["scores"].T).T
        rows = np.column_stack([phi_mean, phi_var, phi_logit])
        out = np.zeros((n, rows.shape[1]))
        out[resp] = rows
        return out

    def inner_at(self, X, h: HFamily) -> GaussianInner:
        u_idx, z_idx = self._require_fit()
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s = self._state
        if s["sigma2"] <= 0:
            raise DegenerateConditional("fitted residual variance is not positive")
        return GaussianInner(X, self.mean_basis(X, u_idx, z_idx) @ s["coef"], s["sigma2"], h)

    def outer_rule(self, U) -> BlockRule:
        u_idx, z_idx = self._require_fit()
        s = self._state
        U = np.atleast_2d(np.asarray(U, dtype=float))
        F = _poly_features((U - s["centre"]) / s["spread"], self.outer_degree)
        P = _softmax_probs(F, s["theta"])
        return BlockRule(_assemble(U, s["Zc"], u_idx, z_idx), _normalise_posterior(P))


# ---- nonparametric backend ------------------------------------------------


class NonparametricProvider(MomentProvider):
    """Nadaraya-Watson smoothing over respondents.

    ``kernel_x`` smooths in the full covariate x (inner moments) and
    ``kernel_u`` in u (outer expectations); bandwidths follow each
    kernel's rule evaluated at the full sample size N.
    """

    kind = "nonparametric"

    def __init__(self, kernel_x: Optional[KernelSpec] = None, kernel_u: Optional[KernelSpec] = None,
                 _layout=None, _state=None):
        self.kernel_x = kernel_x or KernelSpec()
        self.kernel_u = kernel_u or self.kernel_x
        self._layout = _layout
        self._state = _state

    def fit(self, sample: Sample) -> "NonparametricProvider":
        _require_respondents(sample)
        resp = sample.respondents
        state = dict(
            X_all=sample.X, r_all=sample.r.astype(float), Xr=sample.X[resp], Ur=sample.U[resp],
            yr=sample.y[resp], bw_x=self.kernel_x.bandwidth(sample.N), bw_u=self.kernel_u.bandwidth(sample.N),
        )
        return NonparametricProvider(self.kernel_x, self.kernel_u, (sample.u_idx, sample.z_idx), state)

    @property
    def bandwidths(self):
        self._require_fit()
        return self._state["bw_x"], self._state["bw_u"]

    def inner_at(self, X, h: HFamily) -> KernelInner:
        self._require_fit()
        s = self._state
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return KernelInner(X, smoother_matrix(s["Xr"], X, self.kernel_x, s["bw_x"]), s["yr"], h)

    def outer_rule(self, U) -> DenseRule:
        self._require_fit()
        s = self._state
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return DenseRule(s["Xr"], smoother_matrix(s["Ur"], U, self.kernel_u, s["bw_u"]))

    def response_rate(self, X) -> np.ndarray:
        """Kernel regression of r on x over every observation."""
        self._require_fit()
        s = self._state
        S = smoother_matrix(s["X_all"], np.atleast_2d(X), self.kernel_x, s["bw_x"])
        return S @ s["r_all"]


# --------------------------------------------------------------------------
# single-point conveniences


def inner_moments(provider: MomentProvider, x, beta, h: Optional[HFamily] = None) -> DeltaTriple:
    """Delta-moments at one covariate vector."""
    h = h or HFamily.linear()
    return provider.inner_at(np.atleast_1d(np.asarray(x, dtype=float))[None, :], h)(beta)[0]


def outer_expect(provider: MomentProvider, u, integrand: Callable):
    """``E{integrand(X) | u, R=1}``; ``integrand`` maps an (n, p) array to (n,) or (n, k)."""
    rule = provider.outer_rule(np.atleast_1d(np.asarray(u, dtype=float))[None, :])
    return rule.apply(integrand(rule.nodes))[0]
