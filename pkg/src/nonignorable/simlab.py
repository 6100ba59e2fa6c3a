"""Simulation designs, benchmark estimators and Monte Carlo summaries."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NonignorableError, OracleUnavailable
from .estimator import (
    SolverOptions,
    bootstrap_se,
    estimate_theta_mean,
    solve_beta,
    theta_mean_pipeline,
)
from .kernels import KernelSpec
from .model import GFunction, HFamily, ModelSpec, Sample, expit
from .moments import MomentProvider, NonparametricProvider, OracleProvider, ParametricProvider
from .score import ScoreContext

log = logging.getLogger(__name__)

Z_QUANTILE = 1.959963984540054
_GH_T, _GH_W = np.polynomial.hermite.hermgauss(64)


# --------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class Design:
    """A registered data-generating process.

    Covariates are ``x = (u_1, .., u_q, z)`` with Z discrete and
    ``U_k | Z = z ~ N(z, 1)`` independently. Among respondents
    ``Y | x ~ N(sum_k (u_k - z)^2, sigma2)``, and
    ``P(R = 1 | y, u) = expit(-beta y + g(u))``.
    """

    id: str
    beta: float
    g: GFunction
    q: int
    z_support: np.ndarray
    z_probs: np.ndarray
    gstar_misspecified: tuple
    kernel_beta: KernelSpec
    kernel_theta: KernelSpec
    sigma2: float = 1.0

    @property
    def u_idx(self) -> tuple:
        return tuple(range(self.q))

    @property
    def z_idx(self) -> tuple:
        return (self.q,)

    @property
    def h(self) -> HFamily:
        return HFamily.linear()

    @property
    def gstar(self) -> GFunction:
        """Default wrong working model for this design."""
        return self.gstar_misspecified[0]

    def spec(self, gstar: Optional[GFunction] = None) -> ModelSpec:
        return ModelSpec(self.h, self.gstar if gstar is None else gstar)

    # -- TruthLaw interface used by the oracle provider
    def mean(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        z = X[:, self.q]
        return ((X[:, : self.q] - z[:, None]) ** 2).sum(axis=1)

    def u_density(self, U, Z) -> np.ndarray:
        d = np.atleast_2d(U) - np.atleast_2d(Z)[:, :1]
        return np.exp(-0.5 * (d ** 2).sum(axis=1)) / (2 * np.pi) ** (self.q / 2)

    def _tilt_weight(self, X) -> np.ndarray:
        # e^{-g(u)} E{e^{beta Y} | x, R=1}
        X = np.atleast_2d(X)
        b, s2 = self.beta, self.sigma2
        return np.exp(-self.g(X[:, : self.q]) + b * self.mean(X) + 0.5 * b * b * s2)

    def response_prob(self, X) -> np.ndarray:
        """P(R = 1 | x) implied by the respondent law and the propensity."""
        return 1.0 / (1.0 + self._tilt_weight(X))

    def propensity(self, y, U) -> np.ndarray:
        return expit(-self.beta * np.asarray(y) + self.g(U))

    def theta_true(self) -> float:
        """E(Y) by Gauss-Hermite quadrature over U for each value of Z."""
        nodes = np.sqrt(2.0) * _GH_T
        w = _GH_W / np.sqrt(np.pi)
        grid = np.array(list(itertools.product(range(_GH_T.size), repeat=self.q)))
        wt = np.prod(w[grid], axis=1)
        total = 0.0
        for z, pz in zip(np.ravel(self.z_support), self.z_probs):
            X = np.column_stack([z + nodes[grid], np.full(len(grid), z)])
            m = self.mean(X)
            t = self._tilt_weight(X)
            ey = (m + t * (m + self.beta * self.sigma2)) / (1.0 + t)
            total += pz * float(wt @ ey)
        return total


def _design_a():
    return Design(
        "A", -0.2, GFunction.affine(-0.4, [0.3]), 1,
        np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]),
        (GFunction.affine(0.0, [-0.4]), GFunction.zero(1), GFunction.quadratic(0.5, [0.0], [0.2])),
        KernelSpec("gaussian", 1.5, 1 / 3), KernelSpec("gaussian", 1.5, 1 / 3),
    )


def _design_b1():
    return Design(
        "B1", -0.1, GFunction.quadratic(-0.2, [0.0], [0.3]), 1,
        np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]),
        (GFunction.affine(0.0, [-0.4]), GFunction.zero(1), GFunction.affine(0.3, [-0.5])),
        KernelSpec("gaussian", 1.5, 1 / 3), KernelSpec("gaussian", 1.5, 1 / 3),
    )


def _design_b2():
    return Design(
        "B2", -0.1, GFunction.quadratic(-0.8, [0.0, 0.0], [0.2, 0.2]), 2,
        np.array([[1.0], [2.0]]), np.array([0.5, 0.5]),
        (
            GFunction.affine(0.0, [-0.4, -0.6]),
            GFunction.zero(2),
            GFunction.quadratic(0.2, [0.0, -0.3], [0.1, 0.0]),
        ),
        KernelSpec("triweight4", 1.0, 1 / 6), KernelSpec("gaussian", 1.0, 1 / 3),
    )


DESIGNS = {"A": _design_a(), "B1": _design_b1(), "B2": _design_b2()}


def get_design(name: str) -> Design:
    try:
        return DESIGNS[name.upper()]
    except KeyError:
        raise ConfigurationError(f"unknown design {name!r}; choose from {sorted(DESIGNS)}") from None


# --------------------------------------------------------------------------
# data generation


def generate(design: Design, N: int, seed, mode: str = "consistent") -> Sample:
    """Draw one sample; the latent outcomes are kept in ``y_latent``.

    In the default ``"consistent"`` mode Y is drawn from the full-population
    law that makes ``Y | x, R=1`` exactly the registered respondent law:
    a two-component normal mixture with the tilted component
    ``N(m + beta sigma2, sigma2)`` weighted by ``e^{-g(u)} E(e^{beta Y} | x, 1)``.
    ``"literal"`` draws Y from the respondent law itself, then R.
    """
    if N < 2:
        raise ConfigurationError("N must be at least 2")
    if mode not in ("consistent", "literal"):
        raise ConfigurationError(f"unknown generation mode {mode!r}")
    rng = np.random.default_rng(seed)
    L = len(design.z_probs)
    z = np.asarray(design.z_support)[rng.choice(L, size=N, p=design.z_probs), 0]
    U = z[:, None] + rng.standard_normal((N, design.q))
    X = np.column_stack([U, z])
    m = design.mean(X)
    eps = rng.standard_normal(N) * np.sqrt(design.sigma2)
    flip = rng.random(N)
    y = m + eps
    if mode == "consistent":
        t = design._tilt_weight(X)
        y = y + design.beta * design.sigma2 * (flip < t / (1.0 + t))
    r = (rng.random(N) < design.propensity(y, U)).astype(int)
    return Sample(X, r, np.where(r == 1, y, np.nan), design.u_idx, design.z_idx, y_latent=y)


# --------------------------------------------------------------------------
# benchmark estimators


def naive_estimator(sample: Sample) -> float:
    """Respondent mean."""
    if sample.r.sum() == 0:
        raise DataError("the naive estimator needs at least one respondent")
    return float(np.mean(sample.y[sample.respondents]))


def oracle_estimator(sample: Sample) -> float:
    """Full-data mean including the latent outcomes."""
    if sample.y_latent is None:
        raise OracleUnavailable("latent outcomes are only available for simulated samples")
    return float(np.mean(sample.y_latent))


# --------------------------------------------------------------------------
# estimator roster (picklable callables returning (estimate, se))


@dataclass(frozen=True)
class NaiveEstimator:
    label: str = "naive"
    target: str = "theta"

    def __call__(self, sample, seed=None):
        y = sample.y[sample.respondents]
        return naive_estimator(sample), float(np.std(y, ddof=1) / np.sqrt(y.size))


@dataclass(frozen=True)
class OracleMeanEstimator:
    label: str = "oracle"
    target: str = "theta"

    def __call__(self, sample, seed=None):
        y = sample.y_latent
        return oracle_estimator(sample), (None if y is None else float(np.std(y, ddof=1) / np.sqrt(y.size)))


@dataclass(frozen=True)
class BetaEstimator:
    """Solve for beta; optionally inject the true exp(-g) into the correction."""

    label: str
    spec: ModelSpec
    provider: MomentProvider
    opts: SolverOptions = field(default_factory=SolverOptions)
    correct: bool = True
    true_g: Optional[GFunction] = None
    target: str = "beta"

    def __call__(self, sample, seed=None):
        g_exp = None if self.true_g is None else np.exp(-self.true_g(sample.U))
        fit = solve_beta(sample, self.spec, self.provider, self.opts, g_exp=g_exp, correct=self.correct)
        return float(fit.beta[0]), float(fit.se[0])


@dataclass(frozen=True)
class ThetaEstimator:
    """Outcome mean with tilted imputation; SE by influence rows or bootstrap."""

    label: str
    spec: ModelSpec
    provider: MomentProvider
    theta_provider: Optional[MomentProvider] = None
    opts: SolverOptions = field(default_factory=SolverOptions)
    se_method: str = "influence"
    bootstrap: int = 200
    target: str = "theta"

    def __post_init__(self):
        if self.se_method not in ("influence", "bootstrap"):
            raise ConfigurationError(f"unknown SE method {self.se_method!r}")

    def __call__(self, sample, seed=None):
        tp = self.theta_provider or self.provider
        need_influence = self.se_method == "influence"
        bfit = solve_beta(sample, self.spec, self.provider, self.opts, sandwich=need_influence)
        tfit = estimate_theta_mean(sample, bfit, tp, h=self.spec.h, variance=need_influence)
        if need_influence:
            return float(tfit.theta[0]), float(tfit.se[0])
        closure = theta_mean_pipeline(self.spec, self.provider, tp, self.opts)
        se = bootstrap_se(sample, closure, self.bootstrap, seed)
        return float(tfit.theta[0]), float(se[0])


def make_provider(kind: str, design: Design, stage: str = "beta") -> MomentProvider:
    """Provider of the requested kind with the design's default kernels."""
    if kind == "oracle":
        return OracleProvider(design)
    if kind == "parametric":
        return ParametricProvider("sqdist")
    if kind == "nonparametric":
        k = design.kernel_beta if stage == "beta" else design.kernel_theta
        return NonparametricProvider(k)
    raise ConfigurationError(f"unknown provider {kind!r}; choose oracle, parametric or nonparametric")


def default_roster(design: Design, provider: str = "oracle", gstar: Optional[GFunction] = None,
                   kernel: Optional[KernelSpec] = None) -> list:
    """Benchmarks plus the beta and theta estimators under one working model."""
    gstar = design.gstar if gstar is None else gstar
    spec = design.spec(gstar)
    pb = make_provider(provider, design, "beta")
    pt = make_provider(provider, design, "theta")
    if kernel is not None and provider == "nonparametric":
        pb = pt = NonparametricProvider(kernel)
    return [
        NaiveEstimator(),
        OracleMeanEstimator(),
        BetaEstimator(f"beta[{provider}]", spec, pb),
        ThetaEstimator(f"theta[{provider}]", spec, pb, pt),
    ]


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsRow:
    """Monte Carlo summary of one estimator; raw scale, with x100 views."""

    label: str
    target: str
    truth: float
    bias: float
    sd: float
    rmse: float
    se: Optional[float]
    cvp: Optional[float]
    n_replicates: int
    n_failures: int

    @property
    def bias_x100(self):
        return 100 * self.bias

    @property
    def sd_x100(self):
        return 100 * self.sd

    @property
    def rmse_x100(self):
        return 100 * self.rmse

    @property
    def se_x100(self):
        return None if self.se is None else 100 * self.se

    @property
    def cvp_percent(self):
        return self.cvp

    @property
    def flagged(self) -> bool:
        return self.n_failures > 0.05 * self.n_replicates

    @classmethod
    def from_draws(cls, label, target, truth, estimates, ses, n_replicates, n_failures) -> "MetricsRow":
        est = np.asarray(estimates, dtype=float)
        if est.size < 2:
            return cls(label, target, truth, np.nan, np.nan, np.nan, None, None, n_replicates, n_failures)
        err = est - truth
        se_arr = None if ses is None else np.asarray(ses, dtype=object)
        se_mean, cvp = None, None
        if se_arr is not None and all(s is not None and np.isfinite(s) for s in se_arr):
            s = se_arr.astype(float)
            se_mean = float(s.mean())
            cvp = float(100.0 * np.mean(np.abs(err) <= Z_QUANTILE * s))
        return cls(
            label, target, float(truth), float(err.mean()), float(est.std(ddof=1)),
            float(np.sqrt(np.mean(err ** 2))), se_mean, cvp, n_replicates, n_failures,
        )


# --------------------------------------------------------------------------
# Monte Carlo driver


def replicate_seeds(seed: int, k: int):
    """Data and estimator seeds for replicate ``k``, reproducible in isolation."""
    return np.random.SeedSequence(seed, spawn_key=(k, 0)), np.random.SeedSequence(seed, spawn_key=(k, 1))


def _one_replicate(args):
    design, N, roster, seed, k, mode = args
    data_seed, est_seed = replicate_seeds(seed, k)
    sample = generate(design, N, data_seed, mode)
    out = []
    for j, est in enumerate(roster):
        child = np.random.SeedSequence(est_seed.entropy, spawn_key=est_seed.spawn_key + (j,))
        try:
            value, se = est(sample, child)
            if not np.isfinite(value):
                raise ArithmeticError("non-finite estimate")
            out.append((value, se))
        except (NonignorableError, np.linalg.LinAlgError, ArithmeticError) as exc:
            log.debug("replicate %d, %s failed: %s", k, est.label, exc)
            out.append(None)
    return out


def run_monte_carlo(design: Design, N: int, replicates: int, roster: Sequence, seed: int, *,
                    workers: int = 1, mode: str = "consistent", theta_truth: Optional[float] = None) -> list:
    """Replicate, estimate and summarise; one :class:`MetricsRow` per roster entry.

    Failed fits are excluded and counted; rows with more than 5% failures
    are marked ``flagged``.
    """
    if replicates < 2:
        raise ConfigurationError("replicates must be at least 2")
    jobs = [(design, N, tuple(roster), seed, k, mode) for k in range(replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replicate, jobs, chunksize=max(1, replicates // (4 * workers))))
    else:
        results = [_one_replicate(j) for j in jobs]
    truths = {"beta": design.beta, "theta": design.theta_true() if theta_truth is None else theta_truth}
    rows = []
    for j, est in enumerate(roster):
        ok = [res[j] for res in results if res[j] is not None]
        n_fail = replicates - len(ok)
        row = MetricsRow.from_draws(
            est.label, est.target, truths[est.target], [v for v, _ in ok], [s for _, s in ok],
            replicates, n_fail,
        )
        if row.flagged:
            log.warning("%s: %d of %d replicates failed", est.label, n_fail, replicates)
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# unbiasedness of the working score at the truth


@dataclass(frozen=True)
class ScoreMeanCheck:
    design: str
    gstar: str
    mean: np.ndarray
    sd: np.ndarray
    M: int

    @property
    def z(self) -> np.ndarray:
        return self.mean / (self.sd / np.sqrt(self.M))

    def passes(self, k: float = 4.0) -> bool:
        return bool(np.all(np.abs(self.mean) <= k * self.sd / np.sqrt(self.M)))


def score_mean_at_truth(design: Design, gstar: GFunction, M: int, seed) -> ScoreMeanCheck:
    """Monte Carlo mean of the working score at the true beta with true nuisances."""
    sample = generate(design, M, seed)
    ctx = ScoreContext(design.spec(gstar), OracleProvider(design).fit(sample), sample)
    S = ctx.scores(np.array([design.beta]))
    return ScoreMeanCheck(design.id, gstar.describe(), S.mean(axis=0), S.std(axis=0, ddof=1), M)
