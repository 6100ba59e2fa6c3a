"""Solving for beta and theta, with sandwich and bootstrap uncertainty."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import (
    BootstrapUnstable,
    ConfigurationError,
    NoConvergence,
    NonignorableError,
    SingularJacobian,
)
from .model import ModelSpec, Sample
from .moments import MomentProvider, exp_neg
from .score import ScoreContext

log = logging.getLogger(__name__)
# relative size below which a sign change on the scan grid is treated as numerical noise
FLAT_TAIL = 1e-8


@dataclass(frozen=True)
class SolverOptions:
    """Root-finding controls.

    ``method`` is ``"brent-scalar"`` or ``"newton-fd"``; ``None`` picks Brent
    for one-dimensional problems and Newton otherwise. The scalar search
    starts on ``[init - 2, init + 2]`` unless ``bracket`` is given and widens
    geometrically until the equation changes sign. The bracket is first
    scanned on ``scan_points`` grid points, because the working score can
    cross zero more than once; a decreasing crossing nearest ``init`` wins.
    """

    method: Optional[str] = None
    tol_residual: float = 1e-8
    tol_step: float = 1e-10
    max_iter: int = 100
    init: Optional[tuple] = None
    bracket: Optional[tuple] = None
    max_expansions: int = 8
    scan_points: int = 41

    def __post_init__(self):
        if not (self.tol_residual > 0 and self.tol_step > 0):
            raise ConfigurationError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if self.method not in (None, "brent-scalar", "newton-fd"):
            raise ConfigurationError(f"unknown solver method {self.method!r}")


@dataclass
class BetaFit:
    beta: np.ndarray
    cov: Optional[np.ndarray]
    se: Optional[np.ndarray]
    iterations: int
    converged: bool
    residual_norm: float
    provider_kind: str
    jacobian: Optional[np.ndarray] = None
    # rows phi_beta_i with N^{1/2}(beta_hat - beta) ~ N^{-1/2} sum_i phi_beta_i
    influence: Optional[np.ndarray] = field(default=None, repr=False)
    context: Optional[ScoreContext] = field(default=None, repr=False, compare=False)


@dataclass
class ThetaFit:
    theta: np.ndarray
    se: Optional[np.ndarray]
    se_method: str
    beta_fit: BetaFit = field(repr=False)
    cov: Optional[np.ndarray] = None


# --------------------------------------------------------------------------
# root finding


def _fd_jacobian(f, x, f0):
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = 1e-5 * (1.0 + abs(x[k]))
        J[:, k] = (f(x + e) - f0) / e[k]
    return J


def _newton(f, init, opts: SolverOptions):
    x = np.asarray(init, dtype=float).copy()
    F = f(x)
    norm = float(np.linalg.norm(F))
    for it in range(1, opts.max_iter + 1):
        if norm < opts.tol_residual:
            return x, it - 1, norm
        J = _fd_jacobian(f, x, F)
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise SingularJacobian("finite-difference Jacobian is singular") from None
        t = 1.0
        while True:
            cand = x + t * step
            Fc = f(cand)
            nc = float(np.linalg.norm(Fc))
            if nc < norm:
                break
            if t < 1e-8:
                raise NoConvergence("Newton line search made no progress", last=x,
                                    residual_norm=norm, iterations=it)
            t *= 0.5
        x, F, norm = cand, Fc, nc
        if norm < opts.tol_residual:
            return x, it, norm
        if np.linalg.norm(t * step) < opts.tol_step * (1.0 + np.linalg.norm(x)):
            break
    raise NoConvergence(f"Newton stopped with residual {norm:.3g}", last=x, residual_norm=norm, iterations=it)


def _scan(g, lo, hi, points, x0):
    """Pick a sign-changing cell on a grid, preferring descending crossings near ``x0``."""
    grid = np.linspace(lo, hi, points)
    vals = np.array([g(b) for b in grid])
    ok = np.isfinite(vals)
    sgn = np.sign(vals)
    cells = [i for i in range(points - 1) if ok[i] and ok[i + 1] and sgn[i] != sgn[i + 1]]
    if not cells:
        return None, vals
    desc = [i for i in cells if vals[i] > vals[i + 1]]
    pool = desc or cells
    i = min(pool, key=lambda c: abs(0.5 * (grid[c] + grid[c + 1]) - x0))
    return (grid[i], grid[i + 1], vals[i], vals[i + 1]), vals


def _polished_brent(g, lo, hi, x0, expansions, opts):
    try:
        root, info = brentq(g, lo, hi, xtol=opts.tol_step, rtol=4 * np.finfo(float).eps,
                            maxiter=opts.max_iter, full_output=True, disp=False)
    except ValueError as exc:  # NaN met inside the bracket
        raise NoConvergence(f"Brent search failed: {exc}", last=np.array([x0]),
                            residual_norm=np.inf, iterations=expansions) from None
    iterations = info.iterations + expansions
    resid = abs(g(root))
    if resid >= opts.tol_residual:
        # polish inside the final bracket down to floating resolution
        a, b = root - 2 * opts.tol_step, root + 2 * opts.tol_step
        if np.sign(g(a)) != np.sign(g(b)):
            root, info2 = brentq(g, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps,
                                 maxiter=opts.max_iter, full_output=True, disp=False)
            iterations += info2.iterations
            resid = abs(g(root))
    if not info.converged or resid >= opts.tol_residual:
        raise NoConvergence(f"Brent search ended with residual {resid:.3g}",
                            last=np.array([root]), residual_norm=resid, iterations=iterations)
    return root, iterations, resid


def _brent(f, init, opts: SolverOptions):
    g = lambda b: float(f(np.array([b]))[0])
    x0 = float(np.asarray(init, dtype=float).reshape(-1)[0])
    lo, hi = opts.bracket if opts.bracket is not None else (x0 - 2.0, x0 + 2.0)
    expansions, scale = 0, 0.0
    while True:
        cell, vals = _scan(g, lo, hi, opts.scan_points, x0)
        finite = np.abs(vals[np.isfinite(vals)])
        scale = max(scale, finite.max() if finite.size else 0.0)
        if cell is not None:
            lo, hi, flo, fhi = cell
            break
        if expansions >= opts.max_expansions:
            raise NoConvergence(
                f"no sign change on [{lo:.4g}, {hi:.4g}] after {expansions} expansions",
                last=np.array([x0]), residual_norm=float(finite.min()) if finite.size else np.inf,
                iterations=expansions,
            )
        half = hi - lo
        lo, hi = lo - half / 2, hi + half / 2
        expansions += 1
    if flo == 0 or fhi == 0:
        root, iterations, resid = (lo if flo == 0 else hi), expansions, 0.0
    else:
        root, iterations, resid = _polished_brent(g, lo, hi, x0, expansions, opts)
    # a crossing in the exponential tails, where the equation has decayed to nothing, is not a root
    local = max(abs(g(root - 0.05)), abs(g(root + 0.05)))
    if not local > FLAT_TAIL * scale:
        raise NoConvergence(f"only a degenerate crossing at {root:.4g}, where the equation has vanished",
                            last=np.array([root]), residual_norm=resid, iterations=iterations)
    return np.array([root]), iterations, resid


def find_root(f: Callable, dim: int, opts: SolverOptions):
    """Return ``(x, iterations, residual_norm)`` for ``f(x) = 0``."""
    init = np.zeros(dim) if opts.init is None else np.asarray(opts.init, dtype=float).reshape(dim)
    method = opts.method or ("brent-scalar" if dim == 1 else "newton-fd")
    if method == "brent-scalar":
        if dim != 1:
            raise ConfigurationError("brent-scalar only solves one-dimensional problems")
        return _brent(f, init, opts)
    return _newton(f, init, opts)


# --------------------------------------------------------------------------
# beta


def solve_beta(sample: Sample, spec: ModelSpec, provider: MomentProvider,
               opts: Optional[SolverOptions] = None, *, sandwich: bool = True,
               g_exp=None, correct: bool = True) -> BetaFit:
    """Solve the summed working-score equation for beta.

    The provider is (re)fitted on ``sample``. With ``sandwich`` the
    covariance, Jacobian and influence rows are filled in; ``g_exp`` injects
    known values of exp(-g(u_i)) into the nonparametric correction term.
    """
    opts = opts or SolverOptions()
    ctx = ScoreContext(spec, provider.fit(sample), sample)
    beta, iterations, resid = find_root(ctx.equation, spec.beta_dim, opts)
    fit = BetaFit(beta, None, None, iterations, True, resid, ctx.provider.kind, context=ctx)
    if sandwich:
        parts = sandwich_parts(ctx, beta, g_exp=g_exp, correct=correct)
        fit.cov = parts.cov
        fit.se = np.sqrt(np.clip(np.diag(parts.cov), 0.0, None))
        fit.jacobian = parts.A
        fit.influence = parts.influence
    return fit


@dataclass(frozen=True)
class SandwichParts:
    A: np.ndarray
    B: np.ndarray
    psi: np.ndarray
    influence: np.ndarray
    cov: np.ndarray


def score_jacobian(ctx: ScoreContext, beta) -> np.ndarray:
    """Mean of dS/dbeta^T by forward differences, step 1e-5 (1 + |beta|)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    s0 = ctx.scores(beta).mean(axis=0)
    A = np.empty((s0.size, beta.size))
    for k in range(beta.size):
        e = np.zeros_like(beta)
        e[k] = 1e-5 * (1.0 + abs(beta[k]))
        A[:, k] = (ctx.scores(beta + e).mean(axis=0) - s0) / e[k]
    ctx.state(beta)
    return A


def estimate_exp_neg_g(ctx: ScoreContext, beta, floor: float = 1e-3) -> np.ndarray:
    """Plug-in exp(-g(u_i)) from w(x)^{-1} = 1 + exp(-g(u)) E{e^{-h} | x, 1}.

    w(x) = P(R=1 | x) is estimated by kernel regression of r on x.
    """
    rate = getattr(ctx.provider, "response_rate", None)
    if rate is None:
        raise ConfigurationError("estimating exp(-g) needs a kernel-based provider")
    w = np.clip(rate(ctx.sample.X), floor, 1.0)
    return (1.0 / w - 1.0) / ctx.state(beta).delta.d1


def k_correction(ctx: ScoreContext, beta, g_exp) -> np.ndarray:
    """Correction rows r_i k(x_i, y_i) for kernel-estimated conditional means."""
    st = ctx.state(beta)
    s = ctx.sample
    eg = ctx.exp_neg_gstar
    d1, ds = st.delta.d1, st.dstar
    e = exp_neg(ctx.spec.h.eval(s.y_filled, st.beta))
    first = (np.asarray(g_exp, dtype=float) - eg)[:, None] * st.weight
    second = 2 * d1 - e - d1 * (e + eg * e * e) / ds
    return np.where((s.r == 1)[:, None], first * second[:, None], 0.0)


def _alpha_gradient(prov, statistic: Callable) -> np.ndarray:
    """d statistic / d alpha^T by central differences on a fitted parametric provider."""
    alpha = prov.alpha
    base = statistic(prov)
    G = np.empty((np.size(base), alpha.size))
    for j in range(alpha.size):
        step = 1e-5 * (1.0 + abs(alpha[j]))
        e = np.zeros_like(alpha)
        e[j] = step
        G[:, j] = (np.ravel(statistic(prov.with_alpha(alpha + e)))
                   - np.ravel(statistic(prov.with_alpha(alpha - e)))) / (2 * step)
    return G


def sandwich_parts(ctx: ScoreContext, beta, *, g_exp=None, correct: bool = True) -> SandwichParts:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    S = ctx.scores(beta)
    N = ctx.N
    A = score_jacobian(ctx, beta)
    psi = S.copy()
    kind = ctx.provider.kind
    if kind == "parametric" and correct:
        spec, sample = ctx.spec, ctx.sample
        G = _alpha_gradient(
            ctx.provider, lambda p: ScoreContext(spec, p, sample).scores(beta).mean(axis=0)
        )
        psi = psi + ctx.provider.alpha_influence() @ G.T
    elif kind == "nonparametric" and correct:
        gx = estimate_exp_neg_g(ctx, beta) if g_exp is None else g_exp
        psi = psi + k_correction(ctx, beta, gx)
    B = psi.T @ psi / N
    try:
        if np.linalg.cond(A) > 1e12:
            raise np.linalg.LinAlgError
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularJacobian("mean score Jacobian is singular") from None
    cov = Ainv @ B @ Ainv.T / N
    cov = 0.5 * (cov + cov.T)
    return SandwichParts(A, B, psi, -psi @ Ainv.T, cov)


def beta_sandwich(ctx: ScoreContext, beta, *, g_exp=None, correct: bool = True) -> np.ndarray:
    """A^{-1} B A^{-T} / N with the correction matching the provider kind."""
    return sandwich_parts(ctx, beta, g_exp=g_exp, correct=correct).cov


# --------------------------------------------------------------------------
# theta


def _mean_zeta(X, Y, theta):
    return (Y - theta[0])[..., None]


class _ThetaMoment:
    """Empirical mean of r zeta + (1 - r) E{zeta e^{-h} | x,1} / E{e^{-h} | x,1}."""

    def __init__(self, sample: Sample, zeta: Callable, provider: MomentProvider, h):
        self.sample = sample
        self.zeta = zeta
        self.provider = provider
        self.h = h
        self.inner = provider.inner_at(sample.X, h)
        self.y = sample.y_filled

    def ratio(self, theta, beta, inner=None):
        inner = inner or self.inner
        return inner.tilted(beta, lambda Xb, Y: self.zeta(Xb, Y, theta))

    def terms(self, theta, beta, inner=None):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        obs = np.asarray(self.zeta(self.sample.X, self.y, theta), dtype=float)
        ratio = self.ratio(theta, beta, inner)
        r = self.sample.r[:, None]
        return np.where(r == 1, obs, ratio), obs, ratio

    def __call__(self, theta, beta):
        return self.terms(theta, beta)[0].mean(axis=0)


def _check_kinds(beta_fit: BetaFit, provider: MomentProvider):
    if beta_fit.provider_kind != provider.kind:
        raise ConfigurationError(
            f"beta was fitted with a {beta_fit.provider_kind} provider but theta uses {provider.kind}"
        )


def estimate_theta_mean(sample: Sample, beta_fit: BetaFit, provider: MomentProvider, *,
                        h=None, variance: bool = True) -> ThetaFit:
    """Outcome mean with model-tilted imputations for nonrespondents."""
    h = h or _h_of(beta_fit)
    prov = provider.fit(sample)
    ratio = prov.inner_at(sample.X, h).tilted(beta_fit.beta, lambda Xb, Y: Y)
    theta = np.array([np.mean(np.where(sample.r == 1, sample.y_filled, ratio))])
    fit = ThetaFit(theta, None, "influence", beta_fit)
    if variance and beta_fit.influence is not None:
        fit.cov = theta_influence_variance(sample, beta_fit, fit, prov, h=h)
        fit.se = np.sqrt(np.clip(np.diag(fit.cov), 0.0, None))
    return fit


def _h_of(beta_fit: BetaFit):
    if beta_fit.context is None:
        raise ConfigurationError("beta fit carries no model; pass h explicitly")
    return beta_fit.context.spec.h


def solve_theta(sample: Sample, zeta: Callable, beta_fit: BetaFit, provider: MomentProvider,
                opts: Optional[SolverOptions] = None, *, dim: int = 1, h=None,
                variance: bool = True) -> ThetaFit:
    """Root in theta of the imputed moment ``mean(zeta) = 0``.

    ``zeta(X, Y, theta)`` must broadcast ``X[..., j]`` against ``Y`` and
    return an array of shape ``broadcast + (dim,)``.
    """
    opts = opts or SolverOptions()
    h = h or _h_of(beta_fit)
    prov = provider.fit(sample)
    moment = _ThetaMoment(sample, zeta, prov, h)
    theta, _, _ = find_root(lambda th: moment(th, beta_fit.beta), dim, opts)
    fit = ThetaFit(theta, None, "influence", beta_fit)
    if variance and beta_fit.influence is not None:
        fit.cov = theta_influence_variance(sample, beta_fit, fit, prov, zeta=zeta, h=h)
        fit.se = np.sqrt(np.clip(np.diag(fit.cov), 0.0, None))
    return fit


def theta_influence_variance(sample: Sample, beta_fit: BetaFit, theta_fit: ThetaFit,
                             provider: MomentProvider, *, zeta: Optional[Callable] = None,
                             h=None) -> np.ndarray:
    """A_theta^{-1} V A_theta^{-T} / N from plug-in influence rows.

    The rows combine the imputed moment, the propagated beta influence and
    a term for estimating the conditional means that depends on the provider.
    """
    _check_kinds(beta_fit, provider)
    if beta_fit.influence is None:
        raise ConfigurationError("beta fit has no influence rows; solve with sandwich=True")
    zeta = zeta or _mean_zeta
    h = h or _h_of(beta_fit)
    prov = provider if provider.fitted else provider.fit(sample)
    moment = _ThetaMoment(sample, zeta, prov, h)
    theta = np.atleast_1d(theta_fit.theta)
    beta = np.atleast_1d(beta_fit.beta)
    N = sample.N
    miss = (sample.r == 0)[:, None]

    terms, obs, ratio = moment.terms(theta, beta)
    phi = terms - terms.mean(axis=0)

    # sensitivity of the imputations to beta
    k = phi.shape[1]
    D = np.empty((k, beta.size))
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = 1e-5 * (1.0 + abs(beta[j]))
        up = moment.ratio(theta, beta + e)
        dn = moment.ratio(theta, beta - e)
        D[:, j] = np.where(miss, (up - dn) / (2 * e[j]), 0.0).mean(axis=0)
    phi = phi + beta_fit.influence @ D.T

    if prov.kind == "parametric":
        def stat(p):
            inner = p.inner_at(sample.X, h)
            return np.where(miss, moment.ratio(theta, beta, inner), 0.0).mean(axis=0)
        G = _alpha_gradient(prov, stat)
        phi = phi + prov.alpha_influence() @ G.T
    elif prov.kind == "nonparametric":
        er = np.clip(prov.response_rate(sample.X), 1e-3, 1.0)
        d1 = moment.inner(beta).d1
        e = exp_neg(h.eval(sample.y_filled, beta))
        wgt = np.where(sample.r == 1, (1.0 - er) * e / (d1 * er), 0.0)
        phi = phi + wgt[:, None] * (obs - ratio)

    V = phi.T @ phi / N
    A = np.empty((k, theta.size))
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = 1e-5 * (1.0 + abs(theta[j]))
        A[:, j] = (moment(theta + e, beta) - moment(theta - e, beta)) / (2 * e[j])
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularJacobian("theta moment Jacobian is singular") from None
    cov = Ainv @ V @ Ainv.T / N
    return 0.5 * (cov + cov.T)


# --------------------------------------------------------------------------
# bootstrap


def bootstrap_se(sample: Sample, estimator: Callable, B: int, seed, *, return_draws: bool = False,
                 max_failure_rate: float = 0.10):
    """Standard deviation of ``estimator`` over ``B`` with-replacement resamples.

    Failed resamples are skipped and counted; more than ``max_failure_rate``
    of them raises :class:`BootstrapUnstable`.
    """
    if B < 2:
        raise ConfigurationError("bootstrap needs B >= 2")
    rng = np.random.default_rng(seed)
    draws, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, sample.N, sample.N)
        try:
            draws.append(np.atleast_1d(np.asarray(estimator(sample.take(idx)), dtype=float)))
        except (NonignorableError, np.linalg.LinAlgError) as exc:
            failures += 1
            log.debug("bootstrap resample failed: %s", exc)
    if failures > max_failure_rate * B or len(draws) < 2:
        raise BootstrapUnstable(f"{failures} of {B} bootstrap resamples failed")
    draws = np.array(draws)
    se = draws.std(axis=0, ddof=1)
    if return_draws:
        return se, draws, failures
    return se


def theta_mean_pipeline(spec: ModelSpec, provider: MomentProvider, theta_provider=None,
                        opts: Optional[SolverOptions] = None) -> Callable:
    """Closure ``sample -> theta_hat`` that refits beta and theta; for the bootstrap."""
    theta_provider = theta_provider or provider

    def run(sample):
        bfit = solve_beta(sample, spec, provider, opts, sandwich=False)
        return estimate_theta_mean(sample, bfit, theta_provider, h=spec.h, variance=False).theta

    return run
