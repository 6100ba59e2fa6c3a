"""Working efficient score for beta under a working model g*(u)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateConditional, NumericalError
from .moments import EXP_CLIP, DeltaTriple, MomentProvider, saturated
from .model import ModelSpec, Observation, Sample


class ClampWarning(RuntimeWarning):
    """An exponent was clipped to +-700 to avoid overflow."""


def _exp_neg_clamped(v, what):
    v = np.asarray(v, dtype=float)
    if np.any(np.abs(v) > EXP_CLIP):
        warnings.warn(f"{what}: exponent clipped to +-{EXP_CLIP:g}", ClampWarning, stacklevel=3)
    return np.exp(np.clip(-v, -EXP_CLIP, EXP_CLIP))


@dataclass(frozen=True)
class ScoreState:
    """Everything the score needs at one beta, per observation."""

    beta: np.ndarray
    delta: DeltaTriple
    dstar: np.ndarray  # (N,)
    astar: np.ndarray  # (N, d)
    weight: np.ndarray  # (N, d): (a* d1 - d3) / d*
    bracket: np.ndarray  # (N,)
    clipped: bool = False

    @property
    def scores(self) -> np.ndarray:
        return self.weight * self.bracket[:, None]


def _astar(d_nodes: DeltaTriple, dstar_nodes, rule):
    num = rule.apply(d_nodes.d3 * (d_nodes.d1 / dstar_nodes)[:, None])
    den = rule.apply(d_nodes.d1 * (d_nodes.d1 / dstar_nodes))
    if not (den > 0).all():
        raise DegenerateConditional("outer denominator of a*(u) is not positive")
    return num / den[:, None]


def _dstar(delta: DeltaTriple, eg):
    ds = delta.d1 + eg * delta.d2
    if not (ds > 0).all():
        raise NumericalError("d*(x) is not positive; the conditional moment estimates are invalid")
    return ds


class ScoreContext:
    """Binds a model, a fitted provider and a sample; caches the last beta.

    Inner moments are evaluated first at the observations and at the outer
    rule's nodes, then smoothed in u to form a*(u).
    """

    def __init__(self, spec: ModelSpec, provider: MomentProvider, sample: Sample):
        sample.check_estimable()
        self.spec = spec
        self.sample = sample
        self.provider = provider if provider.fitted else provider.fit(sample)
        self._inner_obs = self.provider.inner_at(sample.X, spec.h)
        self._rule = self.provider.outer_rule(sample.U)
        self._inner_nodes = self.provider.inner_at(self._rule.nodes, spec.h)
        u_idx = list(sample.u_idx)
        self.exp_neg_gstar = _exp_neg_clamped(spec.g_star(sample.U), "g*(u)")
        self._eg_nodes = _exp_neg_clamped(spec.g_star(self._rule.nodes[:, u_idx]), "g*(u)")
        self._gstar = spec.g_star(sample.U)
        self._state = None

    @property
    def N(self) -> int:
        return self.sample.N

    def state(self, beta) -> ScoreState:
        beta = np.atleast_1d(np.asarray(beta, dtype=float)).copy()
        if self._state is not None and np.array_equal(self._state.beta, beta):
            return self._state
        delta = self._inner_obs(beta)
        dstar = _dstar(delta, self.exp_neg_gstar)
        d_nodes = self._inner_nodes(beta)
        astar = _astar(d_nodes, _dstar(d_nodes, self._eg_nodes), self._rule)
        weight = (astar * delta.d1[:, None] - delta.d3) / dstar[:, None]
        s = self.sample
        hy = self.spec.h.eval(s.y_filled, beta)
        raw = self._gstar + hy
        expo = np.clip(raw, -EXP_CLIP, EXP_CLIP)
        bracket = np.where(s.r == 1, 1.0 - (1.0 + np.exp(-expo)), 1.0)
        clipped = delta.clipped or d_nodes.clipped or saturated(raw[s.r == 1])
        self._state = ScoreState(beta, delta, dstar, astar, weight, bracket, clipped)
        return self._state

    def scores(self, beta) -> np.ndarray:
        """Per-observation working efficient scores, shape (N, d)."""
        return self.state(beta).scores

    def equation(self, beta) -> np.ndarray:
        """Summed estimating equation, shape (d,).

        NaN where an exponent saturates: the equation is not reliably
        computable there, and root finders must not settle on it.
        """
        st = self.state(beta)
        total = st.scores.sum(axis=0)
        return np.full_like(total, np.nan) if st.clipped else total


def d_star(x, beta, ctx: ScoreContext) -> float:
    """E{e^{-h} | x,1} + e^{-g*(u)} E{e^{-2h} | x,1} at one x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    delta = ctx.provider.inner_at(x[None, :], ctx.spec.h)(beta)
    eg = _exp_neg_clamped(ctx.spec.g_star(x[list(ctx.sample.u_idx)]), "g*(u)")
    return float(_dstar(delta, eg)[0])


def a_star(u, beta, ctx: ScoreContext) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    rule = ctx.provider.outer_rule(u[None, :])
    d_nodes = ctx.provider.inner_at(rule.nodes, ctx.spec.h)(beta)
    eg = _exp_neg_clamped(ctx.spec.g_star(rule.nodes[:, list(ctx.sample.u_idx)]), "g*(u)")
    return _astar(d_nodes, _dstar(d_nodes, eg), rule)[0]


def efficient_score(obs: Observation, beta, ctx: ScoreContext) -> np.ndarray:
    """Working efficient score of a single record."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    x = np.asarray(obs.x, dtype=float)
    u = x[list(obs.u_idx)]
    delta = ctx.provider.inner_at(x[None, :], ctx.spec.h)(beta)[0]
    eg = float(_exp_neg_clamped(ctx.spec.g_star(u), "g*(u)"))
    ds = delta.d1 + eg * delta.d2
    if not ds > 0:
        raise NumericalError("d*(x) is not positive")
    weight = (a_star(u, beta, ctx) * delta.d1 - delta.d3) / ds
    if obs.r == 0:
        return weight
    expo = np.clip(ctx.spec.g_star(u) + ctx.spec.h.eval(np.asarray(obs.y), beta), -EXP_CLIP, EXP_CLIP)
    return weight * (1.0 - (1.0 + np.exp(-expo)))


def estimating_equation(sample: Sample, beta, ctx: ScoreContext) -> np.ndarray:
    """Sum of working efficient scores over ``sample``."""
    if sample is not ctx.sample and sample != ctx.sample:
        raise DataError("the score context was built on a different sample")
    return ctx.equation(beta)
