"""Discounted cost functionals of the uncontrolled market state.

Phi(x, z)  = E int_0^inf e^{-rt} c(X_t, z) dt        (total cost, no action)
phi(x, z)  = E int_0^inf e^{-rt} c_z(X_t, z) dt      (its capacity derivative)

Both are closed-form for the quadratic-spread cost on a gbm state; other
models fall back to quadrature over the transition kernel.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .model import (
    GBM,
    DiffusionSpec,
    ProblemSpec,
    UnsupportedModelError,
    cdf_below,
    partial_mean_below,
)
from .quadrature import (
    SpaceQuadrature,
    TimeQuadrature,
    discounted_time_integral,
    space_quadrature,
    state_nodes,
    time_quadrature,
)


def _quadratic_gbm(spec: ProblemSpec) -> bool:
    return (spec.cost.is_quadratic_spread and spec.x_diffusion.kind == GBM)


def Phi(spec: ProblemSpec, x: float, z: float,
        tq: Optional[TimeQuadrature] = None,
        sq: Optional[SpaceQuadrature] = None) -> float:
    """Total expected discounted cost with capacity frozen at z."""
    xd, r = spec.x_diffusion, spec.r
    if _quadratic_gbm(spec):
        k0 = spec.cost.K0
        r2 = r - xd.moment_rate(2.0)
        r1 = r - xd.mu
        if r2 <= 0 or r1 <= 0:
            raise UnsupportedModelError("discount rate below moment growth")
        return k0 * (x * x / r2 - 2.0 * z * x / r1 + z * z / r)
    tq = tq or time_quadrature(r)
    sq = sq or space_quadrature()

    def g(ts):
        return np.array([_mean_cost(spec, float(t), x, z, sq) for t in np.atleast_1d(ts)])

    return discounted_time_integral(r, g, tq)


def phi_marginal(spec: ProblemSpec, x: float, z: float,
                 tq: Optional[TimeQuadrature] = None,
                 sq: Optional[SpaceQuadrature] = None) -> float:
    """Expected discounted marginal cost: the capacity derivative of Phi."""
    xd, r = spec.x_diffusion, spec.r
    if _quadratic_gbm(spec):
        k0 = spec.cost.K0
        r1 = r - xd.mu
        if r1 <= 0:
            raise UnsupportedModelError("discount rate below mean growth")
        return 2.0 * k0 * (z / r - x / r1)
    tq = tq or time_quadrature(r)
    sq = sq or space_quadrature()

    def g(ts):
        return np.array([_mean_marginal(spec, float(t), x, z, sq) for t in np.atleast_1d(ts)])

    return discounted_time_integral(r, g, tq)


def _mean_cost(spec: ProblemSpec, t: float, x: float, z: float,
               sq: SpaceQuadrature) -> float:
    xi = state_nodes(spec.x_diffusion, t, x, sq)
    return float(np.sum(sq.z_weights * np.asarray(spec.cost.c(xi, z), float)))


def _mean_marginal(spec: ProblemSpec, t: float, x: float, z: float,
                   sq: SpaceQuadrature) -> float:
    xi = state_nodes(spec.x_diffusion, t, x, sq)
    return float(np.sum(sq.z_weights * np.asarray(spec.cost.cz(xi, z), float)))


def marginal_cost_below(spec: ProblemSpec, t, x0: float, a: float, z: float,
                        sq: Optional[SpaceQuadrature] = None) -> np.ndarray:
    """int p1(t, x0, xi) c_z(xi, z) d(xi) over xi <= a, vectorized in t.

    Closed form for the quadratic spread on gbm; otherwise clipped-window
    quadrature per time node.
    """
    xd = spec.x_diffusion
    t = np.atleast_1d(np.asarray(t, float))
    if _quadratic_gbm(spec):
        k0 = spec.cost.K0
        cdf = 1.0 - _survival(xd, t, x0, a)
        pe = partial_mean_below(xd, t, x0, a)
        return 2.0 * k0 * (z * cdf - pe)
    sq = sq or space_quadrature(96)
    out = np.empty_like(t)
    for i, ti in enumerate(t):
        xi = state_nodes(xd, float(ti), x0, sq)
        w = np.where(xi <= a, sq.z_weights, 0.0)
        out[i] = float(np.sum(w * np.asarray(spec.cost.cz(xi, z), float)))
    return out


def _survival(xd: DiffusionSpec, t, x0, a):
    from .model import survival_above
    return survival_above(xd, t, x0, a)
