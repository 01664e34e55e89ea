"""Discounted-time and state-space integration kernels.

Time integrals of the form int_0^inf e^{-rt} g(t) dt use the substitution
u = e^{-rt}.  A single Gauss-Legendre rule on (0, 1] loses accuracy on the
algebraic endpoint behavior u^{-kappa/r} produced by exponentially growing
moments, so the rule is composite: geometric panels in u with a fixed-order
rule per panel.  The head (0, t_min] is handled by the limit value of the
integrand; the neglected tail beyond t_max is bounded by sup|g| e^{-r t_max}/r.

State integrals against a transition density are evaluated in log-state on a
quantile-truncated window, with the Gaussian weight folded into the nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtri
from scipy.stats import norm

from .model import GBM, DiffusionSpec, UnsupportedModelError


@dataclass(frozen=True)
class TimeQuadrature:
    """Nodes/weights for int e^{-rt} g(t) dt on (t_min, t_max).

    ``weights`` are plain time weights: sum(weights * exp(-r*nodes) * g(nodes))
    approximates the integral over (t_min, t_max); the head correction
    g(t_min) * (1 - e^{-r t_min})/r accounts for (0, t_min].
    """

    r: float
    nodes: np.ndarray
    weights: np.ndarray
    t_min: float
    t_max: float

    @property
    def head_weight(self) -> float:
        return (1.0 - math.exp(-self.r * self.t_min)) / self.r

    @property
    def discounted_weights(self) -> np.ndarray:
        return self.weights * np.exp(-self.r * self.nodes)

    def tail_bound(self, g_sup: float) -> float:
        return abs(g_sup) * math.exp(-self.r * self.t_max) / self.r


def time_quadrature(r: float, n_nodes: int = 128, n_panels: int = 8,
                    t_min: float = 1e-5, tail_eps: float = 1e-10) -> TimeQuadrature:
    """Composite Gauss-Legendre rule in u = e^{-rt} over geometric panels."""
    if r <= 0:
        raise ValueError("discount rate must be positive")
    n_per = max(n_nodes // n_panels, 2)
    u_lo, u_hi = tail_eps, math.exp(-r * t_min)
    edges = np.geomspace(u_lo, u_hi, n_panels + 1)
    gx, gw = leggauss(n_per)
    us, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        us.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * gw)
    u = np.concatenate(us)
    w = np.concatenate(ws)
    t = -np.log(u) / r
    order = np.argsort(t)
    # w_t e^{-rt} = w_u / r  =>  w_t = w_u e^{rt} / r = w_u / (r u)
    weights = (w / (r * u))[order]
    t_max = -math.log(tail_eps) / r
    return TimeQuadrature(r=r, nodes=t[order], weights=weights, t_min=t_min, t_max=t_max)


def discounted_time_integral(r: float, g, q: TimeQuadrature) -> float:
    """int_0^~inf e^{-rt} g(t) dt with head correction at t_min.

    ``g`` must accept an array of times.  Non-finite values are reported with
    the offending node.
    """
    vals = np.asarray(g(q.nodes), float)
    if not np.all(np.isfinite(vals)):
        bad = q.nodes[~np.isfinite(vals)][0]
        raise FloatingPointError(f"integrand not finite at t={bad}")
    head = float(np.asarray(g(np.array([q.t_min])), float)[0]) * q.head_weight
    return float(np.sum(q.discounted_weights * vals)) + head


@dataclass(frozen=True)
class SpaceQuadrature:
    """Standardized log-state nodes for integrals against a gbm density.

    ``z_nodes`` are standard-normal abscissae on (-c, c) with c the
    ``tail_quantile`` normal quantile; ``z_weights`` include the Gaussian
    density, so sum(z_weights * h(state(z))) approximates E[h(X_t)] truncated
    at the tail quantiles.
    """

    z_nodes: np.ndarray
    z_weights: np.ndarray
    tail_quantile: float

    @property
    def n(self) -> int:
        return len(self.z_nodes)


def space_quadrature(n_nodes: int = 256, tail_quantile: float = 1.0 - 1e-7) -> SpaceQuadrature:
    if not 0.5 < tail_quantile < 1.0:
        raise ValueError("tail_quantile must lie in (0.5, 1)")
    c = float(ndtri(tail_quantile))
    gx, gw = leggauss(n_nodes)
    z = c * gx
    return SpaceQuadrature(z_nodes=z, z_weights=c * gw * norm.pdf(z), tail_quantile=tail_quantile)


def state_nodes(spec: DiffusionSpec, t: float, x0: float, q: SpaceQuadrature) -> np.ndarray:
    """Physical-state nodes of the truncated window of p(t, x0, .)."""
    if spec.kind != GBM:
        raise UnsupportedModelError("state_nodes requires a gbm diffusion")
    m = math.log(x0) + spec.log_drift * t
    s = spec.sigma * math.sqrt(t)
    return np.exp(m + s * q.z_nodes)


def weighted_space_integral(spec: DiffusionSpec, t: float, x0: float, h,
                            q: SpaceQuadrature) -> float:
    """int p(t, x0, xi) h(xi) d(xi), truncated at the window quantiles."""
    xi = state_nodes(spec, t, x0, q)
    vals = np.asarray(h(xi), float)
    if not np.all(np.isfinite(vals)):
        bad = xi[~np.isfinite(vals)][0]
        raise FloatingPointError(f"integrand not finite at xi={bad}")
    return float(np.sum(q.z_weights * vals))
