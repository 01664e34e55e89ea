"""Stopping-boundary solver for the parametric Fredholm integral equation.

For each capacity level z the optimal stopping boundary satisfies a nonlinear
integral equation in which the unknown curve enters both the integration
limits and the density argument.  After the exact identity for the discounted
pull of the cost process, the equation at a grid point x with trial level y
reads K(x, y; curve) = 0 with

    K = int_0^inf e^{-rt} int p1(t,x,xi) [ c_z(xi,z) S2(t,y,curve(xi))
                                           + PullAbove(t,y,curve(xi)) ] dxi dt,

where S2 is the tail mass of the cost diffusion above the curve and PullAbove
the discounted pull integrated above it.  This form is numerically stable: a
curve identically at the upper endpoint gives K = 0 exactly, and quadrature
mass truncation no longer multiplies the trial level.

The discretized system {K(x_i, y_i; interp(Y)) = 0} is solved by a damped
fixed-point warm start followed by Newton iterations with an analytically
assembled Jacobian (the kernel derivative with respect to the curve is
-F(xi, B) p2(t, y, B) scattered through the interpolation hats).  Plain
successive substitution orbits in a period-2 cycle here, so Newton is the
production path; the sup-norm residual of the returned curve is the
convergence certificate either way.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from . import costs
from .model import (
    GBM,
    DiffusionSpec,
    ProblemSpec,
    UnsupportedModelError,
)
from .quadrature import TimeQuadrature, space_quadrature, time_quadrature

_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ConvergenceError(RuntimeError):
    """Solver failed to converge; carries the last iterate and residuals."""

    def __init__(self, message, iterate=None, residuals=None):
        super().__init__(message)
        self.iterate = iterate
        self.residuals = residuals


# ---------------------------------------------------------------------------
# F and the threshold envelope
# ---------------------------------------------------------------------------

def F(spec: ProblemSpec, x, y, z: float):
    """Marginal drift balance c_z(x,z) - mu2(y) + r y."""
    y = np.asarray(y, float)
    return spec.cost.cz(x, z) - spec.y_diffusion.drift(y) + spec.r * y


def solve_threshold(spec: ProblemSpec, z: float, x: float,
                    tol: float = 1e-10) -> float:
    """Level where F(x, . ; z) changes sign, clipped to the state interval.

    Returns the lower endpoint when F is nonnegative throughout, the upper
    endpoint when it stays negative.
    """
    yd = spec.y_diffusion
    lo, hi = yd.state.lower, yd.state.upper
    if yd.kind == GBM:
        # F = cz + (r - mu2) y, linear in y with positive slope
        slope = spec.r - yd.mu
        root = -float(spec.cost.cz(x, z)) / slope
        return float(min(max(root, lo), hi))
    lo_q = lo + 1e-12 * (1.0 + abs(lo))
    if F(spec, x, lo_q, z) >= 0:
        return lo
    hi_q = hi - 1e-12 * (1.0 + abs(hi)) if np.isfinite(hi) else max(1.0, 2.0 * lo_q)
    if not np.isfinite(hi):
        while F(spec, x, hi_q, z) <= 0:
            hi_q *= 2.0
            if hi_q > 1e300:
                return hi
    elif F(spec, x, hi_q, z) <= 0:
        return hi
    a, b = lo_q, hi_q
    for _ in range(400):
        m = 0.5 * (a + b)
        if m == a or m == b or (b - a) < tol:
            break
        if F(spec, x, m, z) > 0:
            b = m
        else:
            a = m
    return 0.5 * (a + b)


@dataclass(frozen=True)
class ThresholdCurve:
    """Envelope curve: the zero level of F(x, . ; z) as a function of x."""

    z: float
    spec: ProblemSpec
    theta_star: float
    theta_sup: float

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        spec, z = self.spec, self.z
        yd = spec.y_diffusion
        x = np.asarray(x, float)
        if yd.kind == GBM:
            slope = spec.r - yd.mu
            root = -np.asarray(spec.cost.cz(x, z), float) / slope
            return np.clip(root, yd.state.lower, yd.state.upper)
        flat = np.atleast_1d(x)
        out = np.array([solve_threshold(spec, z, float(v)) for v in flat])
        return out.reshape(x.shape) if x.shape else float(out[0])


def threshold_curve(spec: ProblemSpec, z: float) -> ThresholdCurve:
    """Build the envelope together with its edge abscissae."""
    xd, yd = spec.x_diffusion, spec.y_diffusion
    x_lo, x_hi = xd.state.lower, xd.state.upper
    y_lo, y_hi = yd.state.lower, yd.state.upper

    def interior(x):
        th = solve_threshold(spec, z, x)
        return th

    # theta_*: first x with envelope above the lower endpoint.  F(., y_lo) is
    # nonincreasing in x, so bisect its sign change.
    def f_at_lo(x):
        return float(F(spec, x, y_lo + 1e-300 if y_lo == 0 else y_lo * (1 + 1e-12), z))

    theta_star = _monotone_edge(f_at_lo, x_lo, x_hi, positive_left=True)
    if np.isfinite(y_hi):
        def f_at_hi(x):
            return float(F(spec, x, y_hi * (1 - 1e-12), z))
        theta_sup = _monotone_edge(f_at_hi, x_lo, x_hi, positive_left=True)
    else:
        theta_sup = x_hi
    return ThresholdCurve(z=z, spec=spec, theta_star=theta_star, theta_sup=theta_sup)


def _monotone_edge(f, x_lo, x_hi, positive_left=True, tol=1e-12):
    """Sign-change abscissa of a monotone function on (x_lo, x_hi)."""
    a = x_lo + 1e-9 * (1 + abs(x_lo)) if np.isfinite(x_lo) else 1e-9
    b = x_hi - 1e-9 * (1 + abs(x_hi)) if np.isfinite(x_hi) else max(2 * a, 1.0)
    if f(a) <= 0:
        return x_lo
    if not np.isfinite(x_hi):
        while f(b) > 0:
            b *= 2.0
            if b > 1e300:
                return x_hi
    elif f(b) > 0:
        return x_hi
    for _ in range(200):
        m = 0.5 * (a + b)
        if m == a or m == b or (b - a) < tol * (1 + abs(m)):
            break
        if f(m) > 0:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# region emptiness and edge equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionReport:
    continuation_nonempty: Optional[bool]
    stopping_nonempty: Optional[bool]
    detail: str = ""


def check_regions_nonempty(spec: ProblemSpec, z: float) -> RegionReport:
    """Nonemptiness of the waiting and stopping regions.

    Waiting is nonempty iff F > 0 somewhere; F is nonincreasing in x and
    increasing in y, so the upper-left corner decides.  Stopping is nonempty
    iff the discounted marginal cost drops below -y_lo as x grows.
    """
    xd, yd = spec.x_diffusion, spec.y_diffusion
    x_lo = xd.state.lower if np.isfinite(xd.state.lower) and xd.state.lower > 0 else 1e-6
    y_hi = yd.state.upper if np.isfinite(yd.state.upper) else 1e9
    cont = bool(F(spec, x_lo * (1 + 1e-9), y_hi * (1 - 1e-9), z) > 0)

    y_floor = yd.state.lower
    stop: Optional[bool]
    try:
        xs = np.geomspace(max(x_lo, 1e-3), 1e5, 9)
        vals = np.array([costs.phi_marginal(spec, float(x), z) for x in xs])
        if vals[-1] < -y_floor - 1e-9 and vals[-1] <= vals[0]:
            stop = True
        elif np.all(np.diff(vals) > -1e-12) or abs(vals[-1] - vals[-2]) < 1e-9:
            # settled to a limit; compare it against the threshold
            stop = bool(vals[-1] < -y_floor - 1e-9)
        else:
            stop = None
    except UnsupportedModelError:
        stop = None
    return RegionReport(continuation_nonempty=cont, stopping_nonempty=stop)


def _edge_G(spec: ProblemSpec, z: float, x: float, tq: TimeQuadrature,
            y_level: float) -> float:
    """G(x) = y_level + int e^{-rt} [cost-below(x) - r*y_level*tail(x)] dt."""
    t = tq.nodes
    below = costs.marginal_cost_below(spec, t, x, x, z)
    if y_level != 0.0:
        from .model import survival_above
        tail = survival_above(spec.x_diffusion, t, x, x)
        integ = below - spec.r * y_level * tail
        head = float(costs.marginal_cost_below(spec, np.array([tq.t_min]), x, x, z)[0]
                     - spec.r * y_level * survival_above(spec.x_diffusion, np.array([tq.t_min]), x, x))
    else:
        integ = below
        head = float(costs.marginal_cost_below(spec, np.array([tq.t_min]), x, x, z)[0])
    return y_level + float(np.sum(tq.discounted_weights * integ)) + head * tq.head_weight


@dataclass(frozen=True)
class EdgeResult:
    x_edge: float
    bracket: tuple
    g_at_theta: float
    converged: bool


def edge_lower(spec: ProblemSpec, z: float, curve: ThresholdCurve,
               tq: Optional[TimeQuadrature] = None, tol: float = 1e-10) -> EdgeResult:
    """Abscissa below which the boundary sits at the lower endpoint.

    Root of the one-dimensional algebraic equation on (theta_*, upper); if no
    sign change exists on the searched range the lower state endpoint is
    returned.
    """
    tq = tq or time_quadrature(spec.r)
    y_lo = spec.y_diffusion.state.lower
    th = curve.theta_star
    x_hi = spec.x_diffusion.state.upper
    a = th * (1 + 1e-9) if th > 0 else th + 1e-9
    if not np.isfinite(a) or a >= x_hi:
        return EdgeResult(spec.x_diffusion.state.lower, (math.nan, math.nan), math.nan, True)
    ga = _edge_G(spec, z, a, tq, y_lo)
    if ga <= 0:
        return EdgeResult(spec.x_diffusion.state.lower, (a, a), ga, True)
    b = max(2.0 * a, a + 1.0)
    cap = 1e8 if not np.isfinite(x_hi) else x_hi * (1 - 1e-9)
    while _edge_G(spec, z, b, tq, y_lo) > 0:
        b *= 2.0
        if b > cap:
            return EdgeResult(spec.x_diffusion.state.lower, (a, b), ga, True)
    lo, hi = a, b
    for _ in range(200):
        m = 0.5 * (lo + hi)
        if m == lo or m == hi or (hi - lo) < tol:
            break
        if _edge_G(spec, z, m, tq, y_lo) > 0:
            lo = m
        else:
            hi = m
    return EdgeResult(0.5 * (lo + hi), (lo, hi), ga, True)


def edge_upper(spec: ProblemSpec, z: float, curve: ThresholdCurve,
               tq: Optional[TimeQuadrature] = None, tol: float = 1e-10) -> float:
    """Abscissa above which the boundary saturates at the upper endpoint.

    With an unbounded cost state and the pull slope uniformly below the
    discount rate this is the upper state endpoint; otherwise the bounded
    analogue of the lower-edge equation is bisected on (theta_sup, upper).
    """
    yd = spec.y_diffusion
    y_hi = yd.state.upper
    x_hi = spec.x_diffusion.state.upper
    if not np.isfinite(y_hi):
        ys = np.geomspace(max(yd.state.lower, 1e-3) if yd.state.lower > 0 else 1e-3, 1e6, 64)
        lam = spec.r - np.max(np.asarray(yd.drift_slope(ys), float))
        if lam > 0:
            return x_hi
        raise UnsupportedModelError(
            "unbounded cost state without uniform pull margin; upper edge undetermined")
    tq = tq or time_quadrature(spec.r)
    th = curve.theta_sup
    a = th * (1 + 1e-9) if np.isfinite(th) and th > 0 else 1e-9
    if not np.isfinite(th):
        return x_hi
    ga = _edge_G(spec, z, a, tq, y_hi)
    if ga <= 0:
        return max(a, curve.theta_sup)
    b = max(2.0 * a, a + 1.0)
    cap = 1e8 if not np.isfinite(x_hi) else x_hi * (1 - 1e-9)
    while _edge_G(spec, z, b, tq, y_hi) > 0:
        b *= 2.0
        if b > cap:
            return x_hi
    lo, hi = a, b
    for _ in range(200):
        m = 0.5 * (lo + hi)
        if m == lo or m == hi or (hi - lo) < tol:
            break
        if _edge_G(spec, z, m, tq, y_hi) > 0:
            lo = m
        else:
            hi = m
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# solver configuration and the solved-boundary object
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    n_x: int = 160
    n_time: int = 96
    n_time_panels: int = 8
    n_xi: int = 128
    tail_quantile: float = 1.0 - 1e-7
    t_min: float = 1e-5
    time_tail_eps: float = 1e-10
    tol_boundary: float = 1e-6
    tol_residual: float = 1e-5
    tol_bisect: float = 1e-10
    max_iters: int = 200
    max_newton: int = 60
    warmup_max: int = 8
    warmup_target: float = 0.04
    x_eval: float = 1.0
    grid_quantile: float = 1e-5
    grid_span_min: float = 10.0
    tail_fit_lag: int = 8

    @staticmethod
    def fast() -> "SolverConfig":
        """Reduced resolution for diagnostics and probes."""
        return SolverConfig(n_x=120, n_time=80, n_time_panels=8, n_xi=96)




CONVERGED = "converged"
NEVER_STOP = "never-stop"
STOP_EVERYWHERE = "stop-everywhere"


@dataclass(frozen=True)
class Boundary:
    """Solved stopping boundary on an x-grid for one capacity level."""

    z: float
    x_grid: np.ndarray
    y_values: np.ndarray
    x_star: float
    x_sup: float
    residual_sup: float
    envelope: ThresholdCurve
    flag: str = CONVERGED
    tail_exponent: float = 1.0
    iterations: int = 0
    cfg: Optional[SolverConfig] = None

    @property
    def converged(self) -> bool:
        return self.flag in (CONVERGED, NEVER_STOP, STOP_EVERYWHERE) and (
            self.flag != CONVERGED or self.residual_sup == self.residual_sup)

    def eval(self, x):
        """Boundary level at arbitrary x: lower endpoint below the grid,
        log-linear interpolation on it, power-law continuation (capped by the
        envelope) above it."""
        spec = self.envelope.spec
        y_lo = spec.y_diffusion.state.lower
        y_hi = spec.y_diffusion.state.upper
        x = np.asarray(x, float)
        scalar = x.ndim == 0
        xf = np.atleast_1d(x).astype(float)
        if self.flag == NEVER_STOP:
            out = np.full_like(xf, y_lo)
            return float(out[0]) if scalar else out
        if self.flag == STOP_EVERYWHERE:
            out = np.full_like(xf, y_hi)
            return float(out[0]) if scalar else out
        lnx = np.log(np.maximum(xf, 1e-300))
        lnxg = np.log(self.x_grid)
        out = np.interp(lnx, lnxg, self.y_values, left=y_lo, right=np.nan)
        m = np.isnan(out)
        if m.any():
            yl = self.y_values[-1]
            tail = yl * np.exp(np.minimum(self.tail_exponent * (lnx[m] - lnxg[-1]), 500.0))
            out[m] = np.minimum(tail, np.asarray(self.envelope.eval(xf[m]), float))
        return float(out[0]) if scalar else out

    def __call__(self, x):
        return self.eval(x)

    def to_csv(self, path) -> None:
        th = np.asarray(self.envelope.eval(self.x_grid), float)
        with open(path, "w") as fh:
            fh.write(f"# z={self.z!r} x_star={self.x_star!r} x_sup={self.x_sup!r} "
                     f"residual_sup={self.residual_sup!r} flag={self.flag}\n")
            fh.write("x,y_star,theta\n")
            for x, y, t in zip(self.x_grid, self.y_values, th):
                fh.write(f"{x!r},{y!r},{t!r}\n")


def boundary_from_csv(path, spec: ProblemSpec) -> Boundary:
    with open(path) as fh:
        header = fh.readline().strip().lstrip("# ").split()
        meta = dict(kv.split("=", 1) for kv in header)
        fh.readline()
        rows = [line.strip().split(",") for line in fh if line.strip()]
    x = np.array([float(r[0]) for r in rows])
    y = np.array([float(r[1]) for r in rows])
    z = float(meta["z"])
    return Boundary(
        z=z, x_grid=x, y_values=y,
        x_star=float(meta["x_star"]), x_sup=float(meta["x_sup"]),
        residual_sup=float(meta["residual_sup"]),
        envelope=threshold_curve(spec, z), flag=meta.get("flag", CONVERGED),
    )


# ---------------------------------------------------------------------------
# the discretized Fredholm system
# ---------------------------------------------------------------------------

class FredholmSystem:
    """Tensor-evaluated K(x_i, y; curve) on a fixed x-grid for one z.

    Requires both diffusions to be geometric Brownian motions (the tensor
    kernels use the log-translation structure).  All heavy arrays are built
    once per (spec, z, grid); evaluations are vectorized over grid rows.
    """

    def __init__(self, spec: ProblemSpec, z: float, x_grid: np.ndarray,
                 curve: ThresholdCurve, cfg: SolverConfig):
        if spec.x_diffusion.kind != GBM or spec.y_diffusion.kind != GBM:
            raise UnsupportedModelError("Fredholm tensor solver requires gbm diffusions")
        self.spec, self.z, self.cfg = spec, z, cfg
        self.curve = curve
        xd, yd = spec.x_diffusion, spec.y_diffusion
        tq = time_quadrature(spec.r, cfg.n_time, cfg.n_time_panels, cfg.t_min,
                             cfg.time_tail_eps)
        sq = space_quadrature(cfg.n_xi, cfg.tail_quantile)
        # fold the head node into the rule: weight (1-e^{-r t_min})/r at t_min
        self.tn = np.concatenate([[tq.t_min], tq.nodes])
        self.Wt = np.concatenate([[tq.head_weight], tq.discounted_weights])
        self.xg = np.asarray(x_grid, float)
        self.nx = len(self.xg)
        self.lnxg = np.log(self.xg)
        ln_off = (xd.log_drift * self.tn)[:, None] + \
                 (xd.sigma * np.sqrt(self.tn))[:, None] * sq.z_nodes[None, :]
        self.LnXi = self.lnxg[:, None, None] + ln_off[None, :, :]
        Xi = np.exp(self.LnXi)
        self.CZ = np.asarray(spec.cost.cz(Xi, z), float)
        self.ThXi = np.asarray(curve.eval(Xi), float)
        self.Wtj = self.Wt[:, None] * sq.z_weights[None, :]
        self.wflat = self.Wtj.ravel()
        self.s2t = yd.sigma * np.sqrt(self.tn)
        self.m2t = yd.log_drift * self.tn
        self.pull_pref = (spec.r - yd.mu) * np.exp(yd.mu * self.tn)
        self.thx = np.asarray(curve.eval(self.xg), float)
        self.left_mask = ln_off <= 0.0
        # interpolation cells of the xi-field (fixed per grid)
        flat = self.LnXi.ravel()
        idx = np.searchsorted(self.lnxg, flat) - 1
        self.inside = (idx >= 0) & (idx < self.nx - 1)
        self.beyond = idx >= self.nx - 1
        idxc = np.clip(idx, 0, self.nx - 2)
        self.cell = idxc
        width = self.lnxg[idxc + 1] - self.lnxg[idxc]
        self.lam = np.where(self.inside, (flat - self.lnxg[idxc]) / width, 0.0)
        self.tail_fit_lag = min(cfg.tail_fit_lag, max(self.nx - 2, 1))

    # -- candidate curve sampled on the xi-field ---------------------------
    def tail_exponent(self, Y: np.ndarray) -> float:
        i1 = -1 - self.tail_fit_lag
        if Y[i1] > 0 and Y[-1] > Y[i1]:
            return float((np.log(Y[-1]) - np.log(Y[i1])) / (self.lnxg[-1] - self.lnxg[i1]))
        return 1.0

    def curve_field(self, Y: np.ndarray) -> np.ndarray:
        flat = self.LnXi.ravel()
        v = np.interp(flat, self.lnxg, Y, left=Y[0], right=np.nan)
        m = np.isnan(v)
        if m.any():
            p = self.tail_exponent(Y)
            tail = Y[-1] * np.exp(np.minimum(p * (flat[m] - self.lnxg[-1]), 500.0))
            v[m] = np.minimum(tail, self.ThXi.ravel()[m])
        lo = self.spec.y_diffusion.state.lower
        v[~m & (v < lo)] = lo
        return v.reshape(self.LnXi.shape)

    # -- kernel evaluations -------------------------------------------------
    def _k_core(self, lnY, LnB):
        argS = (lnY[:, None, None] - LnB + self.m2t[None, :, None]) / self.s2t[None, :, None]
        S = ndtr(argS)
        argP = argS + self.s2t[None, :, None]
        P = ndtr(argP)
        ypref = np.exp(lnY)[:, None, None] * self.pull_pref[None, :, None]
        integ = self.CZ * S + ypref * P
        K = integ.reshape(self.nx, -1) @ self.wflat
        return K, argS, argP, S, P, ypref

    def k_plain(self, Y_trial: np.ndarray, Y_curve: np.ndarray) -> np.ndarray:
        """K at trial levels Y_trial with the candidate curve interp(Y_curve)."""
        B = self.curve_field(Y_curve)
        with np.errstate(divide="ignore"):
            LnB = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)), -np.inf)
        lnY = np.log(np.maximum(Y_trial, 1e-300))
        return self._k_core(lnY, LnB)[0]

    def k_rows_split(self, rows, lnY, LnB_curve):
        """Diagonal-split K used by the warm-up bisection."""
        ln_y = lnY[:, None, None]
        LnB = np.where(self.left_mask[None], np.minimum(LnB_curve[rows], ln_y),
                       np.maximum(LnB_curve[rows], ln_y))
        argS = (ln_y - LnB + self.m2t[None, :, None]) / self.s2t[None, :, None]
        S = ndtr(argS)
        P = ndtr(argS + self.s2t[None, :, None])
        integ = self.CZ[rows] * S + \
            (np.exp(lnY)[:, None, None] * self.pull_pref[None, :, None]) * P
        return integ.reshape(len(rows), -1) @ self.wflat

    def residual_and_jac(self, Y: np.ndarray, want_jac: bool = True):
        """System residual R_i = K(x_i, Y_i; interp(Y)) and its Jacobian."""
        B = self.curve_field(Y)
        with np.errstate(divide="ignore"):
            LnB = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)), -np.inf)
        lnY = np.log(np.maximum(Y, 1e-300))
        K, argS, argP, S, P, ypref = self._k_core(lnY, LnB)
        if not want_jac:
            return K, None
        st = self.s2t[None, :, None]
        phiS = _INV_SQRT2PI * np.exp(-0.5 * argS * argS)
        phiP = _INV_SQRT2PI * np.exp(-0.5 * argP * argP)
        # diagonal: d/d ln y of the trial level
        d_lnY = ((self.CZ * phiS / st) + ypref * (P + phiP / st)).reshape(self.nx, -1) @ self.wflat
        # curve sensitivity: dI/dB = -(cz + (r - mu2) B) p2(t, y, B)
        r_minus = self.spec.r - self.spec.y_diffusion.mu
        with np.errstate(divide="ignore", invalid="ignore"):
            p2 = np.where(B > 0, phiS / (np.where(B > 0, B, 1.0) * st), 0.0)
        contrib = (-(self.CZ + r_minus * B) * p2 *
                   np.broadcast_to(self.Wtj[None], B.shape)).ravel()
        inside, beyond = self.inside, self.beyond
        leftout = ~inside & ~beyond
        col_lo = np.where(inside, self.cell, np.where(leftout, 0, self.nx - 1))
        col_hi = np.where(inside, self.cell + 1, col_lo)
        w_lo = np.where(inside, 1.0 - self.lam, 1.0)
        w_hi = np.where(inside, self.lam, 0.0)
        # left of the grid the field repeats the first node; beyond it, a
        # power tail anchored at the last node with level sensitivity
        # dB/dY_last ~ B / Y_last.
        fac = np.where(beyond, B.ravel() / max(Y[-1], 1e-300), 1.0)
        rows = np.repeat(np.arange(self.nx), self.Wtj.size)
        c = contrib * fac
        Jf = np.bincount(rows * self.nx + col_lo, weights=c * w_lo,
                         minlength=self.nx * self.nx)
        Jf += np.bincount(rows * self.nx + col_hi, weights=c * w_hi,
                          minlength=self.nx * self.nx)
        J = Jf.reshape(self.nx, self.nx)
        J[np.arange(self.nx), np.arange(self.nx)] += d_lnY / np.maximum(Y, 1e-300)
        return K, J

    # -- warm start: damped diagonal-split fixed point ----------------------
    def warmup(self, y0: Optional[np.ndarray] = None):
        cfg = self.cfg
        cand = np.minimum(np.maximum.accumulate(self.thx if y0 is None else y0), self.thx)
        act = np.where(self.thx > self.spec.y_diffusion.state.lower)[0]
        if len(act) == 0:
            return cand, 0
        scale = np.maximum(self.thx, 1.0)
        it = 0
        for it in range(cfg.warmup_max):
            with np.errstate(divide="ignore"):
                LnBc = np.log(np.maximum(self.curve_field(np.maximum(cand, 1e-300)), 1e-300))
            llo = np.full(len(act), np.log(1e-300))
            lhi = np.log(np.maximum(self.thx[act], 1e-300))
            tol = 0.02 * scale[act] * (0.35 ** it)
            idx = np.arange(len(act))
            while len(idx) > 0:
                mid = 0.5 * (llo[idx] + lhi[idx])
                kv = self.k_rows_split(act[idx], mid, LnBc)
                neg = kv < 0
                stall = (mid == llo[idx]) | (mid == lhi[idx])
                llo[idx] = np.where(neg, mid, llo[idx])
                lhi[idx] = np.where(neg, lhi[idx], mid)
                done = stall | ((np.exp(lhi[idx]) - np.exp(llo[idx])) < tol[idx])
                idx = idx[~done]
            root = np.zeros(self.nx)
            root[act] = 0.5 * (np.exp(llo) + np.exp(lhi))
            newy = np.minimum(np.maximum.accumulate(cand + 0.5 * (root - cand)), self.thx)
            rel = np.abs((newy - cand) / scale).max()
            cand = newy
            if rel < cfg.warmup_target and it >= 2:
                break
        return cand, it + 1

    # -- Newton on the discretized system ------------------------------------
    def _project(self, Y: np.ndarray, active: np.ndarray) -> np.ndarray:
        """Clip into the admissible class: nondecreasing, within the envelope.
        Spurious non-monotone roots of the discretized system exist; Newton is
        kept inside the monotone cone where the solution is the unique one."""
        out = Y.copy()
        out[active] = np.clip(np.maximum.accumulate(Y[active]), 1e-12, self.thx[active])
        out[~active] = 1e-12
        return out

    def newton(self, y0: np.ndarray, active: np.ndarray):
        cfg = self.cfg
        Y = self._project(y0, active)
        sup_r = math.inf
        step = math.inf
        n_done = 0
        for it in range(cfg.max_newton):
            R, J = self.residual_and_jac(Y)
            sup_r = float(np.abs(R[active]).max())
            Jl = J * Y[None, :]
            Ja = Jl[np.ix_(active, active)]
            try:
                dl = np.linalg.solve(Ja, -R[active])
            except np.linalg.LinAlgError:
                dl = np.linalg.lstsq(Ja, -R[active], rcond=None)[0]
            dl = np.clip(dl, -2.0, 2.0)
            alpha = 1.0
            target = 0.1 * cfg.tol_residual
            for _ in range(14):
                Yn = Y.copy()
                Yn[active] = Y[active] * np.exp(alpha * dl)
                Yn = self._project(Yn, active)
                Rn, _ = self.residual_and_jac(Yn, want_jac=False)
                sn = float(np.abs(Rn[active]).max())
                if sn < sup_r * (1.0 - 1e-4 * alpha) or sn < target:
                    break
                alpha *= 0.5
            else:
                Yn, sn = Y, sup_r
            step = float(np.abs(Yn - Y).max())
            Y = Yn
            n_done = it + 1
            if sn < target and step < cfg.tol_boundary:
                sup_r = sn
                break
            sup_r = sn
        return Y, sup_r, step, n_done

    def residual_profile(self, boundary_values: np.ndarray) -> np.ndarray:
        """|Y + fredholm rhs| on interior rows (zero where the boundary is
        pinned at an endpoint, where the equation does not apply)."""
        lo = self.spec.y_diffusion.state.lower
        act = boundary_values > lo
        Yq = np.where(act, boundary_values, 1e-300)
        R = self.k_plain(Yq, boundary_values)
        return np.where(act, np.abs(R), 0.0)


def _solver_grid(spec: ProblemSpec, cfg: SolverConfig, x_star: float) -> np.ndarray:
    """Geometric grid from below the lower edge to the far density-tail
    quantile.  The quantile is taken from the larger of the configured
    evaluation point and the slice's own edge, so high-capacity slices keep
    the same logarithmic span as low ones."""
    xd = spec.x_diffusion
    t_max = -math.log(cfg.time_tail_eps) / spec.r
    have_edge = x_star > 0 and np.isfinite(x_star)
    x_ref = max(cfg.x_eval, x_star) if have_edge else cfg.x_eval
    x_q = float(xd.quantile(t_max, x_ref, 1.0 - cfg.grid_quantile))
    lo = 0.9 * x_star if have_edge else 0.9 * cfg.x_eval
    hi = max(x_q, cfg.grid_span_min * lo)
    return np.geomspace(lo, hi, cfg.n_x)


def solve_boundary(spec: ProblemSpec, z: float,
                   cfg: Optional[SolverConfig] = None,
                   warm_start: Optional[Callable] = None) -> Boundary:
    """Solve the stopping boundary at capacity z.

    Degenerate region structure short-circuits to a flagged boundary; the
    regular path runs the warm-up fixed point followed by Newton, attaches the
    edge abscissae, and certifies with the sup-norm Fredholm residual.
    ``warm_start`` may supply an initial curve (callable of x).
    """
    cfg = cfg or SolverConfig()
    curve = threshold_curve(spec, z)
    y_lo, y_hi = spec.y_diffusion.state.lower, spec.y_diffusion.state.upper
    regions = check_regions_nonempty(spec, z)

    tq = time_quadrature(spec.r, cfg.n_time, cfg.n_time_panels, cfg.t_min,
                         cfg.time_tail_eps)
    if regions.stopping_nonempty is False:
        xg = _solver_grid(spec, cfg, curve.theta_star)
        return Boundary(z=z, x_grid=xg, y_values=np.full(cfg.n_x, y_lo),
                        x_star=spec.x_diffusion.state.upper,
                        x_sup=spec.x_diffusion.state.upper,
                        residual_sup=0.0, envelope=curve, flag=NEVER_STOP, cfg=cfg)
    if regions.continuation_nonempty is False:
        xg = _solver_grid(spec, cfg, curve.theta_star)
        return Boundary(z=z, x_grid=xg, y_values=np.full(cfg.n_x, y_hi),
                        x_star=spec.x_diffusion.state.lower,
                        x_sup=spec.x_diffusion.state.lower,
                        residual_sup=0.0, envelope=curve, flag=STOP_EVERYWHERE, cfg=cfg)

    edge = edge_lower(spec, z, curve, tq)
    x_star = edge.x_edge
    xg = _solver_grid(spec, cfg, x_star)
    system = FredholmSystem(spec, z, xg, curve, cfg)
    active = xg > x_star

    def _warm(extra_iters=0, shrink=1.0):
        coarse_cfg = replace(cfg, n_time=max(cfg.n_time // 2, 48),
                             n_xi=max(cfg.n_xi // 2, 48),
                             warmup_max=cfg.warmup_max + extra_iters,
                             warmup_target=cfg.warmup_target * shrink)
        coarse = FredholmSystem(spec, z, xg, curve, coarse_cfg)
        return coarse.warmup()

    if warm_start is not None:
        y0 = np.minimum(np.maximum.accumulate(np.asarray(warm_start(xg), float)),
                        system.thx)
        n_warm = 0
    else:
        y0, n_warm = _warm()
    Y, sup_r, step, n_newton = system.newton(y0, active)
    if sup_r > 0.1 * cfg.tol_residual:
        # one retry from a deeper warm start
        y0, extra = _warm(extra_iters=4, shrink=0.25)
        Y, sup_r, step, n2 = system.newton(y0, active)
        n_warm += extra
        n_newton += n2
    Y = np.minimum(np.maximum.accumulate(Y), system.thx)
    Y[~active] = y_lo
    prof = system.residual_profile(Y)
    residual_sup = float(prof.max())
    x_sup = edge_upper(spec, z, curve, tq)
    bnd = Boundary(z=z, x_grid=xg, y_values=Y, x_star=x_star, x_sup=x_sup,
                   residual_sup=residual_sup, envelope=curve, flag=CONVERGED,
                   tail_exponent=system.tail_exponent(Y),
                   iterations=n_warm + n_newton, cfg=cfg)
    if residual_sup > cfg.tol_residual or step > 10 * cfg.tol_boundary:
        raise ConvergenceError(
            f"boundary solve at z={z} did not converge: residual_sup={residual_sup:.3e}, "
            f"last step={step:.3e}", iterate=bnd, residuals=prof)
    return bnd


def fredholm_rhs(spec: ProblemSpec, z: float, candidate, x, y,
                 cfg: Optional[SolverConfig] = None) -> float:
    """Right-hand side of the boundary equation at (x, y) for a candidate
    curve (callable of x).  Equals -y exactly when the candidate saturates the
    upper endpoint, and the discounted marginal cost when it sits at the lower
    one."""
    cfg = cfg or SolverConfig()
    curve = threshold_curve(spec, z)
    xv = float(x)
    system = FredholmSystem(spec, z, np.array([xv * (1 - 1e-9), xv, xv * (1 + 1e-9)]),
                            curve, cfg)
    B = np.asarray(candidate(np.exp(system.LnXi)), float)
    with np.errstate(divide="ignore"):
        LnB = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)), -np.inf)
    lnY = np.log(np.maximum(np.array([y, y, y], float), 1e-300))
    K = system._k_core(lnY, LnB)[0]
    return float(K[1]) - float(y)


@dataclass(frozen=True)
class UniquenessReport:
    distance: float
    residual_first: float
    residual_second: float
    tol_boundary: float

    @property
    def within(self) -> bool:
        return self.distance < 10.0 * self.tol_boundary


def uniqueness_probe(spec: ProblemSpec, z: float, solved: Boundary,
                     cfg: Optional[SolverConfig] = None) -> UniquenessReport:
    """Re-solve from a second initialization (the solved curve scaled by 1/2,
    kept monotone) and report the sup distance between the two fixed points."""
    cfg = cfg or solved.cfg or SolverConfig()
    if solved.flag != CONVERGED:
        return UniquenessReport(0.0, solved.residual_sup, solved.residual_sup,
                                cfg.tol_boundary)
    curve = solved.envelope
    system = FredholmSystem(spec, z, solved.x_grid, curve, cfg)
    active = solved.x_grid > solved.x_star
    start = np.minimum(np.maximum.accumulate(0.5 * solved.y_values), system.thx)
    Y, sup_r, _, _ = system.newton(np.maximum(start, 1e-12), active)
    Y = np.minimum(np.maximum.accumulate(Y), system.thx)
    Y[~active] = spec.y_diffusion.state.lower
    dist = float(np.abs(Y - solved.y_values).max())
    return UniquenessReport(distance=dist, residual_first=solved.residual_sup,
                            residual_second=float(system.residual_profile(Y).max()),
                            tol_boundary=cfg.tol_boundary)


def candidate_residual(spec: ProblemSpec, z: float, boundary: Boundary,
                       candidate_values: np.ndarray,
                       cfg: Optional[SolverConfig] = None) -> float:
    """Sup-norm Fredholm residual of an arbitrary candidate curve given on the
    boundary's x-grid (used to reject non-solutions such as the envelope)."""
    cfg = cfg or boundary.cfg or SolverConfig()
    system = FredholmSystem(spec, z, boundary.x_grid, boundary.envelope, cfg)
    return float(system.residual_profile(np.asarray(candidate_values, float)).max())
