"""Stopping value: analytic evaluation from a solved boundary, Monte Carlo
payoffs of stopping rules, and probabilistic diagnostics (discounted-pull
identity, supermartingale/martingale probes, smooth fit).

The analytic value uses the same stabilized kernel as the boundary solver; on
the stopping side of the boundary the value equals minus the cost level
exactly, so the integral form is only evaluated in the waiting region.
Monte Carlo uses exact gbm transitions (no discretization of the dynamics);
the first-passage detection on the time grid carries an O(dt) bias absorbed
into the comparison tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from . import costs
from .boundary import Boundary, SolverConfig, STOP_EVERYWHERE, NEVER_STOP
from .model import GBM, ProblemSpec, UnsupportedModelError
from .quadrature import space_quadrature, time_quadrature

ANALYTIC = "analytic"
MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class StoppingValue:
    x: float
    y: float
    z: float
    v: float
    method: str
    stderr: float = 0.0


@dataclass(frozen=True)
class StoppingRule:
    """Stop the first time the cost level falls to the boundary."""

    boundary: Boundary


@dataclass(frozen=True)
class ConstantTimeRule:
    """Stop at a fixed deterministic time (inf = never stop)."""

    t: float


@dataclass(frozen=True)
class MCConfig:
    paths: int = 20000
    dt: float = 0.02
    horizon: float = 100.0
    seed: int = 0
    batch: int = 200000


class ValueEvaluator:
    """Batched analytic stopping value v(., .; z) for one solved boundary."""

    def __init__(self, spec: ProblemSpec, boundary: Boundary,
                 cfg: Optional[SolverConfig] = None):
        if spec.x_diffusion.kind != GBM or spec.y_diffusion.kind != GBM:
            raise UnsupportedModelError("analytic value requires gbm diffusions")
        cfg = cfg or getattr(boundary, "cfg", None) or SolverConfig()
        self.spec, self.boundary, self.cfg = spec, boundary, cfg
        xd, yd = spec.x_diffusion, spec.y_diffusion
        tq = time_quadrature(spec.r, cfg.n_time, cfg.n_time_panels, cfg.t_min,
                             cfg.time_tail_eps)
        sq = space_quadrature(cfg.n_xi, cfg.tail_quantile)
        self.tn = np.concatenate([[tq.t_min], tq.nodes])
        self.Wt = np.concatenate([[tq.head_weight], tq.discounted_weights])
        self.ln_off = (xd.log_drift * self.tn)[:, None] + \
                      (xd.sigma * np.sqrt(self.tn))[:, None] * sq.z_nodes[None, :]
        self.wflat = (self.Wt[:, None] * sq.z_weights[None, :]).ravel()
        self.s2t = yd.sigma * np.sqrt(self.tn)
        self.m2t = yd.log_drift * self.tn
        self.pull_pref = (spec.r - yd.mu) * np.exp(yd.mu * self.tn)
        self.chunk = max(1, int(2.5e6 // self.ln_off.size))

    def with_boundary(self, boundary) -> "ValueEvaluator":
        """Shallow copy bound to another boundary (tensors shared)."""
        import copy
        other = copy.copy(self)
        other.boundary = boundary
        return other

    def k_values(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """K(x, y; solved boundary) for point arrays; v = K - y in the
        waiting region."""
        out = np.empty(len(x))
        for lo in range(0, len(x), self.chunk):
            sl = slice(lo, lo + self.chunk)
            out[sl] = self._k_chunk(x[sl], y[sl])
        return out

    def _k_chunk(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        spec, bnd = self.spec, self.boundary
        LnXi = np.log(x)[:, None, None] + self.ln_off[None, :, :]
        B = np.asarray(bnd.eval(np.exp(LnXi.ravel())), float).reshape(LnXi.shape)
        with np.errstate(divide="ignore"):
            LnB = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)), -np.inf)
        lnY = np.log(np.maximum(y, 1e-300))[:, None, None]
        argS = (lnY - LnB + self.m2t[None, :, None]) / self.s2t[None, :, None]
        S = ndtr(argS)
        P = ndtr(argS + self.s2t[None, :, None])
        CZ = np.asarray(spec.cost.cz(np.exp(LnXi), bnd.z), float)
        integ = CZ * S + (y[:, None, None] * self.pull_pref[None, :, None]) * P
        return integ.reshape(len(x), -1) @ self.wflat

    def _correction_chunk(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        spec, bnd = self.spec, self.boundary
        LnXi = np.log(x)[:, None, None] + self.ln_off[None, :, :]
        B = np.asarray(bnd.eval(np.exp(LnXi.ravel())), float).reshape(LnXi.shape)
        with np.errstate(divide="ignore"):
            LnB = np.where(B > 0, np.log(np.where(B > 0, B, 1.0)), -np.inf)
        lnY = np.log(np.maximum(y, 1e-300))[:, None, None]
        argS = (lnY - LnB + self.m2t[None, :, None]) / self.s2t[None, :, None]
        below = ndtr(-argS)
        pull_below = ndtr(-(argS + self.s2t[None, :, None]))
        CZ = np.asarray(spec.cost.cz(np.exp(LnXi), bnd.z), float)
        integ = CZ * below + (y[:, None, None] * self.pull_pref[None, :, None]) * pull_below
        return -(integ.reshape(len(x), -1) @ self.wflat)

    def correction_values(self, x, y) -> np.ndarray:
        """v(x, y) - phi(x) evaluated without cancellation.

        The difference collapses onto the stopping side of the boundary, so
        the kernel integrates the below-boundary mass directly; in the
        stopping region this equals -y - phi exactly."""
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        out = np.empty(len(x))
        for lo in range(0, len(x), self.chunk):
            sl = slice(lo, lo + self.chunk)
            out[sl] = self._correction_chunk(x[sl], y[sl])
        return out

    def values(self, x, y) -> np.ndarray:
        """Stopping value; exactly -y on and below the boundary."""
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        if self.boundary.flag == STOP_EVERYWHERE:
            return -y
        if self.boundary.flag == NEVER_STOP:
            return np.array([costs.phi_marginal(self.spec, float(xi), self.boundary.z)
                             for xi in x])
        yb = np.asarray(self.boundary.eval(x), float)
        waiting = y > yb
        out = -y.copy()
        if waiting.any():
            out[waiting] = self.k_values(x[waiting], y[waiting]) - y[waiting]
        return out


def value_analytic(spec: ProblemSpec, boundary: Boundary, x: float, y: float,
                   cfg: Optional[SolverConfig] = None,
                   evaluator: Optional[ValueEvaluator] = None) -> StoppingValue:
    ev = evaluator or ValueEvaluator(spec, boundary, cfg)
    v = float(ev.values([x], [y])[0])
    return StoppingValue(x=x, y=y, z=boundary.z, v=v, method=ANALYTIC)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class RunningStat:
    """Associative (count, mean, M2) accumulator."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def add(self, sample: np.ndarray) -> None:
        n = len(sample)
        if n == 0:
            return
        m = float(sample.mean())
        s2 = float(((sample - m) ** 2).sum())
        tot = self.count + n
        d = m - self.mean
        self.m2 += s2 + d * d * self.count * n / tot
        self.mean += d * n / tot
        self.count = tot

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return 0.0
        return math.sqrt(self.m2 / (self.count - 1) / self.count)


def _gbm_step_factors(spec: ProblemSpec, dt: float):
    xd, yd = spec.x_diffusion, spec.y_diffusion
    return (math.exp(xd.log_drift * dt), xd.sigma * math.sqrt(dt),
            math.exp(yd.log_drift * dt), yd.sigma * math.sqrt(dt))


def payoff_of_rule(spec: ProblemSpec, rule, x: float, y: float, z: float,
                   mc: MCConfig) -> StoppingValue:
    """Monte Carlo estimate of the stopping payoff for a rule.

    Rules: :class:`StoppingRule` (first time the cost level is at or below the
    boundary, checked on the time grid) or :class:`ConstantTimeRule`.  Paths
    alive at the horizon continue forever: the remaining cost integral is the
    closed-form discounted marginal cost and the stopped-cost term vanishes
    under the discount.
    """
    if isinstance(rule, ConstantTimeRule) and rule.t == 0.0:
        return StoppingValue(x=x, y=y, z=z, v=-y, method=MONTE_CARLO, stderr=0.0)
    if spec.x_diffusion.kind != GBM or spec.y_diffusion.kind != GBM:
        raise UnsupportedModelError("simulation requires gbm diffusions")
    stat = RunningStat()
    rng = np.random.default_rng(mc.seed)
    remaining = mc.paths
    while remaining > 0:
        n = min(remaining, mc.batch)
        stat.add(_payoff_batch(spec, rule, x, y, z, mc, rng, n))
        remaining -= n
    return StoppingValue(x=x, y=y, z=z, v=stat.mean, method=MONTE_CARLO,
                         stderr=stat.stderr)


def _payoff_batch(spec: ProblemSpec, rule, x, y, z, mc: MCConfig, rng, n: int):
    e1, sd1, e2, sd2 = _gbm_step_factors(spec, mc.dt)
    r, dt = spec.r, mc.dt
    n_steps = int(round(mc.horizon / dt))
    disc_step = math.exp(-r * dt)
    # per-step discounted time weight: int_t^{t+dt} e^{-rs} ds = e^{-rt}(1-e^{-r dt})/r
    wstep = (1.0 - disc_step) / r
    X = np.full(n, float(x))
    Y = np.full(n, float(y))
    pay = np.zeros(n)
    alive = np.ones(n, bool)
    is_bound = isinstance(rule, StoppingRule)
    t_fixed = rule.t if isinstance(rule, ConstantTimeRule) else math.inf
    if is_bound:
        hit = Y <= np.asarray(rule.boundary.eval(X), float)
        pay[hit] = -Y[hit]
        alive &= ~hit
    cz_now = np.asarray(spec.cost.cz(X, z), float)
    disc = 1.0
    t_now = 0.0
    for k in range(n_steps):
        if not alive.any():
            break
        Xn = X * (e1 * np.exp(sd1 * rng.standard_normal(n)))
        Yn = Y * (e2 * np.exp(sd2 * rng.standard_normal(n)))
        cz_next = np.asarray(spec.cost.cz(Xn, z), float)
        pay[alive] += disc * wstep * 0.5 * (cz_now[alive] + cz_next[alive])
        X, Y, cz_now = Xn, Yn, cz_next
        disc *= disc_step
        t_now += dt
        if is_bound:
            sub = np.where(alive)[0]
            if len(sub):
                hit = Y[sub] <= np.asarray(rule.boundary.eval(X[sub]), float)
                idx = sub[hit]
                pay[idx] += -disc * Y[idx]
                alive[idx] = False
        elif t_now >= t_fixed - 0.5 * dt and np.isfinite(t_fixed):
            pay[alive] += -disc * Y[alive]
            alive[:] = False
    if alive.any():
        tail = np.array([costs.phi_marginal(spec, float(xi), z) for xi in X[alive]]) \
            if not spec.cost.is_quadratic_spread else _phi_vec(spec, X[alive], z)
        pay[alive] += disc * tail
    return pay


def _phi_vec(spec: ProblemSpec, xs: np.ndarray, z: float) -> np.ndarray:
    k0, r, mu1 = spec.cost.K0, spec.r, spec.x_diffusion.mu
    return 2.0 * k0 * (z / r - xs / (r - mu1))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IbpCheck:
    t: float
    lhs: float
    rhs: float
    stderr: float
    analytic: float


def ibp_identity_check(spec: ProblemSpec, t_values: Sequence[float], y: float,
                       mc: MCConfig) -> tuple:
    """Pathwise check of E[e^{-rt} Y_t] = y + E int_0^t e^{-rs}(mu2 - r)(Y_s) ds.

    Returns (max |paired discrepancy| in stderr units, per-time details).  For
    gbm both sides equal y e^{(mu2 - r) t}.
    """
    yd, r = spec.y_diffusion, spec.r
    if yd.kind != GBM:
        raise UnsupportedModelError("simulation requires gbm cost diffusion")
    rng = np.random.default_rng(mc.seed)
    dt = mc.dt
    t_values = sorted(float(t) for t in t_values)
    n = mc.paths
    e2, sd2 = math.exp(yd.log_drift * dt), yd.sigma * math.sqrt(dt)
    disc_step = math.exp(-r * dt)
    wstep = (1.0 - disc_step) / r
    Y = np.full(n, float(y))
    acc = np.zeros(n)     # int_0^t e^{-rs} (mu2(Y) - r Y) ds, trapezoid
    disc = 1.0
    t_now = 0.0
    results = []
    worst = 0.0
    for t_target in t_values:
        while t_now < t_target - 0.5 * dt:
            g_now = yd.mu * Y - r * Y
            Yn = Y * (e2 * np.exp(sd2 * rng.standard_normal(n)))
            g_next = yd.mu * Yn - r * Yn
            acc += disc * wstep * 0.5 * (g_now + g_next)
            Y = Yn
            disc *= disc_step
            t_now += dt
        lhs = disc * Y
        rhs = y + acc
        d = lhs - rhs
        se = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        analytic = y * math.exp((yd.mu - r) * t_target)
        results.append(IbpCheck(t=t_target, lhs=float(lhs.mean()),
                                rhs=float(rhs.mean()), stderr=se, analytic=analytic))
        if se > 0:
            worst = max(worst, abs(float(d.mean())) / se)
        else:
            worst = max(worst, abs(float(d.mean())))
    return worst, results


@dataclass(frozen=True)
class SupermartingaleReport:
    times: tuple
    m: tuple
    m_stderr: tuple
    increments_z: tuple      # z-scores of m(t_{k+1}) - m(t_k), paired
    violations: int
    m_stopped_final: float
    m_stopped_stderr: float
    v0: float

    @property
    def martingale_gap_z(self) -> float:
        if self.m_stopped_stderr == 0:
            return abs(self.m_stopped_final - self.v0)
        return abs(self.m_stopped_final - self.v0) / self.m_stopped_stderr


def supermartingale_probe(spec: ProblemSpec, boundary: Boundary, x: float,
                          y: float, z: float, times: Sequence[float],
                          mc: MCConfig,
                          evaluator: Optional[ValueEvaluator] = None) -> SupermartingaleReport:
    """Estimate the mean of the value-plus-accrued-cost process at the given
    times and test for statistically significant increases; the process
    stopped at the boundary hitting time must stay flat at v(x, y; z)."""
    ev = evaluator or ValueEvaluator(spec, boundary, SolverConfig.fast())
    rng = np.random.default_rng(mc.seed)
    r, dt = spec.r, mc.dt
    e1, sd1, e2, sd2 = _gbm_step_factors(spec, dt)
    disc_step = math.exp(-r * dt)
    wstep = (1.0 - disc_step) / r
    n = mc.paths
    times = sorted(float(t) for t in times)
    X = np.full(n, float(x))
    Y = np.full(n, float(y))
    acc = np.zeros(n)
    # stopped variant: freeze state and accrual at the first boundary crossing
    stopped = np.zeros(n, bool)
    Xs = X.copy(); Ys = Y.copy(); acc_s = np.zeros(n); disc_s = np.full(n, 1.0)
    hit0 = Ys <= np.asarray(boundary.eval(Xs), float)
    stopped |= hit0
    disc = 1.0
    t_now = 0.0
    samples, samples_stopped = [], []
    v0 = float(ev.values([x], [y])[0])

    def snapshot():
        vals = ev.values(X, Y)
        samples.append(disc * vals + acc)
        vs = ev.values(Xs, Ys)
        samples_stopped.append(disc_s * vs + acc_s)

    if times and times[0] <= 0.5 * dt:
        samples.append(np.full(n, v0))
        samples_stopped.append(np.full(n, v0))
        times_rest = times[1:]
    else:
        times_rest = times
    for t_target in times_rest:
        while t_now < t_target - 0.5 * dt:
            cz_now = np.asarray(spec.cost.cz(X, z), float)
            Xn = X * (e1 * np.exp(sd1 * rng.standard_normal(n)))
            Yn = Y * (e2 * np.exp(sd2 * rng.standard_normal(n)))
            cz_next = np.asarray(spec.cost.cz(Xn, z), float)
            acc += disc * wstep * 0.5 * (cz_now + cz_next)
            live = ~stopped
            acc_s[live] = acc[live]
            X, Y = Xn, Yn
            disc *= disc_step
            t_now += dt
            live = ~stopped
            Xs[live] = X[live]; Ys[live] = Y[live]; disc_s[live] = disc
            hit = live & (Y <= np.asarray(boundary.eval(X), float))
            stopped |= hit
        snapshot()
    m = tuple(float(s.mean()) for s in samples)
    se = tuple(float(s.std(ddof=1) / math.sqrt(n)) for s in samples)
    zs = []
    viol = 0
    for a, b in zip(samples[:-1], samples[1:]):
        d = b - a
        sd = float(d.std(ddof=1) / math.sqrt(n))
        zval = float(d.mean()) / sd if sd > 0 else 0.0
        zs.append(zval)
        if zval > 3.0:
            viol += 1
    last = samples_stopped[-1]
    return SupermartingaleReport(
        times=tuple(times), m=m, m_stderr=se, increments_z=tuple(zs),
        violations=viol, m_stopped_final=float(last.mean()),
        m_stopped_stderr=float(last.std(ddof=1) / math.sqrt(n)), v0=v0)


@dataclass(frozen=True)
class SmoothFitReport:
    x: float
    y_star: float
    eps: tuple
    slopes: tuple
    extrapolated: float


def smooth_fit_probe(spec: ProblemSpec, boundary: Boundary, x: float,
                     eps_list: Sequence[float],
                     evaluator: Optional[ValueEvaluator] = None) -> SmoothFitReport:
    """One-sided derivative of the value in the cost variable just above the
    boundary, Richardson-extrapolated toward the boundary.

    Finite differences amplify the kernel's kink-integration error, so the
    default evaluator runs at elevated quadrature resolution."""
    if evaluator is None:
        from dataclasses import replace
        base = getattr(boundary, "cfg", None) or SolverConfig()
        evaluator = ValueEvaluator(spec, boundary,
                                   replace(base, n_time=192, n_time_panels=12,
                                           n_xi=384))
    ev = evaluator
    yb = float(boundary.eval(x))
    if yb <= spec.y_diffusion.state.lower:
        raise ValueError("smooth fit probe needs an interior boundary point")
    eps = sorted((float(e) for e in eps_list), reverse=True)
    ys = np.array([yb + e for e in eps])
    vals = ev.values(np.full(len(eps), x), ys)
    # chord slope against the exact boundary value v(x, y*) = -y*
    slopes = tuple(float((v - (-yb)) / e) for v, e in zip(vals, eps))
    if len(slopes) >= 2:
        # slopes(e) ~ v_y + c e: Richardson from the two smallest eps
        e1_, e0_ = eps[-2], eps[-1]
        s1_, s0_ = slopes[-2], slopes[-1]
        extrap = (e1_ * s0_ - e0_ * s1_) / (e1_ - e0_)
    else:
        extrap = slopes[-1]
    return SmoothFitReport(x=x, y_star=yb, eps=tuple(eps), slopes=slopes,
                           extrapolated=float(extrap))
