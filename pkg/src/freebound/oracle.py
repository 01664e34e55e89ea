"""Brute-force ground truth: locally consistent Markov-chain approximation of
the stopping and investment problems, solved by value iteration.

The chain lives on log-spaced state grids with drift-upwinded transition
probabilities (nonnegative by construction, validated at build time) and
reflecting edge rows.  It is deliberately simple and independent of the
Fredholm machinery; agreement within one lattice cell is the acceptance bar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .boundary import Boundary
from .model import GBM, ProblemSpec, UnsupportedModelError


@dataclass(frozen=True)
class LatticeSpec:
    """Log-space lattice for the (market, cost) pair with one time step."""

    x_nodes: np.ndarray
    y_nodes: np.ndarray
    dt: float

    @property
    def shape(self):
        return (len(self.x_nodes), len(self.y_nodes))

    def cell_ln_x(self) -> float:
        return float(np.log(self.x_nodes[1]) - np.log(self.x_nodes[0]))

    def cell_ln_y(self) -> float:
        return float(np.log(self.y_nodes[1]) - np.log(self.y_nodes[0]))


def lattice_for(spec: ProblemSpec, x_range, y_range, nx: int = 60, ny: int = 60,
                dt: float = 0.01) -> LatticeSpec:
    if spec.x_diffusion.kind != GBM or spec.y_diffusion.kind != GBM:
        raise UnsupportedModelError("lattice oracle requires gbm diffusions")
    lat = LatticeSpec(
        x_nodes=np.geomspace(x_range[0], x_range[1], nx),
        y_nodes=np.geomspace(y_range[0], y_range[1], ny),
        dt=dt,
    )
    _transition_rates(spec, lat)  # validates nonnegativity
    return lat


def lattice_quantile_window(spec: ProblemSpec, x0: float, y0: float,
                            t_ref: float, q: float = 1e-4,
                            nx: int = 60, ny: int = 60, dt: float = 0.01) -> LatticeSpec:
    """Window at the q / 1-q transition quantiles seen from (x0, y0)."""
    xd, yd = spec.x_diffusion, spec.y_diffusion
    return lattice_for(
        spec,
        (float(xd.quantile(t_ref, x0, q)), float(xd.quantile(t_ref, x0, 1 - q))),
        (float(yd.quantile(t_ref, y0, q)), float(yd.quantile(t_ref, y0, 1 - q))),
        nx=nx, ny=ny, dt=dt,
    )


def _transition_rates(spec: ProblemSpec, lat: LatticeSpec):
    """Upwind one-step probabilities (x-up, x-down, y-up, y-down, stay)."""
    hx, hy = lat.cell_ln_x(), lat.cell_ln_y()
    xd, yd = spec.x_diffusion, spec.y_diffusion
    b1, a1 = xd.log_drift, 0.5 * xd.sigma**2
    b2, a2 = yd.log_drift, 0.5 * yd.sigma**2
    dt = lat.dt
    pxu = dt * (a1 / hx**2 + max(b1, 0.0) / hx)
    pxd = dt * (a1 / hx**2 + max(-b1, 0.0) / hx)
    pyu = dt * (a2 / hy**2 + max(b2, 0.0) / hy)
    pyd = dt * (a2 / hy**2 + max(-b2, 0.0) / hy)
    stay = 1.0 - pxu - pxd - pyu - pyd
    if stay < 0:
        raise ValueError(
            f"lattice dt={dt} violates the stability bound (stay={stay:.3f}); "
            "reduce dt or coarsen the grid")
    return pxu, pxd, pyu, pyd, stay


def _expected(v: np.ndarray, rates) -> np.ndarray:
    """One-step expectation with reflecting edges (outgoing mass stays)."""
    pxu, pxd, pyu, pyd, stay = rates
    out = stay * v
    out[:-1] += pxu * v[1:]
    out[-1] += pxu * v[-1]
    out[1:] += pxd * v[:-1]
    out[0] += pxd * v[0]
    out[:, :-1] += pyu * v[:, 1:]
    out[:, -1] += pyu * v[:, -1]
    out[:, 1:] += pyd * v[:, :-1]
    out[:, 0] += pyd * v[:, 0]
    return out


@dataclass(frozen=True)
class StoppingTable:
    lattice: LatticeSpec
    value: np.ndarray
    stop_mask: np.ndarray
    sweeps: int

    def boundary_levels(self) -> np.ndarray:
        """Per x-column: largest stopped cost level (lower edge of the grid
        when no cell is stopped)."""
        ys = self.lattice.y_nodes
        counts = self.stop_mask.sum(axis=1)
        out = np.where(counts > 0, ys[np.maximum(counts - 1, 0)], 0.0)
        return out


def stopping_value_iteration(spec: ProblemSpec, lat: LatticeSpec, z: float,
                             tol: float = 1e-9, max_sweeps: int = 200000) -> StoppingTable:
    """Fixed point of v = max(stop payoff, one-step cost + discounted E[v])."""
    rates = _transition_rates(spec, lat)
    X = lat.x_nodes[:, None]
    Y = lat.y_nodes[None, :]
    cz_dt = np.asarray(spec.cost.cz(X, z), float) * lat.dt * np.ones_like(Y)
    stop = -np.broadcast_to(Y, cz_dt.shape).copy()
    disc = math.exp(-spec.r * lat.dt)
    v = stop.copy()
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        vn = np.maximum(stop, cz_dt + disc * _expected(v, rates))
        ch = float(np.abs(vn - v).max())
        v = vn
        if ch < tol:
            break
    mask = (v - stop) < 1e-8
    return StoppingTable(lattice=lat, value=v, stop_mask=mask, sweeps=sweeps)


def compare_stopping_boundary(table: StoppingTable, boundary: Boundary,
                              edge_margin: int = 3) -> dict:
    """Agreement of the lattice stop-region edge with a solved boundary.

    A column agrees when the lattice edge interval (one cell either way)
    overlaps the boundary values over the neighboring columns (one cell in
    each coordinate).  Columns whose boundary leaves the lattice window are
    excluded, as are edge columns where reflection bias dominates.
    """
    lat = table.lattice
    xs, ys = lat.x_nodes, lat.y_nodes
    n_ok = n_tot = 0
    worst = 0.0
    rows = []
    for i in range(edge_margin, len(xs) - edge_margin):
        y_lo_nb = float(boundary.eval(xs[i - 1]))
        y_hi_nb = float(boundary.eval(xs[i + 1]))
        mid = 0.5 * (y_lo_nb + y_hi_nb)
        if not (ys[edge_margin] < mid < ys[-edge_margin - 1]):
            continue
        jb = int(table.stop_mask[i].sum())
        dp_lo = ys[jb - 2] if jb >= 2 else 0.0
        dp_hi = ys[min(jb + 1, len(ys) - 1)] if jb < len(ys) else math.inf
        ok = (dp_lo <= y_hi_nb + 1e-12) and (dp_hi >= y_lo_nb - 1e-12)
        n_tot += 1
        n_ok += ok
        edge = ys[jb - 1] if jb >= 1 else 0.0
        gap = abs(math.log(max(edge, 1e-12)) - math.log(max(float(boundary.eval(xs[i])), 1e-12)))
        worst = max(worst, gap / lat.cell_ln_y())
        rows.append((float(xs[i]), float(edge), float(boundary.eval(xs[i])), bool(ok)))
    return {"agree": n_ok, "total": n_tot, "worst_cells": worst, "rows": rows}


@dataclass(frozen=True)
class ControlTable:
    lattice: LatticeSpec
    z_nodes: np.ndarray
    value: np.ndarray          # (n_z, nx, ny)
    invest_mask: np.ndarray    # (n_z, nx, ny)
    sweeps: int


def control_value_iteration(spec: ProblemSpec, lat: LatticeSpec,
                            z_nodes: Sequence[float], tol: float = 1e-8,
                            max_sweeps: int = 200000) -> ControlTable:
    """Backward-in-capacity impulse dynamic program.

    V(x,y,z) = min( y dz + V(x,y,z+dz),  c(x,z) dt + e^{-r dt} E[V(.,z)] ),
    rolled back from a terminal capacity at which investing is certified never
    to be optimal (the marginal drift balance is positive on every node).
    """
    z_nodes = np.asarray(sorted(z_nodes), float)
    rates = _transition_rates(spec, lat)
    X = lat.x_nodes[:, None]
    Y = lat.y_nodes[None, :]
    disc = math.exp(-spec.r * lat.dt)
    dzs = np.diff(z_nodes)
    from .boundary import F
    z_top = z_nodes[-1]
    fmin = np.min(np.asarray(F(spec, X, Y, z_top), float) + 0.0 * Y)
    if fmin <= 0:
        raise ValueError(
            f"terminal capacity {z_top} not certified: marginal balance "
            f"min {fmin:.3g} <= 0 somewhere on the lattice; increase z_max")
    n_z = len(z_nodes)
    shape = (len(lat.x_nodes), len(lat.y_nodes))
    V = np.empty((n_z, *shape))
    invest = np.zeros((n_z, *shape), bool)
    total_sweeps = 0
    # terminal slice: never invest; V solves the linear fixed point
    v = _Phi_vec_lattice(spec, lat, z_top)
    c_dt = np.asarray(spec.cost.c(X, z_top), float) * lat.dt * np.ones_like(v)
    for s in range(max_sweeps):
        vn = c_dt + disc * _expected(v, rates)
        total_sweeps += 1
        if float(np.abs(vn - v).max()) < tol:
            v = vn
            break
        v = vn
    V[-1] = v
    for k in range(n_z - 2, -1, -1):
        dz = dzs[k]
        obstacle = Y * dz + V[k + 1]
        c_dt = np.asarray(spec.cost.c(X, z_nodes[k]), float) * lat.dt * np.ones_like(v)
        v = np.minimum(obstacle, V[k + 1])
        for s in range(max_sweeps):
            vn = np.minimum(obstacle, c_dt + disc * _expected(v, rates))
            total_sweeps += 1
            if float(np.abs(vn - v).max()) < tol:
                v = vn
                break
            v = vn
        V[k] = v
        invest[k] = (obstacle - v) < 1e-8
    return ControlTable(lattice=lat, z_nodes=z_nodes, value=V,
                        invest_mask=invest, sweeps=total_sweeps)


def _Phi_vec_lattice(spec: ProblemSpec, lat: LatticeSpec, z: float) -> np.ndarray:
    from .control import _Phi_vec
    X = lat.x_nodes[:, None]
    col = _Phi_vec(spec, lat.x_nodes, np.full(len(lat.x_nodes), z))
    return np.broadcast_to(col[:, None], (len(lat.x_nodes), len(lat.y_nodes))).copy()


def compare_invest_region(table: ControlTable, surface, edge_margin: int = 3) -> dict:
    """Invest region {z <= z*(x,y)} agreement within one cell per coordinate.

    For each interior lattice node the dynamic program's largest investing
    capacity must match the surface's z*(x', y') for some neighbor (x', y')
    within one lattice cell, up to one capacity step.
    """
    lat = table.lattice
    xs, ys, zn = lat.x_nodes, lat.y_nodes, table.z_nodes
    dz = float(np.max(np.diff(zn)))
    n_ok = n_tot = 0
    from .control import CoverageError
    for i in range(edge_margin, len(xs) - edge_margin):
        for j in range(edge_margin, len(ys) - edge_margin):
            act = table.invest_mask[:, i, j]
            z_dp = zn[int(act.sum()) - 1] if act.any() else -math.inf
            cands = []
            for ii in (i - 1, i, i + 1):
                for jj in (j - 1, j, j + 1):
                    try:
                        cands.append(float(np.atleast_1d(
                            surface.z_star(xs[ii], ys[jj]))[0]))
                    except CoverageError:
                        continue
            if not cands:
                continue
            if not act.any():
                ok = min(cands) <= zn[0] + dz
            else:
                ok = any(abs(z_dp - c) <= dz + 1e-12 for c in cands) or \
                    (min(cands) - dz <= z_dp <= max(cands) + dz)
            n_tot += 1
            n_ok += ok
    return {"agree": n_ok, "total": n_tot}
