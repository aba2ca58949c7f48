"""Regularity diagnostics on discrete solutions.

Ball-based quantities use the cells whose centres lie in the open ball.  A
measure |S| is (number of cells in S) * h^n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .convex_gauge import ConvexBody, dual_boundary_directions, g_delta
from .errors import InvalidArgument
from .solver import DiscreteSolution, Grid

__all__ = [
    "BallWindow",
    "RegimeState",
    "CascadeStep",
    "CascadeTrace",
    "ConvergenceTable",
    "ContinuityReport",
    "excess",
    "initial_mu",
    "level_measures",
    "cascade",
    "epsilon_convergence",
    "continuity_report",
    "gdelta_limit_check",
    "sup_representation_error",
    "geometric_lemma_check",
    "geometric_threshold",
    "iteration_lemma_check",
    "subsolution_energy_check",
]

NONDEGENERATE = "NonDegenerate"
DEGENERATE = "Degenerate"


@dataclass(eq=False)
class BallWindow:
    grid: Grid
    center: np.ndarray
    radius: float
    cells: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        if self.center.shape != (self.grid.n,):
            raise InvalidArgument("window centre has the wrong dimension")
        if not self.radius > 0:
            raise InvalidArgument("window radius must be positive")
        slack = 1e-12 * float(np.max(self.grid.hi - self.grid.lo))
        if np.any(self.center - 2 * self.radius < self.grid.lo - slack) or np.any(self.center + 2 * self.radius > self.grid.hi + slack):
            raise InvalidArgument("window outside grid: the doubled ball must lie in the box")
        self.cells = self._mask(self.radius)

    def _mask(self, radius: float) -> np.ndarray:
        xc = self.grid.cell_centers()
        return np.linalg.norm(xc - self.center, axis=-1) < radius

    def sub(self, factor: float) -> np.ndarray:
        """Cell mask of the concentric ball of radius factor * radius."""
        return self._mask(factor * self.radius)

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    @property
    def measure(self) -> float:
        return self.count * self.grid.volume_element

    @property
    def resolved(self) -> bool:
        return int(self.sub(0.5).sum()) >= 8


def _field(sol_or_field) -> np.ndarray:
    return sol_or_field.Du if isinstance(sol_or_field, DiscreteSolution) else np.asarray(sol_or_field, float)


def _excess_on(du: np.ndarray, mask: np.ndarray) -> float:
    vals = du[mask]
    if vals.shape[0] == 0:
        raise InvalidArgument("empty window")
    return float(np.mean(np.sum((vals - vals.mean(axis=0)) ** 2, axis=-1)))


def excess(sol, w: BallWindow) -> float:
    """Mean over the window of |Du - mean(Du)|^2."""
    return _excess_on(_field(sol), w.cells)


def initial_mu(sol, w: BallWindow, delta: float, body: ConvexBody, floor: float = 1e-6) -> float:
    """max(sup over B_{2 rho} of |Du|_E - (1 + delta), floor)."""
    du = _field(sol)
    vals = body._gauge(du[w.sub(2.0)])
    return max(float(vals.max()) - (1.0 + delta), floor)


@dataclass
class RegimeState:
    delta: float
    mu: float
    nu: float
    counts: np.ndarray  # cells per direction above the level
    total: int
    cell_volume: float
    label: str

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def complement_measures(self) -> np.ndarray:
        return (self.total - self.counts) * self.cell_volume

    @property
    def ball_measure(self) -> float:
        return self.total * self.cell_volume


def _classify(counts: np.ndarray, total: int, nu: float) -> str:
    # non-degenerate iff some complement has measure < nu |B|
    return NONDEGENERATE if np.any((total - counts) < nu * total) else DEGENERATE


def level_measures(sol, w: BallWindow | np.ndarray, delta: float, mu: float, nu: float, directions, grid: Grid | None = None) -> RegimeState:
    """Per-direction measures of {<Du, e*> - (1 + delta) > (1 - nu) mu} inside the window."""
    if not (0.0 < nu <= 0.25):
        raise InvalidArgument("nu must lie in (0, 1/4]")
    if not mu > 0:
        raise InvalidArgument("mu must be positive")
    if not delta > 0:
        raise InvalidArgument("delta must be positive")
    du = _field(sol)
    mask = w.cells if isinstance(w, BallWindow) else np.asarray(w, bool)
    vol = (w.grid if isinstance(w, BallWindow) else grid).volume_element
    vals = du[mask]
    if vals.shape[0] == 0:
        raise InvalidArgument("empty window")
    e = np.asarray(directions, float)
    proj = vals @ e.T - (1.0 + delta)
    counts = np.sum(proj > (1.0 - nu) * mu, axis=0)
    total = vals.shape[0]
    return RegimeState(delta, mu, nu, counts, total, vol, _classify(counts, total, nu))


@dataclass
class CascadeStep:
    index: int
    rho: float
    mu: float
    label: str
    cells: int
    sup_gdelta: float
    excess: float
    max_fraction: float
    degenerate_sup_next: float | None = None
    degenerate_check: bool | None = None
    excess_ratio: float | None = None
    lower_bound_min: float | None = None
    lower_bound_target: float | None = None
    lower_bound_check: bool | None = None


@dataclass
class CascadeTrace:
    steps: list[CascadeStep]
    kappa: float
    alpha_delta: float
    alpha_hat: float | None
    truncated: bool
    switched_at: int | None
    gamma_norm: float | None = None
    gamma_bound: float | None = None
    gamma_check: bool | None = None
    level_bound_holds: bool = True

    @property
    def checks_pass(self) -> bool:
        flags = [s.degenerate_check for s in self.steps] + [s.lower_bound_check for s in self.steps] + [self.gamma_check]
        return all(f is not False for f in flags) and self.level_bound_holds


def cascade_levels(mu: float, kappa: float, steps: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Levels mu_i and their bounds (rho_i/rho)^alpha_delta mu for i < steps.

    mu_i is kappa^i mu rounded so that the bound holds in floating point; the
    two expressions agree to a few ulps.
    """
    alpha = -math.log(kappa) / math.log(2.0)
    i = np.arange(steps)
    scale = 0.5**i
    bound = scale**alpha * mu
    levels = np.minimum(mu * kappa**i, bound)
    return levels, bound, alpha


def cascade(
    sol: DiscreteSolution,
    x0,
    rho: float,
    delta: float,
    mu: float,
    kappa: float,
    nu: float,
    max_steps: int,
    body: ConvexBody,
    directions=None,
    theta: float = 0.5,
) -> CascadeTrace:
    """Shrinking-ball cascade rho_i = rho/2^i at levels mu_i = kappa^i mu.

    Degenerate steps check sup_{B_{rho_{i+1}}} |G_delta(Du)|_E <= kappa mu_i.
    From the first non-degenerate step on, the trace records excess decay
    ratios excess(theta rho_i)/excess(rho_i) and the lower bound
    min_{B_{rho_i/2}} |Du|_E >= 1 + delta + mu_i/4.
    """
    if not (0.0 < kappa < 1.0):
        raise InvalidArgument("kappa must lie in (0, 1)")
    if max_steps < 1:
        raise InvalidArgument("max_steps must be positive")
    grid = sol.grid
    du = sol.Du
    if directions is None:
        directions = dual_boundary_directions(body, 64 if grid.n == 2 else 16 * grid.n)
    top = BallWindow(grid, x0, rho)
    levels, bounds, alpha = cascade_levels(mu, kappa, max_steps)
    gd = body._gauge(g_delta(body, delta, du))
    gauge_du = body._gauge(du)
    xc = grid.cell_centers()
    dist = np.linalg.norm(xc - top.center, axis=-1)

    steps: list[CascadeStep] = []
    switched_at = None
    truncated = False
    for i in range(max_steps):
        rho_i = rho * 0.5**i
        mask = dist < rho_i
        count = int(mask.sum())
        if count < 8:
            truncated = True
            break
        mu_i = float(levels[i])
        state = level_measures(du, mask, delta, mu_i, nu, directions, grid=grid)
        label = state.label if switched_at is None else NONDEGENERATE
        step = CascadeStep(
            index=i,
            rho=rho_i,
            mu=mu_i,
            label=label,
            cells=count,
            sup_gdelta=float(gd[mask].max()),
            excess=_excess_on(du, mask),
            max_fraction=float(state.fractions.max()),
        )
        inner = dist < theta * rho_i
        nxt = dist < 0.5 * rho_i
        if switched_at is None and state.label == DEGENERATE:
            if nxt.any():
                step.degenerate_sup_next = float(gd[nxt].max())
                step.degenerate_check = step.degenerate_sup_next <= kappa * mu_i
        else:
            if switched_at is None:
                switched_at = i
            if nxt.any():
                step.lower_bound_min = float(gauge_du[nxt].min())
                step.lower_bound_target = 1.0 + delta + mu_i / 4.0
                step.lower_bound_check = step.lower_bound_min >= step.lower_bound_target
            if inner.any() and step.excess > 0:
                step.excess_ratio = _excess_on(du, inner) / step.excess
            elif inner.any():
                step.excess_ratio = 0.0
        steps.append(step)

    trace_levels = np.array([s.mu for s in steps])
    level_ok = bool(np.all(trace_levels <= bounds[: len(steps)]))
    # fitted decay exponent of the suprema over degenerate steps
    pts = [(s.rho, s.sup_gdelta) for s in steps if s.label == DEGENERATE and s.sup_gdelta > 0]
    alpha_hat = None
    if len(pts) >= 2:
        r, v = np.log(np.array(pts)).T
        alpha_hat = float(np.polyfit(r, v, 1)[0])
    trace = CascadeTrace(steps, kappa, alpha, alpha_hat, truncated, switched_at, level_bound_holds=level_ok)
    if switched_at is not None and steps:
        # smallest-window mean of G_{2 delta}(Du) as the Lebesgue-point proxy
        last = dist < steps[-1].rho
        gamma = g_delta(body, 2.0 * delta, du[last]).mean(axis=0)
        _, R_E = body.radii()
        trace.gamma_norm = float(np.linalg.norm(gamma))
        trace.gamma_bound = R_E * float(levels[switched_at])
        trace.gamma_check = trace.gamma_norm <= trace.gamma_bound
    return trace


@dataclass
class ConvergenceTable:
    epsilons: list[float]
    distances: np.ndarray
    consecutive: np.ndarray
    monotone: bool
    tolerance: float


def epsilon_convergence(sols: Sequence[DiscreteSolution], delta: float, body: ConvexBody, tolerance: float = 0.05) -> ConvergenceTable:
    """Pairwise L2 distances of G_delta(Du_eps) across an epsilon sweep.

    ``monotone`` reports whether d(eps_k, eps_{k+1}) is non-increasing along
    the given order up to the relative ``tolerance``.
    """
    if not sols:
        raise InvalidArgument("no solutions")
    grid = sols[0].grid
    mask = grid.boundary_mask()
    for s in sols[1:]:
        if not s.grid.same_as(grid):
            raise InvalidArgument("solutions live on different grids")
        if not (np.array_equal(s.g[mask], sols[0].g[mask]) and np.array_equal(s.f, sols[0].f)):
            raise InvalidArgument("solutions have different data")
    fields = [g_delta(body, delta, s.Du).reshape(-1, grid.n) for s in sols]
    hv = grid.volume_element
    m = len(fields)
    dist = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            dist[i, j] = dist[j, i] = math.sqrt(hv * float(np.sum((fields[i] - fields[j]) ** 2)))
    consecutive = np.array([dist[k, k + 1] for k in range(m - 1)])
    monotone = bool(np.all(consecutive[1:] <= consecutive[:-1] * (1.0 + tolerance) + 1e-15))
    return ConvergenceTable([s.epsilon for s in sols], dist, consecutive, monotone, tolerance)


# ---------------------------------------------------------------------------
# continuity


@dataclass
class ContinuityReport:
    name: str
    radii: np.ndarray
    modulus: np.ndarray
    alpha_hat: float | None
    C_hat: float | None
    band: float | None
    flat: bool
    span_decades: float

    @property
    def status(self) -> str:
        return "flat" if self.flat else "fitted"


def _builtin_K(name: str, body: ConvexBody) -> Callable:
    if name == "K1":
        return lambda xi: np.maximum(body._gauge(xi) - 1.0, 0.0)
    if name == "K2":
        return lambda xi: np.linalg.norm(g_delta(body, 0.0, xi), axis=-1)
    raise InvalidArgument(f"unknown built-in K {name!r}")


def modulus_of_continuity(values: np.ndarray, region: np.ndarray, h: float, radii: np.ndarray) -> np.ndarray:
    """omega(r) = max |v(x) - v(y)| over cells x, y in the region with |x - y| <= r."""
    vals = values if values.ndim == region.ndim + 1 else values[..., None]
    n = region.ndim
    reach = int(math.floor(radii.max() / h + 1e-9))
    shape = region.shape
    best = {}
    rng = range(-reach, reach + 1)
    for off in np.array(np.meshgrid(*[rng] * n, indexing="ij")).reshape(n, -1).T:
        # half of the offsets suffice by symmetry
        nz = np.flatnonzero(off)
        if nz.size == 0 or off[nz[0]] < 0 or np.any(np.abs(off) >= shape):
            continue
        length = float(np.linalg.norm(off)) * h
        if length > radii.max() * (1 + 1e-12):
            continue
        src = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(off, shape))
        dst = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(off, shape))
        both = region[src] & region[dst]
        if not both.any():
            continue
        diff = np.linalg.norm(vals[dst][both] - vals[src][both], axis=-1).max()
        best[length] = max(best.get(length, 0.0), float(diff))
    lengths = np.array(sorted(best))
    diffs = np.maximum.accumulate(np.array([best[l] for l in lengths])) if best else np.array([])
    out = np.zeros(len(radii))
    for k, r in enumerate(radii):
        idx = np.searchsorted(lengths, r * (1 + 1e-12), side="right") - 1
        out[k] = diffs[idx] if idx >= 0 else 0.0
    return out


def continuity_report(
    field,
    grid: Grid,
    radii: Sequence[float],
    K: str | Callable | None = None,
    body: ConvexBody | None = None,
    window: BallWindow | None = None,
    name: str = "field",
) -> ContinuityReport:
    """Modulus of continuity table and a log-log least-squares Hoelder fit.

    ``K`` is ``"K1"`` ((|xi|_E - 1)_+), ``"K2"`` (|G(xi)|) or a callable applied
    to the field first.  The region is the window's cells or the whole grid.
    """
    radii = np.asarray(sorted(radii), float)
    if radii.size < 3:
        raise InvalidArgument("need at least 3 radii")
    if np.any(radii <= 0):
        raise InvalidArgument("radii must be positive")
    values = np.asarray(field, float)
    if K is not None:
        if isinstance(K, str):
            if body is None:
                raise InvalidArgument("built-in K needs the body")
            name = f"{K}({name})"
            K = _builtin_K(K, body)
        values = np.asarray(K(values), float)
    region = window.cells if window is not None else np.ones(grid.cell_dims, dtype=bool)
    omega = modulus_of_continuity(values, region, grid.h, radii)
    span = float(np.log10(radii[-1] / radii[0]))
    if span < 1.0 - 1e-9:
        raise InvalidArgument("radii must span at least one decade")
    positive = omega > 0
    if not positive.any():
        return ContinuityReport(name, radii, omega, None, None, None, True, span)
    lr, lo = np.log(radii[positive]), np.log(omega[positive])
    if lr.size < 2:
        return ContinuityReport(name, radii, omega, None, None, None, False, span)
    A = np.column_stack([lr, np.ones_like(lr)])
    coef, *_ = np.linalg.lstsq(A, lo, rcond=None)
    band = None
    if lr.size > 2:
        resid = lo - A @ coef
        s2 = float(resid @ resid) / (lr.size - 2)
        band = 2.0 * math.sqrt(s2 / float(np.sum((lr - lr.mean()) ** 2)))
    return ContinuityReport(name, radii, omega, float(coef[0]), float(math.exp(coef[1])), band, False, span)


def gdelta_limit_check(field, body: ConvexBody, delta: float) -> dict:
    """Per-cell |G_delta(xi) - G(xi)| against delta / r_E and delta * R_E.

    The difference is G(xi) - G_delta(xi) = min(delta, (|xi|_E - 1)_+) xi / |xi|_E,
    so its norm is evaluated in that form; subtracting the two vector fields
    loses a few ulps exactly where the bound is attained.  The subtracted
    version is reported as ``max_difference_direct``.  The sharp supremum over
    all xi is delta * R_E; it coincides with delta / r_E for the unit ball.
    """
    if not delta > 0:
        raise InvalidArgument("delta must be positive")
    xi = np.asarray(field, float).reshape(-1, body.dim)
    g = body._gauge(xi)
    norm = np.linalg.norm(xi, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        diff = np.where(g > 1.0, np.minimum(delta, g - 1.0) * (norm / g), 0.0)
    direct = np.linalg.norm(g_delta(body, delta, xi) - g_delta(body, 0.0, xi), axis=-1)
    r_in, r_out = body.radii()
    stated, sharp = delta / r_in, delta * r_out
    return {
        "max_difference": float(diff.max()),
        "max_difference_direct": float(direct.max()),
        "bound_inner_radius": stated,
        "holds_inner_radius": bool(np.all(diff <= stated)),
        "bound_outer_radius": sharp,
        "holds_outer_radius": bool(np.all(diff <= sharp)),
        "cells": int(diff.size),
    }


def sup_representation_error(field, body: ConvexBody, directions) -> float:
    """max over cells of |xi|_E - max_e* <xi, e*> (nonnegative up to rounding)."""
    xi = np.asarray(field, float).reshape(-1, body.dim)
    approx = (xi @ np.asarray(directions, float).T).max(axis=1)
    return float(np.max(body._gauge(xi) - approx))


# ---------------------------------------------------------------------------
# standalone iteration lemmas


def geometric_threshold(C: float, b: float, kappa: float) -> float:
    return C ** (-1.0 / kappa) * b ** (-1.0 / kappa**2)


def geometric_lemma_check(Y0: float, C: float, b: float, kappa: float, steps: int) -> tuple[bool, np.ndarray]:
    """Iterate Y_{i+1} = C b^i Y_i^(1+kappa) with equality; converged iff Y_steps < 1e-12.

    With T the threshold C^(-1/kappa) b^(-1/kappa^2), the substitution
    Y_i = T b^(-i/kappa) w_i turns the recursion into w_{i+1} = w_i^(1+kappa)
    exactly.  Iterating log w instead of Y keeps Y0 = T from drifting off the
    threshold through rounding (a relative error grows like (1+kappa)^i), and
    working in logs avoids overflow and underflow.  The trace is Y_0..Y_steps.
    """
    if not (C > 0 and kappa > 0 and b > 1):
        raise InvalidArgument("need C > 0, kappa > 0 and b > 1")
    if not Y0 >= 0:
        raise InvalidArgument("Y0 must be nonnegative")
    if int(steps) != steps or steps < 0:
        raise InvalidArgument("steps must be a nonnegative integer")
    n = int(steps)
    thr = geometric_threshold(C, b, kappa)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        lw = np.empty(n + 1)
        lw[0] = math.log(Y0 / thr) if Y0 > 0 else -np.inf
        for i in range(n):
            lw[i + 1] = (1.0 + kappa) * lw[i]
        z = math.log(thr) - np.arange(n + 1) * (math.log(b) / kappa) + lw
        trace = np.exp(z)
    return bool(z[-1] < math.log(1e-12)), trace


@dataclass
class IterationLemmaResult:
    holds: bool
    C_tilde: float
    worst_violation: float
    pairs: int


def iteration_lemma_check(rho, phi, eta: float, A: float, B: float, C: float, alpha: float, beta: float) -> IterationLemmaResult:
    """Check phi(s) <= eta phi(t) + A/(t-s)^alpha + B/(t-s)^beta + C on all sample pairs s < t.

    ``C_tilde`` is the largest observed phi(s) / (A/(t-s)^alpha + B/(t-s)^beta + C).
    """
    if not (0.0 < eta < 1.0):
        raise InvalidArgument("eta must lie in (0, 1)")
    if not (alpha >= beta >= 0):
        raise InvalidArgument("need alpha >= beta >= 0")
    if min(A, B, C) < 0:
        raise InvalidArgument("A, B, C must be nonnegative")
    rho = np.asarray(rho, float)
    phi = np.asarray(phi, float)
    if rho.shape != phi.shape or rho.ndim != 1:
        raise InvalidArgument("rho and phi must be matching 1-D samples")
    if not np.all(np.isfinite(phi)) or np.any(phi < 0):
        raise InvalidArgument("phi must be nonnegative and bounded")
    order = np.argsort(rho)
    rho, phi = rho[order], phi[order]
    s_idx, t_idx = np.triu_indices(len(rho), k=1)
    gap = rho[t_idx] - rho[s_idx]
    keep = gap > 0
    s_idx, t_idx, gap = s_idx[keep], t_idx[keep], gap[keep]
    rhs_data = A / gap**alpha + B / gap**beta + C
    rhs = eta * phi[t_idx] + rhs_data
    lhs = phi[s_idx]
    viol = (lhs - rhs) / (1.0 + np.abs(rhs))
    worst = float(viol.max()) if viol.size else -np.inf
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rhs_data > 0, lhs / np.where(rhs_data > 0, rhs_data, 1.0), np.where(lhs > 0, np.inf, 0.0))
    c_tilde = float(ratio.max()) if ratio.size else 0.0
    return IterationLemmaResult(bool(worst <= 1e-12), c_tilde, worst, int(viol.size))


def subsolution_energy_check(
    sol: DiscreteSolution,
    w: BallWindow,
    delta: float,
    e_star,
    k_levels: Sequence[float],
    sigma: float = 1.0,
    taus: Sequence[float] = (0.5, 0.75),
) -> list[dict]:
    """Caccioppoli-type ratios for v = (<Du, e*> - (1 + delta))_+^2 on the window.

    For each level k and tau, LHS = sum over B_{tau rho} of |D_h (v - k)_+|^2 h^n
    with differences taken on the cell lattice, RHS1 = sum over B_rho of
    (v - k)_+^2 h^n / ((1 - tau) rho)^2, and the row ratio is
    LHS / (RHS1 + |A_k|^(1 - 2/n + 2 beta/n)) with beta = sigma/(n + sigma).
    Rows with an empty superlevel set A_k are flagged ``empty``.
    """
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    grid = sol.grid
    n, hv = grid.n, grid.volume_element
    du = sol.Du
    v = np.maximum(du @ np.asarray(e_star, float) - (1.0 + delta), 0.0) ** 2
    beta = sigma / (n + sigma)
    expo = 1.0 - 2.0 / n + 2.0 * beta / n
    rows = []
    for k in k_levels:
        if not k > 0:
            raise InvalidArgument("levels must be positive")
        vk = np.maximum(v - k, 0.0)
        grad_sq = np.zeros(grid.cell_dims)
        valid = np.ones(grid.cell_dims, dtype=bool)
        for axis in range(n):
            d = np.diff(vk, axis=axis) / grid.h
            pad = [(0, 0)] * n
            pad[axis] = (0, 1)
            grad_sq += np.pad(d**2, pad)
            edge = [slice(None)] * n
            edge[axis] = -1
            valid[tuple(edge)] = False
        in_rho = w.cells
        a_k = int(np.sum(vk[in_rho] > 0)) * hv
        for tau in taus:
            inner = w.sub(tau) & valid
            lhs = float(np.sum(grad_sq[inner])) * hv
            rhs1 = float(np.sum(vk[in_rho] ** 2)) * hv / ((1.0 - tau) * w.radius) ** 2
            denom = rhs1 + (a_k**expo if a_k > 0 else 0.0)
            empty = a_k == 0
            rows.append(
                {
                    "k": float(k),
                    "tau": float(tau),
                    "lhs": lhs,
                    "rhs1": rhs1,
                    "A_k": a_k,
                    "ratio": lhs / denom if denom > 0 else 0.0,
                    "empty": bool(empty),
                }
            )
    return rows
