"""Structured-grid discretisation and Newton solver for the regularised Dirichlet problem.

Unknowns live at grid nodes.  Each cell carries the forward-difference gradient
taken from its lower corner node, evaluated at the cell centre, and the discrete
energy is

    E_h(u) = sum_cells h^n F_hat_eps(x_c, D_h u) + sum_nodes h^n f u.

Boundary nodes are fixed to the Dirichlet data; the energy is minimised over
interior nodes by Newton's method with Armijo backtracking.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, InvalidArgument
from .regularize import RegularizedIntegrand

__all__ = [
    "Grid",
    "DiscreteSolution",
    "EnergyReport",
    "build_grid",
    "nodal_field",
    "discrete_energy",
    "solve_dirichlet",
    "max_principle_check",
    "apriori_report",
    "write_solution",
    "read_solution",
]

F_CLIP = 1e12


@dataclass(frozen=True, eq=False)
class Grid:
    lo: np.ndarray
    hi: np.ndarray
    h: float
    dims: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def cell_dims(self) -> tuple[int, ...]:
        return tuple(d - 1 for d in self.dims)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def num_cells(self) -> int:
        return int(np.prod(self.cell_dims))

    @property
    def volume_element(self) -> float:
        return self.h**self.n

    def axes(self) -> list[np.ndarray]:
        return [self.lo[k] + self.h * np.arange(self.dims[k]) for k in range(self.n)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape dims + (n,)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        """Cell centre coordinates, shape cell_dims + (n,)."""
        ax = [a[:-1] + 0.5 * self.h for a in self.axes()]
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        for k in range(self.n):
            idx = [slice(None)] * self.n
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        return mask

    def same_as(self, other: "Grid") -> bool:
        return self.dims == other.dims and self.h == other.h and np.array_equal(self.lo, other.lo)

    def difference_operators(self) -> list[sp.csr_matrix]:
        """Sparse forward-difference matrices D_k mapping nodal values to cell gradients."""
        cached = self.__dict__.get("_dops")
        if cached is not None:
            return cached
        node_index = np.arange(self.num_nodes).reshape(self.dims)
        base = node_index[tuple(slice(0, -1) for _ in range(self.n))].ravel()
        rows = np.arange(self.num_cells)
        ops = []
        for k in range(self.n):
            idx = [slice(0, -1)] * self.n
            idx[k] = slice(1, None)
            shifted = node_index[tuple(idx)].ravel()
            data = np.concatenate([np.full(len(rows), 1.0 / self.h), np.full(len(rows), -1.0 / self.h)])
            op = sp.csr_matrix(
                (data, (np.concatenate([rows, rows]), np.concatenate([shifted, base]))),
                shape=(self.num_cells, self.num_nodes),
            )
            ops.append(op)
        object.__setattr__(self, "_dops", ops)
        return ops

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Forward-difference gradient per cell, shape cell_dims + (n,)."""
        u = np.asarray(u, float)
        base = u[tuple(slice(0, -1) for _ in range(self.n))]
        comps = []
        for k in range(self.n):
            idx = [slice(0, -1)] * self.n
            idx[k] = slice(1, None)
            comps.append((u[tuple(idx)] - base) / self.h)
        return np.stack(comps, axis=-1)


def build_grid(box, h: float) -> Grid:
    """Uniform grid on an axis-aligned box given as [[lo_1, hi_1], ..., [lo_n, hi_n]]."""
    b = np.asarray(box, float)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] < 1:
        raise InvalidArgument("box must be a list of [lo, hi] pairs")
    if not (np.isfinite(h) and h > 0):
        raise InvalidArgument("h must be positive")
    lo, hi = b[:, 0], b[:, 1]
    if np.any(hi <= lo):
        raise InvalidArgument("box needs lo < hi on every axis")
    dims = []
    for side in hi - lo:
        m = side / h
        k = round(m)
        if abs(m - k) > 1e-12 * max(1.0, m):
            raise InvalidArgument(f"h = {h} does not divide side length {side}")
        if k + 1 < 3:
            raise InvalidArgument("grid needs at least 3 nodes per axis")
        dims.append(int(k) + 1)
    return Grid(lo.copy(), hi.copy(), float(h), tuple(dims))


def nodal_field(grid: Grid, values, name: str = "field") -> np.ndarray:
    """Evaluate a callable on the nodes, broadcast a scalar, or validate an array."""
    if callable(values):
        out = np.asarray(values(grid.nodes()), float)
        out = np.broadcast_to(out, grid.dims).copy()
    elif np.ndim(values) == 0:
        out = np.full(grid.dims, float(values))
    else:
        out = np.asarray(values, float)
        if out.shape != grid.dims:
            raise InvalidArgument(f"{name} has shape {out.shape}, grid needs {grid.dims}")
    return out


@dataclass(frozen=True, eq=False)
class DiscreteSolution:
    grid: Grid
    u: np.ndarray
    epsilon: float
    f: np.ndarray
    g: np.ndarray  # nodal extension of the boundary data; boundary values are g[boundary_mask]
    diagnostics: dict = field(default_factory=dict)

    @property
    def Du(self) -> np.ndarray:
        return self.grid.gradient(self.u)

    @property
    def boundary_mask(self) -> np.ndarray:
        return self.grid.boundary_mask()


@dataclass(frozen=True)
class EnergyReport:
    energy: float
    F_part: float
    eps_part: float
    datum_part: float
    grad_sup: float
    grad_l2: float


def _energy_terms(F_hat: RegularizedIntegrand, grid: Grid, u: np.ndarray, f: np.ndarray, xc: np.ndarray):
    du = grid.gradient(u)
    hv = grid.volume_element
    fpart, epart = F_hat.split_value(xc, du)
    return hv * float(np.sum(fpart)), hv * float(np.sum(epart)), hv * float(np.sum(f * u)), du


def discrete_energy(F_hat: RegularizedIntegrand, sol: DiscreteSolution) -> EnergyReport:
    grid = sol.grid
    if sol.u.shape != grid.dims or sol.f.shape != grid.dims:
        raise InvalidArgument("solution fields do not match the grid")
    fp, ep, dp, du = _energy_terms(F_hat, grid, sol.u, sol.f, grid.cell_centers())
    norms = np.linalg.norm(du, axis=-1)
    return EnergyReport(
        energy=fp + ep + dp,
        F_part=fp,
        eps_part=ep,
        datum_part=dp,
        grad_sup=float(norms.max()),
        grad_l2=math.sqrt(grid.volume_element * float(np.sum(norms**2))),
    )


def _floor_blocks(H: np.ndarray, floor: float) -> np.ndarray:
    w, v = np.linalg.eigh(H)
    if np.all(w >= floor):
        return H
    w = np.maximum(w, floor)
    return np.einsum("...ik,...k,...jk->...ij", v, w, v)


class _Problem:
    """Energy, gradient and Hessian restricted to interior unknowns."""

    def __init__(self, F_hat, grid, f, g):
        self.F_hat, self.grid, self.f, self.g = F_hat, grid, f, g
        self.xc = grid.cell_centers().reshape(-1, grid.n)
        self.interior = ~grid.boundary_mask().ravel()
        ops = grid.difference_operators()
        self.D = [op.tocsc()[:, self.interior].tocsr() for op in ops]
        self.Dt = [d.T.tocsr() for d in self.D]
        self.hv = grid.volume_element
        self.f_int = f.ravel()[self.interior]
        self.fixed_datum = float(np.sum((f * g).ravel()[~self.interior]))

    def full(self, v):
        u = self.g.ravel().copy()
        u[self.interior] = v
        return u.reshape(self.grid.dims)

    def cell_gradients(self, v):
        return self.grid.gradient(self.full(v)).reshape(-1, self.grid.n)

    def energy(self, v):
        du = self.cell_gradients(v)
        return self.hv * (float(np.sum(self.F_hat.value(self.xc, du))) + float(np.dot(self.f_int, v)) + self.fixed_datum)

    def gradient(self, v, du=None):
        du = self.cell_gradients(v) if du is None else du
        flux = self.F_hat.gradient(self.xc, du)
        out = self.f_int.copy()
        for k in range(self.grid.n):
            out += self.Dt[k] @ flux[:, k]
        return self.hv * out

    def hessian(self, v, floor):
        du = self.cell_gradients(v)
        H = _floor_blocks(self.F_hat.hessian(self.xc, du), floor)
        n = self.grid.n
        total = None
        for k in range(n):
            for l in range(n):
                term = self.Dt[k] @ sp.diags(H[:, k, l]) @ self.D[l]
                total = term if total is None else total + term
        return (self.hv * total).tocsc()


def solve_dirichlet(
    F_hat: RegularizedIntegrand,
    grid: Grid,
    f,
    g,
    tol: float = 1e-9,
    max_iter: int = 500,
    initial: str | np.ndarray = "extension",
) -> DiscreteSolution:
    """Minimise the discrete energy over interior nodal values with u = g on the boundary.

    ``f`` and ``g`` may be scalars, callables of node coordinates (shape
    ``(..., n)``), or nodal arrays.  ``initial`` is ``"extension"`` (g on all
    nodes), ``"zero"`` (zero interior) or an array.  Convergence means the
    sup-norm of the discrete weak-form residual, i.e. the energy gradient
    divided by h^n, is at most ``tol``.
    """
    eps = F_hat.epsilon
    if not (eps > 0):
        raise InvalidArgument("epsilon must be positive; the eps = 0 problem is degenerate")
    if not (np.isfinite(tol) and tol > 0):
        raise InvalidArgument("tol must be positive")
    if grid.n != F_hat.dim:
        raise InvalidArgument("grid and integrand dimensions differ")
    f_nodes = nodal_field(grid, f, "f")
    if not np.all(np.isfinite(f_nodes)) or np.abs(f_nodes).max() > F_CLIP:
        warnings.warn(f"f clipped to +-{F_CLIP:g}", RuntimeWarning, stacklevel=2)
        f_nodes = np.clip(np.nan_to_num(f_nodes, nan=0.0, posinf=F_CLIP, neginf=-F_CLIP), -F_CLIP, F_CLIP)
    g_nodes = nodal_field(grid, g, "g")
    mask = grid.boundary_mask()
    if isinstance(initial, str):
        if initial == "extension":
            u0 = g_nodes.copy()
        elif initial == "zero":
            u0 = np.where(mask, g_nodes, 0.0)
        else:
            raise InvalidArgument(f"unknown initial guess {initial!r}")
    else:
        u0 = np.where(mask, g_nodes, nodal_field(grid, initial, "initial"))
    g_bnd = np.where(mask, g_nodes, 0.0)

    prob = _Problem(F_hat, grid, f_nodes, g_bnd)
    v = u0.ravel()[prob.interior].copy()
    energy = prob.energy(v)
    grad = prob.gradient(v)
    residual = float(np.abs(grad).max()) / prob.hv if grad.size else 0.0
    history = [energy]
    ls_failures = 0
    fallbacks = 0
    it = 0
    while residual > tol:
        if it >= max_iter:
            raise ConvergenceFailure(
                f"no convergence in {max_iter} iterations (residual {residual:.3e})",
                {"iterations": it, "energy": energy, "residual": residual, "line_search_failures": ls_failures, "fallbacks": fallbacks},
            )
        it += 1
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", spla.MatrixRankWarning)
                step = -spla.spsolve(prob.hessian(v, eps), grad)
            if not np.all(np.isfinite(step)):
                raise ArithmeticError
        except (ArithmeticError, spla.MatrixRankWarning, RuntimeError):
            step = -grad / prob.hv
            fallbacks += 1
        slope = float(np.dot(grad, step))
        if slope >= 0:
            step = -grad / prob.hv
            slope = float(np.dot(grad, step))
            fallbacks += 1
        alpha = 1.0
        accepted = False
        for _ in range(60):
            trial = v + alpha * step
            e_trial = prob.energy(trial)
            if e_trial <= energy + 1e-4 * alpha * slope:
                accepted = True
                break
            # near the minimum the energy change drowns in rounding; accept a
            # full step if it does not raise the energy beyond that level and
            # shrinks the residual
            if alpha == 1.0 and e_trial <= energy + 1e-14 * max(1.0, abs(energy)):
                g_trial = prob.gradient(trial)
                if np.abs(g_trial).max() < np.abs(grad).max():
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            ls_failures += 1
            if np.abs(step).max() * alpha < 1e-300:
                break
            raise ConvergenceFailure(
                "line search failed",
                {"iterations": it, "energy": energy, "residual": residual, "line_search_failures": ls_failures, "fallbacks": fallbacks},
            )
        v = trial
        energy = e_trial
        history.append(energy)
        grad = prob.gradient(v)
        residual = float(np.abs(grad).max()) / prob.hv
    u = prob.full(v)
    diag = {
        "iterations": it,
        "energy": energy,
        "residual": residual,
        "line_search_failures": ls_failures,
        "fallbacks": fallbacks,
        "energy_history": history,
    }
    return DiscreteSolution(grid, u, float(eps), f_nodes, g_nodes, diag)


def max_principle_check(sol: DiscreteSolution, slack: float = 1e-8) -> tuple[bool, float]:
    """True iff max interior |u| <= max boundary |g| + slack; returns (ok, margin)."""
    mask = sol.grid.boundary_mask()
    bound = float(np.abs(sol.g[mask]).max())
    interior = np.abs(sol.u[~mask])
    top = float(interior.max()) if interior.size else 0.0
    margin = bound - top
    return margin >= -slack, margin


def _ball_cells(grid: Grid, center, radius) -> np.ndarray:
    xc = grid.cell_centers()
    return np.linalg.norm(xc - np.asarray(center, float), axis=-1) < radius


def _second_differences(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Squared Frobenius norm of the centred discrete Hessian at interior nodes (zero elsewhere)."""
    n, h = grid.n, grid.h
    inner = tuple(slice(1, -1) for _ in range(n))
    total = np.zeros(tuple(d - 2 for d in grid.dims))

    def shifted(offsets):
        return u[tuple(slice(1 + o, d - 1 + o) for o, d in zip(offsets, grid.dims))]

    for k in range(n):
        e = [0] * n
        e[k] = 1
        ek = tuple(e)
        mk = tuple(-x for x in e)
        total += ((shifted(ek) - 2 * u[inner] + shifted(mk)) / h**2) ** 2
        for l in range(k + 1, n):
            pp = [0] * n
            pp[k], pp[l] = 1, 1
            pm = [0] * n
            pm[k], pm[l] = 1, -1
            mixed = (shifted(pp) - shifted(pm) - shifted([-x for x in pm]) + shifted([-x for x in pp])) / (4 * h * h)
            total += 2 * mixed**2
    out = np.zeros(grid.dims)
    out[inner] = total
    return out


def apriori_report(sols: list[DiscreteSolution], center=None, rho: float | None = None) -> list[dict]:
    """Per-epsilon ratios for the energy bound, the second-derivative scaling and the sup bound.

    Columns: ``energy_ratio`` = ||Du||^2 / int (1 + |Dg|^2);
    ``hessian_ratio`` = sum over B_{rho/4} |D^2 u|^2 h^n * eps^2 rho^2 / (||Du||^2_{B_2rho} + rho^2 int_{B_2rho} (1 + f^2));
    ``sup_ratio`` = sup_{B_rho} |Du| / ((mean_{B_2rho} |Du|^2)^(1/2) + 1).
    The ball defaults to the box centre with 2 rho equal to the inscribed radius.
    """
    if not sols:
        raise InvalidArgument("no solutions")
    grid = sols[0].grid
    for s in sols[1:]:
        if not s.grid.same_as(grid):
            raise InvalidArgument("solutions live on different grids")
        mask = grid.boundary_mask()
        if not np.array_equal(s.g[mask], sols[0].g[mask]):
            raise InvalidArgument("solutions have different boundary data")
    if center is None:
        center = 0.5 * (grid.lo + grid.hi)
    if rho is None:
        rho = 0.25 * float(np.min(grid.hi - grid.lo))
    hv = grid.volume_element
    dg = grid.gradient(sols[0].g)
    dg_term = float(np.sum(1.0 + np.sum(dg**2, axis=-1)))
    rows = []
    cells_2rho = _ball_cells(grid, center, 2 * rho)
    cells_rho = _ball_cells(grid, center, rho)
    nodes = grid.nodes()
    node_quarter = np.linalg.norm(nodes - np.asarray(center), axis=-1) < rho / 4
    node_2rho = np.linalg.norm(nodes - np.asarray(center), axis=-1) < 2 * rho
    for s in sols:
        du = s.Du
        sq = np.sum(du**2, axis=-1)
        energy_ratio = float(np.sum(sq)) / dg_term
        d2 = _second_differences(grid, s.u)
        num = hv * float(np.sum(d2[node_quarter])) * s.epsilon**2 * rho**2
        den = hv * float(np.sum(sq[cells_2rho])) + rho**2 * hv * float(np.sum(1.0 + s.f[node_2rho] ** 2))
        sup = float(np.sqrt(sq[cells_rho].max()))
        mean = float(np.mean(sq[cells_2rho]))
        rows.append(
            {
                "epsilon": s.epsilon,
                "energy_ratio": energy_ratio,
                "hessian_ratio": num / den,
                "sup_ratio": sup / (math.sqrt(mean) + 1.0),
                "grad_sup": float(np.sqrt(sq.max())),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# solution files


def write_solution(path, sol: DiscreteSolution) -> None:
    """CSV: one ``# {json header}`` line, then one node value per line in C order."""
    import json

    header = {
        "n": sol.grid.n,
        "dims": list(sol.grid.dims),
        "h": sol.grid.h,
        "origin": [float(v) for v in sol.grid.lo],
        "epsilon": sol.epsilon,
    }
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("u\n")
        for val in sol.u.ravel():
            fh.write(repr(float(val)) + "\n")


def read_solution(path) -> tuple[dict, np.ndarray]:
    import json

    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise InvalidArgument(f"{path}: missing header line")
        header = json.loads(first[2:])
        if fh.readline().strip() != "u":
            raise InvalidArgument(f"{path}: missing column name")
        values = np.array([float(line) for line in fh if line.strip()])
    dims = tuple(header["dims"])
    if values.size != int(np.prod(dims)):
        raise InvalidArgument(f"{path}: expected {int(np.prod(dims))} values, found {values.size}")
    return header, values.reshape(dims)
