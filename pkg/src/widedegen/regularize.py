"""Truncation, convex correction and elliptic regularisation of a degenerate integrand.

The regularised integrand is

    F_hat_eps(x, xi) = Psi(F(x, xi)) + Phi(xi) + eps |xi|^2 / 2

where Psi caps F at the plateau value L = K_tilde + 1 and Phi is a radial convex
function that vanishes on |xi| <= K + R_E and restores uniform ellipticity far
out.  Both pieces are C^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConstructionError, InvalidArgument
from .integrand import Box, Integrand, PrototypeIntegrand

__all__ = [
    "Truncation",
    "ConvexCorrection",
    "RegularizedIntegrand",
    "build_truncation",
    "build_convex_correction",
    "assemble",
]


# quintic Hermite blend on [0, 1]: q(0)=0, q'(0)=1, q''(0)=0, q(1)=1, q'(1)=0, q''(1)=0
def _q(s):
    return s + 4.0 * s**3 - 7.0 * s**4 + 3.0 * s**5


def _dq(s):
    return 1.0 + 12.0 * s**2 - 28.0 * s**3 + 15.0 * s**4


def _d2q(s):
    return 24.0 * s - 84.0 * s**2 + 60.0 * s**3


@dataclass(frozen=True)
class Truncation:
    K_tilde: float
    L: float
    C_Psi: float

    def _s(self, t):
        return np.clip(np.asarray(t, float) - self.K_tilde, 0.0, 1.0)

    def psi(self, t):
        t = np.asarray(t, float)
        blend = self.K_tilde + _q(self._s(t))
        # np.where returns t itself below K_tilde, so the identity region is exact
        return np.where(t <= self.K_tilde, t, np.where(t >= self.L, self.L, blend))

    def dpsi(self, t):
        t = np.asarray(t, float)
        return np.where(t <= self.K_tilde, 1.0, np.where(t >= self.L, 0.0, _dq(self._s(t))))

    def d2psi(self, t):
        t = np.asarray(t, float)
        return np.where((t <= self.K_tilde) | (t >= self.L), 0.0, _d2q(self._s(t)))


def build_truncation(K_tilde: float) -> Truncation:
    """Psi(t) = t on [0, K_tilde], L = K_tilde + 1 beyond L, quintic blend between."""
    if not (np.isfinite(K_tilde) and K_tilde > 0):
        raise InvalidArgument("K_tilde must be positive and finite")
    s = np.linspace(0.0, 1.0, 100_001)
    c_psi = float(max(1.0, np.max(np.abs(_dq(s)) + np.abs(_d2q(s)))))
    return Truncation(float(K_tilde), float(K_tilde) + 1.0, c_psi)


@dataclass(frozen=True)
class ConvexCorrection:
    """Phi(xi) = (C_F + 1) psi(|xi|) with a C^2 radial ramp psi.

    On [a, r0] = [K + R_E, K + 2 R_E] the slope psi' is the cubic
    alpha s^2 + beta s^3 in s = (r - a)/R_E, chosen so that psi' and psi'' meet
    psi'(r) = r, psi''(r) = 1 at r0.  Beyond r0, psi(r) = psi(r0) + r0 (r - r0) + (r - r0)^2/2.
    """

    K: float
    R_E: float
    C_F: float
    bullets: dict = field(default_factory=dict)

    @property
    def inner(self) -> float:
        return self.K + self.R_E

    @property
    def outer(self) -> float:
        return self.K + 2.0 * self.R_E

    @property
    def _coeffs(self):
        r0, w = self.outer, self.R_E
        return 3.0 * r0 - w, w - 2.0 * r0

    def profile(self, r):
        """(psi, psi', psi'') at Euclidean radius r."""
        r = np.asarray(r, float)
        alpha, beta = self._coeffs
        a, r0, w = self.inner, self.outer, self.R_E
        s = np.clip((r - a) / w, 0.0, 1.0)
        ramp0 = w * (alpha * s**3 / 3.0 + beta * s**4 / 4.0)
        ramp1 = alpha * s**2 + beta * s**3
        ramp2 = (2.0 * alpha * s + 3.0 * beta * s**2) / w
        psi_r0 = w * (alpha / 3.0 + beta / 4.0)
        d = r - r0
        far = r >= r0
        mid = (r > a) & ~far
        psi = np.where(far, psi_r0 + r0 * d + 0.5 * d**2, np.where(mid, ramp0, 0.0))
        dpsi = np.where(far, r, np.where(mid, ramp1, 0.0))
        d2psi = np.where(far, 1.0, np.where(mid, ramp2, 0.0))
        return psi, dpsi, d2psi

    def max_profile_curvature(self) -> float:
        r0, w = self.outer, self.R_E
        s_star = (3.0 * r0 - w) / (3.0 * (2.0 * r0 - w))
        alpha, _ = self._coeffs
        return max(1.0, alpha * s_star / w)

    def value(self, xi):
        r = np.linalg.norm(xi, axis=-1)
        return (self.C_F + 1.0) * self.profile(r)[0]

    def gradient(self, xi):
        xi = np.asarray(xi, float)
        r = np.linalg.norm(xi, axis=-1)
        _, dpsi, _ = self.profile(r)
        safe = np.where(r > 0, r, 1.0)
        return ((self.C_F + 1.0) * dpsi / safe)[..., None] * xi

    def hessian(self, xi):
        xi = np.asarray(xi, float)
        n = xi.shape[-1]
        r = np.linalg.norm(xi, axis=-1)
        _, dpsi, d2psi = self.profile(r)
        safe = np.where(r > 0, r, 1.0)
        unit = xi / safe[..., None]
        nn = unit[..., :, None] * unit[..., None, :]
        c = self.C_F + 1.0
        tang = np.where(r > 0, dpsi / safe, 0.0)
        return c * (d2psi[..., None, None] * nn + tang[..., None, None] * (np.eye(n) - nn))


def _verify_bullets(corr: ConvexCorrection, samples: int = 20_001) -> dict:
    a, r0 = corr.inner, corr.outer
    r = np.concatenate([np.linspace(0.0, a, samples // 4), np.linspace(a, r0, samples // 2), np.linspace(r0, 4.0 * r0, samples // 4)])
    psi, dpsi, d2psi = corr.profile(r)
    c = corr.C_F + 1.0
    safe = np.where(r > 0, r, 1.0)
    tang = np.where(r > 0, dpsi / safe, 0.0)
    flat = r <= a
    far = r >= r0
    hess_max = float(c * np.max(np.maximum(d2psi, tang)))
    grad_ratio = float(np.max(np.where(r > 0, c * dpsi / safe, 0.0)))
    far_min = float(c * np.min(np.minimum(d2psi[far], tang[far])))
    return {
        "flat": {"holds": bool(np.all(psi[flat] == 0.0) and np.all(dpsi[flat] == 0.0)), "value": float(np.abs(psi[flat]).max())},
        "gradient_growth": {
            "holds": grad_ratio <= (2.0 * corr.C_F + 1.0) * (1 + 1e-12),
            "value": grad_ratio,
            "bound": 2.0 * corr.C_F + 1.0,
        },
        "far_ellipticity": {"holds": far_min >= c * (1 - 1e-12), "value": far_min, "bound": c},
        "hessian_bound": {
            "holds": hess_max <= (2.0 * corr.C_F + 1.0) * (1 + 1e-12),
            "value": hess_max,
            "bound": 2.0 * corr.C_F + 1.0,
        },
    }


def build_convex_correction(K: float, R_E: float, C_F: float, strict_hessian_bound: bool = False) -> ConvexCorrection:
    """Radial convex correction; checks its four defining bounds by sampling.

    The flat region, gradient growth and far-field ellipticity are enforced.
    The global Hessian bound 2 C_F + 1 cannot hold together with the other
    three for any C^2 convex function (see README), so its realised value is
    recorded in ``bullets`` and only enforced when ``strict_hessian_bound``.
    """
    for name, v in (("K", K), ("R_E", R_E), ("C_F", C_F)):
        if not (np.isfinite(v) and v > 0):
            raise InvalidArgument(f"{name} must be positive and finite")
    corr = ConvexCorrection(float(K), float(R_E), float(C_F))
    bullets = _verify_bullets(corr)
    enforced = ["flat", "gradient_growth", "far_ellipticity"] + (["hessian_bound"] if strict_hessian_bound else [])
    for name in enforced:
        if not bullets[name]["holds"]:
            raise ConstructionError(f"convex correction violates the {name!r} condition: {bullets[name]}")
    return replace(corr, bullets=bullets)


@dataclass(frozen=True)
class RegularizedIntegrand:
    base: Integrand
    truncation: Truncation
    correction: ConvexCorrection
    epsilon: float
    K: float
    N: float
    C_F: float
    report: dict = field(default_factory=dict)

    @property
    def body(self):
        return self.base.body

    @property
    def dim(self) -> int:
        return self.base.dim

    def with_epsilon(self, epsilon: float) -> "RegularizedIntegrand":
        _check_epsilon(epsilon)
        return replace(self, epsilon=float(epsilon))

    def value(self, x, xi):
        xi = np.asarray(xi, float)
        F = self.base._value(x, xi)
        return self.truncation.psi(F) + self.correction.value(xi) + 0.5 * self.epsilon * np.sum(xi * xi, axis=-1)

    def split_value(self, x, xi):
        """(Psi(F) + Phi, eps |xi|^2 / 2) separately."""
        xi = np.asarray(xi, float)
        F = self.base._value(x, xi)
        return self.truncation.psi(F) + self.correction.value(xi), 0.5 * self.epsilon * np.sum(xi * xi, axis=-1)

    def gradient(self, x, xi):
        xi = np.asarray(xi, float)
        F = self.base._value(x, xi)
        dF = self.base._gradient(x, xi)
        return self.truncation.dpsi(F)[..., None] * dF + self.correction.gradient(xi) + self.epsilon * xi

    def hessian(self, x, xi):
        xi = np.asarray(xi, float)
        F = self.base._value(x, xi)
        dF = self.base._gradient(x, xi)
        tr = self.truncation
        outer = dF[..., :, None] * dF[..., None, :]
        h = tr.d2psi(F)[..., None, None] * outer + tr.dpsi(F)[..., None, None] * self.base._hessian(x, xi)
        return h + self.correction.hessian(xi) + self.epsilon * np.eye(self.dim)

    def truncated_hessian(self, x, xi):
        """Hessian of Psi(F) alone."""
        xi = np.asarray(xi, float)
        F = self.base._value(x, xi)
        dF = self.base._gradient(x, xi)
        tr = self.truncation
        outer = dF[..., :, None] * dF[..., None, :]
        return tr.d2psi(F)[..., None, None] * outer + tr.dpsi(F)[..., None, None] * self.base._hessian(x, xi)


def _check_epsilon(epsilon):
    if not (np.isfinite(epsilon) and 0.0 < epsilon <= 1.0):
        raise InvalidArgument(f"epsilon must lie in (0, 1], got {epsilon}")


def _x_samples(base: Integrand, rng, count: int) -> np.ndarray:
    pts = [base.domain.sample(rng, count)]
    if isinstance(base.domain, Box):
        lo, hi = np.asarray(base.domain.lo), np.asarray(base.domain.hi)
        grids = np.meshgrid(*[(l, h) for l, h in zip(lo, hi)], indexing="ij")
        pts.append(np.stack([g.ravel() for g in grids], axis=1))
    return np.vstack(pts)


def _directions(dim: int, count: int, rng) -> np.ndarray:
    if dim == 2:
        ang = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    d = rng.standard_normal((count, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _truncated_hessian_sup(base: Integrand, trunc: Truncation, r_lo: float, r_hi: float, rng) -> float:
    """Sampled sup of |D^2 Psi(F)| over r_lo <= |xi| <= r_hi and x in the domain.

    For the prototype x enters only through the coefficient value a(x), so the
    sweep runs over a grid of coefficient values in [C1, C2] instead of points x.
    """
    radii = np.linspace(r_lo, r_hi, 1001)
    d = _directions(base.dim, 64 if base.dim == 2 else 256, rng)
    xi = (radii[:, None, None] * d[None, :, :]).reshape(-1, base.dim)
    if isinstance(base, PrototypeIntegrand):
        unit = PrototypeIntegrand(base.p, None, base.body, base.domain)
        x0 = np.broadcast_to(base.domain.sample(rng, 1), xi.shape)
        f, df, d2f = unit._value(x0, xi), unit._gradient(x0, xi), unit._hessian(x0, xi)
        outer = df[:, :, None] * df[:, None, :]
        worst = 0.0
        for a in np.linspace(base.C1, base.C2, 129 if base.C2 > base.C1 else 1):
            h = trunc.d2psi(a * f)[:, None, None] * (a * a) * outer + (trunc.dpsi(a * f) * a)[:, None, None] * d2f
            worst = max(worst, float(np.abs(np.linalg.eigvalsh(h)).max()))
        return worst
    x = _x_samples(base, rng, 64)
    xx = np.broadcast_to(x[None, :, :], (len(xi), len(x), base.dim))
    xis = np.broadcast_to(xi[:, None, :], xx.shape)
    F = base._value(xx, xis)
    dF = base._gradient(xx, xis)
    h = trunc.d2psi(F)[..., None, None] * (dF[..., :, None] * dF[..., None, :]) + trunc.dpsi(F)[..., None, None] * base._hessian(xx, xis)
    return float(np.abs(np.linalg.eigvalsh(h)).max())


def assemble(
    base: Integrand,
    K: float,
    epsilon: float,
    *,
    growth_samples: int = 20_000,
    growth_radius: float = 1e3,
    seed: int = 0,
    strict_hessian_bound: bool = False,
) -> RegularizedIntegrand:
    """Build F_hat_eps for the gradient threshold K.

    K_tilde is the sup of F over the domain and |xi| <= K + 2 R_E; C_F is the
    sampled sup of the truncated Hessian norm on K + R_E <= |xi| <= N with 1%
    headroom, floored at 1.  The returned ``report`` lists all constants.
    """
    _check_epsilon(epsilon)
    if not (np.isfinite(K) and K > 0):
        raise InvalidArgument("K must be positive")
    rng = np.random.default_rng(seed)
    _, R_E = base.body.radii()
    K_tilde = base.sup_value(K + 2.0 * R_E)
    if not K_tilde > 0:
        raise InvalidArgument("F vanishes on the whole ball |xi| <= K + 2 R_E")
    trunc = build_truncation(K_tilde)
    N = max(K + 2.0 * R_E, base.level_radius(trunc.L))

    hess_sup = _truncated_hessian_sup(base, trunc, K + R_E, N, rng)
    C_F = max(1.01 * hess_sup, 1.0)
    corr = build_convex_correction(K, R_E, C_F, strict_hessian_bound=strict_hessian_bound)
    reg = RegularizedIntegrand(base, trunc, corr, float(epsilon), float(K), float(N), float(C_F))

    # growth constants
    gd = rng.standard_normal((growth_samples, base.dim))
    gd /= np.linalg.norm(gd, axis=1, keepdims=True)
    gr = growth_radius * rng.random(growth_samples)
    gxi = gd * gr[:, None]
    gx = base.domain.sample(rng, growth_samples)
    gnorm = np.linalg.norm(reg.gradient(gx, gxi), axis=1)
    far = gr > corr.outer
    report = {
        "K": float(K),
        "K_tilde": K_tilde,
        "L": trunc.L,
        "N": float(N),
        "R_E": float(R_E),
        "C_Psi": trunc.C_Psi,
        "C_F": float(C_F),
        "hessian_sup_sampled": hess_sup,
        "growth_constant": float(np.max(gnorm / (1.0 + gr))),
        "outer_growth_ratio": float(np.max(gnorm[far] / gr[far])) if far.any() else 0.0,
        "outer_growth_bound": 2.0 * C_F + 1.0 + float(epsilon),
        "correction_bullets": corr.bullets,
    }
    return replace(reg, report=report)
