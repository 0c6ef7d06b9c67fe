"""Bessel-mode spectral solutions of the dipole Fokker-Planck equation.

The radial eigenfunctions are r^{1+D/2} J_nu(k zeta(r)) with
zeta(r) = r^{D+1}/(D^2-1) and nu fixed by the angular eigenvalue b^2 through

    nu = sqrt(4 b^2 + ((2+D)(D-1))^2) / (2 (D^2-1)).

Green's functions are k-integrals of products of two eigenfunctions damped by
exp(-h k^2 t / 2), truncated at k_max and evaluated on a composite
Gauss-Legendre grid.  All evaluators are normalized so that the total
probability at t -> 0+ equals 1 against the measure r^{D-1} dr times the
normalized angular measure; with that convention the angular average of the
angle-resolved Green's functions reproduces the spherically symmetric one
exactly.

The epsilon-cutoff variant replaces J_nu by the reflecting combination
J_nu + rho(k) J_{-nu} where rho enforces r^{-D-1} d/dr R = 0 at r = epsilon,
and integrates against the half-line spectral density
k dk / (1 + rho^2 + 2 rho cos(nu pi)).
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as _gamma

from .sde import DipoleParams
from .special import (
    ConvergenceWarning,
    QuadratureGrid,
    SpecialFunctionError,
    bessel_j,
    bessel_j_negative,
    build_k_grid,
    legendre_p,
)

__all__ = [
    "ConvergenceError",
    "SingularModeError",
    "AngularMode",
    "order_nu",
    "spherical_order",
    "zeta",
    "radial_eigenfunction",
    "boundary_exponent",
    "KernelTable",
    "green_spherical",
    "spherical_profile",
    "Green2D",
    "Green3D",
    "green_2d",
    "green_3d",
    "SpectralField",
    "solution_from_initial",
    "rescale_time",
    "op_exact_solution",
    "exact_solution_field",
    "epsilon_cutoff_ratio",
    "reflecting_ratio",
    "EpsilonGreen",
    "green_epsilon",
    "fp_residual",
    "default_grid",
    "field_to_csv",
]

T_FLOOR_FACTOR = 2.0   # reject t with exp(-h k_max^2 t / 2) > ~0.05: delta unresolved


class ConvergenceError(RuntimeError):
    """Quadrature or mode-sum self-convergence gate failed."""


class SingularModeError(ValueError):
    """The printed epsilon-cutoff coefficient is singular for this mode."""


def order_nu(D: int, b_sq: float) -> float:
    """Bessel order for angular eigenvalue b^2 of -Omega-hat."""
    if D < 2:
        raise ValueError("D must be >= 2")
    return float(np.sqrt(4.0 * b_sq + ((2 + D) * (D - 1)) ** 2) / (2.0 * (D * D - 1)))


def spherical_order(D: int) -> float:
    """Order of the spherically symmetric mode, (1 + D/2)/(D + 1)."""
    return (1.0 + D / 2.0) / (D + 1.0)


def zeta(r, D: int):
    """Spectral radial variable zeta(r) = r^{D+1} / (D^2 - 1)."""
    return np.asarray(r, float) ** (D + 1) / (D * D - 1.0)


@dataclass(frozen=True)
class AngularMode:
    """One angular sector: label n (D=2) or l (D=3, m=0), eigenvalue b^2, order nu."""

    D: int
    label: int
    b_sq: float
    nu: float

    @classmethod
    def make(cls, D: int, label: int) -> "AngularMode":
        b_sq = float(label * label) if D == 2 else float(label * (label + 1))
        return cls(D, label, b_sq, order_nu(D, b_sq))


def modes_for(D: int, mode_max: int) -> list[AngularMode]:
    return [AngularMode.make(D, n) for n in range(mode_max + 1)]


def radial_eigenfunction(D: int, nu: float, k: float, r):
    """r^{1+D/2} J_nu(k zeta(r)); vanishes at r=0 for every nu > 0."""
    r = np.asarray(r, float)
    return r ** (1 + D / 2.0) * bessel_j(nu, k * zeta(r, D))


def boundary_exponent(D: int, b_sq: float) -> float:
    """Power of r in r^{-D-1} d/dr (radial eigenfunction) as r -> 0.

    Positive exactly when b^2 > 0 (strict boundary condition); zero for the
    spherically symmetric mode, which satisfies only the relaxed condition.
    """
    return float(np.sqrt(b_sq / (D - 1.0) ** 2 + (1 + D / 2.0) ** 2) - (1 + D / 2.0))


def rescale_time(r0: float, t, D: int):
    """Time to use with the r0=1 Green's function: r0^{2(D+1)} t."""
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    return r0 ** (2 * (D + 1)) * np.asarray(t, float)


def default_grid(params: DipoleParams, r_max: float = 3.2, k_max: float = 60.0,
                 graded_origin: bool = False, **kw) -> QuadratureGrid:
    """k-grid sized by the pi/4 oscillation rule for radii up to r_max."""
    rate = float(zeta(r_max, params.D) + zeta(1.0, params.D))
    return build_k_grid(k_max, rate, graded_origin=graded_origin, **kw)


def t_floor(params: DipoleParams, grid: QuadratureGrid) -> float:
    """Smallest t at which the truncated k-integral resolves the initial delta."""
    return T_FLOOR_FACTOR * 2.0 * 3.0 / (params.h * grid.k_max ** 2)


# ---------------------------------------------------------------------------
# Mode kernels
# ---------------------------------------------------------------------------

def _jv_any(nu: float, x: np.ndarray) -> np.ndarray:
    if nu >= 0.0:
        return bessel_j(nu, x)
    return bessel_j_negative(-nu, x)


def _jv_deriv(nu: float, x: np.ndarray) -> np.ndarray:
    return 0.5 * (_jv_any(nu - 1.0, x) - _jv_any(nu + 1.0, x))


def reflecting_ratio(D: int, nu: float, k, epsilon: float) -> np.ndarray:
    """Exact coefficient ratio c_-/c_+ enforcing r^{-D-1} d/dr R = 0 at r=epsilon.

    Reduces to the leading-order A(k,mode) * epsilon^(2 nu (D+1)) coefficients
    as k * zeta(epsilon) -> 0 and stays bounded at large k, where the printed
    leading-order coefficients blow up.
    """
    x = np.atleast_1d(np.asarray(k, float)) * float(zeta(epsilon, D))
    c = 1 + D / 2.0
    num = c * bessel_j(nu, x) + (D + 1) * x * _jv_deriv(nu, x)
    den = c * bessel_j_negative(nu, x) + (D + 1) * x * _jv_deriv(-nu, x)
    return -num / den


def epsilon_cutoff_ratio(D: int, mode: AngularMode, k, epsilon: float):
    """Leading-order (small k zeta(epsilon)) ratio c_-/c_+ = A * epsilon^power.

    D=2: A_2dim = 6^{-2 delta/3}(delta+2) k^{2 delta/3} Gamma(1-delta/3) /
    ((delta-2) Gamma(delta/3+1)) with delta = sqrt(n^2+4) and power 2*delta
    (the exponent gap between the two radial branches; the spec's shooting
    oracle fixes the power).  D=3: A_3dim with delta = sqrt(l^2+l+25), power
    delta.  Raises SingularModeError where the printed denominators vanish
    (n=0 gives delta=2, l=0 gives delta=5) or a Gamma pole is hit.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    k = np.asarray(k, float)
    if D == 2:
        delta = float(np.sqrt(mode.label ** 2 + 4.0))
        if abs(delta - 2.0) < 1e-12:
            raise SingularModeError("n=0 mode: delta=2 makes A_2dim singular")
        if abs((delta / 3.0) % 1.0) < 1e-12:
            raise SingularModeError("Gamma pole in A_2dim")
        a = (6.0 ** (-2 * delta / 3.0) * (delta + 2.0) * k ** (2 * delta / 3.0)
             * _gamma(1.0 - delta / 3.0) / ((delta - 2.0) * _gamma(delta / 3.0 + 1.0)))
        return a * epsilon ** (2.0 * delta)
    if D == 3:
        delta = float(np.sqrt(mode.label ** 2 + mode.label + 25.0))
        if abs(delta - 5.0) < 1e-12:
            raise SingularModeError("l=0 mode: delta=5 makes A_3dim singular")
        if abs((delta / 8.0) % 1.0) < 1e-12:
            raise SingularModeError("Gamma pole in A_3dim")
        a = (-(2.0 ** (-delta)) * (delta + 5.0) * k ** (delta / 4.0)
             * _gamma(-delta / 8.0) / ((delta - 5.0) * _gamma(delta / 8.0)))
        return a * epsilon ** delta
    raise ValueError("epsilon cutoff coefficients are defined for D in {2, 3}")


class KernelTable:
    """Per-mode radial kernels K_nu(r, t) = int k dk e^{-h k^2 t/2} R(k z0) R(k z(r)).

    R is J_nu for the free problem; with an epsilon cutoff it is the
    reflecting combination integrated against the half-line spectral density.
    Kernels are cached per mode, so re-evaluating at new angles is free.
    """

    def __init__(self, params: DipoleParams, grid: QuadratureGrid, r, times,
                 epsilon: float | None = None, sym_policy: str = "mix",
                 r0: float = 1.0):
        self.params = params
        self.grid = grid
        self.r = np.atleast_1d(np.asarray(r, float))
        self.times = np.atleast_1d(np.asarray(times, float))
        if np.any(self.times <= 0.0):
            raise ValueError("kernel times must be positive")
        self.epsilon = epsilon
        self.sym_policy = sym_policy
        self.r0 = float(r0)
        if epsilon is not None and np.any(self.r < epsilon - 1e-12):
            raise ValueError("epsilon-cutoff kernels are defined for r >= epsilon")
        k = grid.nodes
        self._zr = zeta(self.r, params.D)
        self._z0 = float(zeta(self.r0, params.D))
        self._damp = np.exp(-0.5 * params.h * np.outer(k * k, self.times))
        self._cache: dict[float, np.ndarray] = {}

    def kernel(self, nu: float) -> np.ndarray:
        """(n_r, n_t) kernel for Bessel order nu."""
        key = round(float(nu), 12)
        got = self._cache.get(key)
        if got is not None:
            return got
        k = self.grid.nodes
        j0 = bessel_j(nu, k * self._z0)
        is_spherical = abs(nu - spherical_order(self.params.D)) < 1e-12
        mixed = self.epsilon is not None and (self.sym_policy == "mix" or not is_spherical)
        if mixed:
            rho = reflecting_ratio(self.params.D, nu, k, self.epsilon)
            cosnp = np.cos(nu * np.pi)
            big = np.abs(rho) > 1.0
            s = np.where(big, 1.0 / rho, rho)
            norm = np.sqrt(np.where(big, s * s + 1.0 + 2.0 * s * cosnp,
                                    1.0 + rho * rho + 2.0 * rho * cosnp))
            j0 = np.where(big, s * j0 + bessel_j_negative(nu, k * self._z0),
                          j0 + rho * bessel_j_negative(nu, k * self._z0)) / norm
        base = self.grid.weights * k * j0
        out = np.empty((len(self.r), self._damp.shape[1]))
        block = max(1, int(2e7) // max(1, len(k)))   # bound the (n_k, n_r) scratch
        for lo in range(0, len(self.r), block):
            zr = self._zr[lo: lo + block]
            jr = bessel_j(nu, np.outer(k, zr).ravel()).reshape(len(k), len(zr))
            if mixed:
                jmr = bessel_j_negative(nu, np.outer(k, zr).ravel()).reshape(len(k), len(zr))
                jr = np.where(big[:, None], s[:, None] * jr + jmr,
                              jr + rho[:, None] * jmr) / norm[:, None]
            out[lo: lo + block] = (jr * base[:, None]).T @ self._damp
        self._cache[key] = out
        return out


def _radial_prefactor(D: int, r: np.ndarray, r0: float = 1.0) -> np.ndarray:
    # (r r0)^{1+D/2}/((D-1)^2 (D+1)) gives unit mass against r^{D-1} dr for a
    # delta released at r0 (the bare spectral construction carries r0^{3D/2}
    # and mass r0^{D-1})
    return (r * r0) ** (1 + D / 2.0) / ((D - 1.0) ** 2 * (D + 1.0))


def spherical_profile(params: DipoleParams, grid: QuadratureGrid, r, times,
                      r0: float = 1.0) -> np.ndarray:
    """G(r, t) for the spherically symmetric Green's function, as an
    (n_r, n_t) table.  Initial condition is a unit-mass delta at r0 against
    the measure r^{D-1} dr."""
    r = np.atleast_1d(np.asarray(r, float))
    table = KernelTable(params, grid, r, times, r0=r0)
    kern = table.kernel(spherical_order(params.D))
    return _radial_prefactor(params.D, r, r0)[:, None] * kern


def green_spherical(params: DipoleParams, r, t, grid: QuadratureGrid,
                    r0: float = 1.0, check_convergence: bool = False):
    """Spherically symmetric Green's function value(s) at radius r, time t.

    With check_convergence=True the value is recomputed on a panel-doubled
    grid and a ConvergenceError is raised if it moves by more than
    1e-3 * max(1, |value|).
    """
    rr = np.atleast_1d(np.asarray(r, float))
    tt = np.atleast_1d(np.asarray(t, float))
    out = spherical_profile(params, grid, rr, tt, r0)
    if check_convergence:
        fine = spherical_profile(params, grid.refined(), rr, tt, r0)
        worst = float(np.max(np.abs(fine - out) / np.maximum(1.0, np.abs(out))))
        if worst > 1e-3:
            raise ConvergenceError(
                f"k-quadrature unconverged: refinement moved values by {worst:.2e}"
            )
    if np.isscalar(r) and np.isscalar(t):
        return float(out[0, 0])
    if np.isscalar(t):
        return out[:, 0]
    if np.isscalar(r):
        return out[0, :]
    return out


class _AngularGreen:
    """Shared machinery for the D=2 and D=3 angle-resolved Green's functions."""

    def __init__(self, params: DipoleParams, grid: QuadratureGrid, mode_max: int,
                 epsilon: float | None = None, sym_policy: str = "mix"):
        if mode_max < 1:
            raise ValueError("mode_max must be >= 1")
        self.params = params
        self.grid = grid
        self.mode_max = mode_max
        self.epsilon = epsilon
        self.sym_policy = sym_policy
        self.modes = modes_for(params.D, mode_max)

    def _angular_weights(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _prefactor(self, r: np.ndarray) -> np.ndarray:
        D = self.params.D
        return r ** (1 + D / 2.0) / ((D - 1.0) ** 2 * (D + 1.0))

    def field(self, r, theta, times, mode_max: int | None = None) -> np.ndarray:
        """(n_r, n_theta, n_t) tensor of density values."""
        r = np.atleast_1d(np.asarray(r, float))
        theta = np.atleast_1d(np.asarray(theta, float))
        times = np.atleast_1d(np.asarray(times, float))
        mm = self.mode_max if mode_max is None else mode_max
        table = KernelTable(self.params, self.grid, r, times,
                            self.epsilon, self.sym_policy)
        ang = self._angular_weights(theta)      # (mode, n_theta) incl. degeneracy
        out = np.zeros((len(r), len(theta), len(times)))
        for mode in self.modes[: mm + 1]:
            kern = table.kernel(mode.nu)        # (n_r, n_t)
            out += kern[:, None, :] * ang[mode.label][None, :, None]
        out *= self._prefactor(r)[:, None, None]
        return out

    def value(self, r, theta, t, check_convergence: bool = False):
        out = float(self.field([r], [theta], [t])[0, 0, 0])
        if check_convergence:
            if len(self.modes) < self.mode_max + 11:
                self.modes = modes_for(self.params.D, self.mode_max + 10)
            wide = float(self.field([r], [theta], [t],
                                    mode_max=self.mode_max + 10)[0, 0, 0])
            if abs(wide - out) > 1e-3 * max(1.0, abs(out)):
                raise ConvergenceError("angular mode sum unconverged")
        return out


class Green2D(_AngularGreen):
    """D=2 Green's function with initial delta at (r=1, theta=0), normalized
    to unit mass against r dr dtheta/(2 pi)."""

    def __init__(self, params: DipoleParams, grid: QuadratureGrid, n_max: int = 50,
                 epsilon: float | None = None, sym_policy: str = "mix"):
        if params.D != 2:
            raise ValueError("Green2D needs D=2 parameters")
        super().__init__(params, grid, n_max, epsilon, sym_policy)

    def _angular_weights(self, theta: np.ndarray) -> np.ndarray:
        n = np.arange(self.mode_max + 1)
        w = np.cos(np.outer(n, theta))
        w[1:] *= 2.0                      # modes +-n combine into 2 cos(n theta)
        return w


class Green3D(_AngularGreen):
    """D=3, azimuthally symmetric Green's function with initial delta at
    (r=1, theta=0), normalized against r^2 dr sin(theta) dtheta dphi/(4 pi)."""

    def __init__(self, params: DipoleParams, grid: QuadratureGrid, l_max: int = 50,
                 epsilon: float | None = None, sym_policy: str = "mix"):
        if params.D != 3:
            raise ValueError("Green3D needs D=3 parameters")
        super().__init__(params, grid, l_max, epsilon, sym_policy)

    def _angular_weights(self, theta: np.ndarray) -> np.ndarray:
        u = np.cos(theta)
        return np.stack([(2 * l + 1) * legendre_p(l, u)
                         for l in range(self.mode_max + 1)])


def green_2d(r, theta, t, params: DipoleParams, grid: QuadratureGrid,
             n_max: int = 50, check_convergence: bool = False):
    """Angle-resolved D=2 Green's function (cosine-paired real mode sum)."""
    return Green2D(params, grid, n_max).value(r, theta, t, check_convergence)


def green_3d(r, theta, t, params: DipoleParams, grid: QuadratureGrid,
             l_max: int = 50, check_convergence: bool = False):
    """Angle-resolved azimuthally symmetric D=3 Green's function."""
    return Green3D(params, grid, l_max).value(r, theta, t, check_convergence)


class EpsilonGreen:
    """Green's function with a reflecting wall at r = epsilon.

    Radial functions are c_+ (J_nu + rho(k) J_{-nu}) with the exact reflecting
    ratio rho, integrated against the half-line spectral density
    k dk/(1 + rho^2 + 2 rho cos(nu pi)).  sym_policy='mix' (default) includes
    the spherically symmetric mode in the mixing, which conserves total
    probability; 'exclude' falls back to pure J_nu for it (recorded in
    metadata) as the printed coefficients are singular there.
    """

    def __init__(self, params: DipoleParams, grid: QuadratureGrid, mode_max: int,
                 epsilon: float, sym_policy: str = "mix"):
        if not 0.0 < epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if sym_policy not in ("mix", "exclude"):
            raise ValueError("sym_policy must be 'mix' or 'exclude'")
        cls = Green2D if params.D == 2 else Green3D
        self._green = cls(params, grid, mode_max, epsilon=epsilon, sym_policy=sym_policy)
        self.params = params
        self.epsilon = epsilon
        self.metadata = {
            "epsilon": epsilon,
            "sym_policy": sym_policy,
            "excluded_modes": [] if sym_policy == "mix" else [0],
            "ratio": "exact reflecting derivative ratio",
        }

    def field(self, r, theta, times) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, float))
        if np.any(r < self.epsilon - 1e-12):
            raise ValueError("epsilon-cutoff Green is defined for r >= epsilon")
        return self._green.field(r, theta, times)

    def value(self, r, theta, t) -> float:
        return float(self.field([r], [theta], [t])[0, 0, 0])


def green_epsilon(r, theta, t, params: DipoleParams, grid: QuadratureGrid,
                  mode_max: int, epsilon: float, sym_policy: str = "mix"):
    return EpsilonGreen(params, grid, mode_max, epsilon, sym_policy).value(r, theta, t)


# ---------------------------------------------------------------------------
# General solutions from sampled initial data
# ---------------------------------------------------------------------------

@dataclass
class SpectralField:
    """FP solution as per-mode spectral amplitudes rho_mode(k).

    Amplitudes follow the paper-side convention in which the delta initial
    condition at (r=1, theta=0) gives rho_n(k) = (k/(D^2-1))^{1-nu_D}
    J_{nu_n}(k/(D^2-1)) * degeneracy/2pi-normalization absorbed; see
    origin_convention for the exact synthesis rule used by evaluate().
    """

    params: DipoleParams
    grid: QuadratureGrid
    modes: list
    rho: np.ndarray                 # complex, (n_modes, n_k)
    origin_convention: dict = field(default_factory=dict)

    def field(self, r, theta, times) -> np.ndarray:
        r = np.atleast_1d(np.asarray(r, float))
        theta = np.atleast_1d(np.asarray(theta, float))
        times = np.atleast_1d(np.asarray(times, float))
        D = self.params.D
        k = self.grid.nodes
        nu_d = spherical_order(D)
        zr = zeta(r, D)
        damp = np.exp(-0.5 * self.params.h * np.outer(k * k, times))
        kpow = (k / (D * D - 1.0)) ** nu_d
        pref = r ** (1 + D / 2.0)
        out = np.zeros((len(r), len(theta), len(times)))
        for i, mode in enumerate(self.modes):
            jr = bessel_j(mode.nu, np.outer(k, zr).ravel()).reshape(len(k), len(r))
            radial = (jr * (self.grid.weights * kpow * self.rho[i])[:, None]).T @ damp
            if D == 2 and mode.label > 0:
                # real data: rho_{-n} = conj(rho_n), so the +-n pair gives
                # 2 Re[rho_n e^{in theta}]
                cosn = np.cos(mode.label * theta)
                sinn = np.sin(mode.label * theta)
                out += 2.0 * (np.real(radial)[:, None, :] * cosn[None, :, None]
                              - np.imag(radial)[:, None, :] * sinn[None, :, None])
            else:
                ang = (np.ones_like(theta) if D == 2
                       else legendre_p(mode.label, np.cos(theta)))
                out += np.real(radial)[:, None, :] * ang[None, :, None]
        return out * pref[:, None, None]

    def evaluate(self, r, theta, t) -> float:
        return float(self.field([r], [theta], [t])[0, 0, 0])


def solution_from_initial(r_nodes, theta_nodes, p0, params: DipoleParams,
                          grid: QuadratureGrid, mode_max: int = 50) -> SpectralField:
    """Project sampled initial data onto the Bessel eigenbasis.

    p0[i, j] samples the density at (r_nodes[i], theta_nodes[j]) in the
    normalized-measure convention (unit mass against r^{D-1} dr d omega).
    Angular projection uses the trapezoid rule on a uniform theta grid for
    D=2 and Gauss-type weights in cos(theta) for D=3; the radial projection
    is the order-nu_n Hankel transform in zeta.
    """
    r_nodes = np.asarray(r_nodes, float)
    theta_nodes = np.asarray(theta_nodes, float)
    p0 = np.asarray(p0, float)
    if p0.shape != (len(r_nodes), len(theta_nodes)):
        raise ValueError("p0 must be sampled on the (r, theta) grid")
    peak = float(np.max(np.abs(p0)))
    if peak > 0 and np.max(np.abs(p0[-1, :])) > 1e-6 * peak:
        warnings.warn("initial data has not decayed at the radial boundary",
                      ConvergenceWarning, stacklevel=2)
    D = params.D
    k = grid.nodes
    nu_d = spherical_order(D)
    modes = modes_for(D, mode_max)
    # angular analysis
    if D == 2:
        dtheta = 2.0 * np.pi / len(theta_nodes)
        p_n = np.stack([
            (p0 * np.exp(-1j * m.label * theta_nodes)[None, :]).sum(axis=1) * dtheta / (2 * np.pi)
            for m in modes
        ])
    else:
        u = np.cos(theta_nodes)
        order = np.argsort(u)
        uu = u[order]
        w = np.empty_like(uu)
        w[1:-1] = 0.5 * (uu[2:] - uu[:-2])
        w[0] = 0.5 * (uu[1] - uu[0])
        w[-1] = 0.5 * (uu[-1] - uu[-2])
        p_n = np.stack([
            (2 * m.label + 1) * 0.5 * (p0[:, order] * (legendre_p(m.label, uu) * w)[None, :]).sum(axis=1)
            for m in modes
        ]).astype(complex)
    # radial weights for the Hankel projection in zeta
    wr = np.empty_like(r_nodes)
    wr[1:-1] = 0.5 * (r_nodes[2:] - r_nodes[:-2])
    wr[0] = 0.5 * (r_nodes[1] - r_nodes[0])
    wr[-1] = 0.5 * (r_nodes[-1] - r_nodes[-2])
    kpow = (k / (D * D - 1.0)) ** (1.0 - nu_d)
    radial_meas = wr * r_nodes ** (3.0 * D / 2.0) / (D - 1.0)
    rho = np.empty((len(modes), len(k)), dtype=complex)
    for i, m in enumerate(modes):
        jr = bessel_j(m.nu, np.outer(k, zeta(r_nodes, D)).ravel()).reshape(len(k), len(r_nodes))
        rho[i] = kpow * (jr @ (radial_meas * p_n[i]))
    return SpectralField(params, grid, modes, rho, {
        "angular_analysis": "1/(2 pi) Fourier" if D == 2 else "(2l+1)/2 Legendre",
        "radial_analysis": "Hankel in zeta with measure r^{3D/2} dr/(D-1)",
        "synthesis": "sum_n angular * r^{1+D/2} int dk rho_n (k/(D^2-1))^{nu_D} J_{nu_n}",
    })


# ---------------------------------------------------------------------------
# O'Shaughnessy-Procaccia closed form
# ---------------------------------------------------------------------------

def op_exact_solution(params: DipoleParams, r, t):
    """Closed-form self-similar solution spreading from the origin, normalized
    to unit mass against r^{D-1} dr for every t.

    Solves the radial FP equation with effective front coefficient
    K = (h/2)(D-1)^2 and exponent 2 + 2D.
    """
    D = params.D
    m = 2 + 2 * D
    beta = 0.5 * params.h * (D - 1.0) ** 2 * m * m
    r = np.asarray(r, float)
    t = np.asarray(t, float)
    if np.any(t <= 0):
        raise ValueError("t must be positive")
    norm = m / (beta ** (D / m) * _gamma(D / m))
    return norm * t ** (-D / m) * np.exp(-(r ** m) / (beta * t))


def exact_solution_field(params: DipoleParams):
    """Tensor evaluator (r, theta, t) -> (n_r, n_theta, n_t) for fp_residual."""
    def field(r, theta, times):
        r = np.atleast_1d(np.asarray(r, float))
        theta = np.atleast_1d(np.asarray(theta, float))
        times = np.atleast_1d(np.asarray(times, float))
        vals = np.stack([op_exact_solution(params, r, tv) for tv in times], axis=1)
        return np.repeat(vals[:, None, :], len(theta), axis=1)
    return field


# ---------------------------------------------------------------------------
# Fokker-Planck residual checker
# ---------------------------------------------------------------------------

def fp_residual(field_fn, params: DipoleParams, r, theta, times,
                dr: float = 1e-3, dtheta: float = 2e-3, dt_rel: float = 1e-3) -> float:
    """Max |dP/dt - L P| over the grid, relative to max |dP/dt|.

    field_fn(r_array, theta_array, t_array) must return the (n_r, n_theta,
    n_t) tensor of values; derivatives are central differences.  theta=None
    checks a spherically symmetric field (the angular operator drops out).
    """
    D = params.D
    r = np.atleast_1d(np.asarray(r, float))
    times = np.atleast_1d(np.asarray(times, float))
    has_theta = theta is not None
    theta_arr = np.atleast_1d(np.asarray(theta, float)) if has_theta else np.array([0.0])

    r_st = np.concatenate([r - dr, r, r + dr])
    th_st = (np.concatenate([theta_arr - dtheta, theta_arr, theta_arr + dtheta])
             if has_theta else theta_arr)
    dt_abs = dt_rel * times
    t_st = np.concatenate([times - dt_abs, times, times + dt_abs])
    F = field_fn(r_st, th_st, t_st)
    nr, nth, nt = len(r), len(theta_arr), len(times)
    c = F[nr:2 * nr, :, :][:, (nth if has_theta else 0):(2 * nth if has_theta else 1), :]

    def tslice(block):
        return block[..., nt:2 * nt]

    P = tslice(c)
    dP_dt = (c[..., 2 * nt:] - c[..., :nt]) / (2.0 * dt_abs)[None, None, :]
    mid_th = slice(nth, 2 * nth) if has_theta else slice(0, 1)
    P_rp = tslice(F[2 * nr:, mid_th, :])
    P_rm = tslice(F[:nr, mid_th, :])
    d1r = (P_rp - P_rm) / (2.0 * dr)
    d2r = (P_rp - 2.0 * P + P_rm) / dr ** 2
    rr = r[:, None, None]
    spatial = (D - 1.0) ** 2 * (rr * rr * d2r - (D + 1.0) * rr * d1r)
    if has_theta:
        mid_r = slice(nr, 2 * nr)
        P_tp = tslice(F[mid_r, 2 * nth:, :])
        P_tm = tslice(F[mid_r, :nth, :])
        d1th = (P_tp - P_tm) / (2.0 * dtheta)
        d2th = (P_tp - 2.0 * P + P_tm) / dtheta ** 2
        if D == 2:
            omega = d2th
        elif D == 3:
            omega = d2th + (np.cos(theta_arr) / np.sin(theta_arr))[None, :, None] * d1th
        else:
            raise ValueError("angular residual implemented for D in {2, 3}")
        spatial = spatial + omega
    lhs = dP_dt - 0.5 * params.h * rr ** (-2 * D - 2) * spatial
    scale = float(np.max(np.abs(dP_dt)))
    return float(np.max(np.abs(lhs))) / scale


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def field_to_csv(path, times, r, theta, values, meta: dict) -> None:
    """Write t,r,theta,value rows plus a .meta sidecar describing the run."""
    import csv as _csv

    values = np.asarray(values, float)
    r = np.atleast_1d(np.asarray(r, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    times = np.atleast_1d(np.asarray(times, float))
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["t", "r", "theta", "value"])
        for it, tv in enumerate(times):
            for ir, rv in enumerate(r):
                for ith, th in enumerate(theta):
                    w.writerow([f"{tv:.12g}", f"{rv:.12g}", f"{th:.12g}",
                                f"{values[ir, ith, it]:.12g}"])
    with open(str(path) + ".meta", "w") as fh:
        for key, val in meta.items():
            fh.write(f"{key} = {val}\n")
