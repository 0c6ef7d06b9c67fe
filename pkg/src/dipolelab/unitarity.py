"""Total-probability bookkeeping and the reset-recovery renormalization.

The relaxed boundary condition lets probability flow out at the origin, so
N(t) = int r^{D-1} dr d omega P decays.  Reinserting lost particles at the
initial point (recovery Condition 2) renormalizes the density through the
renewal equation

    Ptil(t) = P(t) - int_0^t dt1 Ndot(t1) Ptil(t - t1),

solved either exactly (discrete triangular back-substitution) or truncated at
second order in Ndot as the paper does.  The printed second-order correction
+ int_0^t dt1 Ndot(t1) int_{t1}^t dt2 Ndot(t2) P(t-t2) reduces, by swapping
the integration order, to a single convolution with kernel Ndot(s)(N(s) - 1);
that reduced form is what the code evaluates.

All series live on a uniform time grid that starts at t=0, where every
moment of the initial delta is known exactly.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .sde import DipoleParams
from .special import ConvergenceWarning

__all__ = [
    "ProbabilitySeries",
    "angular_grid",
    "radial_panel_grid",
    "total_probability",
    "probability_series",
    "probability_series_from_field",
    "modify_series",
    "modified_density",
    "modified_field",
    "series_to_csv",
]


@dataclass
class ProbabilitySeries:
    """N(t) and its time derivative on a strictly increasing grid.

    times[0] may be 0 with N=1 exactly (the initial delta has unit mass)."""

    times: np.ndarray
    N: np.ndarray
    Ndot: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.N = np.asarray(self.N, float)
        self.Ndot = np.asarray(self.Ndot, float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(self.N < -0.01) or np.any(self.N > 1.01):
            raise ValueError("total probability left [-0.01, 1.01]")
        if np.any(np.diff(self.N) > 1e-3):
            warnings.warn("N(t) increased beyond the 1e-3 noise band",
                          ConvergenceWarning, stacklevel=2)

    @property
    def dt(self) -> float:
        steps = np.diff(self.times)
        if np.max(steps) - np.min(steps) > 1e-12 * np.max(steps):
            raise ValueError("series grid must be uniform for convolutions")
        return float(steps[0])

    @classmethod
    def from_totals(cls, times, N) -> "ProbabilitySeries":
        times = np.asarray(times, float)
        N = np.asarray(N, float)
        return cls(times, N, np.gradient(N, times))


def angular_grid(D: int, n_nodes: int = 128):
    """Angular nodes and weights for the normalized measure (sum of weights = 1).

    D=2: uniform trapezoid on (-pi, pi] (exact for harmonics below the Nyquist
    degree); D=3: Gauss-Legendre in cos(theta) (exact for Legendre sums)."""
    if D == 2:
        theta = -np.pi + 2.0 * np.pi * (np.arange(n_nodes) + 0.5) / n_nodes
        w = np.full(n_nodes, 1.0 / n_nodes)
        return theta, w
    if D == 3:
        u, wu = np.polynomial.legendre.leggauss(n_nodes)
        order = np.argsort(-u)            # theta increasing from 0
        return np.arccos(u[order]), 0.5 * wu[order]
    raise ValueError("angular grids are defined for D in {2, 3}")


def radial_panel_grid(r_min: float, r_max: float, panel: float = 0.04,
                      nodes_per_panel: int = 8):
    """Composite Gauss-Legendre nodes/weights on [r_min, r_max]."""
    n_panels = max(1, int(np.ceil((r_max - r_min) / panel)))
    xg, wg = np.polynomial.legendre.leggauss(nodes_per_panel)
    edges = np.linspace(r_min, r_max, n_panels + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    return (mids[:, None] + half * xg[None, :]).ravel(), \
        np.repeat(half * wg[None, :], n_panels, axis=0).ravel()


def total_probability(field_fn, t: float, params: DipoleParams,
                      r_nodes, r_weights, theta_nodes=None, theta_weights=None,
                      check_convergence: bool = False) -> float:
    """int r^{D-1} dr d omega P(r, omega, t) with the normalized angular measure.

    field_fn(r, theta, t_array) returns the (n_r, n_theta, n_t) tensor; pass
    theta_nodes=None for spherically symmetric evaluators.
    """
    r_nodes = np.asarray(r_nodes, float)
    r_weights = np.asarray(r_weights, float)
    if theta_nodes is None:
        theta_nodes, theta_weights = np.array([0.0]), np.array([1.0])
    vals = field_fn(r_nodes, theta_nodes, np.atleast_1d(float(t)))[:, :, 0]
    wr = r_weights * r_nodes ** (params.D - 1)
    out = float(wr @ vals @ np.asarray(theta_weights, float))
    if check_convergence:
        fine_nodes, fine_w = _refine(r_nodes, r_weights)
        vals2 = field_fn(fine_nodes, theta_nodes, np.atleast_1d(float(t)))[:, :, 0]
        out2 = float((fine_w * fine_nodes ** (params.D - 1)) @ vals2 @ np.asarray(theta_weights, float))
        if abs(out2 - out) > 1e-3:
            warnings.warn(f"radial quadrature unconverged: {abs(out2 - out):.2e}",
                          ConvergenceWarning, stacklevel=2)
    return out


def _refine(nodes, weights):
    # midpoint-split trapezoid refinement used only as a convergence probe
    mid = 0.5 * (nodes[:-1] + nodes[1:])
    allx = np.sort(np.concatenate([nodes, mid]))
    w = np.empty_like(allx)
    w[1:-1] = 0.5 * (allx[2:] - allx[:-2])
    w[0] = 0.5 * (allx[1] - allx[0])
    w[-1] = 0.5 * (allx[-1] - allx[-2])
    return allx, w


def probability_series(field_fn, times, params: DipoleParams,
                       r_nodes, r_weights, theta_nodes=None, theta_weights=None,
                       prepend_zero: bool = True) -> ProbabilitySeries:
    """N(t) on a time grid by quadrature of the field; Ndot by differences.

    prepend_zero adds the exact (t=0, N=1) node, which anchors the Volterra
    convolutions."""
    times = np.asarray(times, float)
    if theta_nodes is None:
        theta_nodes_, theta_weights_ = np.array([0.0]), np.array([1.0])
    else:
        theta_nodes_, theta_weights_ = theta_nodes, theta_weights
    vals = field_fn(np.asarray(r_nodes, float), theta_nodes_, times)
    wr = np.asarray(r_weights, float) * np.asarray(r_nodes, float) ** (params.D - 1)
    N = np.einsum("i,ijt,j->t", wr, vals, np.asarray(theta_weights_, float))
    if prepend_zero and times[0] > 0:
        times = np.concatenate([[0.0], times])
        N = np.concatenate([[1.0], N])
    return ProbabilitySeries.from_totals(times, N)


def probability_series_from_field(times, N, prepend_zero: bool = True) -> ProbabilitySeries:
    times = np.asarray(times, float)
    N = np.asarray(N, float)
    if prepend_zero and times[0] > 0:
        times = np.concatenate([[0.0], times])
        N = np.concatenate([[1.0], N])
    return ProbabilitySeries.from_totals(times, N)


# ---------------------------------------------------------------------------
# Volterra machinery on the uniform series grid
# ---------------------------------------------------------------------------

def _trapezoid_row_weights(i: int) -> np.ndarray:
    w = np.ones(i + 1)
    w[0] = 0.5
    w[i] = 0.5
    return w


def modify_series(values: np.ndarray, prob: ProbabilitySeries, order=2) -> np.ndarray:
    """Apply the reset-recovery modification to a series sampled on prob.times.

    values[..., j] is any linear functional of the density at prob.times[j]
    (a pointwise value, a moment, N itself).  order 1 keeps the first
    correction, order 2 the printed second-order truncation, 'exact' solves
    the discrete renewal equation by triangular back-substitution.
    """
    vals = np.asarray(values, float)
    if vals.shape[-1] != len(prob.times):
        raise ValueError("values must be sampled on the probability-series grid")
    dt = prob.dt
    nd = prob.Ndot
    M = vals.shape[-1]
    flat = vals.reshape(-1, M)
    out = np.empty_like(flat)
    if order == "exact":
        out[:, 0] = flat[:, 0]
        denom = 1.0 + 0.5 * dt * nd[0]
        for i in range(1, M):
            w = _trapezoid_row_weights(i)[1:]
            # renewal: the convolution runs over the *solution* at earlier times
            conv = dt * (out[:, i - 1:: -1][:, :i] * (w * nd[1: i + 1])[None, :]).sum(axis=1)
            out[:, i] = (flat[:, i] - conv) / denom
        return out.reshape(vals.shape)
    if order == 1:
        g = nd.copy()
    elif order == 2:
        g = nd * (2.0 - prob.N)
    else:
        raise ValueError("order must be 1, 2 or 'exact'")
    out[:, 0] = flat[:, 0]
    for i in range(1, M):
        w = _trapezoid_row_weights(i)
        conv = dt * (flat[:, i:: -1] * (w * g[: i + 1])[None, :]).sum(axis=1)
        out[:, i] = flat[:, i] - conv
    return out.reshape(vals.shape)


def modified_density(field_fn, prob: ProbabilitySeries, t: float, point,
                     order=2) -> float:
    """Pointwise modified density Ptil(point, t).

    point is (r,) for spherically symmetric evaluators or (r, theta).  The
    age-zero end of the convolution contributes nothing off the initial point
    (the density of a fresh delta vanishes there); the discrete rule assigns
    that node zero weight.
    """
    times = prob.times
    if t > times[-1] + 1e-12:
        raise ValueError(f"t={t} exceeds the probability-series coverage")
    i = int(round((t - times[0]) / prob.dt))
    if abs(times[i] - t) > 1e-9:
        raise ValueError("t must lie on the probability-series grid")
    r = point[0]
    theta = point[1] if len(point) > 1 else 0.0
    if i == 0:
        return 0.0 if t == 0 else float(
            field_fn(np.atleast_1d(r), np.atleast_1d(theta), np.atleast_1d(t))[0, 0, 0])
    ages = times[1: i + 1]
    vals = field_fn(np.atleast_1d(r), np.atleast_1d(theta), ages)[0, 0, :]
    if order == 1:
        g = prob.Ndot
    elif order == 2:
        g = prob.Ndot * (2.0 - prob.N)
    else:
        raise ValueError("pointwise modification supports order 1 or 2")
    # convolution sum_j g(t_j) P(point, t - t_j) for j = 0..i; the j = i node
    # has age zero, where the fresh delta carries no density off its support
    pvals = np.concatenate([vals[::-1], [0.0]])
    w = _trapezoid_row_weights(i)
    conv = prob.dt * float(np.sum(w * g[: i + 1] * pvals))
    return float(pvals[0]) - conv


def modified_field(field_fn, prob: ProbabilitySeries, r, theta, order=2):
    """Modified density tensor on (r, theta, prob.times).

    Evaluates the raw field once on the series grid (exact t=0 values are 0
    away from the initial point) and convolves along the time axis.
    Returns (times, tensor)."""
    r = np.atleast_1d(np.asarray(r, float))
    theta = np.atleast_1d(np.asarray(theta, float))
    times = prob.times
    pos = times > 0
    raw = np.zeros((len(r), len(theta), len(times)))
    raw[:, :, pos] = field_fn(r, theta, times[pos])
    return times, modify_series(raw, prob, order)


def series_to_csv(prob: ProbabilitySeries, path, meta: dict | None = None) -> None:
    """CSV export t,N,Ndot plus a .meta sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "N", "Ndot"])
        for t, n, nd in zip(prob.times, prob.N, prob.Ndot):
            w.writerow([f"{t:.12g}", f"{n:.12g}", f"{nd:.12g}"])
    if meta is not None:
        with open(str(path) + ".meta", "w") as fh:
            for key, val in meta.items():
                fh.write(f"{key} = {val}\n")
