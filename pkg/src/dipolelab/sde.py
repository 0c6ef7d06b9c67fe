"""Monte Carlo simulation of the randomly modulated dipole process.

The particle obeys dr/dt = (d_H / r^D) (a - D (a.rhat) rhat) with a resampled
uniformly on the unit sphere each step.  One Euler step has increment
covariance d_H^2 dt^2 V^2 / D, so s steps correspond to Fokker-Planck time

    tau = d_H^2 * s * dt^2 / (D * h)

for the h-normalized spectral route (see fp_time).  Trajectories in an
ensemble draw from independent Philox streams spawned from (seed, index), so
every trajectory is reproducible in isolation and ensembles are deterministic
regardless of chunking.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SingularityError",
    "DipoleParams",
    "RecoveryRule",
    "Trajectory",
    "dipole_velocity",
    "sample_unit_vector",
    "euler_step",
    "simulate_trajectory",
    "radial_step",
    "simulate_radial_ensemble",
    "ensemble_positions",
    "fp_time",
    "steps_for_fp_time",
    "trajectory_to_csv",
]

ORIGIN_FLOOR = 1e-12


class SingularityError(RuntimeError):
    """The particle reached the machine-scale neighbourhood of the dipole."""


@dataclass(frozen=True)
class DipoleParams:
    """Physical configuration shared by the stochastic and spectral routes.

    D: spatial dimension (2 or 3 for angular-resolved features, any >= 2 for
    spherically symmetric ones); d_H: dipole strength; h: diffusion constant
    of the Fokker-Planck equation (h = d_H^2 / lambda_0).
    """

    D: int = 2
    d_H: float = 1.0
    h: float = 1.0

    def __post_init__(self):
        if self.D < 2 or int(self.D) != self.D:
            raise ValueError(f"D must be an integer >= 2, got {self.D}")
        if not (np.isfinite(self.d_H) and self.d_H > 0):
            raise ValueError(f"d_H must be finite and positive, got {self.d_H}")
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"h must be finite and positive, got {self.h}")


@dataclass(frozen=True)
class RecoveryRule:
    """Particle-recovery prescription: 'periodic' (Condition 1), 'reset'
    (Condition 2) or 'none'.  L is the box half-edge used for wrapping and for
    escape detection."""

    kind: str = "none"
    L: float = 5.0

    def __post_init__(self):
        if self.kind not in ("periodic", "reset", "none"):
            raise ValueError(f"unknown recovery rule {self.kind!r}")
        if self.kind in ("periodic", "reset") and not self.L > 0:
            raise ValueError("box half-edge L must be positive")

    @classmethod
    def periodic(cls, L: float) -> "RecoveryRule":
        return cls("periodic", L)

    @classmethod
    def reset_to_initial(cls, L: float = 5.0) -> "RecoveryRule":
        return cls("reset", L)

    @classmethod
    def none(cls) -> "RecoveryRule":
        return cls("none")


@dataclass
class Trajectory:
    """Recorded particle path with recovery-event annotations."""

    params: DipoleParams
    dt: float
    positions: np.ndarray          # (n_recorded, D)
    events: list = field(default_factory=list)   # [(step index, kind)]
    seed: int = 0
    stride: int = 1

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        if self.positions.ndim != 2 or len(self.positions) == 0:
            raise ValueError("positions must be a non-empty (n, D) array")
        for i in range(1, len(self.events)):
            if self.events[i][0] <= self.events[i - 1][0]:
                raise ValueError("event step indices must be strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return self.dt * self.stride * np.arange(len(self.positions))

    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.positions, axis=1)


def dipole_velocity(r, a, params: DipoleParams):
    """Velocity field d_H r^{-D} (a - D (a.rhat) rhat) of the dipole at the origin."""
    r = np.asarray(r, float)
    a = np.asarray(a, float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-12:
        raise ValueError("direction vector must be unit length")
    rn = np.linalg.norm(r)
    if rn < ORIGIN_FLOOR:
        raise SingularityError(f"|r| = {rn:.3e} is below the origin floor")
    rhat = r / rn
    return params.d_H * rn ** (-params.D) * (a - params.D * (a @ rhat) * rhat)


def sample_unit_vector(rng: np.random.Generator, D: int) -> np.ndarray:
    """Uniform draw on the unit sphere S^{D-1} (normalized Gaussian)."""
    if D < 2:
        raise ValueError("need D >= 2")
    v = rng.standard_normal(D)
    n = np.linalg.norm(v)
    while n < 1e-12:    # astronomically unlikely; regenerate rather than divide by ~0
        v = rng.standard_normal(D)
        n = np.linalg.norm(v)
    return v / n


def euler_step(r, dt: float, params: DipoleParams, rng: np.random.Generator):
    """One explicit Euler step r + d_H dt V(r) a with a fresh dipole direction."""
    a = sample_unit_vector(rng, params.D)
    return np.asarray(r, float) + dt * dipole_velocity(r, a, params)


def _trajectory_rng(seed: int, index: int = 0) -> np.random.Generator:
    child = np.random.SeedSequence(seed).spawn(index + 1)[index]
    return np.random.Generator(np.random.Philox(child))


def simulate_trajectory(
    r0,
    dt: float,
    steps: int,
    rule: RecoveryRule,
    params: DipoleParams,
    seed: int = 0,
    stride: int = 1,
    traj_index: int = 0,
) -> Trajectory:
    """Simulate one particle; deterministic for fixed (seed, traj_index).

    Periodic wraps every coordinate into [-L, L] and records a 'jump' event;
    reset returns an escaped particle to r0 and records 'reset'; 'none' lets
    the particle roam.  Landing within the origin floor is recorded as an
    escape and handled by the rule.
    """
    r0 = np.asarray(r0, float)
    if np.linalg.norm(r0) < ORIGIN_FLOOR:
        raise ValueError("initial position must be away from the origin")
    if rule.kind in ("periodic", "reset") and np.any(np.abs(r0) > rule.L):
        raise ValueError("initial position must lie inside the box")
    rng = _trajectory_rng(seed, traj_index)
    pos = r0.copy()
    rec = [pos.copy()]
    events = []
    for s in range(1, steps + 1):
        a = sample_unit_vector(rng, params.D)
        try:
            pos = pos + dt * dipole_velocity(pos, a, params)
            hit_origin = np.linalg.norm(pos) < ORIGIN_FLOOR
        except SingularityError:
            hit_origin = True
        if rule.kind == "periodic":
            wrapped = hit_origin or bool(np.any(np.abs(pos) > rule.L))
            if wrapped:
                pos = np.mod(pos + rule.L, 2.0 * rule.L) - rule.L
                if np.linalg.norm(pos) < ORIGIN_FLOOR:
                    pos = r0.copy()     # wrap landed on the singular point
                events.append((s, "jump"))
        elif rule.kind == "reset":
            if hit_origin or np.any(np.abs(pos) > rule.L):
                pos = r0.copy()
                events.append((s, "reset"))
        else:
            if hit_origin:
                raise SingularityError(
                    f"particle reached the origin at step {s} with no recovery rule"
                )
        if s % stride == 0:
            rec.append(pos.copy())
    return Trajectory(params, dt, np.array(rec), events, seed, stride)


def radial_step(r: float, dt: float, params: DipoleParams, rng: np.random.Generator) -> float:
    """One Ito step of the radial reduction: a Bessel-type process with
    position-dependent diffusion kappa(r) = (d_H / r^D)^2."""
    if r <= 0:
        raise SingularityError("radius must be positive")
    kappa = (params.d_H / r ** params.D) ** 2
    dB = rng.standard_normal() * np.sqrt(dt)
    out = r - np.sqrt(kappa) * (params.D - 1) * dB + 0.5 * (params.D - 1) * kappa * dt / r
    if out <= 0:
        raise SingularityError("radial step crossed the origin")
    return float(out)


def simulate_radial_ensemble(
    n: int,
    dt: float,
    steps: int,
    params: DipoleParams,
    seed: int = 0,
    r0: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized radial ensemble; absorbed walkers are frozen and flagged.

    Returns (radii, alive) after `steps` steps of size dt (Brownian clock:
    FP time with h = d_H^2 is steps * dt).
    """
    rng = _trajectory_rng(seed)
    r = np.full(n, float(r0))
    alive = np.ones(n, dtype=bool)
    sq = np.sqrt(dt)
    for _ in range(steps):
        kappa = (params.d_H / r ** params.D) ** 2
        dB = rng.standard_normal(n) * sq
        step = -np.sqrt(kappa) * (params.D - 1) * dB + 0.5 * (params.D - 1) * kappa * dt / r
        r = np.where(alive, r + step, r)
        alive &= r > ORIGIN_FLOOR
    return r, alive


def fp_time(steps: int, dt: float, params: DipoleParams) -> float:
    """Fokker-Planck time of the h-normalized spectral route after `steps`
    Euler steps of size dt: tau = d_H^2 steps dt^2 / (D h)."""
    return params.d_H ** 2 * steps * dt * dt / (params.D * params.h)


def steps_for_fp_time(tau: float, dt: float, params: DipoleParams) -> int:
    return int(np.ceil(tau * params.D * params.h / (params.d_H ** 2 * dt * dt)))


def ensemble_positions(
    r0,
    dt: float,
    steps: int,
    rule: RecoveryRule,
    params: DipoleParams,
    seed: int = 0,
    n_traj: int = 1000,
    chunk: int = 2000,
    snapshot_steps: tuple = (),
):
    """Vectorized ensemble returning final positions and escape flags.

    escaped_ever marks trajectories that left the box (or hit the origin
    floor) at least once, whatever the rule did about it afterwards.
    snapshot_steps requests intermediate (positions, escaped) copies.
    Per-trajectory randomness comes from SeedSequence(seed).spawn(index), so
    results do not depend on the chunk size.
    """
    r0 = np.asarray(r0, float)
    D = params.D
    L = rule.L
    want = sorted(set(int(s) for s in snapshot_steps))
    snaps = {s: [] for s in want}
    finals, escapes, n_events = [], [], 0
    children = np.random.SeedSequence(seed).spawn(n_traj)
    for lo in range(0, n_traj, chunk):
        hi = min(lo + chunk, n_traj)
        m = hi - lo
        gens = [np.random.Generator(np.random.Philox(children[i])) for i in range(lo, hi)]
        # draws are position-independent, so pre-generate per trajectory
        draws = np.empty((steps, m, D))
        for j, g in enumerate(gens):
            draws[:, j, :] = g.standard_normal((steps, D))
        draws /= np.linalg.norm(draws, axis=2, keepdims=True)
        pos = np.tile(r0, (m, 1))
        esc = np.zeros(m, dtype=bool)
        wi = 0
        for s in range(1, steps + 1):
            a = draws[s - 1]
            r2 = np.einsum("ij,ij->i", pos, pos)
            rn = np.sqrt(r2)
            ar = np.einsum("ij,ij->i", a, pos) / r2
            pos = pos + params.d_H * dt * (a - D * ar[:, None] * pos) / rn[:, None] ** D
            out = np.max(np.abs(pos), axis=1) > L
            out |= np.einsum("ij,ij->i", pos, pos) < ORIGIN_FLOOR ** 2
            if rule.kind == "periodic":
                pos[out] = np.mod(pos[out] + L, 2.0 * L) - L
            elif rule.kind == "reset":
                pos[out] = r0
            esc |= out
            n_events += int(np.sum(out)) if rule.kind != "none" else 0
            while wi < len(want) and want[wi] == s:
                snaps[want[wi]].append((pos.copy(), esc.copy()))
                wi += 1
        finals.append(pos)
        escapes.append(esc)
    out_snaps = {
        s: (np.concatenate([p for p, _ in lst]), np.concatenate([e for _, e in lst]))
        for s, lst in snaps.items()
    }
    return np.concatenate(finals), np.concatenate(escapes), n_events, out_snaps


def trajectory_to_csv(traj: Trajectory, path) -> None:
    """CSV export: header t,x1,...,xD,event with event in {-, jump, reset}."""
    ev = dict(traj.events)
    stride = traj.stride
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i+1}" for i in range(traj.positions.shape[1])] + ["event"])
        for i, p in enumerate(traj.positions):
            step = i * stride
            label = ev.get(step, "-")
            w.writerow([f"{i * stride * traj.dt:.12g}"]
                       + [f"{c:.12g}" for c in p] + [label])
