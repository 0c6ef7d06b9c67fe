"""Batch front end: configuration, orchestration of both routes, CSV and
static-plot emission, paper-figure reproduction bundles.

Exit codes: 0 success, 2 configuration error, 3 numerical-convergence
failure, 4 I/O error.  Every CSV is written with a .meta sidecar echoing the
full configuration, so any artifact can be regenerated from its sidecar.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .fractal import (
    box_counting,
    cell_probabilities,
    default_mesh_sizes,
    hurst_pipeline,
    hurst_to_csv,
    multifractal_free_energy,
)
from .sde import DipoleParams, RecoveryRule, simulate_trajectory, trajectory_to_csv
from .special import ConvergenceWarning
from .spectral import (
    ConvergenceError,
    EpsilonGreen,
    Green2D,
    Green3D,
    default_grid,
    field_to_csv,
    spherical_profile,
)
from .unitarity import (
    probability_series_from_field,
    radial_panel_grid,
    series_to_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All knobs of a batch run; defaults mirror the paper's numerical setup
    (h=1, k_max=60, 50 angular modes)."""

    D: int = 2
    d_H: float = 1.0
    h: float = 1.0
    k_max: float = 60.0
    mode_max: int = 50
    dt: float = 0.01
    steps: int = 20000
    trajectories: int = 4
    seed: int = 0
    L: float = 5.0
    recovery: str = "reset"
    epsilon: float | None = None
    t_step: float = 2.0 ** -12
    t_max: float = 0.0302
    r_max: float = 3.2
    times: tuple = ()
    out: str = "out"
    threads: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.D < 2:
            raise ConfigError("D must be >= 2")
        for name in ("d_H", "h", "k_max", "dt", "t_step", "t_max", "r_max", "L"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.recovery not in ("periodic", "reset", "none"):
            raise ConfigError(f"recovery must be periodic/reset/none, got {self.recovery!r}")
        if self.epsilon is not None and not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.steps < 0 or self.trajectories < 1 or self.mode_max < 1:
            raise ConfigError("steps, trajectories, mode_max out of range")

    @property
    def params(self) -> DipoleParams:
        return DipoleParams(self.D, self.d_H, self.h)

    @property
    def rule(self) -> RecoveryRule:
        return RecoveryRule(self.recovery, self.L)

    def meta(self) -> dict:
        d = asdict(self)
        d["version"] = __version__
        return d


_FLOAT_KEYS = {"d_H", "h", "k_max", "dt", "L", "epsilon", "t_step", "t_max", "r_max"}
_INT_KEYS = {"D", "mode_max", "steps", "trajectories", "seed", "threads", "stride"}


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Line-oriented `key = value` file; CLI flags override file values."""
    values: dict = {}
    if path:
        try:
            with open(path) as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{ln}: expected 'key = value'")
                    key, val = (s.strip() for s in line.split("=", 1))
                    values[key] = val
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, val in values.items():
        if key == "times":
            kwargs[key] = tuple(float(s) for s in str(val).split(",") if s.strip())
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(val)
        elif key in _INT_KEYS:
            kwargs[key] = int(val)
        elif key in ("recovery", "out"):
            kwargs[key] = str(val)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _ensure_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write_meta(path: str, cfg: RunConfig, extra: dict | None = None) -> None:
    with open(path + ".meta", "w") as fh:
        for key, val in cfg.meta().items():
            fh.write(f"{key} = {val}\n")
        for key, val in (extra or {}).items():
            fh.write(f"{key} = {val}\n")


def _plot_lines(path, x, ys, labels, xlabel, ylabel, logx=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for y, lab in zip(ys, labels):
        ax.plot(x, y, label=lab, lw=1.0)
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(ys) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _simulate_one(args):
    cfg_dict, index = args
    cfg = RunConfig(**cfg_dict)
    r0 = np.zeros(cfg.D)
    r0[0] = 1.0
    return index, simulate_trajectory(r0, cfg.dt, cfg.steps, cfg.rule, cfg.params,
                                      seed=cfg.seed, stride=cfg.stride, traj_index=index)


def cmd_simulate(cfg: RunConfig) -> int:
    out = _ensure_out(cfg)
    jobs = [(asdict(cfg), i) for i in range(cfg.trajectories)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = sorted(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    summary_rows = []
    for index, traj in results:
        path = os.path.join(out, f"traj_{index}.csv")
        trajectory_to_csv(traj, path)
        _write_meta(path, cfg, {"trajectory_index": index})
        kinds = [k for _, k in traj.events]
        summary_rows.append([index, len(traj.events),
                             kinds.count("jump"), kinds.count("reset")])
    spath = os.path.join(out, "ensemble_summary.csv")
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "events", "jumps", "resets"])
        w.writerows(summary_rows)
    _write_meta(spath, cfg)
    print(f"wrote {cfg.trajectories} trajectories to {out}")
    return EXIT_OK


def _dyadic_times(lo_exp=-9, hi_exp=0):
    return [2.0 ** e for e in range(lo_exp, hi_exp + 1)]


def cmd_green(cfg: RunConfig, variant: str) -> int:
    out = _ensure_out(cfg)
    params = cfg.params
    grid = default_grid(params, r_max=cfg.r_max, k_max=cfg.k_max,
                        graded_origin=variant == "epsilon")
    r = np.linspace(0.05 if variant != "epsilon" else (cfg.epsilon or 0.5),
                    min(cfg.r_max, 3.0), 160)
    times = np.array(cfg.times if cfg.times else
                     (_dyadic_times(-9, 0) if variant == "spherical" else _dyadic_times(-8, -5)))
    if variant == "spherical":
        vals = spherical_profile(params, grid, r, times)[:, None, :]
        theta = np.array([0.0])
    else:
        theta = np.linspace(-np.pi / 2, np.pi / 2, 61) if params.D == 2 else \
            np.linspace(1e-3, np.pi - 1e-3, 61)
        if variant == "d2":
            vals = Green2D(params, grid, cfg.mode_max).field(r, theta, times)
        elif variant == "d3":
            vals = Green3D(params, grid, cfg.mode_max).field(r, theta, times)
        elif variant == "epsilon":
            if cfg.epsilon is None:
                raise ConfigError("variant 'epsilon' requires an epsilon value")
            vals = EpsilonGreen(params, grid, cfg.mode_max, cfg.epsilon).field(r, theta, times)
        else:
            raise ConfigError(f"unknown green variant {variant!r}")
    path = os.path.join(out, f"green_{variant}.csv")
    field_to_csv(path, times, r, theta, vals,
                 {**cfg.meta(), "variant": variant, "grid_hash": grid.grid_hash(),
                  "excluded_modes": "[]"})
    _write_meta(path, cfg, {"variant": variant})
    profile = vals.mean(axis=1) if vals.shape[1] > 1 else vals[:, 0, :]
    _plot_lines(os.path.join(out, f"green_{variant}.svg"), r,
                [profile[:, j] for j in range(len(times))],
                [f"t={tv:g}" for tv in times], "r", "G")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_unitarity(cfg: RunConfig) -> int:
    out = _ensure_out(cfg)
    params = cfg.params
    grid = default_grid(params, r_max=cfg.r_max, k_max=cfg.k_max)
    r_nodes, r_weights = radial_panel_grid(0.0, cfg.r_max)
    times = cfg.t_step * np.arange(1, int(round(cfg.t_max / cfg.t_step)) + 1)
    vals = spherical_profile(params, grid, r_nodes, times)
    n_of_t = (r_weights * r_nodes ** (params.D - 1)) @ vals
    prob = probability_series_from_field(times, n_of_t)
    path = os.path.join(out, "total_probability.csv")
    series_to_csv(prob, path, cfg.meta())
    _plot_lines(os.path.join(out, "total_probability.svg"),
                prob.times[1:], [prob.N[1:]], ["N(t)"], "t", "N", logx=True)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_fractal(cfg: RunConfig, route: str) -> int:
    out = _ensure_out(cfg)
    if route == "analytic":
        series = hurst_pipeline(cfg.params, mode_max=cfg.mode_max,
                                t_step=cfg.t_step, t_max=cfg.t_max,
                                epsilon=cfg.epsilon)
        path = os.path.join(out, "hurst.csv")
        hurst_to_csv(series, path, cfg.meta())
        _plot_lines(os.path.join(out, "hurst.svg"), series.times,
                    [series.H_r, series.H_theta, series.H, series.D_f],
                    ["Hr", "Htheta", "H", "Df"], "t", "exponent")
        print(f"wrote {path}")
        return EXIT_OK
    if route == "montecarlo":
        r0 = np.zeros(cfg.D)
        r0[0] = 1.0
        traj = simulate_trajectory(r0, cfg.dt, cfg.steps,
                                   RecoveryRule.periodic(cfg.L), cfg.params,
                                   seed=cfg.seed)
        steps_len = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
        meshes = default_mesh_sizes(2 * cfg.L, (2, 9), float(np.median(steps_len)))
        f0, diag = box_counting(traj.positions, meshes)
        bpath = os.path.join(out, "box_counts.csv")
        with open(bpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mesh", "count"])
            for m, c in zip(diag["mesh_sizes"], diag["counts"]):
                w.writerow([f"{m:.12g}", int(c)])
        _write_meta(bpath, cfg, {"F0": f0, "r_squared": diag["r_squared"]})
        t_vals = np.array([0.0, 0.5, 2.0, 3.0])
        probs = cell_probabilities(traj.positions, diag["mesh_sizes"])
        tv, fv, dq = multifractal_free_energy(diag["mesh_sizes"], probs, t_vals)
        mpath = os.path.join(out, "multifractal.csv")
        with open(mpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "F", "Dq"])
            for row in zip(tv, fv, dq):
                w.writerow([f"{v:.12g}" for v in row])
        _write_meta(mpath, cfg)
        print(f"box dimension F0 = {f0:.3f} (R^2 = {diag['r_squared']:.4f}); wrote {bpath}")
        return EXIT_OK
    raise ConfigError(f"unknown fractal route {route!r}")


_FIGURES = {
    "fig1a": "spherical Green profiles, D=2, t = 2^-9 .. 1",
    "fig1b": "spherical Green profiles, D=3, t = 2^-9 .. 1",
    "fig2": "total probability decay, D = 2 and 3",
    "fig3a": "D=2 angular Green at t = 2^-8",
    "fig4": "modified D=2 Green surfaces, t = 2^-8 .. 2^-5",
    "fig5": "Hurst exponents H_r, H_theta, D=2",
    "fig6": "Hurst exponents H_r, H_theta, D=3",
    "fig9": "latent fractal dimension D_f, D = 2 and 3",
    "fig10": "epsilon-cutoff radial profiles, epsilon = 0.5",
    "fig11": "latent fractal dimension with epsilon cutoff",
}


def cmd_reproduce(cfg: RunConfig, figure: str) -> int:
    if figure == "list" or figure == "--list":
        for k, v in _FIGURES.items():
            print(f"{k}: {v}")
        return EXIT_OK
    if figure not in _FIGURES:
        print(f"unknown figure id {figure!r}; known: {', '.join(_FIGURES)}",
              file=sys.stderr)
        return EXIT_CONFIG
    out = _ensure_out(cfg)
    if figure in ("fig1a", "fig1b"):
        d = 2 if figure == "fig1a" else 3
        return cmd_green(replace(cfg, D=d, out=os.path.join(out, figure)), "spherical")
    if figure == "fig2":
        for d in (2, 3):
            code = cmd_unitarity(replace(cfg, D=d, t_max=1.0,
                                         out=os.path.join(out, f"fig2_D{d}")))
            if code:
                return code
        return EXIT_OK
    if figure == "fig3a":
        return cmd_green(replace(cfg, D=2, times=(2.0 ** -8,),
                                 out=os.path.join(out, figure)), "d2")
    if figure == "fig4":
        sub = replace(cfg, D=2, out=os.path.join(out, figure))
        outdir = _ensure_out(sub)
        params = sub.params
        grid = default_grid(params, r_max=sub.r_max, k_max=sub.k_max)
        r = np.linspace(0.5, 3.0, 120)
        theta = np.linspace(-np.pi / 2, np.pi / 2, 81)
        times = sub.t_step * np.arange(1, int(round(2.0 ** -5 / sub.t_step)) + 1)
        green = Green2D(params, grid, sub.mode_max)
        r_nodes, r_weights = radial_panel_grid(0.0, sub.r_max)
        tn, tw = np.linspace(-np.pi, np.pi, 256, endpoint=False), None
        raw_n = green.field(r_nodes, tn, times)
        n_of_t = np.einsum("i,ijt->t", r_weights * r_nodes, raw_n) / len(tn)
        prob = probability_series_from_field(times, n_of_t)
        from .unitarity import modified_field

        _, mod = modified_field(green.field, prob, r, theta)
        for te in (-8, -7, -6, -5):
            idx = int(round(2.0 ** te / sub.t_step))
            path = os.path.join(outdir, f"modified_green_t2e{te}.csv")
            field_to_csv(path, [prob.times[idx]], r, theta, mod[:, :, idx: idx + 1],
                         {**sub.meta(), "modified": True})
            _write_meta(path, sub, {"modified": True})
        print(f"wrote modified-field bundles to {outdir}")
        return EXIT_OK
    if figure in ("fig5", "fig6"):
        d = 2 if figure == "fig5" else 3
        return cmd_fractal(replace(cfg, D=d, out=os.path.join(out, figure)), "analytic")
    if figure == "fig9":
        for d in (2, 3):
            code = cmd_fractal(replace(cfg, D=d, out=os.path.join(out, f"fig9_D{d}")),
                               "analytic")
            if code:
                return code
        return EXIT_OK
    if figure == "fig10":
        for d in (2, 3):
            code = cmd_green(replace(cfg, D=d, epsilon=cfg.epsilon or 0.5,
                                     out=os.path.join(out, f"fig10_D{d}")), "epsilon")
            if code:
                return code
        return EXIT_OK
    if figure == "fig11":
        for d in (2, 3):
            sub = replace(cfg, D=d, epsilon=cfg.epsilon or 0.5,
                          out=os.path.join(out, f"fig11_D{d}"))
            code = cmd_fractal(sub, "analytic")
            if code:
                return code
        return EXIT_OK
    raise AssertionError("unhandled figure id")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dipolelab",
                                 description="randomly modulated dipole laboratory")
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--dimension", "-D", dest="D", type=int)
    ap.add_argument("--epsilon", type=float)
    ap.add_argument("--mode-max", dest="mode_max", type=int)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate")
    g = sub.add_parser("green")
    g.add_argument("variant", choices=["spherical", "d2", "d3", "epsilon"])
    sub.add_parser("unitarity")
    f = sub.add_parser("fractal")
    f.add_argument("route", choices=["analytic", "montecarlo"])
    r = sub.add_parser("reproduce")
    r.add_argument("figure")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k, None)
                 for k in ("seed", "out", "threads", "D", "epsilon", "mode_max")}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    import warnings

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default", ConvergenceWarning)
            if args.command == "simulate":
                return cmd_simulate(cfg)
            if args.command == "green":
                return cmd_green(cfg, args.variant)
            if args.command == "unitarity":
                return cmd_unitarity(cfg)
            if args.command == "fractal":
                return cmd_fractal(cfg, args.route)
            if args.command == "reproduce":
                return cmd_reproduce(cfg, args.figure)
            raise AssertionError("unhandled command")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
