"""Experiment orchestration: configs, initial ensembles, reference tracking,
(N, seed) sweeps with threading, and the CSV/JSONL output contract.

Output layout under the configured directory:
  records.csv                 one row per (t, N, seed) diagnostic snapshot
  cell_N{N}_seed{S}.csv       the same rows, per cell
  trajectory_N{N}_seed{S}.csv particle positions over time (when requested)
  meta.jsonl                  one line per cell (config hash, runtime, status),
                              written sorted at the end of the run
  config.json                 the resolved configuration
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dynamics import FlowSpec, IntegratorConfig, default_J, run
from .kernel import KernelSpec
from .meanfield import (
    EXACT_FAMILIES,
    INTERACTION_CLOCK,
    EulerPoissonSolver,
    ExactSolution,
    MeasureGrid,
    VelocityGrid,
    advance_density,
    exact_at,
    field_bounds,
    velocity_jacobian_sup,
)
from .modenergy import (
    CSV_COLUMNS,
    DiagnosticsRecord,
    RateFit,
    compute_record,
    euler_poisson_gap,
    fit_rate,
    weak_strong_gap,
)

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration; message starts with the dotted field path."""


# ---------------------------------------------------------------------------
# configuration

_DEFAULTS = {
    "kernel": {"mode": "log", "d": 2, "s": 0.0},
    "flow": {"kind": "gradient", "mix_alpha": 1.0, "mix_beta": 1.0,
             "forcing": "zero", "forcing_params": {}},
    "init": {"family": "uniform_ball_static", "R0": 1.0, "t0": 1.0,
             "profile": "disk", "r_inner": 0.5, "center": [],
             "scheme": "iid", "jitter": 0.05,
             "u0": "none", "u0_alpha": 0.25},
    "run": {"T": 0.5, "dt": 2e-3, "record_every": 50,
            "Ns": [64], "seeds": [0]},
    "reference": {"evolve": "exact", "grid_n": 256, "grid_L": 2.5,
                  "markers_per_axis": 96, "marker_half_width": 0.0,
                  "ep_dt": 2e-3},
    "diagnostics": {"truncated": True, "bl": False, "trajectories": False},
    "gap": {"kind": "dissipative", "R0_a": 1.0, "R0_b": 1.05,
            "T": 0.3, "snapshots": 7},
    "out": "runs/out",
}

_CHOICES = {
    "kernel.mode": ("log", "riesz"),
    "flow.kind": ("gradient", "conservative", "mixed", "newton"),
    "flow.forcing": ("zero", "drift", "confine"),
    "init.family": EXACT_FAMILIES,
    "init.profile": ("disk", "smooth_bump", "annulus"),
    "init.scheme": ("iid", "quantized"),
    "init.u0": ("none", "zero", "transport", "radial_linear"),
    "reference.evolve": ("exact", "grid", "frozen", "euler_poisson"),
    "gap.kind": ("dissipative", "euler_poisson"),
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: expected a table")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def load_config(source) -> dict:
    """Resolve a config from a dict or JSON file path against the defaults."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config: file not found: {source}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON: {e}") from e
    else:
        raw = dict(source)
    cfg = _merge(_DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply dotted key=value overrides (values parsed as JSON, else string)."""
    cfg = json.loads(json.dumps(cfg))
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r}: expected key=value")
        key, _, val = pair.partition("=")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{key}: unknown field")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown field")
        node[parts[-1]] = parsed
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for path, choices in _CHOICES.items():
        sect, key = path.split(".")
        if cfg[sect][key] not in choices:
            raise ConfigError(f"{path}: {cfg[sect][key]!r} not one of {choices}")
    k = cfg["kernel"]
    try:
        _kernel_from(cfg)
    except Exception as e:
        raise ConfigError(f"kernel: {e}") from e
    r = cfg["run"]
    if not (isinstance(r["T"], (int, float)) and r["T"] >= 0):
        raise ConfigError("run.T: must be a nonnegative number")
    if not (isinstance(r["dt"], (int, float)) and r["dt"] > 0):
        raise ConfigError("run.dt: must be positive")
    if not (isinstance(r["record_every"], int) and r["record_every"] >= 1):
        raise ConfigError("run.record_every: must be a positive integer")
    for field in ("Ns", "seeds"):
        vals = r[field]
        if (not isinstance(vals, list) or not vals
                or any(not isinstance(v, int) or v < 0 for v in vals)):
            raise ConfigError(f"run.{field}: must be a nonempty list of nonnegative ints")
    if any(n < 1 for n in r["Ns"]):
        raise ConfigError("run.Ns: particle counts must be >= 1")
    ref = cfg["reference"]
    if ref["grid_n"] < 8:
        raise ConfigError("reference.grid_n: too small")
    if ref["grid_L"] <= 0:
        raise ConfigError("reference.grid_L: must be positive")
    if cfg["init"]["jitter"] < 0:
        raise ConfigError("init.jitter: must be >= 0")
    if cfg["flow"]["kind"] == "newton" and cfg["init"]["u0"] == "none":
        raise ConfigError("init.u0: second-order flow needs an initial velocity field")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _kernel_from(cfg: dict) -> KernelSpec:
    k = cfg["kernel"]
    if k["mode"] == "log":
        return KernelSpec.log(int(k["d"]))
    return KernelSpec.riesz(int(k["d"]), float(k["s"]))


def _flow_from(cfg: dict) -> FlowSpec:
    f = cfg["flow"]
    return FlowSpec(f["kind"], mix_alpha=float(f["mix_alpha"]),
                    mix_beta=float(f["mix_beta"]), forcing=f["forcing"],
                    forcing_params=dict(f["forcing_params"]))


def _solution_from(cfg: dict, spec: KernelSpec) -> ExactSolution:
    i = cfg["init"]
    return ExactSolution(i["family"], spec, R0=float(i["R0"]), t0=float(i["t0"]),
                         profile=i["profile"], r_inner=float(i["r_inner"]),
                         center=tuple(i["center"]))


# ---------------------------------------------------------------------------
# initialization


def quantized_positions(state, N: int, seed: int, jitter: float) -> np.ndarray:
    """Low-discrepancy radial layout: mass-quantile radii crossed with a
    golden-angle spiral (d=2) / Fibonacci sphere (d=3) / sorted quantiles
    (d=1), plus a small deterministic jitter to break exact symmetries."""
    from .particles import particle_rng

    d = state.spec.d
    rng = particle_rng(N, seed)
    q = (np.arange(N) + 0.5) / N
    if d == 1:
        pts = state.center[0] + np.sign(2 * q - 1) * state.radius_quantile(np.abs(2 * q - 1))
        pts = pts[:, None]
    else:
        radii = state.radius_quantile(q)
        if d == 2:
            golden = math.pi * (3.0 - math.sqrt(5.0))
            th = golden * np.arange(N)
            dirs = np.stack([np.cos(th), np.sin(th)], axis=-1)
        else:
            k = np.arange(N) + 0.5
            phi = math.pi * (1 + math.sqrt(5.0)) * k
            z = 1.0 - 2.0 * k / N
            rr = np.sqrt(np.maximum(1 - z * z, 0))
            dirs = np.stack([rr * np.cos(phi), rr * np.sin(phi), z], axis=-1)
        pts = state.center[None, :] + radii[:, None] * dirs
    spacing = state.radius * N ** (-1.0 / d)
    return pts + jitter * spacing * rng.normal(size=pts.shape)


def initial_system(cfg: dict, spec: KernelSpec, N: int, seed: int):
    """(ParticleSystem, ExactSolution, u0 callable or None)."""
    from .particles import ParticleSystem, particle_rng

    sol = _solution_from(cfg, spec)
    state0 = exact_at(sol, 0.0)
    i = cfg["init"]
    if i["scheme"] == "iid":
        pts = state0.sample_iid(N, particle_rng(N, seed))
    else:
        pts = quantized_positions(state0, N, seed, float(i["jitter"]))
    u0 = make_u0(cfg, spec)
    if cfg["flow"]["kind"] == "newton":
        vel = u0(pts)
        return ParticleSystem(pts, vel), sol, u0
    return ParticleSystem(pts), sol, u0


def make_u0(cfg: dict, spec: KernelSpec):
    """Initial velocity field for second-order runs (None otherwise)."""
    kind = cfg["init"]["u0"]
    if kind == "none":
        return None
    if kind == "zero":
        return lambda pts: np.zeros_like(np.atleast_2d(pts))
    if kind == "radial_linear":
        alpha = float(cfg["init"]["u0_alpha"])
        return lambda pts: alpha * (np.atleast_2d(pts)
                                    - np.asarray(cfg["init"]["center"] or 0.0))
    if kind == "transport":
        sol = _solution_from(cfg, spec)
        state0 = exact_at(sol, 0.0)
        # the particle-clock mean-field velocity (twice the unit transport)
        return lambda pts: INTERACTION_CLOCK * state0.velocity_at(
            pts, "dissipative" if cfg["flow"]["kind"] != "conservative" else "conservative"
        )
    raise ConfigError(f"init.u0: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# reference tracking


class ReferenceTrack:
    """Reference measure (and velocity field, for second-order runs) at the
    particle-clock record times.  Built once per experiment and shared by all
    (N, seed) cells.  PDE-clock advances run at INTERACTION_CLOCK x speed."""

    def __init__(self, cfg: dict, spec: KernelSpec, times: list[float]):
        self.spec = spec
        self.times = list(times)
        self.sol = _solution_from(cfg, spec)
        mode = cfg["reference"]["evolve"]
        self.mode = mode
        self.measures: dict[float, object] = {}
        self.velocities: dict[float, object] = {}
        ref = cfg["reference"]
        if mode == "exact":
            for t in self.times:
                self.measures[t] = exact_at(self.sol, INTERACTION_CLOCK * t)
        elif mode == "frozen":
            st = exact_at(self.sol, 0.0)
            for t in self.times:
                self.measures[t] = st
        elif mode == "grid":
            kind = "conservative" if cfg["flow"]["kind"] == "conservative" else "dissipative"
            mu = exact_at(self.sol, 0.0).rasterize(float(ref["grid_L"]), int(ref["grid_n"]))
            prev = 0.0
            for t in self.times:
                if t > prev:
                    mu = advance_density(mu, spec, t - prev, kind=kind,
                                         rate=INTERACTION_CLOCK,
                                         J=default_J(spec.d))
                    prev = t
                self.measures[t] = mu
        elif mode == "euler_poisson":
            u0 = make_u0(cfg, spec)
            if u0 is None:
                raise ConfigError("init.u0: euler_poisson reference needs a velocity field")
            st = exact_at(self.sol, 0.0)
            half = float(ref["marker_half_width"]) or 1.3 * st.radius
            solver = EulerPoissonSolver(
                st.density_at, u0, spec, L=float(ref["grid_L"]),
                n=int(ref["grid_n"]), marker_half_width=half,
                markers_per_axis=int(ref["markers_per_axis"]),
                accel_scale=INTERACTION_CLOCK,
            )
            prev = 0.0
            for t in self.times:
                if t > prev:
                    solver.run(t - prev, float(ref["ep_dt"]))
                    prev = t
                self.measures[t] = solver.density_grid()
                self.velocities[t] = solver.velocity_grid()
        else:
            raise ConfigError(f"reference.evolve: unknown mode {mode!r}")

    def measure(self, t: float):
        return self.measures[_nearest(self.times, t)]

    def velocity(self, t: float):
        return self.velocities.get(_nearest(self.times, t))


def _nearest(times: list[float], t: float) -> float:
    best = min(times, key=lambda u: abs(u - t))
    if abs(best - t) > 1e-9 * max(1.0, abs(t)):
        raise KeyError(f"no reference snapshot at t={t}")
    return best


def record_times(cfg: dict) -> list[float]:
    T, dt, every = (cfg["run"][k] for k in ("T", "dt", "record_every"))
    if T == 0:
        return [0.0]
    n_steps = max(1, math.ceil(T / dt - 1e-12))
    times = [0.0]
    for k in range(n_steps):
        t1 = min((k + 1) * dt, T)
        if (k + 1) % every == 0 or k == n_steps - 1:
            times.append(t1)
    return sorted(set(times))


# ---------------------------------------------------------------------------
# cells and sweeps


def run_cell(cfg: dict, spec: KernelSpec, track: ReferenceTrack, N: int,
             seed: int) -> tuple[list[DiagnosticsRecord], list]:
    """One (N, seed) particle run; returns records and raw (t, system) pairs."""
    sys0, sol, u0 = initial_system(cfg, spec, N, seed)
    flow = _flow_from(cfg)
    icfg = IntegratorConfig(dt=float(cfg["run"]["dt"]))
    snaps = run(sys0, flow, spec, icfg, float(cfg["run"]["T"]),
                record_every=int(cfg["run"]["record_every"]))
    diag = cfg["diagnostics"]
    records = []
    for t, state in snaps:
        mu = track.measure(t)
        u = track.velocity(t)
        if u is None and u0 is not None and track.mode == "frozen":
            u = u0  # frozen reference: the initial field stands in for all t
        records.append(
            compute_record(state, mu, spec, t, seed, u=u,
                           with_truncated=bool(diag["truncated"]),
                           with_bl=bool(diag["bl"]))
        )
    return records, snaps


def _write_csv(path: Path, rows: list[DiagnosticsRecord]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.to_row())


def write_trajectory_csv(path: Path, snaps: list, N: int, seed: int) -> None:
    d = snaps[0][1].d
    cols = ["t", "N", "seed", "particle"] + [f"x{a}" for a in range(d)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for t, state in snaps:
            for i in range(state.N):
                w.writerow([repr(float(t)), N, seed, i]
                           + [repr(float(v)) for v in state.positions[i]])


def run_sweep(cfg: dict, threads: int | None = None,
              progress=None) -> tuple[list[DiagnosticsRecord], Path]:
    """Full Ns x seeds sweep.  Returns all records and the output directory."""
    spec = _kernel_from(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    times = record_times(cfg)
    track = ReferenceTrack(cfg, spec, times)
    cells = [(N, seed) for N in cfg["run"]["Ns"] for seed in cfg["run"]["seeds"]]
    if threads is None:
        threads = int(os.environ.get("MFLAB_THREADS", "0")) or min(8, len(cells))
    meta = []
    all_records: list[DiagnosticsRecord] = []

    def _one(cell):
        N, seed = cell
        t0 = time.perf_counter()
        recs, snaps = run_cell(cfg, spec, track, N, seed)
        return N, seed, recs, snaps, time.perf_counter() - t0

    results = []
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(_one, cells):
                results.append(res)
                if progress:
                    progress(res[0], res[1])
    else:
        for cell in cells:
            res = _one(cell)
            results.append(res)
            if progress:
                progress(res[0], res[1])
    chash = config_hash(cfg)
    for N, seed, recs, snaps, elapsed in sorted(results, key=lambda r: (r[0], r[1])):
        _write_csv(out / f"cell_N{N}_seed{seed}.csv", recs)
        if cfg["diagnostics"]["trajectories"]:
            write_trajectory_csv(out / f"trajectory_N{N}_seed{seed}.csv", snaps, N, seed)
        all_records.extend(recs)
        meta.append({"config_hash": chash, "N": N, "seed": seed,
                     "runtime_s": round(elapsed, 4), "n_records": len(recs),
                     "final_t": recs[-1].t, "version": __version__})
    _write_csv(out / "records.csv", all_records)
    with (out / "meta.jsonl").open("w") as fh:
        for line in meta:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return all_records, out


def read_records_csv(path: str | Path) -> list[DiagnosticsRecord]:
    with Path(path).open() as fh:
        return [DiagnosticsRecord.from_row(row) for row in csv.DictReader(fh)]


def fit_rate_from_csv(path: str | Path) -> RateFit:
    return fit_rate(read_records_csv(path))


# ---------------------------------------------------------------------------
# density-gap experiment (two references, stability envelope)


def run_gap_experiment(cfg: dict, gap_cfg: dict | None = None) -> dict:
    """Evolve two nearby densities under the same transport and record the
    interaction-energy gap against its regularity-controlled envelope.

    gap config table (cfg may carry it under "gap", or pass gap_cfg):
      kind: "dissipative" | "euler_poisson"
      R0_a, R0_b: initial radii of the two smooth bumps
      T, snapshots: horizon and number of gap evaluations
    """
    g = dict(gap_cfg or cfg.get("gap") or {})
    kind = g.get("kind", "dissipative")
    R0_a = float(g.get("R0_a", 1.0))
    R0_b = float(g.get("R0_b", 1.05))
    T = float(g.get("T", 0.3))
    snapshots = int(g.get("snapshots", 7))
    spec = _kernel_from(cfg)
    ref = cfg["reference"]
    L, n = float(ref["grid_L"]), int(ref["grid_n"])
    mk = lambda R: exact_at(
        ExactSolution("radial_vortex_patch", spec, R0=R, profile="smooth_bump"), 0.0
    )
    times = list(np.linspace(0.0, T, snapshots))
    rows = []
    if kind == "dissipative":
        mu_a = mk(R0_a).rasterize(L, n)
        mu_b = mk(R0_b).rasterize(L, n)
        prev = 0.0
        for t in times:
            if t > prev:
                mu_a = advance_density(mu_a, spec, t - prev, kind="dissipative")
                mu_b = advance_density(mu_b, spec, t - prev, kind="dissipative")
                prev = t
            fb = field_bounds(mu_b, spec)
            rows.append({"t": t, "gap": weak_strong_gap(mu_a, mu_b, spec),
                         "sup_bound": fb.sup_hess_h})
    elif kind == "euler_poisson":
        u0 = make_u0(cfg, spec)
        if u0 is None:
            raise ConfigError("init.u0: gap experiment (euler_poisson) needs a field")
        mka = mk(R0_a)
        mkb = mk(R0_b)
        solver_a = EulerPoissonSolver(mka.density_at, u0, spec, L=L, n=n,
                                      marker_half_width=1.3 * R0_a,
                                      markers_per_axis=int(ref["markers_per_axis"]))
        solver_b = EulerPoissonSolver(mkb.density_at, u0, spec, L=L, n=n,
                                      marker_half_width=1.3 * R0_b,
                                      markers_per_axis=int(ref["markers_per_axis"]))
        dt = float(ref["ep_dt"])
        prev = 0.0
        for t in times:
            if t > prev:
                solver_a.run(t - prev, dt)
                solver_b.run(t - prev, dt)
                prev = t
            ua, ub = solver_a.velocity_grid(), solver_b.velocity_grid()
            mu_b = solver_b.density_grid()
            gap = euler_poisson_gap(solver_a.density_grid(), ua, mu_b, ub, spec)
            # judge the field only well inside the support, not at its edge
            support = mu_b.values > 1e-3 * float(np.max(mu_b.values))
            rows.append({"t": t, "gap": gap,
                         "sup_bound": velocity_jacobian_sup(ub, mask=support)})
    else:
        raise ConfigError(f"gap.kind: unknown kind {kind!r}")
    gap0 = rows[0]["gap"]
    # fitted exponential rate of the gap itself
    ts = np.array([r["t"] for r in rows])
    gs = np.array([max(r["gap"], 1e-300) for r in rows])
    fitted_rate = float(np.polyfit(ts, np.log(gs), 1)[0]) if len(rows) > 2 else math.nan
    sup_bound = max(r["sup_bound"] for r in rows)
    for r in rows:
        r["ratio"] = r["gap"] / gap0 if gap0 > 0 else math.nan
        r["envelope"] = math.exp(4.0 * sup_bound * r["t"])
    # smallest c with gap(t)/gap(0) <= exp(c * sup_bound * t) at every snapshot
    fitted_c = max(
        (math.log(r["ratio"]) / (sup_bound * r["t"])
         for r in rows if r["t"] > 0 and r["ratio"] > 0),
        default=math.nan,
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "gap.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gap", "ratio", "sup_bound", "envelope"])
        for r in rows:
            w.writerow([repr(float(r[c])) for c in ("t", "gap", "ratio", "sup_bound", "envelope")])
    summary = {"kind": kind, "gap0": gap0, "gapT": rows[-1]["gap"],
               "fitted_rate": fitted_rate, "fitted_c": fitted_c,
               "sup_bound": sup_bound,
               "within_envelope": all(r["ratio"] <= r["envelope"] * (1 + 1e-9)
                                      for r in rows if not math.isnan(r["ratio"]))}
    (out / "gap.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# PDE-only runs


def run_pde(cfg: dict) -> dict:
    """Advance the configured family on the grid and report conservation and
    (when the family is exactly solvable) tracking error."""
    from .modenergy import self_energy

    spec = _kernel_from(cfg)
    sol = _solution_from(cfg, spec)
    ref = cfg["reference"]
    L, n = float(ref["grid_L"]), int(ref["grid_n"])
    T = float(cfg["run"]["T"])
    kind = "conservative" if cfg["flow"]["kind"] == "conservative" else "dissipative"
    mu = exact_at(sol, 0.0).rasterize(L, n)
    mass0 = mu.mass
    mu = advance_density(mu, spec, T, kind=kind, J=default_J(spec.d))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    from .meanfield import radial_profile_rows, save_grid

    save_grid(mu, out / "density_final.bin")
    with (out / "radial_profile.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "density", "mass_within"])
        for row in radial_profile_rows(mu):
            w.writerow([repr(float(v)) for v in row])
    report = {"T": T, "mass_drift": abs(mu.mass - mass0),
              "self_energy": self_energy(mu, spec), "n": n, "L": L}
    if sol.family == "expanding_ball" and kind == "dissipative":
        target = exact_at(sol, T)  # unit transport clock
        pts = mu.point_grid()
        rho = np.sqrt(np.sum(pts * pts, axis=-1))
        order = np.argsort(rho)
        cum = np.cumsum(mu.values.ravel()[order]) * mu.cell**mu.d
        r_half = float(rho[order][np.searchsorted(cum, 0.5)])
        want = float(target.radius_quantile(0.5))
        report["half_mass_radius"] = r_half
        report["half_mass_radius_exact"] = want
        report["radius_error_cells"] = abs(r_half - want) / mu.cell
    (out / "pde_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def diagnose_records(path: str | Path) -> dict:
    """Summary of a records.csv: per-N medians at final time, monotonicity,
    truncation positivity."""
    records = read_records_csv(path)
    if not records:
        raise ConfigError("records: file has no rows")
    T = max(r.t for r in records)
    byN: dict[int, list[DiagnosticsRecord]] = {}
    for r in records:
        if abs(r.t - T) < 1e-12:
            byN.setdefault(r.N, []).append(r)
    Ns = sorted(byN)
    med = {N: float(np.median([r.F_N_per_N2 for r in byN[N]])) for N in Ns}
    te_vals = [r.TE_r for r in records if not math.isnan(r.TE_r)]
    summary = {
        "final_t": T,
        "Ns": Ns,
        "median_F_per_N2": {str(N): med[N] for N in Ns},
        "monotone_decreasing": all(med[a] > med[b] for a, b in zip(Ns, Ns[1:])),
        "te_min": min(te_vals) if te_vals else math.nan,
        "te_nonnegative": bool(te_vals and min(te_vals) >= 0),
        "n_records": len(records),
    }
    try:
        fit = fit_rate(records)
        summary["rate_fit"] = dataclasses.asdict(fit)
    except ValueError as e:
        summary["rate_fit"] = str(e)
    return summary
