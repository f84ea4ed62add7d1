"""The four figure kinds, rendered deterministically (fixed style, fixed
SVG hash salt, no timestamps in the image content)."""
import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .jobs import PlotJob, SchemaError, read_table

_STYLE = {
    "figure.figsize": (6.0, 4.2),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "svg.fonttype": "none",
    "svg.hashsalt": "mfplots",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "path.simplify": False,
}


def render(job: PlotJob) -> dict:
    """Render one figure to job.out; returns the computed annotations."""
    fn = _RENDERERS[job.kind]
    with plt.rc_context(_STYLE):
        fig = plt.figure()
        try:
            meta = fn(fig, [str(p) for p in job.inputs])
            kw = {"metadata": {"Date": None}} if str(job.out).endswith(".svg") else {}
            fig.savefig(job.out, **kw)
        finally:
            plt.close(fig)
    return meta


def _by_group(keys, vals):
    out = {}
    for k, v in zip(keys, vals):
        out.setdefault(k, []).append(v)
    return out


def _final_medians(tab, col) -> dict:
    """Median of col over seeds at the last recorded time, keyed by N."""
    T = max(tab["t"])
    picks = [i for i, t in enumerate(tab["t"]) if abs(t - T) < 1e-12]
    groups = _by_group((int(tab["N"][i]) for i in picks),
                       (tab[col][i] for i in picks))
    return {N: float(np.median(v)) for N, v in sorted(groups.items())}


def _fn_vs_t(fig, inputs) -> dict:
    tab = read_table(inputs[0], required=("t", "N", "F_N_per_N2"))
    ax = fig.add_subplot()
    Ns = sorted({int(n) for n in tab["N"]})
    for N in Ns:
        rows = [(t, v) for t, n, v in zip(tab["t"], tab["N"], tab["F_N_per_N2"])
                if int(n) == N]
        med = {t: float(np.median(v)) for t, v in sorted(_by_group(
            (t for t, _ in rows), (v for _, v in rows)).items())}
        ax.plot(list(med), list(med.values()), marker="o", ms=3,
                label=f"N={N}")
    ax.set_xlabel("t")
    ax.set_ylabel("modulated energy / N^2")
    ax.legend(fontsize=8)
    return {"n_curves": len(Ns)}


def _fn_vs_N_loglog(fig, inputs) -> dict:
    tab = read_table(inputs[0], required=("t", "N", "F_N", "F_N_per_N2"))
    med_F = _final_medians(tab, "F_N")
    med_f2 = _final_medians(tab, "F_N_per_N2")
    Ns = [N for N in med_F if med_F[N] != 0.0 and math.isfinite(med_F[N])]
    if len(Ns) < 2:
        raise ValueError("fn_vs_N_loglog: need >= 2 N values")
    logN = np.log([float(N) for N in Ns])
    slope, icpt = np.polyfit(logN, np.log([abs(med_F[N]) for N in Ns]), 1)
    ax = fig.add_subplot()
    ax.loglog(Ns, [abs(med_f2[N]) for N in Ns], "o", label="measured")
    fit = [math.exp(icpt) * N**slope / N**2 for N in Ns]
    ax.loglog(Ns, fit, "--", label=f"slope {slope:.2f}")
    ax.annotate(f"slope {slope:.2f}", xy=(0.05, 0.08),
                xycoords="axes fraction")
    ax.set_xlabel("N")
    ax.set_ylabel("|modulated energy| / N^2")
    ax.legend(fontsize=8)
    return {"slope": float(slope)}


def _gap_gronwall(fig, inputs) -> dict:
    tab = read_table(inputs[0], required=("t", "gap", "envelope"))
    gap0 = tab["gap"][0]
    env = [gap0 * e for e in tab["envelope"]]
    ax = fig.add_subplot()
    ax.semilogy(tab["t"], tab["gap"], marker="o", ms=3, label="gap(t)")
    ax.semilogy(tab["t"], env, "--", label="gap(0) envelope")
    ax.set_xlabel("t")
    ax.set_ylabel("density gap")
    ax.legend(fontsize=8)
    within = all(g <= e * (1 + 1e-12) for g, e in zip(tab["gap"], env))
    return {"within_envelope": within}


def _trajectory_snapshot(fig, inputs) -> dict:
    traj = read_table(inputs[0], required=("t", "particle", "x0", "x1"))
    T = max(traj["t"])
    xs = np.array([(x, y) for t, x, y in zip(traj["t"], traj["x0"],
                                             traj["x1"])
                   if abs(t - T) < 1e-12])
    ax = fig.add_subplot()
    if len(inputs) > 1:
        # radial reference profile -> filled contour of the density
        prof = read_table(inputs[1], required=("rho", "density"))
        R = max(prof["rho"])
        g = np.linspace(-1.15 * R, 1.15 * R, 201)
        X, Y = np.meshgrid(g, g)
        dens = np.interp(np.hypot(X, Y), prof["rho"], prof["density"],
                         right=0.0)
        cs = ax.contourf(X, Y, dens, levels=8, cmap="Blues", alpha=0.8)
        fig.colorbar(cs, ax=ax, label="reference density")
    ax.plot(xs[:, 0], xs[:, 1], "k.", ms=4)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(f"t = {T:g}")
    return {"n_particles": len(xs)}


_RENDERERS = {
    "fn_vs_t": _fn_vs_t,
    "fn_vs_N_loglog": _fn_vs_N_loglog,
    "trajectory_snapshot": _trajectory_snapshot,
    "gap_gronwall": _gap_gronwall,
}
