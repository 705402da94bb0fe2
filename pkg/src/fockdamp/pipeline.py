"""Stage orchestration over an artifact directory.

Stages exchange data only through files in the artifact directory, so any
stage can be rerun alone once its inputs exist.
"""
from __future__ import annotations

import logging
import math
import warnings
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io as aio
from .bayesfilter import PosteriorTimeline, filter_sequence, spin_samples, SpinSamples
from .config import PipelineConfig
from .ensemble import (
    build_fock_ensembles,
    default_grid,
    reconstruct_timeline,
    select_fock_events,
)
from .estimation import (
    FitResult,
    diagonal_law,
    fit_exponential_mean,
    fit_generator,
    fit_poisson,
    fock_lifetimes,
    predict_curves,
)
from .numkernel import CavityParams, GeneratorMatrix, PhotonDistribution, build_generator, propagate
from .trajsim import synthesize_run

__all__ = ["STAGES", "StageDependencyError", "run_pipeline"]

log = logging.getLogger(__name__)

STAGES = ("simulate", "reconstruct", "filter", "select", "fit", "predict", "histogram", "report")

FILES = {
    "sequences": "sequences.csv",
    "coherent_timeline": "coherent_timeline.csv",
    "coherent_fit": "coherent_fit.txt",
    "coherent_snapshots": "coherent_snapshots.csv",
    "coherent_bootstrap": "coherent_bootstrap.csv",
    "posteriors": "posteriors.f32",
    "posterior_index": "posterior_index.csv",
    "events": "fock_events.csv",
    "fock_timelines": "fock_timelines.csv",
    "fit_generator": "fit_generator.csv",
    "fit_initial": "fit_initial.csv",
    "fit_report": "fit_report.txt",
    "lifetimes": "lifetimes.csv",
    "prediction": "prediction.csv",
    "prediction_error": "prediction_error.csv",
    "spin_histogram": "spin_histogram.csv",
    "spin_peaks": "spin_peaks.csv",
    "spin_select": "spin_histogram_select.csv",
    "spin_postselect": "spin_histogram_postselect.csv",
    "summary": "summary.txt",
    "config": "config.ini",
}


class StageDependencyError(RuntimeError):
    """A stage's input artifact is missing."""


class _Context:
    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.hash()
        self.seed = cfg.seed
        self.params = cfg.cavity.params()
        self.probe = cfg.probe.model(cfg.cavity.n_max)
        self._seqs = None

    def path(self, key) -> Path:
        return self.out / FILES[key]

    def need(self, key, stage) -> Path:
        p = self.path(key)
        if not p.exists():
            raise StageDependencyError(f"stage {stage!r} needs {p.name}; run the stage that "
                                       f"produces it or ingest a file")
        return p

    def sequences(self, stage):
        if self._seqs is None:
            self._seqs = aio.ingest_sequences(self.need("sequences", stage),
                                              n_phases=len(self.probe.phase_settings))
        return self._seqs

    def probe_notes(self):
        p = self.cfg.probe
        return [f"probe phase0={p.phase0!r} A={p.A!r} B={p.B!r} "
                f"phase_settings={';'.join(repr(x) for x in p.phase_settings)} "
                f"n_phases={len(p.phase_settings)} mean_interval={p.mean_interval!r}"]


# --- stages ---------------------------------------------------------------


def stage_simulate(ctx: _Context):
    r = ctx.cfg.run
    seqs = synthesize_run(ctx.params, ctx.probe, r.initial_mean, r.duration, r.sequences, r.seed)
    aio.write_sequences(ctx.path("sequences"), seqs, ctx.hash, ctx.seed, ctx.probe_notes())
    ctx._seqs = None


def _span(seqs) -> float:
    ends = [s.duration if s.duration is not None else (s.times[-1] if len(s) else 0.0)
            for s in seqs]
    return max(ends) if ends else 0.0


def stage_reconstruct(ctx: _Context):
    cfg = ctx.cfg
    rc = cfg.reconstruction
    seqs = ctx.sequences("reconstruct")
    grid = default_grid(_span(seqs), rc.grid_spacing)
    tl = reconstruct_timeline(seqs, grid, rc.N, rc.iterations, ctx.probe, rc.min_realizations)
    usable = tl.valid(rc.min_realizations)
    fit = fit_exponential_mean(tl.restrict(usable))
    mu0, tv0 = fit_poisson(tl.table[np.flatnonzero(usable)[0]])

    # theory curves from the fitted damping time, offset and initial Poisson law
    theory_params = CavityParams(kappa=1.0 / fit.time_constant, n_b=max(fit.offset, 0.0),
                                 n_max=cfg.cavity.n_max)
    K = build_generator(theory_params)
    P0 = PhotonDistribution.poisson(mu0, cfg.cavity.n_max)
    theory = np.array([propagate(P0, K, t).probs for t in grid])
    D = tl.table.shape[1]
    rows = [(t, int(tl.counts[g]), int(g in tl.sparse), *tl.table[g], tl.mean()[g], *theory[g])
            for g, t in enumerate(grid)]
    cols = (["time_s", "realizations", "sparse"] + [f"P{n}" for n in range(D)] + ["mean_n"]
            + [f"theory_P{n}" for n in range(D)])
    aio.write_table(ctx.path("coherent_timeline"), "coherent_timeline", ctx.hash, ctx.seed, cols,
                    rows, notes=["reconstructed photon-number law of the unselected ensemble",
                                 "theory_P columns solve the rate equation with the fitted "
                                 "damping time and offset"])
    items = [
        ("time_constant_s", fit.time_constant), ("offset", fit.offset),
        ("amplitude", fit.amplitude), ("rms_residual", fit.rms_residual),
        ("stderr_offset", fit.stderr[0]), ("stderr_amplitude", fit.stderr[1]),
        ("stderr_time_constant_s", fit.stderr[2]),
        ("initial_poisson_mean", mu0), ("initial_poisson_tv", tv0),
        ("fit_points", int(usable.sum())), ("nonmonotone_points", len(tl.nonmonotone)),
        ("flags", ";".join(fit.flags) or "none"),
    ]
    aio.write_keyvalue(ctx.path("coherent_fit"), "coherent_fit", ctx.hash, ctx.seed, items,
                       notes=["mean photon number fit: offset + amplitude * exp(-t / time_constant)"])
    snap_rows = []
    for t in cfg.report.snapshot_times:
        g = int(np.argmin(np.abs(grid - t)))
        if not usable[g]:
            continue
        mu, tv = fit_poisson(tl.table[g])
        pfit = PhotonDistribution.poisson(mu, cfg.cavity.n_max).probs
        for n in range(D):
            snap_rows.append((grid[g], n, tl.table[g, n], pfit[n], mu, tv))
    aio.write_table(ctx.path("coherent_snapshots"), "coherent_snapshots", ctx.hash, ctx.seed,
                    ["time_s", "n", "P", "poisson_fit_P", "poisson_mean", "poisson_tv"], snap_rows)
    if rc.bootstrap:
        _bootstrap(ctx, seqs, grid, rc)


def _bootstrap(ctx, seqs, grid, rc):
    """Resample realizations with replacement; spread of P(n, t) and of the fit."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=ctx.seed, spawn_key=(2 ** 31 - 1,))))
    tables, taus, offsets = [], [], []
    for _ in range(rc.bootstrap):
        pick = rng.integers(0, len(seqs), size=len(seqs))
        tl = reconstruct_timeline([seqs[i] for i in pick], grid, rc.N, rc.iterations, ctx.probe,
                                  rc.min_realizations)
        tables.append(tl.table)
        f = fit_exponential_mean(tl.restrict(tl.valid(rc.min_realizations)))
        taus.append(f.time_constant)
        offsets.append(f.offset)
    sd = np.nanstd(np.array(tables), axis=0, ddof=1)
    D = sd.shape[1]
    rows = [(t, *sd[g]) for g, t in enumerate(grid)]
    aio.write_table(ctx.path("coherent_bootstrap"), "coherent_bootstrap", ctx.hash, ctx.seed,
                    ["time_s"] + [f"sd_P{n}" for n in range(D)], rows,
                    notes=[f"replicates={rc.bootstrap}",
                           f"sd_time_constant_s={np.std(taus, ddof=1)!r} "
                           f"sd_offset={np.std(offsets, ddof=1)!r}"])


def _filter_model(ctx: _Context):
    cfg = ctx.cfg
    if cfg.filter.source == "config":
        return build_generator(ctx.params), PhotonDistribution.poisson(
            cfg.run.initial_mean, cfg.cavity.n_max)
    kv = aio.read_keyvalue(ctx.need("coherent_fit", "filter"))
    try:
        tau = float(kv["time_constant_s"])
        offset = float(kv["offset"])
        mu0 = float(kv["initial_poisson_mean"])
    except (KeyError, ValueError):
        raise aio.ArtifactError(f"{ctx.path('coherent_fit')}: missing fit values") from None
    if not (math.isfinite(tau) and tau > 0):
        raise aio.ArtifactError(f"{ctx.path('coherent_fit')}: unusable time constant {tau}")
    params = CavityParams(kappa=1.0 / tau, n_b=max(offset, 0.0), n_max=cfg.cavity.n_max)
    return build_generator(params), PhotonDistribution.poisson(mu0, cfg.cavity.n_max)


def stage_filter(ctx: _Context):
    seqs = ctx.sequences("filter")
    K, prior = _filter_model(ctx)
    tls = [filter_sequence(s, prior, K, ctx.probe) for s in seqs]
    aio.write_posteriors(ctx.path("posteriors"), tls, ctx.hash, ctx.seed,
                         ctx.path("posterior_index"))


def _load_posteriors(ctx, seqs, stage):
    mat, index = aio.read_posteriors(ctx.need("posteriors", stage),
                                     ctx.need("posterior_index", stage))
    out = []
    for s in seqs:
        if s.id not in index:
            raise aio.ArtifactError(f"posteriors lack sequence {s.id}")
        a, c, t0 = index[s.id]
        if c != len(s):
            raise aio.ArtifactError(f"posteriors for sequence {s.id} hold {c} rows, "
                                    f"sequence has {len(s)} detections")
        out.append(PosteriorTimeline(s.id, s.times, mat[a:a + c], np.zeros(0), t0))
    return out


def stage_select(ctx: _Context):
    cfg = ctx.cfg
    sel, rc = cfg.selection, cfg.reconstruction
    seqs = ctx.sequences("select")
    tls = _load_posteriors(ctx, seqs, "select")
    events = select_fock_events(tls, sel.threshold, sel.dedup_window, sel.rearm)
    by_id = {s.id: s for s in seqs}
    truth = {}
    for i, e in enumerate(events):
        s = by_id[e.sequence_id]
        if s.truth is not None:
            truth[i] = int(s.truth.n_at(e.t0))
    aio.write_events(ctx.path("events"), events, ctx.hash, ctx.seed, truth)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ens = build_fock_ensembles(seqs, events, sel.horizon + sel.margin)
    grid = default_grid(sel.horizon, rc.grid_spacing)
    timelines = {n0: reconstruct_timeline(views, grid, rc.N, rc.iterations, ctx.probe,
                                          rc.min_realizations)
                 for n0, views in sorted(ens.items())}
    aio.write_timelines(ctx.path("fock_timelines"), "fock_timelines", timelines, ctx.hash,
                        ctx.seed, notes=["label is the selected photon number n0; time_s is "
                                         "measured from the selection time",
                                         f"dropped_events={ens.dropped}"])


def _read_fit(ctx, stage) -> FitResult:
    _, cols, kd = aio.read_table(ctx.need("fit_generator", stage))
    D = int(kd[:, 0].max()) + 1
    K = np.zeros((D, D))
    se = np.zeros((D, D))
    for n, m, rate, _, err in kd:
        K[int(n), int(m)] = rate
        se[int(n), int(m)] = err
    _, _, pd = aio.read_table(ctx.need("fit_initial", stage))
    init, init_se = {}, {}
    for n0, n, p, err in pd:
        init.setdefault(int(n0), np.zeros(D))[int(n)] = p
        init_se.setdefault(int(n0), np.zeros(D))[int(n)] = err
    kv = aio.read_keyvalue(ctx.need("fit_report", stage))
    constrained = kv.get("constrained", "1") == "1"
    return FitResult(GeneratorMatrix(K, validate=constrained),
                     {k: PhotonDistribution(v) for k, v in init.items()},
                     float(kv.get("weighted_ssr", "nan")), se, init_se, constrained=constrained)


def stage_fit(ctx: _Context):
    cfg = ctx.cfg
    timelines = aio.read_timelines(ctx.need("fock_timelines", "fit"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_generator(timelines, cfg.fit.window, cfg.fit.constrained, cfg.fit.var_floor,
                            cfg.reconstruction.min_realizations, cfg.fit.jacobian)
    kappa = ctx.params.kappa
    D = fit.K_hat.rates.shape[0]
    rows = [(n, m, fit.K_hat.rates[n, m], fit.K_hat.rates[n, m] / kappa, fit.K_stderr[n, m])
            for n in range(D) for m in range(D)]
    aio.write_table(ctx.path("fit_generator"), "fit_generator", ctx.hash, ctx.seed,
                    ["n", "m", "rate_per_s", "rate_over_kappa", "stderr_per_s"], rows,
                    notes=["rate from photon number m into n; kappa is the configured damping rate",
                           f"kappa_per_s={kappa!r}"])
    rows = [(n0, n, p, fit.initial_stderr.get(n0, np.zeros(D))[n])
            for n0, P in sorted(fit.initial_dists.items()) for n, p in enumerate(P.probs)]
    aio.write_table(ctx.path("fit_initial"), "fit_initial", ctx.hash, ctx.seed,
                    ["n0", "n", "P", "stderr"], rows,
                    notes=["fitted photon-number law at the selection time"])
    planted = build_generator(ctx.params).rates
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        life = fock_lifetimes(fit)
    rows = [(n, tau, -1.0 / planted[n, n], -fit.K_hat.rates[n, n] / kappa,
             fit.K_stderr[n, n] / kappa) for n, tau in life]
    aio.write_table(ctx.path("lifetimes"), "lifetimes", ctx.hash, ctx.seed,
                    ["n", "lifetime_s", "configured_lifetime_s", "minus_Knn_over_kappa",
                     "stderr_over_kappa"], rows)
    items = [("constrained", int(fit.constrained)), ("weighted_ssr", fit.residual),
             ("dof", fit.dof), ("fit_window_s", cfg.fit.window), ("var_floor", cfg.fit.var_floor),
             ("flags", " | ".join(fit.flags) or "none"),
             ("warnings", " | ".join(str(w.message) for w in caught) or "none")]
    items += [(f"stage_{i + 1}", line) for i, line in enumerate(fit.stage_log)]
    aio.write_keyvalue(ctx.path("fit_report"), "fit_report", ctx.hash, ctx.seed, items)


def stage_predict(ctx: _Context):
    cfg = ctx.cfg
    fit = _read_fit(ctx, "predict")
    observed = aio.read_timelines(ctx.need("fock_timelines", "predict"))
    grid = default_grid(cfg.report.prediction_horizon, cfg.reconstruction.grid_spacing)
    pred = predict_curves(fit, grid=grid)
    aio.write_timelines(ctx.path("prediction"), "prediction", pred, ctx.hash, ctx.seed,
                        notes=["model curves exp(K_hat t) P0_hat from the short-window fit"])
    rows = []
    for n0, p in sorted(pred.items()):
        if n0 not in observed:
            continue
        obs = observed[n0]
        err = _heldout_error(obs, p, cfg.fit.window, cfg.reconstruction.min_realizations)
        if err is None:
            continue
        rows.append((n0, *err))
    aio.write_table(ctx.path("prediction_error"), "prediction_error", ctx.hash, ctx.seed,
                    ["n0", "max_abs_error", "time_of_max_s", "n_of_max", "points"], rows,
                    notes=["compared on grid times after the fit window with enough realizations"])


def _heldout_error(obs, pred, fit_window, min_count):
    ok = obs.valid(min_count) & (obs.grid > fit_window + 1e-12)
    idx = np.flatnonzero(ok)
    if not idx.size:
        return None
    pg = np.searchsorted(pred.grid, obs.grid[idx])
    pg = np.clip(pg, 0, pred.grid.size - 1)
    keep = np.abs(pred.grid[pg] - obs.grid[idx]) < 1e-9
    idx, pg = idx[keep], pg[keep]
    if not idx.size:
        return None
    diff = np.abs(obs.table[idx] - pred.table[pg])
    g, n = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[g, n]), float(obs.grid[idx[g]]), int(n), int(idx.size)


def spin_histogram(samples: SpinSamples, bins: int, smoothing: float):
    edges = np.linspace(-1.0, 1.0, bins + 1)
    H, _, _ = np.histogram2d(samples.x, samples.y, bins=[edges, edges])
    S = ndimage.gaussian_filter(H, smoothing, mode="constant")
    return edges, H, S


def find_peaks(S, edges, min_rel_height):
    """Local maxima of a smoothed 2-d histogram above ``min_rel_height * max``."""
    if S.max() <= 0:
        return []
    mx = ndimage.maximum_filter(S, size=5, mode="constant")
    pk = np.argwhere((S == mx) & (S > min_rel_height * S.max()))
    c = 0.5 * (edges[:-1] + edges[1:])
    out = [(c[i], c[j], float(S[i, j])) for i, j in pk]
    return sorted(out, key=lambda p: -p[2])


def _classify(samples: SpinSamples, probe, radius_min):
    """Nearest photon-number direction, -1 when the spin is too short."""
    phi = np.mod(np.asarray(probe.phase_per_photon), 2 * np.pi)
    ang = np.mod(samples.angle, 2 * np.pi)
    d = np.abs(np.angle(np.exp(1j * (ang[:, None] - phi[None, :]))))
    n = np.argmin(d, axis=1)
    n[samples.radius < radius_min] = -1
    return n


def stage_histogram(ctx: _Context):
    h = ctx.cfg.histogram
    probe = ctx.probe
    seqs = ctx.sequences("histogram")
    samples = SpinSamples.concatenate(
        spin_samples(s, probe, h.window_atoms, h.stride, h.max_atoms) for s in seqs)
    edges, H, S = spin_histogram(samples, h.bins, h.smoothing)
    c = 0.5 * (edges[:-1] + edges[1:])
    rows = [(c[i], c[j], int(H[i, j]), S[i, j]) for i in range(h.bins) for j in range(h.bins)]
    notes = [f"samples={len(samples)} window_atoms={h.window_atoms} stride={h.stride} "
             f"max_atoms={h.max_atoms} flagged_windows={len(samples.flagged)}",
             "x, y are transverse spin components (dimensionless)"]
    aio.write_table(ctx.path("spin_histogram"), "spin_histogram", ctx.hash, ctx.seed,
                    ["x", "y", "count", "smoothed"], rows, notes)
    phi = np.mod(np.asarray(probe.phase_per_photon), 2 * np.pi)
    prow = []
    for x, y, height in find_peaks(S, edges, h.min_rel_height):
        ang = math.atan2(y, x)
        d = np.abs(np.angle(np.exp(1j * (ang - phi))))
        n = int(np.argmin(d))
        prow.append((x, y, ang, math.hypot(x, y), height, n, float(d[n])))
    aio.write_table(ctx.path("spin_peaks"), "spin_peaks", ctx.hash, ctx.seed,
                    ["x", "y", "angle_rad", "radius", "height", "nearest_n", "angle_offset_rad"],
                    prow)

    # successive independent windows: select, remeasure, post-select
    second_sel, second_post = [], []
    for s in seqs:
        smp = spin_samples(s, probe, h.window_atoms)
        if len(smp) < 2:
            continue
        cls = _classify(smp, probe, 0.5 * probe.B)
        # windows skipped for a missing phase break the succession
        nxt = np.diff(smp.first_atom) == h.window_atoms
        sel = np.flatnonzero(nxt & (cls[:-1] == h.select_n))
        post = sel[sel + 2 < len(smp)]
        post = post[nxt[post + 1] & (cls[post + 2] == h.select_n)]
        second_sel.append((smp, sel + 1))
        second_post.append((smp, post + 1))
    for key, picked, what in (("spin_select", second_sel, "second window after selecting"),
                              ("spin_postselect", second_post,
                               "second window after selecting and post-selecting")):
        parts = [SpinSamples(p.x[i], p.y[i], p.window_start[i], p.atom_count[i],
                             p.sequence_id[i], p.first_atom[i]) for p, i in picked]
        sub = SpinSamples.concatenate(parts)
        _, Hc, Sc = spin_histogram(sub, h.bins, h.smoothing)
        cls = _classify(sub, probe, 0.5 * probe.B)
        frac = {n: float(np.mean(cls == n)) if len(sub) else math.nan
                for n in range(probe.n_max + 1)}
        rows = [(c[i], c[j], int(Hc[i, j]), Sc[i, j]) for i in range(h.bins)
                for j in range(h.bins)]
        aio.write_table(ctx.path(key), key, ctx.hash, ctx.seed, ["x", "y", "count", "smoothed"],
                        rows, notes=[f"{what} n={h.select_n}; samples={len(sub)}",
                                     "fraction_by_n=" + ";".join(f"{n}:{v!r}"
                                                                 for n, v in frac.items())])


def _r(v) -> str:
    return repr(float(v))


def stage_report(ctx: _Context):
    out = aio.header_lines("summary", ctx.hash, ctx.seed) + [""]
    if not ctx.path("spin_peaks").exists() and ctx.path("sequences").exists():
        stage_histogram(ctx)
    if ctx.path("sequences").exists():
        seqs = ctx.sequences("report")
        n_det = sum(len(s) for s in seqs)
        out += ["[sequences]", f"count = {len(seqs)}", f"detections = {n_det}", ""]
    if ctx.path("coherent_fit").exists():
        kv = aio.read_keyvalue(ctx.path("coherent_fit"))
        out += ["[coherent]"] + [f"{k} = {v}" for k, v in kv.items()]
        if ctx.path("coherent_snapshots").exists():
            _, _, snap = aio.read_table(ctx.path("coherent_snapshots"))
            for t in np.unique(snap[:, 0]):
                r = snap[snap[:, 0] == t][0]
                out.append(f"snapshot t={_r(t)} s: poisson_mean = {_r(r[4])}, poisson_tv = {_r(r[5])}")
        out.append("")
    if ctx.path("events").exists():
        _, _, ev = aio.read_table(ctx.path("events"))
        out.append("[selection]")
        for n0 in np.unique(ev[:, 2]).astype(int):
            e = ev[ev[:, 2] == n0]
            line = f"n0 = {n0}: events = {len(e)}"
            if np.all(e[:, 4] >= 0):
                line += f", truth agreement = {_r(np.mean(e[:, 4] == n0))}"
            out.append(line)
        out.append("")
    if ctx.path("fit_generator").exists():
        fit = _read_fit(ctx, "report")
        kappa = ctx.params.kappa
        K = fit.K_hat.rates / kappa
        se = fit.K_stderr / kappa
        D = K.shape[0]
        slope_w, icpt_w = diagonal_law(fit, kappa)
        slope_u, icpt_u = diagonal_law(fit, kappa, weighted=False)
        off = [(abs(K[a, b]), a, b) for a in range(D) for b in range(D) if abs(a - b) >= 2]
        mx = max(off) if off else (0.0, -1, -1)
        out += ["[generator fit]  rates in units of the configured kappa",
                "K_hat / kappa (row n = destination, column m = source):"]
        out += ["  " + " ".join(f"{v:9.4f}" for v in row) for row in K]
        out += ["stderr / kappa:"]
        out += ["  " + " ".join(f"{v:9.4f}" for v in row) for row in se]
        out += [f"diagonal law (inverse-variance weighted): slope = {_r(slope_w)}, "
                f"intercept = {_r(icpt_w)}",
                f"diagonal law (unweighted): slope = {_r(slope_u)}, intercept = {_r(icpt_u)}",
                f"largest off-band |K|/kappa = {_r(mx[0])} at K[{mx[1]}][{mx[2]}]"]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for nn, tau in fock_lifetimes(fit):
                out.append(f"lifetime n={nn}: {_r(tau)} s")
        planted = build_generator(ctx.params).rates
        for m in range(D - 1):
            ratio = fit.K_hat.rates[m + 1, m] / planted[m + 1, m] if planted[m + 1, m] else math.nan
            out.append(f"upward K[{m + 1}][{m}]: fitted/configured = {_r(ratio)}")
        out.append("")
    if ctx.path("prediction_error").exists():
        _, _, pe = aio.read_table(ctx.path("prediction_error"))
        out.append("[prediction]  held-out max |error|")
        out += [f"n0 = {int(r[0])}: {_r(r[1])} at t = {_r(r[2])} s, n = {int(r[3])}" for r in pe]
        out.append("")
    if ctx.path("spin_peaks").exists():
        _, _, pk = aio.read_table(ctx.path("spin_peaks"))
        out.append(f"[spin histogram]  peaks = {len(pk)}")
        out += [f"nearest n = {int(r[5])}: angle = {_r(r[2])} rad (offset {_r(r[6])}), "
                f"radius = {_r(r[3])}" for r in pk]
        for key in ("spin_select", "spin_postselect"):
            if ctx.path(key).exists():
                meta, _, _ = aio.read_table(ctx.path(key))
                out.append(f"{key}: samples = {meta.get('samples')}, "
                           f"fraction_by_n = {meta.get('fraction_by_n')}")
        out.append("")
    ctx.path("summary").write_text("\n".join(out) + "\n")


RUNNERS = {
    "simulate": stage_simulate,
    "reconstruct": stage_reconstruct,
    "filter": stage_filter,
    "select": stage_select,
    "fit": stage_fit,
    "predict": stage_predict,
    "histogram": stage_histogram,
    "report": stage_report,
}


def run_pipeline(config: PipelineConfig, stages=("all",), out_dir="artifacts",
                 sequences_file=None) -> Path:
    """Run ``stages`` (in canonical order) writing into ``out_dir``.

    ``sequences_file`` is validated and copied in as the sequence artifact,
    replacing the simulate stage.
    """
    stages = set(stages)
    unknown = stages - set(STAGES) - {"all"}
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    if "all" in stages:
        stages = set(STAGES)
        if sequences_file is not None:
            stages.discard("simulate")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(config, out)
    (out / FILES["config"]).write_text(
        "\n".join(aio.header_lines("config", ctx.hash, ctx.seed)) + "\n" + config.to_ini())
    if sequences_file is not None:
        seqs = aio.ingest_sequences(sequences_file, n_phases=len(ctx.probe.phase_settings))
        aio.write_sequences(ctx.path("sequences"), seqs, ctx.hash, ctx.seed, ctx.probe_notes())
    for name in STAGES:
        if name in stages:
            log.info("stage %s", name)
            RUNNERS[name](ctx)
    return out
