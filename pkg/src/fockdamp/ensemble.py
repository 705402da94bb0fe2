"""Ensemble reconstruction of P(n, t) and Fock-state selection.

The ensemble estimate at time ``t`` uses, in every realization, the ``N``
atoms detected from ``t`` on.  Each realization contributes the product of
their likelihoods ``Pi(n)``; the photon-number law is the fixed point of
``P -> < P * Pi / <P, Pi> >`` over realizations.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .numkernel import PhotonDistribution, _as_probs
from .trajsim import ProbeModel, SequenceRecord

__all__ = [
    "default_grid",
    "DistributionTimeline",
    "FockEnsembles",
    "FockSelectionEvent",
    "ReconstructionError",
    "SequenceView",
    "WindowLikelihood",
    "build_fock_ensembles",
    "fixed_point_reconstruct",
    "iter_window_products",
    "reconstruct_timeline",
    "select_fock_events",
    "window_products",
]

log = logging.getLogger(__name__)


class ReconstructionError(ArithmeticError):
    pass


class InsufficientAtomsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WindowLikelihood:
    sequence_id: int
    start_time: float
    log_products: np.ndarray
    duration: float = 0.0
    atom_count: int = 0


def _log_table(probe: ProbeModel) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probe.likelihood_table())


def _cumulative_log_likelihood(seq: SequenceRecord, log_table: np.ndarray) -> np.ndarray:
    rows = log_table[seq.phase_index, seq.outcome]
    out = np.zeros((len(seq) + 1, log_table.shape[2]))
    np.cumsum(rows, axis=0, out=out[1:])
    return out


def window_products(seq: SequenceRecord, t: float, N: int, probe: ProbeModel) -> WindowLikelihood:
    """Log-likelihood products of the ``N`` detections at or after ``t``."""
    if N < 0:
        raise ValueError("N must be non-negative")
    i = int(np.searchsorted(seq.times, t, side="left"))
    if i + N > len(seq):
        raise InsufficientAtomsError(
            f"sequence {seq.id}: only {len(seq) - i} detections after t={t:.6f} s, need {N}")
    rows = _log_table(probe)[seq.phase_index[i:i + N], seq.outcome[i:i + N]]
    logs = rows.sum(axis=0) if N else np.zeros(probe.n_max + 1)
    span = float(seq.times[i + N - 1] - seq.times[i]) if N else 0.0
    return WindowLikelihood(seq.id, float(t), logs, span, N)


def _fixed_point(L: np.ndarray, seed: np.ndarray, iterations: int):
    P, tv, fail = _core.fixed_point(np.ascontiguousarray(L, dtype=float),
                                    np.array(seed, dtype=float), int(iterations))
    if fail >= 0:
        raise ReconstructionError(f"window {fail}: normalizer vanished against the current iterate")
    return P, tv


def fixed_point_reconstruct(windows, iterations: int = 20, seed_dist=None) -> PhotonDistribution:
    """Iterate the ensemble Bayes transform ``iterations`` times from ``seed_dist``
    (flat when omitted)."""
    if isinstance(windows, np.ndarray):
        L = windows
    else:
        windows = list(windows)
        if not windows:
            raise ValueError("no windows")
        L = np.vstack([w.log_products for w in windows])
    if L.shape[0] == 0:
        raise ValueError("no windows")
    D = L.shape[1]
    seed = np.full(D, 1.0 / D) if seed_dist is None else np.array(_as_probs(seed_dist), float)
    if seed.min() <= 0:
        raise ValueError("seed distribution must be strictly positive")
    P, _ = _fixed_point(L, seed, iterations)
    return PhotonDistribution(P)


@dataclass(eq=False)
class DistributionTimeline:
    """Reconstructed ``P(n, t)``: ``table[g, n]`` at ``grid[g]`` from
    ``counts[g]`` realizations.  Rows without data are NaN."""

    grid: np.ndarray
    table: np.ndarray
    counts: np.ndarray
    nonmonotone: list = field(default_factory=list)  # grid indices with TV increases after burn-in
    sparse: list = field(default_factory=list)  # grid indices below the realization minimum

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        self.table = np.asarray(self.table, float)
        self.counts = np.asarray(self.counts, np.int64)
        if self.grid.size > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.table.shape != (self.grid.size, self.table.shape[1]):
            raise ValueError("table must have one row per grid point")

    @property
    def n_max(self) -> int:
        return self.table.shape[1] - 1

    def mean(self) -> np.ndarray:
        return self.table @ np.arange(self.n_max + 1)

    def valid(self, min_count: int = 1) -> np.ndarray:
        return (self.counts >= min_count) & np.all(np.isfinite(self.table), axis=1)

    def restrict(self, mask) -> "DistributionTimeline":
        mask = np.asarray(mask, bool)
        return DistributionTimeline(self.grid[mask], self.table[mask], self.counts[mask])

    def snapshot(self, t: float) -> PhotonDistribution:
        g = int(np.argmin(np.abs(self.grid - t)))
        return PhotonDistribution(self.table[g])


def default_grid(t_end: float, spacing: float = 2e-3, t_start: float = 0.0) -> np.ndarray:
    count = int(np.floor((t_end - t_start) / spacing + 1e-9)) + 1
    return t_start + spacing * np.arange(count)


class SequenceView:
    """Slice ``source[lo:hi]`` of a sequence, re-timed so that ``t0`` maps to 0.

    Behaves like a :class:`SequenceRecord` for reading (``times``,
    ``phase_index``, ``outcome``, ``len``) without copying the detections.
    """

    __slots__ = ("id", "source", "t0", "lo", "hi", "duration", "meta")

    def __init__(self, id, source, t0, lo, hi, duration=None, meta=None):
        self.id = int(id)
        self.source = source
        self.t0 = float(t0)
        self.lo = int(lo)
        self.hi = int(hi)
        self.duration = duration
        self.meta = dict(meta or {})

    def __len__(self):
        return self.hi - self.lo

    @property
    def times(self) -> np.ndarray:
        return self.source.times[self.lo:self.hi] - self.t0

    @property
    def phase_index(self) -> np.ndarray:
        return self.source.phase_index[self.lo:self.hi]

    @property
    def outcome(self) -> np.ndarray:
        return self.source.outcome[self.lo:self.hi]

    @property
    def truth(self):
        return None

    def to_record(self) -> SequenceRecord:
        return SequenceRecord(self.id, self.times, self.phase_index.copy(), self.outcome.copy(),
                              duration=self.duration, meta=dict(self.meta))

    def __repr__(self):
        return (f"SequenceView(id={self.id}, source={self.source.id}, t0={self.t0:.6f}, "
                f"detections={len(self)})")


def _as_slice(item):
    if isinstance(item, SequenceView):
        return item.source, item.t0, item.lo, item.hi
    return item, 0.0, 0, len(item)


def _window_starts(items, grid, N):
    """First detection index (in source coordinates) at or after each grid
    time, and whether ``N`` detections are available from there."""
    S = len(items)
    starts = np.zeros((S, grid.size), np.int64)
    valid = np.zeros((S, grid.size), bool)
    for s, (src, t0, lo, hi) in enumerate(items):
        vt = src.times[lo:hi] - t0 if t0 != 0.0 else src.times[lo:hi]
        i = np.searchsorted(vt, grid, side="left")
        valid[s] = i + N <= hi - lo
        starts[s] = lo + i
    return starts, valid


def iter_window_products(seqs, grid, N: int, probe: ProbeModel, max_bytes: int = 1 << 27):
    """Yield ``(g, log_products)`` for each grid index, ``log_products``
    holding one row per realization with ``N`` atoms from ``grid[g]`` on.

    Works on plain sequences and on :class:`SequenceView` objects; memory is
    bounded by processing the grid in chunks.
    """
    grid = np.asarray(grid, float)
    logt = _log_table(probe)
    D = logt.shape[2]
    items = [_as_slice(x) for x in seqs]
    starts, valid = _window_starts(items, grid, N)
    groups = {}
    for s, (src, *_rest) in enumerate(items):
        groups.setdefault(id(src), (src, []))[1].append(s)
    groups = [(src, np.array(idx)) for src, idx in groups.values()]
    S = len(items)
    chunk = max(1, int(max_bytes // max(1, S * D * 8)))
    for c0 in range(0, grid.size, chunk):
        c1 = min(grid.size, c0 + chunk)
        buf = np.zeros((S, c1 - c0, D))
        for src, idx in groups:
            C = _cumulative_log_likelihood(src, logt)
            st = starts[idx, c0:c1]
            ok = valid[idx, c0:c1]
            st = np.where(ok, st, 0)
            buf[idx] = C[st + N] - C[st]
        for g in range(c0, c1):
            yield g, buf[valid[:, g], g - c0]


def reconstruct_timeline(
    seqs,
    grid,
    N: int = 25,
    iterations: int = 20,
    probe: ProbeModel | None = None,
    min_realizations: int = 1,
    burn_in: int = 5,
) -> DistributionTimeline:
    """Fixed-point reconstruction at each grid time, always seeded flat.

    Grid points with fewer than ``min_realizations`` windows are listed in
    ``sparse``; those without any window are left as NaN.
    """
    if probe is None:
        raise ValueError("a probe model is required")
    seqs = list(seqs)
    grid = np.asarray(grid, float)
    D = probe.n_max + 1
    table = np.full((grid.size, D), np.nan)
    counts = np.zeros(grid.size, np.int64)
    flat = np.full(D, 1.0 / D)
    nonmono, sparse = [], []
    for g, L in iter_window_products(seqs, grid, N, probe):
        counts[g] = L.shape[0]
        if counts[g] < max(1, min_realizations):
            sparse.append(g)
            if counts[g] == 0:
                continue
        P, tv = _fixed_point(L, flat, iterations)
        table[g] = P
        tail = tv[burn_in:]
        if tail.size > 1 and np.any(np.diff(tail) > 1e-12):
            nonmono.append(g)
    if sparse:
        log.info("%d grid points have fewer than %d realizations", len(sparse), min_realizations)
    return DistributionTimeline(grid, table, counts, nonmono, sparse)


@dataclass(frozen=True)
class FockSelectionEvent:
    sequence_id: int
    t0: float
    n0: int
    posterior_peak: float


def select_fock_events(timelines, threshold: float = 0.7, dedup_window: float = 0.010,
                       rearm: bool = True):
    """Selection origins where one photon number's posterior exceeds ``threshold``.

    The first detection of every stretch above threshold emits an event.
    Events for the same photon number of the same sequence closer than
    ``dedup_window`` to the previously emitted one are suppressed.  With
    ``rearm`` a long stretch above threshold emits a new origin each time
    ``dedup_window`` has elapsed; without it only upward crossings count.
    """
    if not 0.5 < threshold < 1:
        raise ValueError("threshold must lie in (0.5, 1)")
    events = []
    for tl in timelines:
        if not len(tl):
            continue
        nmax, pmax = tl.peak()
        above = pmax > threshold
        if rearm:
            candidate = above
        else:
            prev_above = np.concatenate([[False], above[:-1]])
            prev_n = np.concatenate([[-1], nmax[:-1]])
            candidate = above & ~(prev_above & (prev_n == nmax))
        last = {}
        for i in np.flatnonzero(candidate):
            n0, t = int(nmax[i]), float(tl.times[i])
            if n0 in last and t - last[n0] < dedup_window:
                continue
            last[n0] = t
            events.append(FockSelectionEvent(int(tl.sequence_id), t, n0, float(pmax[i])))
    return events


class FockEnsembles(dict):
    """``n0 -> list of re-timed SequenceRecord views``; ``dropped`` counts
    events whose horizon held no detection."""

    dropped: int = 0


def build_fock_ensembles(seqs, events, horizon: float = 0.400) -> FockEnsembles:
    """Detections strictly after each selection time and at most ``horizon``
    later, as views re-timed so that the selection time is 0."""
    by_id = {s.id: s for s in seqs}
    out = FockEnsembles()
    dropped = 0
    view_id = 0
    for ev in events:
        try:
            seq = by_id[ev.sequence_id]
        except KeyError:
            raise ValueError(f"event references unknown sequence {ev.sequence_id}") from None
        lo = int(np.searchsorted(seq.times, ev.t0, side="right"))
        hi = int(np.searchsorted(seq.times, ev.t0 + horizon, side="right"))
        if hi <= lo:
            dropped += 1
            continue
        dur = horizon if seq.duration is None else min(horizon, seq.duration - ev.t0)
        view = SequenceView(view_id, seq, ev.t0, lo, hi, duration=dur,
                            meta={"source": seq.id, "t0": ev.t0, "n0": ev.n0})
        view_id += 1
        out.setdefault(ev.n0, []).append(view)
    out.dropped = dropped
    if dropped:
        warnings.warn(f"dropped {dropped} selection events with an empty horizon", stacklevel=2)
    return out
