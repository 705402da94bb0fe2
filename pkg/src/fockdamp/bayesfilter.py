"""Per-realization inference: Bayes updates, filtering, transverse spin samples."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _core
from .numkernel import PhotonDistribution, Propagator, _as_probs
from .trajsim import DetectionEvent, ProbeModel, SequenceRecord

__all__ = [
    "EvidenceError",
    "PosteriorTimeline",
    "SpinSample",
    "SpinSamples",
    "bayes_update",
    "filter_sequence",
    "likelihood",
    "spin_samples",
]

MIN_EVIDENCE = 1e-300


class EvidenceError(ArithmeticError):
    """The data assign (numerically) zero probability to the current belief."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def likelihood(j: int, phase_index: int, n: int, probe: ProbeModel) -> float:
    """Probability of outcome ``j`` for an atom probed at setting ``phase_index``
    when the cavity holds ``n`` photons."""
    if j not in (0, 1):
        raise ValueError("outcome must be 0 or 1")
    s = probe.A + probe.B * math.cos(probe.phase_per_photon[n] + probe.phase_settings[phase_index])
    p0 = 0.5 * (1.0 + s)
    return p0 if j == 0 else 1.0 - p0


def bayes_update(P, event: DetectionEvent, probe: ProbeModel) -> PhotonDistribution:
    p = _as_probs(P)
    lik = probe.likelihood_table()[event.phase_index, event.outcome]
    post = p * lik
    z = post.sum()
    if not z >= MIN_EVIDENCE:
        raise EvidenceError(f"evidence {z:.3e} below {MIN_EVIDENCE:g}")
    return PhotonDistribution(post / z)


@dataclass(eq=False)
class PosteriorTimeline:
    """Posterior photon-number law right after each detection of one sequence.

    Values between detections are obtained on demand by propagating the
    preceding posterior with the generator used for filtering.
    """

    sequence_id: int
    times: np.ndarray
    posteriors: np.ndarray
    prior: np.ndarray
    t_start: float = 0.0
    K: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.times.size

    def __iter__(self):
        for t, p in zip(self.times, self.posteriors):
            yield float(t), PhotonDistribution(p)

    def at(self, t: float) -> PhotonDistribution:
        """Best estimate at time ``t`` (after any detection exactly at ``t``)."""
        if t < self.t_start:
            raise ValueError("time precedes the start of the timeline")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        if i < 0:
            p, t0 = self.prior, self.t_start
        else:
            p, t0 = self.posteriors[i], self.times[i]
        if self.K is None or t == t0:
            return PhotonDistribution(p)
        q = Propagator(self.K)(p, t - t0)
        q = np.clip(q, 0.0, None)
        return PhotonDistribution(q / q.sum())

    def peak(self) -> tuple[np.ndarray, np.ndarray]:
        """``(argmax_n, max_n)`` of each posterior."""
        if not len(self):
            return np.zeros(0, np.int64), np.zeros(0)
        return self.posteriors.argmax(axis=1), self.posteriors.max(axis=1)


def filter_sequence(
    seq: SequenceRecord,
    prior,
    K,
    probe: ProbeModel,
    t_start: float = 0.0,
) -> PosteriorTimeline:
    """Bayesian filter along one sequence: propagate with ``K`` between atoms,
    condition on each detected outcome."""
    p0 = np.array(_as_probs(prior), dtype=float)
    prop = Propagator(K)
    if not prop.is_spectral:
        raise ValueError("filtering needs a diagonalizable generator with real spectrum")
    table = np.ascontiguousarray(probe.likelihood_table())
    if p0.size != table.shape[2]:
        raise ValueError("prior size does not match the probe's photon-number range")
    if seq.times.size and seq.times[0] < t_start:
        raise ValueError("detections precede t_start")
    post, fail = _core.filter_forward(
        np.ascontiguousarray(seq.times),
        np.ascontiguousarray(seq.phase_index, dtype=np.int64),
        np.ascontiguousarray(seq.outcome, dtype=np.int64),
        float(t_start),
        p0,
        np.ascontiguousarray(prop.eigenvalues),
        prop.right,
        prop.left,
        table,
    )
    if fail >= 0:
        raise EvidenceError(
            f"sequence {seq.id}: evidence vanished at detection {fail} "
            f"(t={seq.times[fail]:.6f} s)", index=fail)
    return PosteriorTimeline(seq.id, seq.times.copy(), post, p0, float(t_start), np.array(prop.K))


@dataclass(frozen=True)
class SpinSample:
    x: float
    y: float
    window_start: float
    atom_count: int


@dataclass(eq=False)
class SpinSamples:
    """Columnar table of spin samples; iterating yields :class:`SpinSample`."""

    x: np.ndarray
    y: np.ndarray
    window_start: np.ndarray
    atom_count: np.ndarray
    sequence_id: np.ndarray
    first_atom: np.ndarray
    flagged: list = field(default_factory=list)  # (sequence_id, first_atom) lacking a phase

    def __len__(self):
        return self.x.size

    def __iter__(self):
        for x, y, t, c in zip(self.x, self.y, self.window_start, self.atom_count):
            yield SpinSample(float(x), float(y), float(t), int(c))

    @property
    def radius(self) -> np.ndarray:
        return np.hypot(self.x, self.y)

    @property
    def angle(self) -> np.ndarray:
        return np.arctan2(self.y, self.x)

    @classmethod
    def concatenate(cls, parts) -> "SpinSamples":
        parts = list(parts)
        if not parts:
            return cls.empty()
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        flagged = [f for p in parts for f in p.flagged]
        return cls(cat("x"), cat("y"), cat("window_start"), cat("atom_count"),
                   cat("sequence_id"), cat("first_atom"), flagged)

    @classmethod
    def empty(cls) -> "SpinSamples":
        z = np.zeros(0)
        zi = np.zeros(0, np.int64)
        return cls(z, z.copy(), z.copy(), zi, zi.copy(), zi.copy())


def spin_design(probe: ProbeModel) -> np.ndarray:
    """Least-squares inverse mapping per-setting mean signals to ``(X, Y)``."""
    phi = np.asarray(probe.phase_settings)
    G = np.column_stack([np.cos(phi), -np.sin(phi)])
    return np.linalg.pinv(G)


def spin_samples(
    seq: SequenceRecord,
    probe: ProbeModel,
    window_atoms: int,
    stride: int | None = None,
    max_atoms: int | None = None,
) -> SpinSamples:
    """Transverse spin ``(X, Y) = B (cos Phi(n), sin Phi(n))`` from windows of
    consecutive atoms.

    ``stride`` defaults to ``window_atoms`` (non-overlapping windows).  Only
    the first ``max_atoms`` detections are used when given.  Windows in which
    some phase setting is absent are skipped and listed in ``flagged``.
    """
    nk = len(probe.phase_settings)
    if window_atoms < nk:
        raise ValueError("window_atoms must be at least the number of phase settings")
    stride = window_atoms if stride is None else int(stride)
    if stride < 1:
        raise ValueError("stride must be positive")
    n = len(seq) if max_atoms is None else min(len(seq), int(max_atoms))
    if n < window_atoms:
        return SpinSamples.empty()
    starts = np.arange(0, n - window_atoms + 1, stride)
    ends = starts + window_atoms
    signed = 1.0 - 2.0 * seq.outcome[:n]
    onehot = seq.phase_index[:n, None] == np.arange(nk)[None, :]
    csum = np.vstack([np.zeros(nk), np.cumsum(onehot * signed[:, None], axis=0)])
    ccnt = np.vstack([np.zeros(nk), np.cumsum(onehot, axis=0)])
    sums = csum[ends] - csum[starts]
    counts = ccnt[ends] - ccnt[starts]
    ok = np.all(counts > 0, axis=1)
    flagged = [(seq.id, int(s)) for s in starts[~ok]]
    s_k = sums[ok] / counts[ok]
    xy = (s_k - probe.A) @ spin_design(probe).T
    starts = starts[ok]
    return SpinSamples(
        xy[:, 0].copy(),
        xy[:, 1].copy(),
        seq.times[starts],
        np.full(starts.size, window_atoms, np.int64),
        np.full(starts.size, seq.id, np.int64),
        starts.astype(np.int64),
        flagged,
    )
