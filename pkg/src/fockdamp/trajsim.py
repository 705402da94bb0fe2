"""Synthetic field realizations: photon-number jump paths and QND atom records."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numkernel import (
    CavityParams,
    PhotonDistribution,
    _as_rates,
    build_generator,
)

__all__ = [
    "DetectionEvent",
    "JumpPath",
    "ProbeModel",
    "SequenceRecord",
    "DEFAULT_PHASE_SETTINGS",
    "sample_detections",
    "sample_jump_path",
    "sequence_rng",
    "synthesize_run",
]

DEFAULT_PHASE_SETTINGS = (-1.74, -0.87, 0.0, 0.54)


@dataclass(frozen=True)
class JumpPath:
    initial_n: int
    events: tuple = ()  # ((time_s, new_n), ...)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple((float(t), int(n)) for t, n in self.events))
        prev_t, prev_n = -math.inf, self.initial_n
        for t, n in self.events:
            if not t > prev_t:
                raise ValueError("jump times must be strictly increasing")
            if abs(n - prev_n) != 1:
                raise ValueError("each jump must change the photon number by one")
            prev_t, prev_n = t, n

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.events], dtype=float)

    def states(self) -> np.ndarray:
        """Photon number on each constant segment (length ``len(events)+1``)."""
        return np.array([self.initial_n] + [n for _, n in self.events], dtype=np.int64)

    def n_at(self, t) -> np.ndarray:
        """Photon number at time(s) ``t``; jumps take effect at their own time."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return self.states()[idx]


@dataclass(frozen=True)
class ProbeModel:
    """Effective single-atom likelihood of the QND photon counter.

    ``p(j, phi_k | n) = (1 + (-1)**j * (A + B cos(phase_per_photon[n] + phi_k))) / 2``
    """

    phase_per_photon: tuple = tuple(n * math.pi / 4 for n in range(8))
    A: float = -0.1
    B: float = 0.7
    phase_settings: tuple = DEFAULT_PHASE_SETTINGS
    mean_interval: float = 0.24e-3
    arrival_mode: str = "poisson"
    schedule: str = "round_robin"

    def __post_init__(self):
        object.__setattr__(self, "phase_per_photon", tuple(float(x) for x in self.phase_per_photon))
        object.__setattr__(self, "phase_settings", tuple(float(x) for x in self.phase_settings))
        if abs(self.A) + abs(self.B) > 1 + 1e-12:
            raise ValueError("|A| + |B| must not exceed 1")
        if not self.mean_interval > 0:
            raise ValueError("mean_interval must be positive")
        if not self.phase_settings:
            raise ValueError("phase_settings must be nonempty")
        if len(self.phase_per_photon) < 2:
            raise ValueError("phase_per_photon needs at least two photon numbers")
        if self.arrival_mode not in ("poisson", "periodic"):
            raise ValueError(f"unknown arrival_mode {self.arrival_mode!r}")
        if self.schedule not in ("round_robin", "random"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def linear(cls, n_max: int = 7, phase0: float = math.pi / 4, **kw) -> "ProbeModel":
        return cls(phase_per_photon=tuple(n * phase0 for n in range(n_max + 1)), **kw)

    @property
    def n_max(self) -> int:
        return len(self.phase_per_photon) - 1

    def likelihood_table(self) -> np.ndarray:
        """``table[k, j, n]`` of single-atom likelihoods."""
        phi = np.asarray(self.phase_settings)[:, None]
        s = self.A + self.B * np.cos(np.asarray(self.phase_per_photon)[None, :] + phi)
        return np.stack([0.5 * (1 + s), 0.5 * (1 - s)], axis=1)


@dataclass(frozen=True)
class DetectionEvent:
    time: float
    phase_index: int
    outcome: int  # 0 for e, 1 for g


@dataclass(eq=False)
class SequenceRecord:
    """One field realization: detection arrays plus optional ground truth.

    Detections are stored column-wise (``times``, ``phase_index``,
    ``outcome``) because sequences hold thousands of atoms.
    """

    id: int
    times: np.ndarray
    phase_index: np.ndarray
    outcome: np.ndarray
    truth: JumpPath | None = None
    duration: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.phase_index = np.asarray(self.phase_index, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.int64)
        if not (self.times.shape == self.phase_index.shape == self.outcome.shape):
            raise ValueError("detection columns must have equal length")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            bad = int(np.argmax(np.diff(self.times) <= 0)) + 1
            raise ValueError(f"sequence {self.id}: detection {bad} is not after its predecessor")
        if np.any((self.outcome != 0) & (self.outcome != 1)):
            raise ValueError(f"sequence {self.id}: outcomes must be 0 or 1")

    @classmethod
    def from_events(cls, id: int, events, truth=None, duration=None) -> "SequenceRecord":
        events = list(events)
        return cls(
            id,
            [e.time for e in events],
            [e.phase_index for e in events],
            [e.outcome for e in events],
            truth=truth,
            duration=duration,
        )

    def __len__(self):
        return self.times.size

    @property
    def detections(self) -> list[DetectionEvent]:
        return [
            DetectionEvent(float(t), int(k), int(j))
            for t, k, j in zip(self.times, self.phase_index, self.outcome)
        ]

    def truth_n(self) -> np.ndarray | None:
        if self.truth is None:
            return None
        return self.truth.n_at(self.times)

    def __eq__(self, other):
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.phase_index, other.phase_index)
            and np.array_equal(self.outcome, other.outcome)
            and self.truth == other.truth
            and self.duration == other.duration
        )


def sequence_rng(seed: int, sequence_id: int, stream: int = 0) -> np.random.Generator:
    """Generator for one sequence, derived from the master seed.

    Independent of how many other sequences are drawn or in which order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(sequence_id), int(stream)))
    return np.random.Generator(np.random.PCG64(ss))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_jump_path(K, initial, duration: float, seed) -> JumpPath:
    """Exact continuous-time Markov chain path on ``[0, duration]``."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    rates = _as_rates(K)
    rng = _rng(seed)
    D = rates.shape[0]
    if isinstance(initial, (PhotonDistribution, np.ndarray, list, tuple)):
        p = np.asarray(initial.probs if isinstance(initial, PhotonDistribution) else initial, float)
        n = int(rng.choice(D, p=p / p.sum()))
    else:
        n = int(initial)
    if not 0 <= n < D:
        raise ValueError(f"initial photon number {n} outside 0..{D - 1}")
    start = n
    t = 0.0
    events = []
    while True:
        exit_rate = -rates[n, n]
        if exit_rate <= 0:
            break
        t += rng.exponential(1.0 / exit_rate)
        if t >= duration:
            break
        down = rates[n - 1, n] if n > 0 else 0.0
        up = rates[n + 1, n] if n < D - 1 else 0.0
        total = down + up
        if abs(total - exit_rate) > 1e-9 * exit_rate:
            raise ValueError("sample_jump_path requires a nearest-neighbour (birth-death) generator")
        n = n - 1 if rng.random() * total < down else n + 1
        events.append((t, n))
    return JumpPath(start, tuple(events))


def _arrival_times(probe: ProbeModel, duration: float, rng) -> np.ndarray:
    if probe.arrival_mode == "periodic":
        count = int(math.floor(duration / probe.mean_interval - 1e-12))
        return probe.mean_interval * np.arange(1, count + 1)
    chunk = int(duration / probe.mean_interval * 1.1) + 64
    times = np.cumsum(rng.exponential(probe.mean_interval, size=chunk))
    while times[-1] < duration:
        more = times[-1] + np.cumsum(rng.exponential(probe.mean_interval, size=chunk))
        times = np.concatenate([times, more])
    times = times[times < duration]
    # exponential draws of exactly zero would tie two atoms
    keep = np.concatenate([[True], np.diff(times) > 0]) if times.size else np.zeros(0, bool)
    return times[keep]


def _detection_arrays(path: JumpPath, probe: ProbeModel, duration: float, rng):
    times = _arrival_times(probe, duration, rng)
    nk = len(probe.phase_settings)
    if probe.schedule == "random":
        phase_idx = rng.integers(0, nk, size=times.size)
    else:
        phase_idx = np.arange(times.size) % nk
    n = path.n_at(times)
    if n.size and n.max() > probe.n_max:
        raise ValueError("path visits a photon number outside the probe's phase table")
    p0 = probe.likelihood_table()[phase_idx, 0, n]
    outcome = (rng.random(times.size) >= p0).astype(np.int64)
    return times, phase_idx.astype(np.int64), outcome


def sample_detections(path: JumpPath, probe: ProbeModel, duration: float, seed) -> list[DetectionEvent]:
    """Atom arrivals on ``(0, duration)`` with outcomes drawn given the path."""
    times, phase_idx, outcome = _detection_arrays(path, probe, duration, _rng(seed))
    return [DetectionEvent(float(t), int(k), int(j)) for t, k, j in zip(times, phase_idx, outcome)]


def synthesize_run(
    params: CavityParams,
    probe: ProbeModel,
    initial_mean: float,
    duration: float,
    count: int,
    seed: int,
    first_id: int = 0,
) -> list[SequenceRecord]:
    """``count`` independent sequences starting from a truncated Poisson field.

    Sequence ``i`` draws all of its randomness from ``sequence_rng(seed, i)``.
    """
    if initial_mean < 0:
        raise ValueError("initial_mean must be non-negative")
    if probe.n_max != params.n_max:
        raise ValueError("probe phase table and cavity truncation disagree on n_max")
    K = build_generator(params)
    P0 = PhotonDistribution.poisson(initial_mean, params.n_max).probs
    out = []
    for sid in range(first_id, first_id + count):
        rng = sequence_rng(seed, sid)
        n0 = int(rng.choice(P0.size, p=P0))
        path = sample_jump_path(K, n0, duration, rng)
        times, phase_idx, outcome = _detection_arrays(path, probe, duration, rng)
        out.append(SequenceRecord(sid, times, phase_idx, outcome, truth=path, duration=duration))
    return out

