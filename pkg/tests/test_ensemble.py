import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fockdamp.bayesfilter import PosteriorTimeline
from fockdamp.ensemble import (
    DistributionTimeline,
    FockSelectionEvent,
    InsufficientAtomsError,
    ReconstructionError,
    SequenceView,
    build_fock_ensembles,
    default_grid,
    fixed_point_reconstruct,
    iter_window_products,
    reconstruct_timeline,
    select_fock_events,
    window_products,
)
from fockdamp.numkernel import PhotonDistribution
from fockdamp.trajsim import JumpPath, SequenceRecord, sample_detections


def static_sequences(ns, probe, duration=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return [SequenceRecord.from_events(i, sample_detections(JumpPath(int(n)), probe, duration, rng),
                                       truth=JumpPath(int(n)), duration=duration)
            for i, n in enumerate(ns)]


def transform(P, L):
    """One step of the ensemble Bayes map, written directly."""
    Pi = np.exp(L - L.max(axis=1, keepdims=True))
    post = P * Pi
    return (post / post.sum(axis=1, keepdims=True)).mean(axis=0)


class TestWindowProducts:
    def test_empty_window(self, small_run, probe):
        w = window_products(small_run[0], 0.1, 0, probe)
        assert np.all(w.log_products == 0) and w.atom_count == 0

    def test_single_atom(self, small_run, probe):
        seq = small_run[0]
        i = int(np.searchsorted(seq.times, 0.1))
        w = window_products(seq, 0.1, 1, probe)
        want = np.log(probe.likelihood_table()[seq.phase_index[i], seq.outcome[i]])
        assert np.allclose(w.log_products, want, atol=1e-15)

    def test_hand_product(self, small_run, probe):
        seq = small_run[2]
        i = int(np.searchsorted(seq.times, 0.05))
        tab = probe.likelihood_table()
        want = np.prod([tab[seq.phase_index[a], seq.outcome[a]] for a in range(i, i + 25)], axis=0)
        assert np.allclose(np.exp(window_products(seq, 0.05, 25, probe).log_products), want,
                           rtol=1e-12)

    def test_typical_span(self, probe):
        seqs = static_sequences([0] * 40, probe, duration=0.3)
        spans = [window_products(s, t, 25, probe).duration for s in seqs for t in (0.0, 0.1, 0.2)]
        assert np.mean(spans) == pytest.approx(24 * 0.24e-3, rel=0.05)

    def test_insufficient_atoms(self, probe):
        seq = SequenceRecord(0, [0.1, 0.2], [0, 1], [0, 0])
        with pytest.raises(InsufficientAtomsError):
            window_products(seq, 0.0, 3, probe)

    def test_iterator_matches_single_windows(self, small_run, probe):
        grid = default_grid(0.6, 0.05)
        for g, L in iter_window_products(small_run, grid, 25, probe, max_bytes=2048):
            want = [window_products(s, grid[g], 25, probe).log_products for s in small_run
                    if np.searchsorted(s.times, grid[g]) + 25 <= len(s)]
            assert np.allclose(L, np.array(want).reshape(L.shape), atol=1e-10)


class TestFixedPoint:
    def test_uninformative_windows_keep_seed(self):
        seed = PhotonDistribution.poisson(2.0)
        P = fixed_point_reconstruct(np.zeros((30, 8)), iterations=20, seed_dist=seed)
        assert np.allclose(P.probs, seed.probs, atol=1e-15)

    def test_delta_recovered(self, probe):
        seqs = static_sequences([3] * 300, probe)
        L = np.vstack([window_products(s, 0.0, 25, probe).log_products for s in seqs])
        P = fixed_point_reconstruct(L, 20).probs
        assert 0.5 * np.abs(P - PhotonDistribution.delta(3).probs).sum() < 0.01

    def test_one_step_matches_direct_transform(self, small_run, probe):
        L = np.vstack([window_products(s, 0.05, 25, probe).log_products for s in small_run])
        flat = np.full(8, 1 / 8)
        assert np.allclose(fixed_point_reconstruct(L, 1).probs, transform(flat, L), atol=1e-13)
        P5 = flat
        for _ in range(5):
            P5 = transform(P5, L)
        assert np.allclose(fixed_point_reconstruct(L, 5).probs, P5, atol=1e-12)

    @settings(max_examples=25)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_converges_to_fixed_point(self, seed):
        rng = np.random.default_rng(seed)
        L = rng.normal(size=(40, 8)) * 2
        P = fixed_point_reconstruct(L, 3000).probs
        assert np.abs(transform(P, L) - P).max() < 1e-6
        assert P.sum() == pytest.approx(1.0, abs=1e-12)

    def test_vanishing_normalizer(self):
        L = np.zeros((2, 8))
        L[1] = -np.inf  # a window no photon number can produce
        with np.errstate(invalid="ignore"), pytest.raises(ReconstructionError, match="window 1"):
            fixed_point_reconstruct(L, 2)
        with pytest.raises(ValueError):
            fixed_point_reconstruct([], 2)


class TestTimeline:
    def test_vacuum_stays_vacuum(self, probe):
        seqs = static_sequences([0] * 100, probe)
        tl = reconstruct_timeline(seqs, default_grid(0.04, 0.01), probe=probe)
        # twenty flat-seeded iterations leave a small residual spread
        assert np.all(tl.table[:, 0] > 0.95)
        assert np.all(tl.table.argmax(axis=1) == 0)
        assert np.all(tl.counts == 100)

    def test_sparse_and_empty_points(self, probe):
        seqs = static_sequences([1] * 5, probe, duration=0.02)
        tl = reconstruct_timeline(seqs, [0.0, 0.019, 0.5], probe=probe, min_realizations=10)
        assert tl.sparse == [0, 1, 2]
        assert np.all(np.isnan(tl.table[2])) and tl.counts[2] == 0
        assert tl.valid(1).tolist() == [True, False, False]

    def test_views_match_records(self, small_run, probe):
        src = small_run[0]
        lo = int(np.searchsorted(src.times, 0.1, side="right"))
        v = SequenceView(0, src, 0.1, lo, len(src))
        a = reconstruct_timeline([v], [0.0, 0.05], probe=probe)
        b = reconstruct_timeline([v.to_record()], [0.0, 0.05], probe=probe)
        assert np.allclose(a.table, b.table, atol=1e-13)

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            DistributionTimeline([0.0, 0.0], np.zeros((2, 8)), [1, 1])
        assert default_grid(0.01, 2e-3).size == 6


def timeline(times, peaks, n=3, sid=0):
    post = np.zeros((len(times), 8))
    for i, p in enumerate(peaks):
        post[i] = (1 - p) / 7
        post[i, n] = p
    return PosteriorTimeline(sid, np.asarray(times, float), post, np.full(8, 1 / 8))


class TestSelection:
    def test_single_crossing(self):
        ev = select_fock_events([timeline([0.01, 0.02, 0.03], [0.5, 0.75, 0.5])])
        assert ev == [FockSelectionEvent(0, 0.02, 3, 0.75)]

    def test_threshold_is_strict(self):
        assert select_fock_events([timeline([0.01], [0.7])]) == []

    def test_dedup_and_rearm(self):
        times = np.arange(1, 41) * 0.7e-3
        tl = timeline(times, [0.9] * 40)
        ev = select_fock_events([tl])
        assert [round(e.t0, 6) for e in ev] == [0.0007, 0.0112, 0.0217]
        assert len(select_fock_events([tl], rearm=False)) == 1

    def test_recrossing_inside_window_suppressed(self):
        tl = timeline([0.001, 0.002, 0.005, 0.020], [0.9, 0.4, 0.9, 0.9])
        got = [e.t0 for e in select_fock_events([tl], rearm=False)]
        assert got == [0.001]

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            select_fock_events([], threshold=0.4)

    @given(peaks=st.lists(st.floats(0.2, 1.0), min_size=1, max_size=60))
    def test_events_above_threshold_and_spaced(self, peaks):
        times = np.arange(1, len(peaks) + 1) * 7e-4
        ev = select_fock_events([timeline(times, peaks)])
        assert all(e.posterior_peak > 0.7 for e in ev)
        t = [e.t0 for e in ev]
        assert all(b - a >= 0.010 - 1e-12 for a, b in zip(t, t[1:]))


class TestFockEnsembles:
    def test_views_start_after_origin(self, small_run):
        seq = small_run[0]
        t0 = float(seq.times[50])
        ens = build_fock_ensembles(small_run, [FockSelectionEvent(seq.id, t0, 4, 0.8)], horizon=0.1)
        (v,) = ens[4]
        assert v.times[0] > 0 and v.times[-1] <= 0.1
        assert len(v) == int(np.sum((seq.times > t0) & (seq.times <= t0 + 0.1)))
        assert v.meta["n0"] == 4

    def test_empty_inputs(self, small_run):
        assert build_fock_ensembles(small_run, []) == {}
        with pytest.raises(ValueError):
            build_fock_ensembles([], [FockSelectionEvent(9, 0.1, 0, 0.8)])

    def test_empty_horizon_dropped(self, small_run):
        seq = small_run[0]
        ev = FockSelectionEvent(seq.id, float(seq.times[-1]), 2, 0.8)
        with pytest.warns(UserWarning):
            ens = build_fock_ensembles(small_run, [ev])
        assert ens.dropped == 1 and ens == {}
