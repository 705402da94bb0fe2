import math

import numpy as np
import pytest
from scipy import stats

from fockdamp.numkernel import CavityParams, PhotonDistribution, build_generator
from fockdamp.trajsim import (
    DetectionEvent,
    JumpPath,
    ProbeModel,
    SequenceRecord,
    sample_detections,
    sample_jump_path,
    sequence_rng,
    synthesize_run,
)


class TestJumpPath:
    def test_states_and_lookup(self):
        p = JumpPath(2, ((0.1, 1), (0.3, 2)))
        assert list(p.states()) == [2, 1, 2]
        assert list(p.n_at([0.0, 0.1, 0.2, 0.3, 1.0])) == [2, 1, 1, 2, 2]

    @pytest.mark.parametrize("events", [((0.2, 1), (0.1, 0)), ((0.1, 3),)])
    def test_invalid(self, events):
        with pytest.raises(ValueError):
            JumpPath(1, events)


class TestProbeModel:
    def test_default_probe(self):
        p = ProbeModel()
        assert p.phase_per_photon[2] == pytest.approx(math.pi / 2)
        assert p.phase_settings == (-1.74, -0.87, 0.0, 0.54)
        assert p.mean_interval == 0.24e-3 and p.n_max == 7

    @pytest.mark.parametrize("kw", [dict(A=0.5, B=0.6), dict(mean_interval=0.0),
                                    dict(phase_settings=()), dict(arrival_mode="burst"),
                                    dict(schedule="shuffle")])
    def test_invariants(self, kw):
        with pytest.raises(ValueError):
            ProbeModel(**kw)

    def test_table_normalized(self):
        t = ProbeModel().likelihood_table()
        assert t.shape == (4, 2, 8)
        assert np.array_equal(t.sum(axis=1), np.ones((4, 8)))


class TestJumpSampling:
    def test_vacuum_absorbing(self):
        K = build_generator(CavityParams(1.0, 0.0))
        assert sample_jump_path(K, 0, 100.0, seed=1).events == ()

    def test_single_photon_first_jump_time(self):
        K = build_generator(CavityParams(1 / 0.130, 0.0))
        rng = np.random.default_rng(3)
        t = np.array([sample_jump_path(K, 1, 10.0, rng).events[0][0] for _ in range(10_000)])
        se = t.std(ddof=1) / math.sqrt(t.size)
        assert abs(t.mean() - 0.130) < 3 * se

    def test_exit_rate_from_top_state(self, planted_K):
        rng = np.random.default_rng(4)
        dwell = np.array([sample_jump_path(planted_K, 7, 10.0, rng).events[0][0]
                          for _ in range(10_000)])
        rate = dwell.size / dwell.sum()
        assert abs(rate - (-planted_K[7, 7])) < 3 * rate / math.sqrt(dwell.size)

    def test_branching_ratio(self, planted_K):
        rng = np.random.default_rng(5)
        ups = np.array([sample_jump_path(planted_K, 3, 10.0, rng).events[0][1] == 4
                        for _ in range(10_000)])
        p = planted_K[4, 3] / -planted_K[3, 3]
        assert abs(ups.mean() - p) < 3 * math.sqrt(p * (1 - p) / ups.size)

    def test_initial_distribution(self, planted_K):
        rng = np.random.default_rng(6)
        n = [sample_jump_path(planted_K, PhotonDistribution.delta(5), 1e-6, rng).initial_n
             for _ in range(20)]
        assert set(n) == {5}

    def test_rejects_non_birth_death(self):
        K = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with pytest.raises(ValueError, match="birth-death"):
            sample_jump_path(K, 0, 100.0, seed=0)

    def test_deterministic(self, planted_K):
        a = sample_jump_path(planted_K, 4, 1.0, seed=11)
        b = sample_jump_path(planted_K, 4, 1.0, seed=11)
        assert a == b


class TestDetections:
    def test_uninformative_probe_is_fair(self):
        probe = ProbeModel(A=0.0, B=0.0)
        ev = sample_detections(JumpPath(3), probe, 5.0, seed=1)
        j = np.array([e.outcome for e in ev])
        assert abs(j.mean() - 0.5) < 3 * 0.5 / math.sqrt(j.size)

    def test_vacuum_fraction_of_e(self):
        probe = ProbeModel(phase_settings=(0.0,))
        ev = sample_detections(JumpPath(0), probe, 10.0, seed=2)
        j0 = np.mean([e.outcome == 0 for e in ev])
        assert abs(j0 - 0.80) < 3 * math.sqrt(0.16 / len(ev))

    def test_expected_count_during_damping_time(self):
        probe = ProbeModel()
        counts = [len(sample_detections(JumpPath(0), probe, 0.130, seed=s)) for s in range(400)]
        assert 0.130 / 0.24e-3 == pytest.approx(541.7, abs=0.1)
        assert abs(np.mean(counts) - 541.7) < 3 * math.sqrt(541.7 / len(counts))

    def test_periodic_and_round_robin(self):
        probe = ProbeModel(arrival_mode="periodic")
        ev = sample_detections(JumpPath(0), probe, 0.01, seed=0)
        assert len(ev) == 41
        assert [e.phase_index for e in ev[:6]] == [0, 1, 2, 3, 0, 1]
        assert np.allclose(np.diff([e.time for e in ev]), 0.24e-3)

    def test_random_schedule_uses_all_settings(self):
        probe = ProbeModel(schedule="random")
        k = [e.phase_index for e in sample_detections(JumpPath(0), probe, 0.5, seed=0)]
        assert set(k) == {0, 1, 2, 3}

    def test_outcome_frequencies_match_likelihood(self, probe):
        table = probe.likelihood_table()
        for n in (0, 3, 6):
            ev = sample_detections(JumpPath(n), probe, 20.0, seed=n)
            k = np.array([e.phase_index for e in ev])
            j = np.array([e.outcome for e in ev])
            for kk in range(4):
                sel = j[k == kk]
                p = table[kk, 0, n]
                assert abs(np.mean(sel == 0) - p) < 3.5 * math.sqrt(p * (1 - p) / sel.size)

    def test_outcomes_follow_the_path(self):
        probe = ProbeModel(A=0.0, B=1.0, phase_settings=(0.0,))
        path = JumpPath(4, ((0.05, 3),))
        ev = sample_detections(path, probe, 0.1, seed=0)
        # Phi(4) = pi -> always g; Phi(3) = 3pi/4 -> mostly g but not always
        assert all(e.outcome == 1 for e in ev if e.time < 0.05)


class TestSequenceRecord:
    def test_decreasing_times_named(self):
        with pytest.raises(ValueError, match="detection 2"):
            SequenceRecord(5, [0.1, 0.2, 0.15], [0, 1, 2], [0, 1, 0])

    def test_from_events_round_trip(self):
        ev = [DetectionEvent(0.1, 0, 1), DetectionEvent(0.2, 1, 0)]
        s = SequenceRecord.from_events(3, ev)
        assert s.detections == ev and len(s) == 2


class TestSynthesizeRun:
    def test_atoms_per_sequence(self, planted_params, probe):
        seqs = synthesize_run(planted_params, probe, 4.4, 0.650, 50, seed=1)
        mean = np.mean([len(s) for s in seqs])
        assert abs(mean - 0.650 / 0.24e-3) < 3 * math.sqrt(2708 / 50)
        assert 2600 < mean < 2800

    def test_zero_mean_starts_in_vacuum(self, planted_params, probe):
        seqs = synthesize_run(planted_params, probe, 0.0, 0.01, 50, seed=2)
        assert all(s.truth.initial_n == 0 for s in seqs)

    def test_initial_histogram_chi2(self, planted_params, probe):
        seqs = synthesize_run(planted_params, probe, 4.4, 1e-4, 2000, seed=3)
        obs = np.bincount([s.truth.initial_n for s in seqs], minlength=8)
        exp = PhotonDistribution.poisson(4.4).probs * 2000
        # merge the sparse lowest bin into its neighbour
        obs = np.concatenate([[obs[0] + obs[1]], obs[2:]])
        exp = np.concatenate([[exp[0] + exp[1]], exp[2:]])
        assert stats.chisquare(obs, exp).pvalue > 0.01

    def test_reproducible_and_order_independent(self, planted_params, probe):
        a = synthesize_run(planted_params, probe, 4.4, 0.05, 6, seed=9)
        b = synthesize_run(planted_params, probe, 4.4, 0.05, 6, seed=9)
        c = synthesize_run(planted_params, probe, 4.4, 0.05, 3, seed=9, first_id=3)
        assert a == b
        assert a[3:] == c

    def test_sequence_rng_streams_differ(self):
        a = sequence_rng(1, 0).random(4)
        b = sequence_rng(1, 1).random(4)
        c = sequence_rng(1, 0, stream=1).random(4)
        assert not np.array_equal(a, b) and not np.array_equal(a, c)

    def test_probe_range_must_match(self, planted_params):
        with pytest.raises(ValueError):
            synthesize_run(planted_params, ProbeModel.linear(5), 1.0, 0.01, 1, seed=0)
