import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import vote_ensemble.core as core
from vote_ensemble.core import (
    EnsembleConfig,
    InvalidArgument,
    LearnerError,
    LossError,
    ModelKey,
    SampleBatch,
    VoteTally,
    epsilon_profile,
    epsilon_vote_phase2,
    retrieve_phase1,
    run_move,
    run_rove,
    select_epsilon,
    subsample_indices,
    subsample_matrix,
)
from vote_ensemble.problems import LpExample, lp_example_saa
from vote_ensemble.theory import exact_phat_enumeration


def constant(value):
    return lambda batch, rng: value


def rounded_mean(batch, rng):
    return int(np.floor(batch.items.mean()))


# ---------------------------------------------------------------------------
# Subsampling
# ---------------------------------------------------------------------------


class TestSubsampling:
    def test_full_subset(self):
        idx = subsample_indices(5, 5, np.random.default_rng(0))
        assert sorted(idx.tolist()) == [0, 1, 2, 3, 4]

    def test_single_item(self):
        assert subsample_indices(1, 1, np.random.default_rng(3)).tolist() == [0]

    def test_k_larger_than_n(self):
        with pytest.raises(InvalidArgument):
            subsample_indices(3, 4, np.random.default_rng(0))

    def test_pairs_uniform(self):
        # Reference: all C(6, 2) = 15 pairs, each with probability 1/15.
        reference = list(itertools.combinations(range(6), 2))
        rows = subsample_matrix(6, 2, 100_000, np.random.default_rng(11))
        freq = Counter(tuple(sorted(r)) for r in rows.tolist())
        assert set(freq) == set(reference)
        for pair in reference:
            assert abs(freq[pair] / 100_000 - 1 / 15) < 0.01

    def test_distinct_and_in_range(self):
        rows = subsample_matrix(50, 20, 200, np.random.default_rng(1))
        assert rows.min() >= 0 and rows.max() < 50
        assert all(len(set(r)) == 20 for r in rows.tolist())

    def test_consumes_fixed_number_of_draws(self):
        # Batched draws equal repeated single draws, and the stream lands at
        # the same position regardless of the data.
        a, b = np.random.default_rng(9), np.random.default_rng(9)
        batched = subsample_matrix(30, 7, 4, a)
        single = np.stack([subsample_indices(30, 7, b) for _ in range(4)])
        np.testing.assert_array_equal(batched, single)
        assert a.integers(1 << 30) == b.integers(1 << 30)


# ---------------------------------------------------------------------------
# Model keys
# ---------------------------------------------------------------------------


class TestModelKey:
    def test_same_model_same_bytes(self):
        assert ModelKey.of(np.array([1, 0, 1])) == ModelKey.of([1, 0, 1])
        assert ModelKey.of(0.25).data == ModelKey.of(np.float64(0.25)).data

    def test_negative_zero_normalised(self):
        assert ModelKey.of(-0.0) == ModelKey.of(0.0)

    def test_int_and_float_differ(self):
        assert ModelKey.of(1) != ModelKey.of(1.0)

    @given(st.lists(st.floats(allow_nan=False, width=64), min_size=2, max_size=2))
    def test_float_order_matches_numeric(self, pair):
        a, b = pair
        if a == b:
            assert ModelKey.of(a) == ModelKey.of(b)
        else:
            assert (ModelKey.of(a) < ModelKey.of(b)) == (a < b)

    @given(st.lists(st.integers(-(2**62), 2**62), min_size=1, max_size=6))
    def test_int_vector_order_is_lexicographic(self, values):
        other = list(values)
        other[-1] += 1
        assert ModelKey.of(np.array(values)) < ModelKey.of(np.array(other))

    @given(st.one_of(
        st.integers(-(2**62), 2**62),
        st.floats(allow_nan=False, width=64),
        st.lists(st.integers(0, 1), min_size=1, max_size=8).map(np.array),
        st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=5).map(np.array),
    ))
    def test_decode_round_trip(self, theta):
        key = ModelKey.of(theta)
        decoded = key.decode()
        np.testing.assert_array_equal(np.asarray(decoded), np.asarray(theta) + 0)
        assert ModelKey.of(decoded) == key

    def test_matrix_shape_survives(self):
        theta = np.arange(6).reshape(2, 3)
        assert ModelKey.of(theta).decode().shape == (2, 3)

    def test_str(self):
        assert str(ModelKey.of(1)) == "1"
        assert str(ModelKey.of(np.array([0, 1, 1]))) == "0;1;1"


class TestTally:
    def test_tie_break_smallest_key(self):
        tally = VoteTally({ModelKey.of(3): 4, ModelKey.of(1): 4, ModelKey.of(2): 1}, 9)
        assert tally.winner() == ModelKey.of(1)

    @given(st.dictionaries(st.integers(-50, 50), st.integers(0, 5), min_size=1))
    def test_winner_is_unique_smallest_among_maxima(self, raw):
        counts = {ModelKey.of(k): v for k, v in raw.items()}
        best = VoteTally(counts, sum(raw.values())).winner()
        top = max(raw.values())
        assert best == ModelKey.of(min(k for k, v in raw.items() if v == top))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class TestConfig:
    def test_move_bounds(self):
        EnsembleConfig(k=9).check_move(10)
        with pytest.raises(InvalidArgument):
            EnsembleConfig(k=10).check_move(10)
        with pytest.raises(InvalidArgument):
            EnsembleConfig(B=0).check_move(10)

    def test_rove_split_bounds(self):
        EnsembleConfig(k1=5, k2=5, split=True).check_rove(10)
        EnsembleConfig(k1=5, k2=5, split=True).check_rove(11)
        with pytest.raises(InvalidArgument):
            EnsembleConfig(k1=6, k2=5, split=True).check_rove(11)
        EnsembleConfig(k1=9, k2=9).check_rove(10)
        with pytest.raises(InvalidArgument):
            EnsembleConfig(k1=10, k2=9).check_rove(10)

    def test_epsilon_values(self):
        with pytest.raises(InvalidArgument):
            EnsembleConfig(epsilon=-1.0, k1=2, k2=2).check_rove(10)
        with pytest.raises(InvalidArgument):
            EnsembleConfig(epsilon="auto", k1=2, k2=2).check_rove(10)

    def test_recommended(self):
        d = EnsembleConfig.recommended(4096)
        assert (d.k, d.B, d.k1, d.k2, d.B1, d.B2) == (20, 200, 20, 20, 20, 200)
        c = EnsembleConfig.recommended(4096, continuous=True)
        assert (c.k1, c.k2, c.B1, c.B2) == (2048, 30, 50, 200)


# ---------------------------------------------------------------------------
# MoVE
# ---------------------------------------------------------------------------


class TestMove:
    def test_constant_learner(self):
        data = SampleBatch(np.arange(20.0))
        out = run_move(constant(7), data, EnsembleConfig(k=3, B=7), np.random.default_rng(0))
        assert out.model == 7
        assert out.tally.counts == {ModelKey.of(7): 7}

    def test_tally_sums_to_B_and_winner_is_max(self):
        data = SampleBatch(np.random.default_rng(2).normal(size=40))
        out = run_move(lambda b, r: int(b.items.mean() > 0), data, EnsembleConfig(k=5, B=301),
                       np.random.default_rng(1))
        assert sum(out.tally.counts.values()) == 301
        assert out.tally.counts[out.key] == max(out.tally.counts.values())

    def test_frequencies_match_enumeration(self):
        # 56 subsets of size 3 out of 8; exact frequencies are the B -> inf limit.
        data = SampleBatch(np.array([0.2, 1.7, 2.4, 0.9, 3.1, 1.2, 2.8, 0.1]))
        exact = exact_phat_enumeration(rounded_mean, data, 3)
        assert exact.trials == 56
        out = run_move(rounded_mean, data, EnsembleConfig(k=3, B=100_000), np.random.default_rng(5))
        for key, p in exact.probs.items():
            assert abs(out.tally.counts.get(key, 0) / 100_000 - p) < 0.01
        assert set(out.tally.counts) <= set(exact.probs)

    def test_learner_failure_names_subsample(self):
        calls = []

        def flaky(batch, rng):
            calls.append(1)
            if len(calls) == 4:
                raise RuntimeError("boom")
            return 0

        with pytest.raises(LearnerError) as info:
            run_move(flaky, SampleBatch(np.zeros(10)), EnsembleConfig(k=2, B=10), np.random.default_rng(0))
        assert info.value.ballot == 3

    def test_deterministic(self):
        data = LpExample(2.1).sample(300, np.random.default_rng(3))
        cfg = EnsembleConfig(k=10, B=200)
        a = run_move(lp_example_saa_rng, data, cfg, np.random.default_rng(42))
        b = run_move(lp_example_saa_rng, data, cfg, np.random.default_rng(42))
        assert a.key == b.key and a.tally.counts == b.tally.counts

    def test_k_must_be_below_n(self):
        with pytest.raises(InvalidArgument):
            run_move(constant(0), SampleBatch(np.zeros(5)), EnsembleConfig(k=5), np.random.default_rng(0))


def lp_example_saa_rng(batch, rng):
    return lp_example_saa(batch)


# ---------------------------------------------------------------------------
# ROVE
# ---------------------------------------------------------------------------


def table_loss(table):
    """Loss oracle reading per-item losses from ``table[model]``; items are item ids."""

    def loss(theta, batch):
        return table[theta][batch.items.astype(int)]

    return loss


@pytest.fixture
def scripted_ballots(monkeypatch):
    """Replace subsample draws with one single-item ballot per item, in order."""

    def fake(n, k, count, rng):
        assert k == 1
        return np.arange(count).reshape(count, 1) % n

    monkeypatch.setattr(core, "subsample_matrix", fake)


class TestRetrieve:
    def test_single_candidate(self):
        data = SampleBatch(np.random.default_rng(0).normal(size=50))
        cfg = EnsembleConfig(k1=10, B1=1, k2=10, B2=30)
        S = retrieve_phase1(lambda b, r: float(b.items.mean()), data, cfg, np.random.default_rng(1))
        assert len(S) == 1
        out = run_rove(lambda b, r: float(b.items.mean()), lambda t, b: (b.items - t) ** 2, data, cfg,
                       np.random.default_rng(1))
        assert out.retrieved == [out.model]
        assert out.tally.counts == {0: 30}

    def test_constant_coalesces(self):
        cfg = EnsembleConfig(k1=3, k2=3, B1=50)
        S = retrieve_phase1(constant(4), SampleBatch(np.zeros(10)), cfg, np.random.default_rng(0))
        assert S == [4]

    def test_lp_retrieves_only_zero_or_one(self):
        problem = LpExample(2.1)
        data = problem.sample(2000, np.random.default_rng(8))
        S = retrieve_phase1(problem.fit, data, EnsembleConfig(k1=10, B1=20), np.random.default_rng(2))
        assert 1 <= len(S) <= 20 and set(S) <= {0, 1}

    def test_split_uses_first_half(self):
        seen = []

        def spy(batch, rng):
            seen.extend(batch.items.tolist())
            return 0

        data = SampleBatch(np.arange(20.0))
        retrieve_phase1(spy, data, EnsembleConfig(k1=5, B1=30, split=True), np.random.default_rng(0))
        assert max(seen) < 10


class TestPhase2:
    def test_large_epsilon_everyone_votes(self):
        data = SampleBatch(np.random.default_rng(0).normal(size=30))
        models = [0.5, -0.25, 2.0]
        loss = lambda t, b: (b.items - t) ** 2
        out = epsilon_vote_phase2(models, loss, data, EnsembleConfig(k2=5, B2=40), 1e9, np.random.default_rng(1))
        assert list(out.tally.counts.values()) == [40, 40, 40]
        assert out.model == -0.25  # smallest key among the tied

    def test_single_model_zero_epsilon(self):
        data = SampleBatch(np.arange(10.0))
        out = epsilon_vote_phase2([3.0], lambda t, b: b.items * t, data, EnsembleConfig(k2=3, B2=25), 0.0,
                                  np.random.default_rng(0))
        assert out.tally.counts == {0: 25} and out.model == 3.0

    def test_hand_constructed_table(self, scripted_ballots):
        # Ten single-item ballots; per-ballot gaps to the ballot minimum:
        #   model 0 within 0.5 on ballots 0-4      -> 5 votes
        #   model 1 within 0.5 on ballots 5-8      -> 4 votes
        #   model 2 within 0.5 on ballots 2-8      -> 7 votes
        table = {
            0: np.array([0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0]),
            1: np.array([2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0]),
            2: np.array([1.0, 1.0, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 1.0]),
        }
        table[0][9] = 1.0  # ballot 9: model 0 and 2 tie at the minimum
        table[1][9] = 1.0
        # Ballot 9 has all three at 1.0, so everybody votes there.
        expected = {0: 6, 1: 5, 2: 8}
        data = SampleBatch(np.arange(10.0))
        out = epsilon_vote_phase2([0, 1, 2], table_loss(table), data, EnsembleConfig(k2=1, B2=10), 0.5,
                                  np.random.default_rng(0))
        assert out.tally.counts == expected
        assert out.model == 2 and out.tally.counts[2] == 8

    def test_seven_of_ten(self, scripted_ballots):
        table = {
            0: np.array([0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0]),
            1: np.array([2.0, 2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            2: np.array([1.0, 1.0, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 1.0]),
        }
        # Model 2 is within 0.5 on ballots 2-8 (7/10); models 0 and 1 on 5/10 each.
        data = SampleBatch(np.arange(10.0))
        out = epsilon_vote_phase2([0, 1, 2], table_loss(table), data, EnsembleConfig(k2=1, B2=10), 0.5,
                                  np.random.default_rng(0))
        assert out.tally.counts == {0: 5, 1: 5, 2: 7}
        assert out.model == 2

    def test_non_finite_loss(self):
        def loss(theta, batch):
            out = batch.items * 0.0
            if theta == 1:
                out[4] = np.nan
            return out

        data = SampleBatch(np.arange(10.0))
        with pytest.raises(LossError) as info:
            epsilon_vote_phase2([0, 1], loss, data, EnsembleConfig(k2=3, B2=5), 0.0, np.random.default_rng(0))
        assert (info.value.model_index, info.value.data_index) == (1, 4)

    def test_non_finite_loss_split_reports_global_index(self):
        def loss(theta, batch):
            return np.where(batch.items == 13.0, np.inf, 0.0)

        data = SampleBatch(np.arange(20.0))
        with pytest.raises(LossError) as info:
            epsilon_vote_phase2([0], loss, data, EnsembleConfig(k1=5, k2=5, B2=5, split=True), 0.0,
                                np.random.default_rng(0))
        assert info.value.data_index == 13

    def test_cache_and_recompute_agree(self, monkeypatch):
        data = SampleBatch(np.random.default_rng(4).standard_t(3, size=60))
        models = [-0.4, 0.0, 0.3, 1.1]
        loss = lambda t, b: (b.items - t) ** 2
        cfg = EnsembleConfig(k2=7, B2=50)
        cached = epsilon_vote_phase2(models, loss, data, cfg, 0.2, np.random.default_rng(3))
        monkeypatch.setattr(core, "LOSS_CACHE_LIMIT", 0)
        direct = epsilon_vote_phase2(models, loss, data, cfg, 0.2, np.random.default_rng(3))
        assert cached.tally.counts == direct.tally.counts

    def test_split_votes_on_second_half(self):
        seen = []

        def loss(theta, batch):
            seen.extend(batch.items.tolist())
            return batch.items * 0.0

        data = SampleBatch(np.arange(21.0))
        epsilon_vote_phase2([0], loss, data, EnsembleConfig(k1=5, k2=5, B2=5, split=True), 0.0,
                            np.random.default_rng(0))
        assert min(seen) >= 10


class TestEpsilonSelection:
    def test_single_model(self):
        data = SampleBatch(np.random.default_rng(0).normal(size=30))
        eps = select_epsilon([0.3], lambda t, b: (b.items - t) ** 2, data, EnsembleConfig(k2=5, B2=50),
                             np.random.default_rng(0))
        assert eps == 0.0

    def test_identical_losses(self):
        data = SampleBatch(np.random.default_rng(0).normal(size=30))
        loss = lambda t, b: b.items**2
        assert select_epsilon([0, 1], loss, data, EnsembleConfig(k2=5, B2=50),
                              np.random.default_rng(0)) == 0.0

    def test_scripted_crossing(self, scripted_ballots):
        # g(eps) by hand on ten single-item ballots:
        #   model A is the minimizer on ballots 0-3 (4/10), gap 0.25 on 4, 0.3 on 5;
        #   models B and C are minimizers on 3/10 each with gaps >= 1 elsewhere.
        # So g < 1/2 for eps < 0.25 and g = 1/2 at eps = 0.25.
        A = np.array([0.0, 0.0, 0.0, 0.0, 0.25, 0.3, 1.5, 1.5, 1.5, 1.5])
        B = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        C = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        table = {0: A, 1: B, 2: C}
        data = SampleBatch(np.arange(10.0))
        cfg = EnsembleConfig(k2=1, B2=10)
        profile = epsilon_profile([0, 1, 2], table_loss(table), data, cfg, np.random.default_rng(0))
        assert profile.g(0.0) == 0.4
        assert profile.g(0.2499) == 0.4
        assert profile.g(0.25) == 0.5
        eps = profile.select()
        tol = 1e-6 * (1 + profile.spread)
        assert 0.25 <= eps <= 0.25 + tol

    def test_g_monotone_and_saturates(self):
        rng = np.random.default_rng(7)
        data = SampleBatch(rng.standard_t(2.5, size=200))
        models = list(rng.normal(size=12))
        profile = epsilon_profile(models, lambda t, b: (b.items - t) ** 2, data, EnsembleConfig(k2=15, B2=100),
                                  np.random.default_rng(1))
        grid = np.linspace(0, profile.spread * 1.1, 400)
        values = [profile.g(e) for e in grid]
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert profile.g(profile.spread) == 1.0
        assert profile.g(profile.select()) >= 0.5


class TestRove:
    def test_output_in_retrieved_set_and_deterministic(self):
        rng = np.random.default_rng(0)
        data = SampleBatch(rng.standard_t(2.2, size=400))
        fit = lambda b, r: float(np.clip(b.items.mean(), -1, 1))
        loss = lambda t, b: (b.items - t) ** 2
        cfg = EnsembleConfig(k1=200, k2=30, B1=20, B2=100)
        a = run_rove(fit, loss, data, cfg, np.random.default_rng(5))
        b = run_rove(fit, loss, data, cfg, np.random.default_rng(5))
        assert a.key in {ModelKey.of(m) for m in a.retrieved}
        assert a.key == b.key and a.epsilon == b.epsilon and a.tally.counts == b.tally.counts
        assert sum(a.tally.counts.values()) >= cfg.B2

    def test_fixed_epsilon_recorded(self):
        data = SampleBatch(np.random.default_rng(0).normal(size=50))
        cfg = EnsembleConfig(k1=10, k2=10, B1=5, B2=20, epsilon=0.1)
        out = run_rove(lambda b, r: float(b.items.mean()), lambda t, b: (b.items - t) ** 2, data, cfg,
                       np.random.default_rng(0))
        assert out.epsilon == 0.1

    def test_split_mode_runs(self):
        problem = LpExample(2.1)
        data = problem.sample(400, np.random.default_rng(1))
        cfg = EnsembleConfig(k1=10, k2=10, B1=20, B2=200, split=True)
        out = run_rove(problem.fit, problem.loss, data, cfg, np.random.default_rng(2))
        assert out.model in (0, 1)

    def test_split_bounds_enforced(self):
        with pytest.raises(InvalidArgument):
            run_rove(constant(0), lambda t, b: b.items, SampleBatch(np.zeros(10)),
                     EnsembleConfig(k1=6, k2=2, split=True), np.random.default_rng(0))
