import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceskd import nn
from ceskd.curriculum import (BucketPlan, ScoredSample, SelectionPolicy,
                              assign_experts, bucketize, epoch_iterator, rank, read_curriculum,
                              score_dataset, single_bucket, terciles, write_curriculum)
from ceskd.exceptions import ConfigurationError, DataError, ParseError


def _ranked(scores):
    return rank([ScoredSample(i, 0, float(s)) for i, s in enumerate(scores)])


def _zero_model(k=4, d=3):
    model = nn.init_weights([nn.dense(d, k)], 0, (d,), dtype=np.float64)
    model.params[0]["W"][:] = 0
    return model


# -- scoring -----------------------------------------------------------------------

def test_uniform_reference_scores_log_k():
    scored = score_dataset(_zero_model(4), np.ones((6, 3)), [0, 1, 2, 3, 0, 1])
    assert [s.sample_index for s in scored] == list(range(6))
    np.testing.assert_allclose([s.score for s in scored], np.log(4), rtol=1e-12)


def test_memorizing_reference_scores_near_zero():
    model = _zero_model(3, 3)
    model.params[0]["W"][:] = 100 * np.eye(3)
    scored = score_dataset(model, np.eye(3), [0, 1, 2])
    assert max(s.score for s in scored) < 1e-12


def test_scores_match_naive_pass(gen):
    model = nn.init_weights(nn.mlp_specs(3, [4], 3), 7, (3,), dtype=np.float64)
    X = gen.normal(size=(5, 3))
    y = np.array([0, 2, 1, 1, 0])
    got = [s.score for s in score_dataset(model, X, y)]
    W1, b1 = model.params[0]["W"], model.params[0]["b"]
    W2, b2 = model.params[2]["W"], model.params[2]["b"]
    for i in range(5):
        h = [max(0.0, sum(X[i, a] * W1[a, j] for a in range(3)) + b1[j]) for j in range(4)]
        z = [sum(h[j] * W2[j, c] for j in range(4)) + b2[c] for c in range(3)]
        m = max(z)
        lse = m + np.log(sum(np.exp(v - m) for v in z))
        assert got[i] == pytest.approx(lse - z[y[i]], rel=1e-10)


def test_score_label_out_of_range():
    with pytest.raises(DataError):
        score_dataset(_zero_model(4), np.ones((2, 3)), [0, 4])


# -- ranking -----------------------------------------------------------------------

def test_rank_small_example():
    np.testing.assert_array_equal(_ranked([3, 1, 2]).order, [1, 2, 0])


def test_rank_ties_keep_index_order():
    np.testing.assert_array_equal(_ranked([0.5] * 7).order, np.arange(7))


def test_rank_matches_sort_oracle(gen):
    scores = np.round(gen.uniform(size=1000), 2)      # plenty of ties
    oracle = sorted(range(1000), key=lambda i: (scores[i], i))
    r = _ranked(scores)
    np.testing.assert_array_equal(r.order, oracle)
    np.testing.assert_array_equal(r.scores, scores[oracle])


def test_rank_rejects_non_finite():
    with pytest.raises(DataError):
        _ranked([1.0, float("nan")])


# -- bucketing ---------------------------------------------------------------------

def test_bucketize_even_split():
    plan = bucketize(_ranked(range(10)), np.zeros(10, int), 2)
    np.testing.assert_array_equal(plan.buckets[0], range(5))
    np.testing.assert_array_equal(plan.buckets[1], range(5, 10))


def test_bucketize_remainder_goes_first():
    plan = bucketize(_ranked(range(10)), np.zeros(10, int), 3)
    assert [len(b) for b in plan.buckets] == [4, 3, 3]


def test_bucketize_balanced_toy():
    gen = np.random.default_rng(3)
    labels = np.repeat([0, 1], 6)
    scores = gen.permutation(12).astype(float)
    plan = bucketize(_ranked(scores), labels, 3, class_balanced=True)
    for b in plan.buckets:
        assert sorted(np.bincount(labels[b], minlength=2)) == [2, 2]
    # enumeration oracle: every class's scores sorted, split into consecutive pairs
    for c in (0, 1):
        idx = sorted(np.flatnonzero(labels == c), key=lambda i: scores[i])
        for j, b in enumerate(plan.buckets):
            assert set(b[labels[b] == c]) == set(idx[2 * j:2 * j + 2])


def test_bucketize_errors():
    with pytest.raises(ConfigurationError):
        bucketize(_ranked(range(3)), np.zeros(3, int), 4)
    with pytest.raises(ConfigurationError):
        bucketize(_ranked(range(3)), np.zeros(3, int), 0)


def _check_plan(plan, ranked, labels, n):
    everything = np.concatenate(plan.buckets)
    assert len(everything) == n and set(everything.tolist()) == set(range(n))
    sizes = [len(b) for b in plan.buckets]
    assert max(sizes) - min(sizes) <= 1
    score = np.empty(n)
    score[ranked.order] = ranked.scores
    groups = [np.arange(n)] if not plan.class_balanced else [np.flatnonzero(labels == c) for c in np.unique(labels)]
    for members in groups:
        per = [np.intersect1d(b, members) for b in plan.buckets]
        for a, b in itertools.combinations(per, 2):
            if len(a) and len(b):
                assert score[a].max() <= score[b].min()
        if plan.class_balanced:
            counts = [len(p) for p in per]
            assert max(counts) - min(counts) <= 1


def test_plans_exhaustive_on_toy_sizes():
    for n in range(1, 13):
        for n_classes in (1, 2, 3):
            labels = np.arange(n) % n_classes
            for score_seed in range(3):
                scores = np.random.default_rng(score_seed).integers(0, 4, size=n).astype(float)
                ranked = _ranked(scores)
                for L in range(1, n + 1):
                    for balanced in (False, True):
                        _check_plan(bucketize(ranked, labels, L, balanced), ranked, labels, n)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 200), st.integers(1, 6), st.integers(1, 10), st.booleans(), st.integers(0, 2**32 - 1))
def test_plan_properties(n, L, k, balanced, seed):
    L = min(L, n)
    gen = np.random.default_rng(seed)
    labels = gen.integers(k, size=n)
    ranked = _ranked(gen.normal(size=n))
    _check_plan(bucketize(ranked, labels, L, balanced), ranked, labels, n)


def test_terciles_cover_ranking():
    ranked = _ranked(np.arange(30.0))
    labels = np.arange(30) % 3
    easy, mid, hard = terciles(ranked, labels)
    assert [len(p) for p in (easy, mid, hard)] == [10, 10, 10]
    assert easy.max() < mid.min() and mid.max() < hard.min()


# -- assignment --------------------------------------------------------------------

def _plan(L):
    return bucketize(_ranked(range(3 * L)), np.zeros(3 * L, int), L)


def test_baseline_and_anti_assignments():
    depths = [6, 8, 10]
    plan = _plan(3)
    base = assign_experts(plan, 3, SelectionPolicy("baseline"))
    anti = assign_experts(plan, 3, SelectionPolicy("anti"))
    assert [depths[e] for e in base] == [6, 8, 10]
    assert [depths[e] for e in anti] == [10, 8, 6]


def test_assignment_bijections_exhaustive():
    for L in range(1, 7):
        plan = _plan(L)
        base = assign_experts(plan, L, SelectionPolicy("baseline"))
        anti = assign_experts(plan, L, SelectionPolicy("anti"))
        np.testing.assert_array_equal(anti, base[::-1])
        for epoch in range(5):
            for seed in range(3):
                a = assign_experts(plan, L, SelectionPolicy("random", seed), epoch)
                assert sorted(a.tolist()) == list(range(L))
                np.testing.assert_array_equal(a, assign_experts(plan, L, SelectionPolicy("random", seed), epoch))


def test_random_policy_redraws_per_epoch():
    plan = _plan(5)
    draws = {tuple(assign_experts(plan, 5, SelectionPolicy("random", 1), e)) for e in range(20)}
    assert len(draws) > 1


def test_assignment_pool_size_mismatch():
    with pytest.raises(ConfigurationError):
        assign_experts(_plan(3), 2, SelectionPolicy())
    with pytest.raises(ConfigurationError):
        SelectionPolicy("greedy")


# -- pacing ------------------------------------------------------------------------

def test_iterator_two_buckets_of_four():
    plan = BucketPlan(2, [np.arange(4), np.arange(4, 8)])
    batches = list(epoch_iterator(plan, 2, seed=0, epoch=0))
    assert [b for _, b in batches] == [0, 0, 1, 1]
    assert all(set(idx) <= set(plan.buckets[b]) for idx, b in batches)


def test_single_bucket_is_plain_shuffled_batching():
    batches = list(epoch_iterator(single_bucket(10), 3, seed=4, epoch=2))
    assert [len(i) for i, _ in batches] == [3, 3, 3, 1]
    assert {b for _, b in batches} == {0}
    order = np.concatenate([i for i, _ in batches])
    np.testing.assert_array_equal(order, np.random.default_rng([4, 2, 0]).permutation(10))
    other = np.concatenate([i for i, _ in epoch_iterator(single_bucket(10), 3, seed=4, epoch=3)])
    assert not np.array_equal(order, other)


def test_iterator_coverage_and_purity_exhaustive():
    for n in range(1, 11):
        ranked = _ranked(np.arange(n, dtype=float))
        for L in range(1, n + 1):
            plan = bucketize(ranked, np.arange(n) % 2, L, class_balanced=L % 2 == 0)
            bucket_of = plan.bucket_of()
            for bs in (1, 2, 3, 5):
                seen, tags = [], []
                for idx, b in epoch_iterator(plan, bs, seed=n, epoch=L):
                    assert 1 <= len(idx) <= bs
                    assert {bucket_of[int(i)] for i in idx} == {b}
                    seen.extend(idx.tolist())
                    tags.append(b)
                assert sorted(seen) == list(range(n))
                assert tags == sorted(tags)


def test_iterator_rejects_bad_batch_size():
    with pytest.raises(ConfigurationError):
        list(epoch_iterator(single_bucket(3), 0, 0, 0))


# -- curriculum file ---------------------------------------------------------------

def _fixture(tmp_path, balanced=True):
    gen = np.random.default_rng(0)
    labels = gen.integers(3, size=25)
    ranked = rank([ScoredSample(i, int(c), float(s)) for i, (c, s) in enumerate(zip(labels, gen.exponential(size=25)))])
    plan = bucketize(ranked, labels, 3, balanced)
    path = tmp_path / "curriculum.tsv"
    write_curriculum(path, ranked, labels, plan, "anti", 17, "abc123")
    return path, ranked, labels, plan


@pytest.mark.parametrize("balanced", [False, True])
def test_curriculum_round_trip(tmp_path, balanced):
    path, ranked, labels, plan = _fixture(tmp_path, balanced)
    cur = read_curriculum(path)
    np.testing.assert_array_equal(cur.ranked.order, ranked.order)
    np.testing.assert_array_equal(cur.ranked.scores, ranked.scores)   # exact
    np.testing.assert_array_equal(cur.labels, labels)
    assert cur.plan.L == 3 and cur.plan.class_balanced == balanced
    for a, b in zip(cur.plan.buckets, plan.buckets):
        np.testing.assert_array_equal(a, b)
    assert (cur.policy, cur.seed, cur.scorer) == ("anti", 17, "abc123")
    again = tmp_path / "again.tsv"
    write_curriculum(again, cur.ranked, cur.labels, cur.plan, cur.policy, cur.seed, cur.scorer)
    assert again.read_bytes() == path.read_bytes()


def test_curriculum_file_layout(tmp_path):
    path, ranked, labels, _ = _fixture(tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# ceskd-curriculum 1"
    assert lines[6] == "sample_index\tclass_label\tscore\tbucket"
    first = lines[7].split("\t")
    assert int(first[0]) == ranked.order[0] and float(first[2]) == ranked.scores[0]


def _corrupt(path, fn):
    lines = path.read_text().splitlines()
    path.write_text("\n".join(fn(lines)) + "\n")


@pytest.mark.parametrize("mutate", [
    lambda ls: ["# something else"] + ls[1:],
    lambda ls: ["# ceskd-curriculum 2"] + ls[1:],
    lambda ls: [ls[0]] + ls[2:],                                  # missing L
    lambda ls: ls[:6] + ["idx\tlabel\tscore\tbucket"] + ls[7:],
    lambda ls: ls[:8] + ["1\t2\t3"] + ls[9:],                     # short row
    lambda ls: ls[:8] + ["x\t0\t0.1\t0"] + ls[9:],
    lambda ls: ls[:-1],                                           # index missing
    lambda ls: ls[:-1] + [ls[-1].rsplit("\t", 1)[0] + "\t9"],     # bucket out of range
    lambda ls: [],
])
def test_malformed_curriculum(tmp_path, mutate):
    path, *_ = _fixture(tmp_path)
    _corrupt(path, mutate)
    with pytest.raises(ParseError):
        read_curriculum(path)
