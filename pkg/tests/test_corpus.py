"""Corpus tests: parsing, filtering, splits, and sampler legality."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blendrec import corpus
from blendrec.errors import DataError

from conftest import ML100K_PATH, make_block_matrix, require_ml100k, write_matrix_tsv


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestLoadInteractions:
    def test_three_line_file(self, tmp_path):
        path = write_lines(tmp_path / "t.tsv", ["A\tx", "A\ty", "B\tx"])
        m = corpus.load_interactions(path, corpus.FileFormat(columns=("user", "item")))
        assert (m.user_count, m.item_count, len(m)) == (2, 2, 3)
        assert m.positives == {(0, 0), (0, 1), (1, 0)}

    def test_duplicates_collapse(self, tmp_path):
        path = write_lines(tmp_path / "t.tsv", ["A\tx\t5", "A\tx\t3", "A\ty\t1"])
        m = corpus.load_interactions(path)
        assert len(m) == 2

    def test_rating_value_ignored(self, tmp_path):
        path = write_lines(tmp_path / "t.tsv", ["A\tx\t1", "B\tx\t5"])
        m = corpus.load_interactions(path)
        assert m.positives == {(0, 0), (1, 0)}

    def test_malformed_line_reports_number(self, tmp_path):
        path = write_lines(tmp_path / "t.tsv", ["A\tx", "broken-line"])
        with pytest.raises(DataError, match=":2:"):
            corpus.load_interactions(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("")
        with pytest.raises(DataError, match="no interactions"):
            corpus.load_interactions(path)

    def test_custom_columns_and_delimiter(self, tmp_path):
        path = write_lines(tmp_path / "t.csv", ["x,A", "y,A"])
        fmt = corpus.FileFormat(delimiter=",", columns=("item", "user"))
        m = corpus.load_interactions(path, fmt)
        assert m.user_count == 1 and m.item_count == 2

    def test_movielens_100k_statistics(self):
        require_ml100k()
        m = corpus.load_interactions(ML100K_PATH)
        assert (m.user_count, m.item_count, len(m)) == (943, 1682, 100000)
        assert round(m.density, 4) == 0.0630


class TestFilterMinInteractions:
    def test_threshold_zero_is_identity(self, block_matrix):
        assert corpus.filter_min_interactions(block_matrix, 0) is block_matrix

    def test_user_counts_example(self, tmp_path):
        lines = [f"A\ti{k}" for k in range(2)] + [f"B\ti{k}" for k in range(7)] + [f"C\ti{k}" for k in range(9)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        filtered = corpus.filter_min_interactions(m, 6)
        assert filtered.user_count == 2
        assert set(filtered.user_vocab) == {"B", "C"}

    def test_orphan_items_dropped_and_redensified(self, tmp_path):
        lines = ["A\tonly-a", "B\tshared", "B\tb1", "B\tb2", "B\tb3"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        filtered = corpus.filter_min_interactions(m, 3)
        assert "only-a" not in filtered.item_vocab
        assert sorted(filtered.item_vocab.values()) == list(range(filtered.item_count))

    def test_all_users_removed_is_error(self, block_matrix):
        with pytest.raises(DataError, match="every user"):
            corpus.filter_min_interactions(block_matrix, 10_000)


class TestSplit:
    def test_random_half_counts(self, tmp_path):
        lines = [f"A\ti{k}" for k in range(10)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        train, test = corpus.split(m, corpus.SplitSpec("random-half", seed=0))
        assert len(train) == 5 and sum(len(v) for v in test.values()) == 5

    def test_partition_and_determinism(self, block_matrix):
        spec = corpus.SplitSpec("random-half", seed=17)
        t1, s1 = corpus.split(block_matrix, spec)
        t2, s2 = corpus.split(block_matrix, spec)
        assert np.array_equal(t1.users, t2.users) and np.array_equal(t1.items, t2.items)
        assert s1 == s2
        test_pairs = {(u, i) for u, items in s1.items() for i in items}
        assert not (t1.positives & test_pairs)
        assert t1.positives | test_pairs == block_matrix.positives

    def test_per_user_holdout(self, tmp_path):
        lines = [f"A\ti{k}" for k in range(8)] + [f"B\ti{k}" for k in range(2)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        train, test = corpus.split(m, corpus.SplitSpec("per-user-holdout", n_test=3, seed=1))
        a = m.user_vocab["A"]
        b = m.user_vocab["B"]
        assert len(test[a]) == 3 and np.sum(train.users == a) == 5
        assert b not in test and np.sum(train.users == b) == 2

    def test_leave_one_out_latest_timestamp(self, tmp_path):
        lines = ["A\tx\t1\t100", "A\ty\t1\t900", "A\tz\t1\t500"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines))
        train, test = corpus.split(m, corpus.SplitSpec("leave-one-out", seed=0))
        assert test[0] == [m.item_vocab["y"]]
        assert len(train) == 2

    def test_leave_one_out_file_order_fallback(self, tmp_path):
        lines = ["A\tx", "A\ty", "A\tz"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        train, test = corpus.split(m, corpus.SplitSpec("leave-one-out", seed=0))
        assert test[0] == [m.item_vocab["z"]]

    def test_manifest_roundtrip(self, tmp_path, block_matrix):
        train, test = corpus.split(block_matrix, corpus.SplitSpec("random-half", seed=3))
        path = tmp_path / "split.tsv"
        corpus.write_split_manifest(path, train, test)
        train2, test2 = corpus.read_split_manifest(path, block_matrix)
        assert np.array_equal(np.sort(train.users * 10_000 + train.items),
                              np.sort(train2.users * 10_000 + train2.items))
        assert {u: sorted(v) for u, v in test.items()} == {u: sorted(v) for u, v in test2.items()}


class TestTripletSampling:
    def test_per_positive_one_yields_one_per_pair(self, block_matrix):
        users, pos, neg = corpus.sample_triplet_arrays(block_matrix, per_positive=1, seed=0)
        assert len(users) == len(block_matrix)

    def test_stream_matches_arrays(self, block_matrix):
        triplets = list(corpus.sample_global_triplets(block_matrix, seed=4))
        assert len(triplets) == len(block_matrix)
        for t in triplets[:50]:
            assert (t.user, t.pos_item) in block_matrix.positives
            assert (t.user, t.neg_item) not in block_matrix.positives

    def test_forced_negative(self, tmp_path):
        # user A holds every item except i8, which user B brings into the universe
        lines = [f"A\ti{k}" for k in range(8)] + ["B\ti8"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        a = m.user_vocab["A"]
        only_negative = m.item_vocab["i8"]
        users, pos, neg = corpus.sample_triplet_arrays(m, seed=0)
        assert np.all(neg[users == a] == only_negative)

    def test_saturated_user_skipped(self, tmp_path):
        lines = ["A\tx", "A\ty", "B\tx"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        users, pos, neg = corpus.sample_triplet_arrays(m, seed=0)
        assert m.user_vocab["A"] not in set(users.tolist())
        assert set(users.tolist()) == {m.user_vocab["B"]}

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), n_users=st.integers(3, 12), n_items=st.integers(4, 15))
    def test_triplet_legality_property(self, seed, n_users, n_items):
        rng = np.random.default_rng(seed)
        rows = []
        for u in range(n_users):
            k = rng.integers(1, max(2, n_items - 1))
            for i in rng.choice(n_items, size=k, replace=False):
                rows.append((u, int(i)))
        rows = sorted(set(rows))
        m = corpus.InteractionMatrix(
            n_users, n_items,
            np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
            {}, {},
        )
        users, pos, neg = corpus.sample_triplet_arrays(m, seed=seed)
        assert np.all(m.contains(users, pos))
        assert not np.any(m.contains(users, neg))
        assert np.all(pos != neg)

    def test_negative_distribution_uniform(self, tmp_path):
        # one user, 6 positives among 30 items: 24 legal negatives
        lines = [f"A\ti{k}" for k in range(6)] + [f"B\ti{k}" for k in range(30)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        a = m.user_vocab["A"]
        draws = []
        for seed in range(100):
            users, pos, neg = corpus.sample_triplet_arrays(m, per_positive=170, seed=seed)
            draws.append(neg[users == a])
        draws = np.concatenate(draws)
        assert len(draws) >= 100_000
        legal = np.setdiff1d(np.arange(m.item_count), m.items_of_user(a))
        counts = np.bincount(draws, minlength=m.item_count)[legal]
        expected = len(draws) / len(legal)
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        from scipy.stats import chi2 as chi2_dist
        p_value = float(chi2_dist.sf(chi2, df=len(legal) - 1))
        assert p_value > 0.01


class TestLooNegatives:
    def test_count_and_exclusion(self, block_matrix):
        negs = corpus.sample_loo_negatives(block_matrix, user=0, count=20, seed=1)
        assert len(set(negs)) == 20
        for i in negs:
            assert (0, i) not in block_matrix.positives

    def test_count_zero(self, block_matrix):
        assert corpus.sample_loo_negatives(block_matrix, 0, 0, seed=1) == []

    def test_forced_full_complement(self, tmp_path):
        lines = ["A\tp"] + [f"B\ti{k}" for k in range(99)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        a = m.user_vocab["A"]
        negs = corpus.sample_loo_negatives(m, a, 99, seed=0)
        assert sorted(negs) == sorted(set(range(m.item_count)) - {m.item_vocab["p"]})

    def test_insufficient_pool_is_error(self, tmp_path):
        lines = ["A\tx", "A\ty", "B\tz"]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        with pytest.raises(DataError, match="unobserved"):
            corpus.sample_loo_negatives(m, m.user_vocab["A"], 5, seed=0)

    def test_exclude_removes_from_pool(self, tmp_path):
        lines = ["A\tx"] + [f"B\ti{k}" for k in range(10)]
        m = corpus.load_interactions(write_lines(tmp_path / "t.tsv", lines),
                                     corpus.FileFormat(columns=("user", "item")))
        a = m.user_vocab["A"]
        held_out = m.item_vocab["i3"]
        for seed in range(10):
            negs = corpus.sample_loo_negatives(m, a, 9, seed=seed, exclude=[held_out])
            assert held_out not in negs


class TestNoLeakage:
    @pytest.mark.parametrize("protocol,kw", [
        ("random-half", {}),
        ("per-user-holdout", {"n_test": 2}),
        ("leave-one-out", {}),
    ])
    def test_training_triplets_never_contain_test_pairs(self, protocol, kw, tmp_path):
        m = make_block_matrix(seed=11)
        path = tmp_path / "m.tsv"
        write_matrix_tsv(m, path)
        loaded = corpus.load_interactions(path)
        train, test = corpus.split(loaded, corpus.SplitSpec(protocol, seed=2, **kw))
        test_pairs = {(u, i) for u, items in test.items() for i in items}
        users, pos, neg = corpus.sample_triplet_arrays(train, per_positive=2, seed=8)
        for u, p in zip(users.tolist(), pos.tolist()):
            assert (u, p) not in test_pairs
