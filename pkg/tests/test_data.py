from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmirec.data import (DAY_SECONDS, InteractionLog, InteractionRecord, ParseError, SyntheticSpec,
                         UserSequence, augment_sequence, build_sequences, chronological_split,
                         generate_synthetic, parse_interactions, write_ground_truth,
                         write_interactions)


def write(tmp_path, text, name="log.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParse:
    def test_two_rows(self, tmp_path):
        log = parse_interactions(write(tmp_path, "7,3,100\n7,4,200\n"))
        assert (log.num_users, log.num_items, len(log)) == (1, 2, 2)
        assert log.user_ids.tolist() == [7]
        assert log.item_ids.tolist() == [3, 4]

    def test_header_and_delimiter(self, tmp_path):
        log = parse_interactions(write(tmp_path, "user\titem\tts\n1\t9\t5\n2\t9\t6\n"), delimiter="\t")
        assert (log.num_users, log.num_items) == (2, 1)

    def test_non_numeric_item_names_line(self, tmp_path):
        with pytest.raises(ParseError, match="line 2"):
            parse_interactions(write(tmp_path, "1,2,3\n1,abc,4\n"))

    def test_short_row(self, tmp_path):
        with pytest.raises(ParseError, match="line 1"):
            parse_interactions(write(tmp_path, "1,2\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            parse_interactions(write(tmp_path, ""))

    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(num_users=20, num_items=50, interactions_per_user=10, seed=3))
        write_interactions(ds.log, tmp_path / "x.csv")
        back = parse_interactions(tmp_path / "x.csv")
        assert len(back) == len(ds.log)
        assert np.array_equal(back.user_ids[back.users], ds.log.users)
        assert np.array_equal(back.item_ids[back.items], ds.log.items)
        assert np.array_equal(back.timestamps, ds.log.timestamps)


def test_record_rejects_negative():
    with pytest.raises(ValueError):
        InteractionRecord(-1, 0, 0)


def test_log_rejects_out_of_range():
    with pytest.raises(ValueError):
        InteractionLog([0], [5], [0], num_users=1, num_items=5)


class TestSplit:
    def test_minimal_span(self):
        # item ids repeat so that validation/test items are warm
        recs = [InteractionRecord(0, 0, 0), InteractionRecord(0, 1, 10),
                InteractionRecord(0, 0, DAY_SECONDS + 5), InteractionRecord(0, 1, 2 * DAY_SECONDS + 5)]
        split = chronological_split(InteractionLog.from_records(recs), 3)
        assert len(split.train) == 2 and len(split.validation) == 1 and len(split.test) == 1
        assert split.validation.timestamps.tolist() == [DAY_SECONDS + 5]

    def test_boundary_goes_to_later_day(self):
        h = 4
        recs = [InteractionRecord(0, 0, 0), InteractionRecord(0, 0, (h - 2) * DAY_SECONDS)]
        split = chronological_split(InteractionLog.from_records(recs), h)
        assert len(split.train) == 1
        assert split.validation.timestamps.tolist() == [(h - 2) * DAY_SECONDS]

    def test_rejects_short_span(self):
        with pytest.raises(ValueError):
            chronological_split(InteractionLog.from_records([InteractionRecord(0, 0, 0)]), 2)

    def test_rejects_overlong_log(self):
        log = InteractionLog.from_records([InteractionRecord(0, 0, 0), InteractionRecord(0, 0, 5 * DAY_SECONDS)])
        with pytest.raises(ValueError):
            chronological_split(log, 3)

    def test_cold_users_and_items_dropped(self):
        recs = [InteractionRecord(0, 0, 0), InteractionRecord(1, 1, DAY_SECONDS),
                InteractionRecord(0, 2, 2 * DAY_SECONDS), InteractionRecord(0, 0, 2 * DAY_SECONDS + 1)]
        split = chronological_split(InteractionLog.from_records(recs), 3)
        assert len(split.validation) == 0   # user 1 never trains
        assert split.test.items.tolist() == [0]   # item 2 never trains

    def test_uniform_fourteen_days(self):
        rng = np.random.default_rng(0)
        n = 5000
        ts = np.sort(rng.integers(0, 14 * DAY_SECONDS, size=n))
        ts[0] = 0
        log = InteractionLog(np.zeros(n, dtype=int), rng.integers(0, 3, size=n), ts, 1, 3)
        split = chronological_split(log, 14)
        # brute-force day count
        expected_train = sum(1 for t in ts if t // DAY_SECONDS < 12)
        assert len(split.train) == expected_train
        assert abs(len(split.train) / n - 12 / 14) < 0.03

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 6), st.integers(0, 5 * DAY_SECONDS - 1)),
                    min_size=1, max_size=60))
    def test_exhaustive_on_warm_records(self, rows):
        rows = [(0, 0, 0)] + rows
        log = InteractionLog.from_records([InteractionRecord(*r) for r in rows])
        split = chronological_split(log, 5, origin=0)
        days = log.timestamps // DAY_SECONDS
        train = days < 3
        warm_u = set(log.users[train].tolist())
        warm_i = set(log.items[train].tolist())
        warm = [bool(t) or (u in warm_u and i in warm_i)
                for u, i, t in zip(log.users.tolist(), log.items.tolist(), train)]
        assert len(split.train) + len(split.validation) + len(split.test) == sum(warm)
        assert split.train.timestamps.max(initial=0) < 3 * DAY_SECONDS


class TestSequences:
    def test_sorted_by_time(self):
        log = InteractionLog.from_records([InteractionRecord(0, 0, 3), InteractionRecord(0, 1, 1)])
        assert build_sequences(log)[0].items == (1, 0)

    def test_truncation_keeps_most_recent(self):
        recs = [InteractionRecord(0, i, i) for i in range(150)]
        seq = build_sequences(InteractionLog.from_records(recs), 100)[0]
        assert seq.items == tuple(range(50, 150))

    def test_ties_keep_input_order(self):
        recs = [InteractionRecord(0, 5, 7), InteractionRecord(0, 2, 7), InteractionRecord(0, 9, 1)]
        assert build_sequences(InteractionLog.from_records(recs))[0].items == (9, 5, 2)

    def test_one_sequence_per_active_user(self):
        recs = [InteractionRecord(2, 0, 0), InteractionRecord(0, 1, 0)]
        seqs = build_sequences(InteractionLog.from_records(recs, num_users=4))
        assert [s.user_id for s in seqs] == [0, 2]

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            UserSequence(0, ())


class TestAugment:
    def test_half_of_four(self):
        pair = augment_sequence(UserSequence(0, (10, 11, 12, 13)), 0.5, 100, np.random.default_rng(0))
        for view in (pair.first, pair.second):
            assert len(view) == 2
            assert list(view.items) == sorted(view.items)

    def test_singleton(self):
        pair = augment_sequence(UserSequence(0, (4,)), 0.5, 100, np.random.default_rng(0))
        assert pair.first.items == pair.second.items == (4,)

    def test_cap_at_max_len(self):
        pair = augment_sequence(UserSequence(0, tuple(range(300))), 0.5, 100, np.random.default_rng(1))
        assert len(pair.first) == 100

    def test_seeded(self):
        seq = UserSequence(3, tuple(range(40)))
        a = augment_sequence(seq, 0.5, 100, np.random.default_rng(42))
        b = augment_sequence(seq, 0.5, 100, np.random.default_rng(42))
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=40, unique=True),
           st.floats(0.05, 1.0), st.integers(0, 2 ** 32 - 1))
    def test_views_are_subsequences(self, items, mu, seed):
        seq = UserSequence(0, tuple(items))
        pair = augment_sequence(seq, mu, 100, np.random.default_rng(seed))
        pos = {item: k for k, item in enumerate(items)}
        for view in (pair.first, pair.second):
            idx = [pos[i] for i in view.items]
            assert idx == sorted(idx) and len(set(idx)) == len(idx)
            assert len(view) == max(1, min(int(np.floor(mu * len(items) + 1e-9)), 100))


class TestSynthetic:
    def test_no_noise_stays_in_planted_categories(self):
        ds = generate_synthetic(SyntheticSpec(num_users=50, num_items=200, noise_rate=0.0,
                                              interactions_per_user=30, seed=1))
        for u, i in zip(ds.log.users, ds.log.items):
            assert ds.item_category[i] in ds.user_categories[u]

    def test_exact_interest_count_without_noise(self):
        spec = SyntheticSpec(num_users=60, num_items=400, num_planted_categories=4,
                             interests_per_user=2, noise_rate=0.0, interactions_per_user=40, seed=2)
        ds = generate_synthetic(spec)
        for u in range(spec.num_users):
            cats = set(ds.item_category[ds.log.items[ds.log.users == u]].tolist())
            assert len(cats) == 2

    def test_seeded(self):
        spec = SyntheticSpec(num_users=30, num_items=100, interactions_per_user=20, seed=9)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert np.array_equal(a.log.items, b.log.items)
        assert np.array_equal(a.log.timestamps, b.log.timestamps)

    def test_categories_partition_items(self):
        ds = generate_synthetic(SyntheticSpec(num_users=5, num_items=103, num_planted_categories=4,
                                              interactions_per_user=5))
        counts = np.bincount(ds.item_category)
        assert counts.sum() == 103 and counts.max() - counts.min() <= 1

    def test_full_noise_accepted(self):
        ds = generate_synthetic(SyntheticSpec(num_users=5, num_items=50, noise_rate=1.0,
                                              interactions_per_user=10))
        assert len(ds.log) == 50

    def test_timestamps_fit_split(self):
        spec = SyntheticSpec(num_users=40, num_items=100, interactions_per_user=30)
        split = chronological_split(generate_synthetic(spec).log, spec.span_days)
        assert len(split.train) and len(split.validation) and len(split.test)

    @staticmethod
    def widest_span(spec):
        """Largest cyclic ring span of one user's items within one category."""
        ds = generate_synthetic(spec)
        rings = np.array_split(np.random.default_rng(spec.seed).permutation(spec.num_items),
                               spec.num_planted_categories)
        position = {int(i): k for ring in rings for k, i in enumerate(ring)}
        widest = 0
        for u in range(spec.num_users):
            own = ds.log.items[ds.log.users == u]
            for c in ds.user_categories[u]:
                pos = np.sort([position[int(i)] for i in own if ds.item_category[i] == c])
                gaps = np.diff(np.concatenate([pos, [pos[0] + len(rings[c])]]))
                widest = max(widest, len(rings[c]) - gaps.max() + 1)
        return widest

    def test_window_share(self):
        # 100-item categories, 20-item windows, at most 12 draws per user so windows never run dry
        spec = SyntheticSpec(num_users=30, num_items=400, interests_per_user=2, noise_rate=0.0,
                             interactions_per_user=12, interest_width=0.2, seed=4)
        assert self.widest_span(spec) <= 20
        assert self.widest_span(replace(spec, window_share=0.0)) > 20

    @pytest.mark.parametrize("bad", [dict(interests_per_user=5), dict(noise_rate=1.5),
                                     dict(num_users=0), dict(interest_width=0.0),
                                     dict(window_share=1.5)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**bad))

    def test_ground_truth_files(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(num_users=3, num_items=8, interactions_per_user=2))
        write_ground_truth(ds, tmp_path / "items.tsv", tmp_path / "users.tsv")
        items = (tmp_path / "items.tsv").read_text().splitlines()
        users = (tmp_path / "users.tsv").read_text().splitlines()
        assert len(items) == 8 and len(users) == 3
        assert users[0].split("\t")[1].count(",") == 1
