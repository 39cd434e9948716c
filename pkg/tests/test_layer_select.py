import numpy as np
import pytest

from attnalign.errors import DataError
from attnalign.grounding import AASTable
from attnalign.layer_select import dominant_layers, influential_layers


def _table(values, steps=1, variant="noun-v2t", role="sub"):
    """values: dict[(clip, layer)] -> scalar or list of per-step scalars."""
    table = AASTable()
    for (clip, layer), v in values.items():
        seq = v if isinstance(v, (list, tuple)) else [v] * steps
        for step, value in enumerate(seq):
            table.add(clip, layer, step, variant, role, value)
    return table


def _random_table(rng, n_layers, n_videos, steps=2, quantize=True):
    values = {}
    for v in range(n_videos):
        for l in range(n_layers):
            seq = rng.random(steps)
            if quantize:  # force ties so the tie-break paths are exercised
                seq = np.round(seq, 1)
            values[(f"v{v}", l)] = list(seq)
    return _table(values, steps=steps)


# -- independent brute-force oracle -------------------------------------------

def _oracle_influential(table, top_k, select_k):
    clips = table.clips()
    layers = table.layers()
    per_video = table.step_averaged()

    freq = {}
    for l in layers:
        count = 0
        for c in clips:
            mine = per_video[(c, l)]
            strictly_better = [m for m in layers if per_video[(c, m)] > mine]
            tied_before = [m for m in layers
                           if per_video[(c, m)] == mine and m < l]
            if len(strictly_better) + len(tied_before) < top_k:
                count += 1
        freq[l] = count
    # np.mean here too: the oracle's independence is in the ranking semantics,
    # and tie comparisons need the identical accumulation order
    mag = {l: float(np.mean([per_video[(c, l)] for c in clips])) for l in layers}

    def rank(scores, l):
        return 1 + sum(1 for m in layers if scores[m] > scores[l])

    order = sorted(
        layers,
        key=lambda l: (rank(freq, l) + rank(mag, l), -mag[l], l),
    )
    return order[:select_k]


def _oracle_dominant(table, labels, layers):
    per_video = table.step_averaged()
    clips = table.clips()
    succ = [c for c in clips if labels[c]]
    fail = [c for c in clips if not labels[c]]
    rows = []
    for l in layers:
        ms = float(np.mean([per_video[(c, l)] for c in succ]))
        mf = float(np.mean([per_video[(c, l)] for c in fail]))
        if len(succ) == len(fail):
            separation = (ms - mf) / 2.0 - (mf - ms) / 2.0
        else:
            ma = float(np.mean([per_video[(c, l)] for c in clips]))
            separation = (ms - ma) - (mf - ma)
        rows.append((l, separation))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return [l for l, _ in rows]


class TestInfluential:
    def test_single_video_degenerates_to_magnitude(self):
        rng = np.random.default_rng(0)
        table = _random_table(rng, n_layers=6, n_videos=1, quantize=False)
        selected, stats = influential_layers(table, top_k_per_video=3, select_k=3)
        per_video = table.step_averaged()
        by_magnitude = sorted(range(6), key=lambda l: (-per_video[("v0", l)], l))[:3]
        assert selected == by_magnitude
        assert all(s.frequency in (0, 1) for s in stats)

    def test_crafted_double_winner_comes_first(self):
        # layer 3 wins both frequency and magnitude on every video
        values = {}
        for v in range(4):
            for l in range(5):
                values[(f"v{v}", l)] = 0.9 if l == 3 else 0.1 * (l + 1) / 2
        table = _table(values)
        selected, _ = influential_layers(table, top_k_per_video=2, select_k=5)
        assert selected[0] == 3
        assert selected == _oracle_influential(table, 2, 5)

    def test_all_identical_breaks_ties_by_index(self):
        values = {(f"v{v}", l): 0.5 for v in range(3) for l in range(6)}
        table = _table(values)
        selected, _ = influential_layers(table, top_k_per_video=2, select_k=4)
        assert selected == [0, 1, 2, 3]

    def test_matches_oracle_on_random_tables(self):
        rng = np.random.default_rng(1)
        for trial in range(25):
            n_layers = int(rng.integers(2, 9))
            n_videos = int(rng.integers(1, 11))
            table = _random_table(rng, n_layers, n_videos)
            top_k = int(rng.integers(1, n_layers + 1))
            select_k = int(rng.integers(1, n_layers + 1))
            got, _ = influential_layers(table, top_k, select_k)
            assert got == _oracle_influential(table, top_k, select_k), f"trial {trial}"

    def test_shift_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        table = _random_table(rng, 5, 4)
        base, _ = influential_layers(table, 3, 5)
        shifted = AASTable()
        scaled = AASTable()
        for r in table.rows:
            shifted.add(r["clip_id"], r["layer"], r["step"], r["variant"], r["role"],
                        r["aas"] + 7.5)
            scaled.add(r["clip_id"], r["layer"], r["step"], r["variant"], r["role"],
                       r["aas"] * 3.25)
        assert influential_layers(shifted, 3, 5)[0] == base
        assert influential_layers(scaled, 3, 5)[0] == base

    def test_empty_table_rejected(self):
        with pytest.raises(DataError):
            influential_layers(AASTable())

    def test_missing_layer_rejected(self):
        table = _table({("v0", 0): 0.5, ("v0", 1): 0.5, ("v1", 0): 0.5})
        with pytest.raises(DataError):
            influential_layers(table)


class TestDominant:
    def test_symmetric_sets_have_zero_separation(self):
        values = {}
        for v in range(4):
            for l in range(3):
                values[(f"v{v}", l)] = 0.1 * (l + 1)
        table = _table(values)
        labels = {"v0": True, "v1": True, "v2": False, "v3": False}
        stats = dominant_layers(table, labels, layers=[0, 1, 2])
        assert all(s.separation == 0.0 for s in stats)
        assert all(s.success_gap == -s.failure_gap for s in stats)

    def test_two_video_arithmetic(self):
        table = _table({("s", 0): 0.8, ("f", 0): 0.2})
        stats = dominant_layers(table, {"s": True, "f": False}, layers=[0])
        s = stats[0]
        assert s.mean_all == pytest.approx(0.5)
        assert s.success_gap == pytest.approx(0.3)
        assert s.failure_gap == pytest.approx(-0.3)
        assert s.separation == pytest.approx(0.6)

    def test_matches_oracle_on_random_tables(self):
        rng = np.random.default_rng(3)
        for trial in range(25):
            n_layers = int(rng.integers(2, 9))
            n_videos = int(rng.integers(2, 11))
            table = _random_table(rng, n_layers, n_videos)
            clips = table.clips()
            labels = {c: (i % 2 == 0) for i, c in enumerate(clips)}
            layers = list(range(n_layers))
            got = dominant_layers(table, labels, layers=layers)
            assert [s.layer for s in got] == _oracle_dominant(table, labels, layers)

    def test_dominant_subset_of_influential(self):
        rng = np.random.default_rng(4)
        table = _random_table(rng, 8, 6)
        labels = {c: (i % 2 == 0) for i, c in enumerate(table.clips())}
        influential, _ = influential_layers(table, 4, 4)
        stats = dominant_layers(table, labels, layers=influential)
        assert set(s.layer for s in stats) <= set(influential)
        # the default restriction is the default influential set
        default_influential, _ = influential_layers(table)
        default_stats = dominant_layers(table, labels)
        assert set(s.layer for s in default_stats) <= set(default_influential)

    def test_equal_size_gap_sum_is_zero(self):
        rng = np.random.default_rng(5)
        table = _random_table(rng, 6, 8, quantize=False)
        labels = {c: (i % 2 == 0) for i, c in enumerate(table.clips())}
        stats = dominant_layers(table, labels, layers=list(range(6)))
        total = sum(s.success_gap + s.failure_gap for s in stats)
        assert total == 0.0

    def test_unequal_sets_warn(self):
        table = _table({("a", 0): 0.5, ("b", 0): 0.4, ("c", 0): 0.1})
        labels = {"a": True, "b": True, "c": False}
        with pytest.warns(UserWarning):
            dominant_layers(table, labels, layers=[0])

    def test_unlabeled_video_rejected(self):
        table = _table({("a", 0): 0.5, ("b", 0): 0.4})
        with pytest.raises(DataError):
            dominant_layers(table, {"a": True}, layers=[0])
