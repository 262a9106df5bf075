import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from kvtp.pruners import (
    BACKENDS,
    FramePruneError,
    FrameTokenSet,
    bipartite_merge,
    hard_frame_select,
    load_index,
    prune_frame,
    prune_video,
    random_prune,
    saliency_prune,
    top_k_indices,
)
from kvtp.matrix_io import read_matrix


def frame(rng, p=8, d=3, index=0):
    return FrameTokenSet(rng.standard_normal((p, d)), rng.uniform(0, 1, p), frame_index=index)


class TestRandom:
    def test_full_is_identity(self, rng):
        f = frame(rng)
        out = random_prune(f, f.size, seed=3)
        np.testing.assert_array_equal(out.tokens, f.tokens)
        np.testing.assert_array_equal(out.kept, np.arange(f.size))

    def test_empty(self, rng):
        assert len(random_prune(frame(rng), 0)) == 0

    def test_deterministic(self, rng):
        f = frame(rng, p=4)
        a, b = random_prune(f, 2, seed=11), random_prune(f, 2, seed=11)
        np.testing.assert_array_equal(a.kept, b.kept)
        assert a.kept.size == 2 and np.all(np.diff(a.kept) > 0)

    def test_over_budget(self, rng):
        with pytest.raises(ValueError):
            random_prune(frame(rng, p=4), 5)


class TestSaliency:
    def test_worked_example(self):
        f = FrameTokenSet(np.eye(4), [0.1, 0.9, 0.5, 0.5])
        np.testing.assert_array_equal(saliency_prune(f, 2).kept, [1, 2])

    def test_full_ignores_saliency(self, rng):
        f = frame(rng)
        np.testing.assert_array_equal(saliency_prune(f, f.size, merge_dropped=True).tokens, f.tokens)

    def test_merge_identical(self):
        f = FrameTokenSet([[1.0, 0.0], [1.0, 0.0]], [1.0, 0.0])
        out = saliency_prune(f, 1, merge_dropped=True)
        np.testing.assert_array_equal(out.tokens, [[1.0, 0.0]])
        assert out.merged.tolist() == [True]

    def test_missing_saliency(self):
        with pytest.raises(ValueError):
            saliency_prune(FrameTokenSet(np.eye(3)), 1)

    @given(st.integers(0, 2**32 - 1))
    def test_merge_outputs_are_group_means(self, seed):
        rng = np.random.default_rng(seed)
        f = frame(rng, p=int(rng.integers(2, 12)))
        budget = int(rng.integers(1, f.size + 1))
        out = saliency_prune(f, budget, merge_dropped=True)
        kept = oracles.top_k(f.saliency.tolist(), budget)
        groups = {k: [k] for k in kept}
        for i in range(f.size):
            if i in groups:
                continue
            sims = [oracles.cosine(f.tokens[i], f.tokens[k]) for k in kept]
            j = max(range(len(kept)), key=lambda t: (sims[t], -t))
            groups[kept[j]].append(i)
        expected = [f.tokens[groups[k]].mean(axis=0) for k in kept]
        np.testing.assert_allclose(out.tokens, expected, atol=1e-12)

    def test_top_k_tie_break(self):
        np.testing.assert_array_equal(top_k_indices(np.array([1.0, 2.0, 2.0, 2.0]), 2), [1, 2])


class TestBipartite:
    def test_full_is_identity(self, rng):
        f = frame(rng, p=7)
        out = bipartite_merge(f, 7)
        np.testing.assert_array_equal(out.tokens, f.tokens)

    def test_worked_example(self):
        f = FrameTokenSet([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        out = bipartite_merge(f, 3)
        np.testing.assert_array_equal(out.tokens, [[1, 0], [0, 1], [0, 1]])
        np.testing.assert_array_equal(out.kept, [1, 2, 3])
        assert out.merged.tolist() == [True, False, False]

    def test_identical_tokens(self):
        f = FrameTokenSet(np.tile([0.5, -2.0, 1.0], (9, 1)))
        for budget in range(4, 10):
            np.testing.assert_allclose(bipartite_merge(f, budget).tokens, np.tile([0.5, -2.0, 1.0], (budget, 1)), atol=1e-15)

    def test_too_many_merges(self, rng):
        with pytest.raises(ValueError):
            bipartite_merge(frame(rng, p=6), 2)

    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 14))
        f = frame(rng, p=p)
        budget = int(rng.integers(p - (p + 1) // 2, p + 1))
        out = bipartite_merge(f, budget)
        assert len(out) == budget
        np.testing.assert_allclose(out.tokens, oracles.bipartite(f.tokens.tolist(), budget), atol=1e-12)


class TestHardSelect:
    def test_full(self, rng):
        frames = [frame(rng, index=i) for i in range(4)]
        assert hard_frame_select(frames, np.arange(4.0), 1.0).total_tokens == 32

    def test_twenty_percent(self, rng):
        frames = [frame(rng, index=i) for i in range(10)]
        out = hard_frame_select(frames, rng.permutation(10).astype(float), 0.2)
        assert sum(1 for f in out.frames if len(f)) == 2 and out.total_tokens == 16

    @given(st.integers(1, 20), st.floats(0.01, 1.0))
    def test_count(self, n, fraction):
        rng = np.random.default_rng(n)
        frames = [frame(rng, p=5, index=i) for i in range(n)]
        out = hard_frame_select(frames, rng.standard_normal(n), fraction)
        assert out.total_tokens == math.ceil(fraction * n - 1e-9) * 5


class TestPruneVideo:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_full_budget_passthrough(self, rng, backend):
        frames = [frame(rng, p=6, index=i) for i in range(3)]
        out = prune_video(frames, [6, 6, 6], backend)
        for f, o in zip(frames, out.frames):
            np.testing.assert_array_equal(o.tokens, f.tokens)
            np.testing.assert_array_equal(o.kept, np.arange(6))

    @pytest.mark.parametrize("backend", ["random", "saliency"])
    def test_equal_totals(self, rng, backend):
        frames = [frame(rng, p=10, index=i) for i in range(5)]
        a = prune_video(frames, [2, 2, 2, 2, 2], backend)
        b = prune_video(frames, [7, 0, 1, 0, 2], backend)
        assert a.total_tokens == b.total_tokens == 10

    @pytest.mark.parametrize("backend", BACKENDS)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_invariants(self, backend, seed):
        rng = np.random.default_rng(seed)
        p = 8
        frames = [frame(rng, p=p, index=i) for i in range(4)]
        if backend == "hard":
            budgets = rng.choice([0, p], 4)
        elif backend == "merge":
            budgets = rng.integers(p // 2, p + 1, 4)
        else:
            budgets = rng.integers(0, p + 1, 4)
        a = prune_video(frames, budgets, backend, seed=5)
        b = prune_video(frames, budgets, backend, seed=5)
        for fa, fb, budget in zip(a.frames, b.frames, budgets):
            assert len(fa) == budget
            assert np.all(np.diff(fa.kept) > 0)
            np.testing.assert_array_equal(fa.tokens, fb.tokens)

    def test_errors(self, rng):
        frames = [frame(rng, p=4, index=i) for i in range(2)]
        with pytest.raises(ValueError):
            prune_video(frames, [1], "random")
        with pytest.raises(ValueError):
            prune_frame(frames[0], 2, "bogus")
        with pytest.raises(FramePruneError) as info:
            prune_video(frames, [4, 2], "hard")
        assert info.value.frame_index == 1

    def test_save(self, tmp_path, rng):
        frames = [frame(rng, p=4, index=i) for i in range(3)]
        out = prune_video(frames, [1, 0, 2], "saliency", merge_dropped=True)
        out.save(tmp_path / "t.bin", tmp_path / "t.csv")
        assert read_matrix(tmp_path / "t.bin").shape == (3, 3)
        rows = load_index(tmp_path / "t.csv")
        assert [r[0] for r in rows] == [0, 2, 2]
        assert rows[0][2]  # three dropped tokens fold into the single kept one
