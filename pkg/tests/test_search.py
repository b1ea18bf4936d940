import itertools
import warnings

import numpy as np
import pytest

from cfedit.errors import ExhaustedError
from cfedit.grids import FeatureGrid, single_edit
from cfedit.network import head_logprobs
from cfedit.search import ExplanationResult, SearchConfig, best_edit_exhaustive, greedy_counterfactual

from conftest import brute_force_best_edit, identity_feature_model, random_grid


def min_edit_oracle(model, F, F2, target_class, max_size=2, policy="query-and-distractor-cells"):
    """All flipping edit sets up to max_size, by exhaustive subset enumeration."""
    n = F.cells
    flips = []
    for size in range(1, max_size + 1):
        for qcells in itertools.combinations(range(n), size):
            source_pools = itertools.permutations(range(n), size) if policy == "query-and-distractor-cells" \
                else itertools.product(range(n), repeat=size)
            for sources in source_pools:
                grid = F
                for i, j in zip(qcells, sources):
                    grid = single_edit(grid, F2, i, j)
                if head_logprobs(model, grid).argmax() == target_class:
                    flips.append(frozenset(zip(qcells, sources)))
        if flips:
            return size, flips
    return None, []


class TestBestEditExhaustive:
    def test_identical_grids_tie_break(self):
        model = identity_feature_model(2, 2, 2, 3, seed=1)
        F = FeatureGrid(2, 2, 2, np.ones((4, 2)))  # all cells equal: every edit is a no-op
        i, j2, _ = best_edit_exhaustive(model, F, F, 1)
        assert (i, j2) == (0, 0)

    def test_hand_built_linear_head(self):
        # weight +1 on cell 0 channel 0 for class 1; only the (0, 0) edit helps
        model = identity_feature_model(2, 2, 1, 2, seed=0)
        model.head[1].weights["weight"][...] = 0.0
        model.head[1].weights["bias"][...] = 0.0
        model.head[1].weights["weight"][0, 1] = 1.0
        F = FeatureGrid(2, 2, 1, np.zeros((4, 1)))
        F2 = FeatureGrid(2, 2, 1, np.array([[9.0], [0.0], [0.0], [0.0]]))
        i, j2, score = best_edit_exhaustive(model, F, F2, 1)
        assert (i, j2) == (0, 0)
        assert score == pytest.approx(head_logprobs(model, single_edit(F, F2, 0, 0))[1], abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for k in range(30):
            model = identity_feature_model(3, 3, 2, 3, seed=200 + k, linear=bool(k % 2))
            F = random_grid(rng, 3, 3, 2)
            F2 = random_grid(rng, 3, 3, 2)
            target = int(rng.integers(3))
            got = best_edit_exhaustive(model, F, F2, target)
            want = brute_force_best_edit(model, F, F2, target)
            assert got[:2] == want[:2]
            assert got[2] == pytest.approx(want[2], abs=1e-9)

    def test_respects_exclusions(self):
        rng = np.random.default_rng(5)
        model = identity_feature_model(2, 2, 2, 3, seed=3)
        F = random_grid(rng, 2, 2, 2)
        F2 = random_grid(rng, 2, 2, 2)
        i0, j0, _ = best_edit_exhaustive(model, F, F2, 1)
        i1, j1, _ = best_edit_exhaustive(model, F, F2, 1, excluded_query=[i0], excluded_source=[j0])
        assert i1 != i0 and j1 != j0
        want = brute_force_best_edit(model, F, F2, 1, excluded_query=[i0], excluded_source=[j0])
        assert (i1, j1) == want[:2]

    def test_all_excluded_raises(self):
        model = identity_feature_model(2, 2, 1, 2)
        F = FeatureGrid(2, 2, 1, np.zeros((4, 1)))
        with pytest.raises(ExhaustedError):
            best_edit_exhaustive(model, F, F, 1, excluded_query=range(4))


class TestGreedy:
    def _images_for(self, model, F, F2):
        return F.to_array(), F2.to_array()

    def test_query_already_target_class(self):
        model = identity_feature_model(2, 2, 1, 2, seed=2)
        rng = np.random.default_rng(1)
        img = rng.normal(size=(2, 2, 1))
        target = head_logprobs(model, FeatureGrid.from_array(img)).argmax()
        result = greedy_counterfactual(model, img, img, target)
        assert result.status == "flipped"
        assert result.edit_count == 0
        assert len(result.trajectory) == 1

    def test_two_edit_synthetic_instance(self):
        # class-1 logit = cell0 + cell3 values; both must be overwritten to flip
        model = identity_feature_model(2, 2, 1, 2, seed=0)
        model.head[1].weights["weight"][...] = 0.0
        model.head[1].weights["bias"][...] = 0.0
        model.head[1].weights["weight"][0, 1] = 1.0
        model.head[1].weights["weight"][3, 1] = 1.0
        query = np.full((2, 2, 1), -1.0)
        distractor = np.full((2, 2, 1), 0.5)  # one edit: 0.5 - 1 < 0; two edits: 1 > 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = greedy_counterfactual(model, query, distractor, 1)
        assert result.status == "flipped"
        assert result.edit_count == 2
        assert sorted((i, j) for (i, j, _, _) in result.edits) == [(0, 0), (1, 1)]
        size, flips = min_edit_oracle(
            model, FeatureGrid.from_array(query), FeatureGrid.from_array(distractor), 1
        )
        assert size == 2

    def test_trajectory_and_status_invariants(self, digits_model, digits_surrogate):
        rng = np.random.default_rng(3)
        imgs = digits_surrogate["test_images"]
        from cfedit.network import predict_batch

        preds = predict_batch(digits_model, imgs[:80])
        done = 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for _ in range(10):
                q, d = rng.integers(80, size=2)
                if preds[q] == preds[d]:
                    continue
                result = greedy_counterfactual(
                    digits_model, imgs[q], imgs[d], int(preds[d])
                )
                assert len(result.trajectory) == result.edit_count + 1
                cells = result.edits.query_cells()
                assert len(cells) == len(set(cells))
                if result.status == "flipped":
                    assert result.trajectory[-1][1] >= result.trajectory[-1][0]
                done += 1
        assert done >= 5

    def test_greedy_step_reproducibility(self):
        # each recorded step must be the argmax over the candidates at its state
        rng = np.random.default_rng(8)
        model = identity_feature_model(3, 3, 2, 3, seed=17, linear=False)
        query = rng.normal(size=(3, 3, 2))
        distractor = rng.normal(size=(3, 3, 2))
        F2 = FeatureGrid.from_array(distractor)
        lp_q = head_logprobs(model, FeatureGrid.from_array(query))
        target = int(np.argsort(lp_q.values)[0])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = greedy_counterfactual(model, query, distractor, target)
        state = FeatureGrid.from_array(query)
        ex_q, ex_s = [], []
        for (i, j, i2, j2) in result.edits:
            cell, src = i * 3 + j, i2 * 3 + j2
            bi, bj, _ = best_edit_exhaustive(model, state, F2, target, ex_q, ex_s)
            assert (bi, bj) == (cell, src)
            state = single_edit(state, F2, cell, src)
            ex_q.append(cell)
            ex_s.append(src)

    def test_determinism(self):
        rng = np.random.default_rng(12)
        model = identity_feature_model(3, 3, 2, 3, seed=21)
        query = rng.normal(size=(3, 3, 2))
        distractor = rng.normal(size=(3, 3, 2))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r1 = greedy_counterfactual(model, query, distractor, 2)
            r2 = greedy_counterfactual(model, query, distractor, 2)
        assert r1 == r2

    def test_exclusion_policy_query_only_allows_source_reuse(self):
        model = identity_feature_model(2, 2, 1, 2, seed=0)
        model.head[1].weights["weight"][...] = 0.0
        model.head[1].weights["bias"][...] = 0.0
        model.head[1].weights["weight"][0, 1] = 1.0
        model.head[1].weights["weight"][3, 1] = 1.0
        query = np.full((2, 2, 1), -1.0)
        distractor = np.full((2, 2, 1), -1.0)
        distractor[0, 0, 0] = 0.6  # single good source cell; one edit is not enough
        cfg = SearchConfig(exclusion_policy="query-cells-only")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = greedy_counterfactual(model, query, distractor, 1, cfg)
        assert result.status == "flipped"
        sources = result.edits.source_cells()
        assert sources == [0, 0]  # best source reused under the relaxed policy

    def test_max_edits_exhausts(self):
        rng = np.random.default_rng(14)
        model = identity_feature_model(3, 3, 1, 2, seed=33)
        model.head[1].weights["weight"][...] = 0.0  # head ignores input: never flips
        model.head[1].weights["bias"][...] = np.array([1.0, 0.0])
        query = rng.normal(size=(3, 3, 1))
        distractor = rng.normal(size=(3, 3, 1))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = greedy_counterfactual(
                model, query, distractor, 1, SearchConfig(max_edits=3)
            )
        assert result.status == "exhausted"
        assert result.edit_count == 3

    def test_misclassified_distractor_warns(self):
        model = identity_feature_model(2, 2, 1, 2, seed=1)
        rng = np.random.default_rng(2)
        img = rng.normal(size=(2, 2, 1))
        pred = head_logprobs(model, FeatureGrid.from_array(img)).argmax()
        with pytest.warns(UserWarning, match="distractor"):
            greedy_counterfactual(model, img, img, 1 - pred)


class TestGreedyVsMinimumOracle:
    def test_first_edits_match_unique_minimum(self):
        rng = np.random.default_rng(77)
        checked = 0
        for k in range(60):
            model = identity_feature_model(2, 2, 1, 2, seed=300 + k, linear=bool(k % 2))
            query = rng.normal(size=(2, 2, 1))
            distractor = rng.normal(size=(2, 2, 1)) * 2
            F = FeatureGrid.from_array(query)
            F2 = FeatureGrid.from_array(distractor)
            pred = head_logprobs(model, F).argmax()
            target = 1 - pred
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                result = greedy_counterfactual(model, query, distractor, target)
            if result.status != "flipped" or not (1 <= result.edit_count <= 2):
                continue
            size, flips = min_edit_oracle(model, F, F2, target)
            minimal = [f for f in flips]
            if size != result.edit_count or len(minimal) != 1:
                continue
            greedy_set = frozenset(
                (i * 2 + j, i2 * 2 + j2) for (i, j, i2, j2) in result.edits
            )
            assert greedy_set == minimal[0]
            checked += 1
        assert checked >= 3
