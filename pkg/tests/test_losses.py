import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mwds import gradsuite
from mwds import losses as L
from mwds import tensor as T
from mwds.losses import LossError, LossKind, LossSpec, NBestScores
from mwds.nbest import CLS_ID, MASK_ID
from mwds.scorer import ScorerConfig, ScorerModel
from mwds.tensor import Tensor


@pytest.fixture(autouse=True)
def float64():
    with T.precision(64):
        yield


def plain(scores, E=None, first=None):
    """NBestScores whose interpolated cost is exactly ``scores``."""
    n = len(scores)
    return NBestScores(np.zeros(n) if first is None else first, Tensor(np.asarray(scores, float)),
                       None if E is None else np.asarray(E, float), w1=0.0, w2=1.0)


def value(t):
    return float(t.data)


costs = hnp.arrays(np.float64, st.integers(2, 10), elements=st.floats(-20, 20))


def random_case(seed, n=8):
    rng = np.random.default_rng(seed)
    first = rng.normal(0, 0.1, n)
    E = rng.integers(0, 6, n).astype(float)
    student = NBestScores(first, Tensor(rng.normal(0, 1, n)), E)
    teacher = NBestScores(first, rng.normal(0, 1, n), E)
    return student, teacher


class TestPosterior:
    def test_equal_scores_uniform(self):
        np.testing.assert_allclose(L.nbest_posterior(plain([3.0] * 4)).data, 0.25)

    @pytest.mark.parametrize("temp", [0.5, 1.0, 2.0, 7.0])
    def test_log3_gap(self, temp):
        p = L.nbest_posterior(plain([0.0, temp * math.log(3.0)]), temp).data
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-12)

    def test_huge_temperature_is_uniform(self):
        rng = np.random.default_rng(0)
        p = L.nbest_posterior(plain(rng.normal(0, 10, 8)), 1e9).data
        np.testing.assert_allclose(p, 1 / 8, atol=1e-6)

    def test_lower_cost_is_more_probable(self):
        p = L.nbest_posterior(plain([1.0, 0.0, 2.0])).data
        assert p[1] > p[0] > p[2]

    def test_rejects_bad_temperature(self):
        with pytest.raises(LossError):
            L.nbest_posterior(plain([0.0, 1.0]), 0.0)

    def test_interpolation(self):
        ns = NBestScores([1.0, 2.0], Tensor([0.5, -0.5]), w1=20.0, w2=1.0)
        np.testing.assert_allclose(ns.interpolated().data, [20.5, 39.5])
        np.testing.assert_allclose(ns.interpolated_values(), [20.5, 39.5])


class TestMwer:
    def test_worked_example(self):
        ns = plain([0.0, math.log(9.0)], E=[0, 2])
        assert value(L.mwer_loss(ns)) == pytest.approx(-0.8, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(costs, st.integers(0, 9))
    def test_equal_distances_give_zero(self, s, e):
        assert abs(value(L.mwer_loss(plain(s, E=[e] * len(s))))) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(2, 10), elements=st.integers(0, 9)))
    def test_uniform_posterior_gives_zero(self, E):
        assert abs(value(L.mwer_loss(plain(np.zeros(len(E)), E=E)))) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(costs, st.floats(-100, 100), st.data())
    def test_score_and_distance_shift_invariance(self, s, c, data):
        E = np.array(data.draw(st.lists(st.integers(0, 9), min_size=len(s), max_size=len(s))),
                     dtype=float)
        base = value(L.mwer_loss(plain(s, E=E)))
        assert abs(value(L.mwer_loss(plain(s + c, E=E))) - base) < 1e-9
        assert abs(value(L.mwer_loss(plain(s, E=E + 3.0))) - base) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(costs, st.data())
    def test_bounded_by_distance_spread(self, s, data):
        E = np.array(data.draw(st.lists(st.integers(0, 9), min_size=len(s), max_size=len(s))),
                     dtype=float)
        assert abs(value(L.mwer_loss(plain(s, E=E)))) <= np.abs(E - E.mean()).max() + 1e-12

    def test_needs_distances(self):
        with pytest.raises(LossError, match="edit distances"):
            L.mwer_loss(plain([0.0, 1.0]))


class TestPosteriorCE:
    def test_worked_example(self):
        teacher = plain([0.0, 2.0 * math.log(3.0)])
        student = plain([1.0, 1.0])
        assert value(L.posterior_ce_loss(student, teacher, 2.0)) == pytest.approx(math.log(2),
                                                                                abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_minimum_is_teacher_entropy(self, seed):
        student, teacher = random_case(seed)
        q = L.nbest_posterior(teacher, 2.0).data
        entropy = -(q * np.log(q)).sum()
        same = NBestScores(student.first_pass, Tensor(teacher.second_pass), student.edit_distances)
        assert abs(value(L.posterior_ce_loss(same, teacher, 2.0)) - entropy) < 1e-9
        assert value(L.posterior_ce_loss(student, teacher, 2.0)) >= entropy - 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_uniform_teacher_jensen(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        student = plain(rng.normal(0, 2, n))
        loss = value(L.posterior_ce_loss(student, plain(np.zeros(n)), 2.0))
        p = L.nbest_posterior(student, 2.0).data
        assert loss == pytest.approx(np.mean(-np.log(p)), abs=1e-12)
        assert loss >= math.log(n) - 1e-12

    @settings(max_examples=50, deadline=None)
    @given(costs, st.floats(-100, 100))
    def test_score_shift_invariance(self, s, c):
        teacher = plain(s[::-1].copy())
        base = value(L.posterior_ce_loss(plain(s), teacher, 2.0))
        assert abs(value(L.posterior_ce_loss(plain(s + c), teacher, 2.0)) - base) < 1e-9
        assert abs(value(L.posterior_ce_loss(plain(s), plain(s[::-1] + c), 2.0)) - base) < 1e-9

    def test_huge_temperature_gives_log_n(self):
        student, teacher = random_case(0)
        assert value(L.posterior_ce_loss(student, teacher, 1e9)) == pytest.approx(math.log(8),
                                                                                abs=1e-6)

    def test_teacher_is_constant(self):
        student, teacher = random_case(1)
        t = Tensor(teacher.second_pass, requires_grad=True)
        with T.Tape() as tape:
            loss = L.posterior_ce_loss(student, NBestScores(teacher.first_pass, t), 2.0)
        (g,) = tape.gradient(loss, [t])
        assert not g.any()


class TestOracleCorrected:
    @pytest.mark.parametrize("seed", range(5))
    def test_alpha_zero_is_posterior_ce(self, seed):
        student, teacher = random_case(seed)
        assert value(L.oracle_corrected_loss(student, teacher, 2.0, 0.0)) == value(
            L.posterior_ce_loss(student, teacher, 2.0))

    def test_worked_example(self):
        student = plain([0.5, 0.5], E=[0, 3])
        teacher = plain([0.0, 1.0], E=[0, 3])
        ce = value(L.posterior_ce_loss(student, teacher, 2.0))
        total = value(L.oracle_corrected_loss(student, teacher, 2.0, 1.0))
        assert total - ce == pytest.approx(math.log(2), abs=1e-12)

    def test_one_hot_on_oracle_removes_correction(self):
        student = plain([0.0, 1000.0, 1000.0], E=[0, 1, 2])
        assert value(L.oracle_correction(student)) < 1e-12

    def test_correction_uses_unit_temperature(self):
        student = plain([0.0, math.log(3.0)], E=[1, 0])
        assert value(L.oracle_correction(student)) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_oracle_tie_goes_low(self):
        student = plain([0.0, math.log(3.0)], E=[0, 0])
        assert value(L.oracle_correction(student)) == pytest.approx(math.log(4 / 3), abs=1e-12)


def loop_mse(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


class TestMse:
    def test_nbest_identity(self):
        student, teacher = random_case(2)
        same = NBestScores(teacher.first_pass, Tensor(teacher.second_pass))
        assert value(L.nbest_mse_loss(teacher, same)) == 0.0

    def test_nbest_single(self):
        assert value(L.nbest_mse_loss(plain([3.0]), plain([1.0]))) == 4.0

    @pytest.mark.parametrize("seed", range(5))
    def test_nbest_loop_oracle(self, seed):
        student, teacher = random_case(seed, n=10)
        expected = loop_mse(student.interpolated_values(), teacher.interpolated_values())
        assert abs(value(L.nbest_mse_loss(teacher, student)) - expected) < 1e-9

    def test_mse_definition(self):
        assert value(L.mse_loss([0.0], Tensor([2.0]))) == 4.0
        assert value(L.mse_loss([1.5, -2.0], Tensor([1.5, -2.0]))) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_mse_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(0, 3, 64), rng.normal(0, 3, 64)
        assert abs(value(L.mse_loss(a, Tensor(b))) - loop_mse(a, b)) < 1e-9

    def test_mse_shape_mismatch(self):
        with pytest.raises(LossError):
            L.mse_loss([1.0, 2.0], Tensor([1.0]))


class TestCombined:
    def test_singleton_equals_component(self):
        student, teacher = random_case(3)
        spec = LossSpec(LossKind.COMBO, weights={LossKind.POST_CE: 1.0})
        assert value(L.combined_loss(spec, student, teacher)) == value(
            L.posterior_ce_loss(student, teacher, 2.0))

    def test_component_sum(self):
        student, teacher = random_case(4)
        spec = LossSpec.from_name("nmse+mwer", beta=0.01)
        expected = 0.01 * value(L.nbest_mse_loss(teacher, student)) + value(L.mwer_loss(student))
        assert abs(value(L.combined_loss(spec, student, teacher)) - expected) < 1e-12

    def test_three_way_weights(self):
        student, teacher = random_case(5)
        spec = LossSpec.from_name("post_ce+nmse+mwer", beta=0.01, gamma=0.5)
        expected = (0.5 * value(L.posterior_ce_loss(student, teacher, 2.0))
                    + 0.01 * value(L.nbest_mse_loss(teacher, student))
                    + 0.5 * value(L.mwer_loss(student)))
        assert abs(value(L.combined_loss(spec, student, teacher)) - expected) < 1e-12

    def test_only_zero_valued_component(self):
        _, teacher = random_case(6)
        student = NBestScores(teacher.first_pass, Tensor(teacher.second_pass),
                              teacher.edit_distances)
        spec = LossSpec(LossKind.COMBO, weights={LossKind.NMSE: 1.0, LossKind.MWER: 0.0})
        assert value(L.combined_loss(spec, student, teacher)) == 0.0

    def test_batch_is_mean_of_items(self):
        pairs = [random_case(s) for s in range(4)]
        spec = LossSpec.from_name("post_ce")
        items = [value(L.combined_loss(spec, s, t)) for s, t in pairs]
        batch = L.batch_nbest_loss(spec, [s for s, _ in pairs], [t for _, t in pairs])
        assert value(batch) == pytest.approx(np.mean(items), abs=1e-12)

    def test_missing_teacher(self):
        student, _ = random_case(0)
        with pytest.raises(LossError, match="teacher"):
            L.combined_loss(LossSpec.from_name("post_ce"), student, None)


class TestLossSpec:
    @pytest.mark.parametrize("name, weights", [
        ("nmse+mwer", {LossKind.NMSE: 0.01, LossKind.MWER: 1.0}),
        ("post_ce+nmse", {LossKind.POST_CE: 1.0, LossKind.NMSE: 0.01}),
        ("post_ce+mwer", {LossKind.POST_CE: 1.0, LossKind.MWER: 0.01}),
        ("post_ce+nmse+mwer", {LossKind.POST_CE: 0.5, LossKind.NMSE: 0.01, LossKind.MWER: 0.5}),
    ])
    def test_named_combos(self, name, weights):
        assert LossSpec.from_name(name).components() == weights

    def test_single_kind(self):
        spec = LossSpec.from_name("post_ce", temperature=3.0)
        assert spec.kind is LossKind.POST_CE and spec.temperature == 3.0
        assert spec.needs_teacher and not spec.needs_edit_distances
        assert LossSpec.from_name("mwer").needs_edit_distances

    @pytest.mark.parametrize("name", ["bogus", "combo"])
    def test_rejects_unknown(self, name):
        with pytest.raises(LossError):
            LossSpec.from_name(name)

    def test_rejects_bad_weights(self):
        with pytest.raises(LossError):
            LossSpec(LossKind.COMBO, weights={LossKind.MLM: 1.0})
        with pytest.raises(LossError):
            LossSpec(LossKind.COMBO, weights={LossKind.MWER: 0.0})
        with pytest.raises(LossError):
            LossSpec(temperature=-1.0)


class TestMlm:
    cfg = ScorerConfig(layers=1, hidden_dim=8, heads=2, ffn_dim=8, vocab_size=10, max_len=8)

    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 10)))
        assert value(L.masked_cross_entropy(logits, [4, 5, 6])) == pytest.approx(math.log(10))

    def test_uniform_model(self):
        model = ScorerModel(self.cfg).copy(np.float64)
        model.params["tok_emb"].data[:] = 0
        ids = np.array([[CLS_ID, MASK_ID, 5]])
        targets = np.array([[-1, 7, -1]])
        loss = L.mlm_loss(model, ids, np.ones_like(ids, bool), targets)
        assert value(loss) == pytest.approx(math.log(10), abs=1e-12)

    def test_confident_correct_logits(self):
        logits = np.full((2, 10), -1e3)
        logits[0, 4] = logits[1, 9] = 0.0
        assert value(L.masked_cross_entropy(Tensor(logits), [4, 9])) < 1e-12

    def test_two_positions_average(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 10))
        both = value(L.masked_cross_entropy(Tensor(logits), [3, 8]))
        one = value(L.masked_cross_entropy(Tensor(logits[:1]), [3]))
        two = value(L.masked_cross_entropy(Tensor(logits[1:]), [8]))
        assert both == pytest.approx((one + two) / 2, abs=1e-12)

    def test_mask_tokens_contract(self):
        rng = np.random.default_rng(0)
        seqs = [[CLS_ID] + rng.integers(4, 50, rng.integers(1, 20)).tolist() for _ in range(400)]
        ids, pad, targets = L.mask_tokens(seqs, 50, rng)
        assert (targets[:, 0] == -1).all() and (ids[:, 0] == CLS_ID).all()
        assert ((targets >= 0).sum(axis=1) >= 1).all()
        assert not (targets[~pad] >= 0).any()
        chosen = targets >= 0
        originals = np.zeros_like(ids)
        for i, s in enumerate(seqs):
            originals[i, :len(s)] = s
        np.testing.assert_array_equal(targets[chosen], originals[chosen])
        np.testing.assert_array_equal(ids[~chosen & pad], originals[~chosen & pad])
        frac_masked = (ids[chosen] == MASK_ID).mean()
        assert 0.72 < frac_masked < 0.88

    def test_mask_tokens_deterministic(self):
        seqs = [[CLS_ID, 5, 6, 7, 8], [CLS_ID, 9]]
        a = L.mask_tokens(seqs, 12, np.random.default_rng(3))
        b = L.mask_tokens(seqs, 12, np.random.default_rng(3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestPllDistill:
    def test_equal(self):
        assert value(L.pll_distill_loss(Tensor(2.5), 2.5)) == 0.0

    def test_definition(self):
        assert value(L.pll_distill_loss(Tensor(0.0), 3.0)) == 9.0

    def test_batch_mean(self):
        s, t = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 4.5])
        items = [value(L.pll_distill_loss(Tensor(a), b)) for a, b in zip(s, t)]
        assert value(L.pll_distill_loss(Tensor(s), t)) == pytest.approx(np.mean(items))

    def test_rejects_non_finite_target(self):
        with pytest.raises(LossError):
            L.pll_distill_loss(Tensor([1.0]), [math.inf])


@pytest.mark.parametrize("name", sorted(gradsuite.suite()))
def test_gradients_match_finite_differences(name):
    worst = gradsuite.run(instances=5, names=[name])[name]
    assert worst < 1e-4
