"""Interaction modules against an independent scalar re-implementation."""

import math

import numpy as np
import pytest

from conftest import fd_gradcheck, to_double
from siarank import autodiff as ad
from siarank import interaction as inter
from siarank.autodiff import Tensor
from siarank.interaction import Variant


# --- straight-line scalar oracle (pure python floats, no numpy reuse) -------

def gelu_s(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def sigmoid_s(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def cos_s(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def euc_s(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def oracle_final(eq, ed, w, with_coseuc: bool) -> float:
    n = len(eq)
    m = [max(a, b) for a, b in zip(eq, ed)]
    h1 = [gelu_s(sum(w["w1"][i][j] * m[j] for j in range(n))) for i in range(2 * n)]
    h2 = [gelu_s(sum(w["w2"][i][j] * h1[j] for j in range(2 * n))) + m[i]
          for i in range(n)]
    s = sum(w["w_out"][i] * h2[i] for i in range(n))
    if with_coseuc:
        s += w["w_out"][n] * cos_s(eq, ed) + w["w_out"][n + 1] * euc_s(eq, ed)
    return math.tanh(s)


def oracle_twinbert(eq, ed, w) -> float:
    n = len(eq)
    m = [max(a, b) for a, b in zip(eq, ed)]
    h = [gelu_s(sum(w["wr"][i][j] * m[j] for j in range(n)) + w["br"][i]) + m[i]
         for i in range(n)]
    return sigmoid_s(sum(w["wo"][i] * h[i] for i in range(n)) + float(w["bo"]))


def oracle_single_hidden(eq, ed, w) -> float:
    n = len(eq)
    v = list(eq) + list(ed)
    z = [sum(w["wh"][i][j] * v[j] for j in range(2 * n)) + w["bh"][i]
         for i in range(3)]
    feats = z + [euc_s(eq, ed), cos_s(eq, ed)]
    return sigmoid_s(sum(w["wo"][i] * feats[i] for i in range(5)) + float(w["bo"]))


ORACLES = {
    Variant.FINAL: lambda eq, ed, w: oracle_final(eq, ed, w, True),
    Variant.FINAL_NO_COSEUC: lambda eq, ed, w: oracle_final(eq, ed, w, False),
    Variant.TWINBERT: oracle_twinbert,
    Variant.SINGLE_HIDDEN: oracle_single_hidden,
}

PARAMETRIC = list(ORACLES)


def _random_case(variant, n, seed):
    rng = np.random.default_rng(seed)
    weights = to_double(inter.init_interaction(variant, n, seed))
    eq = Tensor(rng.normal(size=n), dtype=np.float64)
    ed = Tensor(rng.normal(size=n), dtype=np.float64)
    return eq, ed, weights


class TestScalarOracle:
    @pytest.mark.parametrize("variant", PARAMETRIC)
    def test_matches_oracle(self, variant):
        for seed in range(40):
            n = 4 + (seed % 5) * 3
            eq, ed, w = _random_case(variant, n, seed)
            got = float(inter.score(variant, eq, ed, w).data)
            arrays = {k: t.data.tolist() for k, t in w.items()}
            want = ORACLES[variant](eq.data.tolist(), ed.data.tolist(), arrays)
            assert got == pytest.approx(want, abs=1e-6)

    @pytest.mark.parametrize("variant", PARAMETRIC)
    def test_fast_path_matches_taped_eval(self, variant):
        for seed in range(20):
            eq, ed, w = _random_case(variant, 10, seed + 100)
            taped = float(inter.score(variant, eq, ed, w).data)
            fast = inter.score_fast(variant, eq.data, ed.data,
                                    inter.weights_as_arrays(w))
            assert fast == pytest.approx(taped, abs=1e-9)


class TestCosine:
    def test_identical_vectors(self):
        v = Tensor(np.array([0.3, -1.2, 0.7]))
        assert float(inter.score_cosine(v, v).data) == pytest.approx(1.0, abs=1e-6)

    def test_opposite_vectors(self):
        v = Tensor(np.array([0.3, -1.2, 0.7]))
        neg = Tensor(-v.data)
        assert float(inter.score_cosine(v, neg).data) == pytest.approx(-1.0, abs=1e-6)

    def test_zero_vector_convention(self):
        v = Tensor(np.array([0.3, -1.2, 0.7]))
        zero = Tensor(np.zeros(3))
        assert float(inter.score_cosine(zero, v).data) == 0.0


class TestRangesAndStructure:
    @pytest.mark.parametrize("variant", PARAMETRIC)
    def test_output_in_declared_range(self, variant):
        lo, hi = inter.output_range(variant)
        for seed in range(25):
            eq, ed, w = _random_case(variant, 12, seed + 300)
            value = float(inter.score(variant, eq, ed, w).data)
            assert lo < value < hi

    @pytest.mark.parametrize("variant", [Variant.TWINBERT, Variant.SINGLE_HIDDEN])
    def test_zero_weights_give_half(self, variant):
        eq, ed, w = _random_case(variant, 8, 0)
        for t in w.values():
            t.data = np.zeros_like(t.data)
        assert float(inter.score(variant, eq, ed, w).data) == 0.5

    def test_identical_embeddings_feature_values(self):
        rng = np.random.default_rng(5)
        v = Tensor(rng.normal(size=6), dtype=np.float64)
        assert float(ad.cosine_similarity(v, v).data) == pytest.approx(1.0, abs=1e-12)
        assert float(ad.euclidean_distance(v, v).data) == 0.0

    def test_final_reduces_to_no_coseuc_when_tail_zeroed(self):
        eq, ed, w = _random_case(Variant.FINAL, 10, 77)
        w["w_out"].data[-2:] = 0.0
        reduced = {"w1": w["w1"], "w2": w["w2"],
                   "w_out": Tensor(w["w_out"].data[:-2].copy(), requires_grad=True)}
        full = float(inter.score(Variant.FINAL, eq, ed, w).data)
        trimmed = float(inter.score(Variant.FINAL_NO_COSEUC, eq, ed, reduced).data)
        assert full == pytest.approx(trimmed, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        w = inter.init_interaction(Variant.FINAL, 8, 0)
        with pytest.raises(ValueError, match="equal 1-d"):
            inter.score(Variant.FINAL, Tensor(np.zeros(8)), Tensor(np.zeros(9)), w)

    def test_eval_mode_deterministic(self):
        eq, ed, w = _random_case(Variant.FINAL, 16, 3)
        a = float(inter.score(Variant.FINAL, eq, ed, w).data)
        b = float(inter.score(Variant.FINAL, eq, ed, w).data)
        assert a == b

    def test_train_mode_dropout_active_only_with_flag(self):
        eq, ed, w = _random_case(Variant.FINAL, 16, 4)
        eval_score = float(inter.score(Variant.FINAL, eq, ed, w).data)
        train_score = float(inter.score(Variant.FINAL, eq, ed, w, train=True,
                                        dropout_seed=11).data)
        assert eval_score != train_score

    def test_permutation_equivariance_of_final(self):
        n = 9
        eq, ed, w = _random_case(Variant.FINAL, n, 21)
        rng = np.random.default_rng(2)
        perm = rng.permutation(n)
        base = float(inter.score(Variant.FINAL, eq, ed, w).data)
        w_perm = {
            "w1": Tensor(w["w1"].data[:, perm].copy()),
            "w2": Tensor(w["w2"].data[perm, :].copy()),
            "w_out": Tensor(np.concatenate([w["w_out"].data[:n][perm],
                                            w["w_out"].data[n:]]).copy()),
        }
        permuted = float(inter.score(
            Variant.FINAL,
            Tensor(eq.data[perm].copy()), Tensor(ed.data[perm].copy()), w_perm,
        ).data)
        assert permuted == pytest.approx(base, abs=1e-6)


class TestGradients:
    @pytest.mark.parametrize("variant", PARAMETRIC)
    def test_finite_differences(self, variant):
        rng = np.random.default_rng(9)
        eq, ed, w = _random_case(variant, 6, 500)
        eq.requires_grad = True
        ed.requires_grad = True
        # keep embeddings away from elementwise-max ties
        ed.data += np.where(rng.normal(size=6) > 0, 0.4, -0.4)

        def forward():
            return inter.score(variant, eq, ed, w)

        fd_gradcheck(forward, [eq, ed, *w.values()], rng=rng, max_coords=5)

    def test_cosine_gradient(self):
        rng = np.random.default_rng(10)
        eq = Tensor(rng.normal(size=7), requires_grad=True, dtype=np.float64)
        ed = Tensor(rng.normal(size=7) + 0.2, requires_grad=True, dtype=np.float64)
        fd_gradcheck(lambda: inter.score_cosine(eq, ed), [eq, ed], rng=rng)
