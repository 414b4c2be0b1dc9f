import itertools
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from rbflow.errors import DomainError, EnumerationError
from rbflow.field import NeuronField
from rbflow.scheme import BatchScheme, SchemeKind, realization_rng, s_factor


def canonical(p, r=2, q_B=0.4):
    out = {
        "single": BatchScheme.single(p),
        "drop_one": BatchScheme.drop_one(p),
        "pick_one": BatchScheme.pick_one(p),
        "balanced": BatchScheme.balanced(p, r),
        "all_subsets": BatchScheme.all_subsets(p),
        "bernoulli": BatchScheme.bernoulli(p, q_B),
    }
    if p % r == 0:
        out["disjoint"] = BatchScheme.disjoint(p, r)
    return out


def unit_field():
    """p=2, d=2 field with constant neurons f_1 = (1, 0), f_2 = (0, 1)."""
    f = NeuronField(2, 2, "relu")
    return f, f.pack(np.eye(2), np.zeros((2, 2)), np.ones(2)), np.zeros(2)


def brute_lambda(vals, masks, q, pi):
    """sum_j q_j |F - F^(j)|^2 with an explicit Python loop over batches."""
    full = vals.sum(axis=0)
    total = 0.0
    for m, qj in zip(masks, q):
        fj = sum(vals[i] / pi[i] for i in range(len(m)) if m[i])
        fj = np.zeros_like(full) + fj
        total += qj * float(np.sum((full - fj) ** 2))
    return total


def set_partitions(items, r):
    """All partitions of ``items`` into unordered blocks of size ``r``."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for others in itertools.combinations(rest, r - 1):
        block = (first,) + others
        remaining = [i for i in rest if i not in others]
        for tail in set_partitions(remaining, r):
            yield [block] + tail


@pytest.fixture
def instance():
    f = NeuronField(3, 6, "tanh")
    rng = np.random.default_rng(4)
    return f, f.random_params(rng), rng.normal(size=3)


class TestConstruction:
    def test_explicit_must_cover(self):
        with pytest.raises(DomainError):
            BatchScheme.explicit(3, [[0], [1]])

    def test_explicit_rejects_duplicates(self):
        with pytest.raises(DomainError):
            BatchScheme.explicit(3, [[0, 0, 1], [2]])

    def test_disjoint_needs_divisor(self):
        with pytest.raises(DomainError):
            BatchScheme.disjoint(5, 2)

    @pytest.mark.parametrize("bad", [(0, 1), (4, 0), (4, 5)])
    def test_balanced_bounds(self, bad):
        with pytest.raises(DomainError):
            BatchScheme.balanced(*bad)

    def test_bernoulli_range(self):
        with pytest.raises(DomainError):
            BatchScheme.bernoulli(4, 0.0)

    @pytest.mark.parametrize("name", ["single", "drop_one", "balanced", "disjoint", "bernoulli"])
    def test_dict_roundtrip(self, name):
        s = canonical(6)[name]
        t = BatchScheme.from_dict(s.to_dict())
        assert t.kind is s.kind and t.p == s.p and t.r == s.r and t.q_B == s.q_B

    def test_explicit_roundtrip(self):
        s = BatchScheme.explicit(3, [[0, 1], [2], [0, 2]], [0.5, 0.25, 0.25])
        t = BatchScheme.from_dict(s.to_dict())
        np.testing.assert_array_equal(t.inclusion_probs(), s.inclusion_probs())


class TestQuantities:
    @pytest.mark.parametrize("p", [4, 6])
    def test_inclusion_probs_match_enumeration(self, p):
        for name, s in canonical(p).items():
            masks, q = s.enumerate()
            np.testing.assert_allclose(s.inclusion_probs(), q @ masks, rtol=1e-12, err_msg=name)
            np.testing.assert_allclose(q.sum(), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("p", [4, 6])
    def test_sum_inv_q_matches_enumeration(self, p):
        for name, s in canonical(p).items():
            _, q = s.enumerate()
            np.testing.assert_allclose(s.sum_inv_q(), np.sum(1.0 / q), rtol=1e-10, err_msg=name)

    def test_sum_inv_q_values(self):
        assert BatchScheme.balanced(5, 2).sum_inv_q() == 100.0
        assert BatchScheme.disjoint(6, 2).sum_inv_q() == 9.0
        assert BatchScheme.all_subsets(3).sum_inv_q() == 64.0
        assert BatchScheme.bernoulli(2, 0.5).sum_inv_q() == pytest.approx(16.0)

    def test_drop_one_and_pick_one_probabilities(self):
        assert BatchScheme.drop_one(5).inclusion_prob(2) == pytest.approx(0.8)
        assert BatchScheme.pick_one(5).pi_min == pytest.approx(0.2)
        with pytest.raises(IndexError):
            BatchScheme.pick_one(5).inclusion_prob(5)

    def test_mean_batch_size(self):
        assert BatchScheme.balanced(9, 3).mean_batch_size == pytest.approx(3.0)
        assert BatchScheme.bernoulli(10, 0.3).mean_batch_size == pytest.approx(3.0)

    def test_enumeration_cap(self):
        with pytest.raises(EnumerationError):
            BatchScheme.all_subsets(21).enumerate()
        # closed forms still work past the cap
        assert BatchScheme.all_subsets(21).sum_inv_q() == 2.0**42


class TestHandExamples:
    def test_pick_one_lambda(self):
        f, theta, x = unit_field()
        s = BatchScheme.pick_one(2)
        assert s.lambda_at(f, x, theta, "enumerate") == pytest.approx(2.0)
        assert s.lambda_at(f, x, theta, "closed") == pytest.approx(2.0)
        np.testing.assert_allclose(s.masked_eval(f, [0], x, theta), [2.0, 0.0])

    def test_drop_one_lambda(self):
        f, theta, x = unit_field()
        s = BatchScheme.drop_one(2)
        assert s.lambda_at(f, x, theta, "enumerate") == pytest.approx(2.0)
        assert s.lambda_at(f, x, theta, "closed") == pytest.approx(2.0)

    def test_neuron_stats(self):
        f, theta, x = unit_field()
        st_ = BatchScheme.neuron_stats(f, x, theta)
        assert st_.mu == pytest.approx(math.sqrt(0.5))
        assert st_.sigma2 == pytest.approx(0.5)

    def test_explicit_inclusion_and_sum_inv_q(self):
        s = BatchScheme.explicit(3, [[0, 1], [1, 2]], [0.25, 0.75])
        np.testing.assert_allclose(s.inclusion_probs(), [0.25, 1.0, 0.75])
        assert s.sum_inv_q() == pytest.approx(4 + 4 / 3)
        assert s.sum_inv_q() >= s.n_batches

    def test_balanced_sum_inv_q(self):
        assert BatchScheme.balanced(4, 2).sum_inv_q() == 36.0

    def test_bernoulli_inclusion(self):
        assert BatchScheme.bernoulli(7, 0.5).inclusion_prob(3) == 0.5

    def test_uniform_q_minimises_sum_inv_q(self):
        uni = BatchScheme.explicit(3, [[0], [1, 2]])
        assert uni.sum_inv_q() == pytest.approx(uni.n_batches**2)

    def test_gamma_pick_one_matches_matrix_algebra(self):
        f = NeuronField(2, 2, "tanh")
        rng = np.random.default_rng(3)
        theta, x = f.random_params(rng), rng.normal(size=2)
        J = [f.jacobian_x(x, theta, w) for w in np.eye(2)]
        full = J[0] + J[1]
        ref = 0.5 * np.sum((full - 2 * J[0]) ** 2) + 0.5 * np.sum((full - 2 * J[1]) ** 2)
        np.testing.assert_allclose(BatchScheme.pick_one(2).gamma_at(f, x, theta), ref, rtol=1e-12)
        assert BatchScheme.single(2).gamma_at(f, x, theta) == 0.0


class TestLambda:
    @pytest.mark.parametrize("name", ["drop_one", "pick_one", "balanced", "all_subsets", "bernoulli", "single"])
    def test_closed_form_matches_enumeration(self, instance, name):
        f, theta, x = instance
        s = canonical(6)[name]
        np.testing.assert_allclose(s.lambda_at(f, x, theta, "closed"), s.lambda_at(f, x, theta, "enumerate"),
                                   rtol=1e-10, atol=1e-14)

    @pytest.mark.parametrize("name", ["drop_one", "balanced", "disjoint", "bernoulli"])
    def test_enumeration_matches_brute_force(self, instance, name):
        f, theta, x = instance
        s = canonical(6)[name]
        masks, q = s.enumerate()
        ref = brute_lambda(f.neuron_values(x, theta), masks, q, s.inclusion_probs())
        np.testing.assert_allclose(s.lambda_at(f, x, theta, "enumerate"), ref, rtol=1e-12)

    def test_disjoint_closed_form_is_average_over_partitions(self, instance):
        f, theta, x = instance
        vals = f.neuron_values(x, theta)
        fixed = []
        for part in set_partitions(list(range(6)), 2):
            masks = np.zeros((3, 6), dtype=bool)
            for j, block in enumerate(part):
                masks[j, list(block)] = True
            fixed.append(brute_lambda(vals, masks, np.full(3, 1 / 3), np.full(6, 1 / 3)))
        assert len(fixed) == 15
        s = BatchScheme.disjoint(6, 2)
        np.testing.assert_allclose(s.lambda_at(f, x, theta, "closed"), np.mean(fixed), rtol=1e-12)

    def test_disjoint_endpoints_agree_with_fixed_partition(self, instance):
        f, theta, x = instance
        for r in (1, 6):
            s = BatchScheme.disjoint(6, r)
            np.testing.assert_allclose(s.lambda_at(f, x, theta, "closed"), s.lambda_at(f, x, theta, "enumerate"),
                                       rtol=1e-10, atol=1e-14)

    def test_explicit_uses_enumeration(self, instance):
        f, theta, x = instance
        s = BatchScheme.explicit(6, [[0, 1, 2], [3, 4, 5]], [0.5, 0.5])
        np.testing.assert_allclose(s.lambda_at(f, x, theta), s.lambda_at(f, x, theta, "enumerate"))
        with pytest.raises(DomainError):
            s.lambda_at(f, x, theta, "closed")

    def test_single_is_zero(self, instance):
        f, theta, x = instance
        assert BatchScheme.single(6).lambda_at(f, x, theta) == 0.0

    def test_gamma_matches_brute_force(self, instance):
        f, theta, x = instance
        s = BatchScheme.balanced(6, 3)
        masks, q = s.enumerate()
        full = f.jacobian_x(x, theta)
        ref = sum(qj * np.sum((full - f.jacobian_x(x, theta, m / s.inclusion_probs())) ** 2)
                  for m, qj in zip(masks, q))
        np.testing.assert_allclose(s.gamma_at(f, x, theta), ref, rtol=1e-12)


class TestSampling:
    @pytest.mark.parametrize("name", ["drop_one", "pick_one", "balanced", "disjoint", "all_subsets", "bernoulli"])
    def test_empirical_inclusion(self, name):
        s = canonical(6)[name]
        masks = s.sample_masks(np.random.default_rng(0), 200_000)
        np.testing.assert_allclose(masks.mean(axis=0), s.inclusion_probs(), atol=5e-3)

    def test_balanced_sizes(self):
        masks = BatchScheme.balanced(7, 3).sample_masks(np.random.default_rng(1), (10, 20))
        assert masks.shape == (10, 20, 7)
        assert np.all(masks.sum(axis=-1) == 3)

    def test_disjoint_blocks(self):
        masks = BatchScheme.disjoint(6, 2).sample_masks(np.random.default_rng(1), 100)
        blocks = {tuple(np.flatnonzero(m)) for m in masks}
        assert blocks == {(0, 1), (2, 3), (4, 5)}

    def test_explicit_law(self):
        s = BatchScheme.explicit(3, [[0, 1], [2]], [0.75, 0.25])
        masks = s.sample_masks(np.random.default_rng(2), 100_000)
        np.testing.assert_allclose(masks[:, 2].mean(), 0.25, atol=5e-3)

    def test_realization_streams_are_reproducible(self):
        a = realization_rng(7, 3).random(4)
        np.testing.assert_array_equal(a, realization_rng(7, 3).random(4))
        assert not np.allclose(a, realization_rng(7, 4).random(4))

    def test_masked_eval_reweights(self, instance):
        f, theta, x = instance
        s = BatchScheme.pick_one(6)
        np.testing.assert_allclose(s.masked_eval(f, [2], x, theta), 6 * f.eval_neuron(2, x, theta))
        with pytest.raises(IndexError):
            s.masked_eval(f, [6], x, theta)


@settings(max_examples=30, deadline=None)
@given(p=st.integers(2, 7), seed=st.integers(0, 10_000), r=st.integers(1, 7),
       kind=st.sampled_from(["drop_one", "pick_one", "balanced", "all_subsets", "bernoulli"]))
def test_enumerated_masked_field_is_unbiased(p, seed, r, kind):
    r = min(r, p)
    s = canonical(p, r=r, q_B=0.3)[kind]
    f = NeuronField(2, p, "tanh")
    rng = np.random.default_rng(seed)
    theta, x = f.random_params(rng), rng.normal(size=2)
    masks, q = s.enumerate()
    mean = q @ f.eval(x, theta, s.mask_weights(masks))
    np.testing.assert_allclose(mean, f.eval(x, theta), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(p=st.integers(2, 7), seed=st.integers(0, 10_000))
def test_lambda_is_nonnegative_and_scales_quadratically(p, seed):
    s = BatchScheme.balanced(p, 1)
    f = NeuronField(2, p, "gelu")
    rng = np.random.default_rng(seed)
    theta, x = f.random_params(rng), rng.normal(size=2)
    W, A, b = f.unpack(theta)
    lam = s.lambda_at(f, x, theta)
    assert lam >= 0
    np.testing.assert_allclose(s.lambda_at(f, x, f.pack(3 * W, A, b)), 9 * lam, rtol=1e-10, atol=1e-14)


class TestSFactor:
    def test_matches_symbolic_expression(self):
        lam, lam0, T, L, Q, pi, x0 = sp.symbols("lam lam0 T L Q pi x0", positive=True)
        expr = (2 * lam / pi) * sp.exp(2 * lam * T / pi) * (T * L * sp.sqrt(Q) + sp.sqrt(T * L) * (x0 + lam0 / lam))
        rng = np.random.default_rng(0)
        for _ in range(20):
            v = dict(zip((lam, lam0, T, L, Q, pi, x0), rng.uniform(0.1, 2.0, size=7)))
            v[pi] = min(1.0, float(v[pi]))
            ref = float(expr.subs(v).evalf(30))
            got = s_factor(*(float(v[k]) for k in (lam, lam0, T, L, Q, pi, x0)))
            np.testing.assert_allclose(got, ref, rtol=1e-13)

    def test_zero_lipschitz_example(self):
        assert s_factor(0.0, 1.0, 1.0, 4.0, 1.0, 1.0, 0.0) == pytest.approx(4.0)

    def test_time_independent_limit(self):
        assert s_factor(0.0, 3.0, 2.0, 0.5, 9.0, 0.5, 1.0) == pytest.approx(2 * 3.0 / 0.5 * math.sqrt(1.0))

    def test_zero_variance(self):
        assert s_factor(1.0, 1.0, 1.0, 0.0, 4.0, 0.5, 1.0) == 0.0

    @pytest.mark.parametrize("pi_min", [0.0, 1.5])
    def test_rejects_bad_pi(self, pi_min):
        with pytest.raises(DomainError):
            s_factor(1.0, 1.0, 1.0, 1.0, 1.0, pi_min, 1.0)


def test_kind_values_are_stable():
    assert SchemeKind("disjoint") is SchemeKind.DISJOINT
