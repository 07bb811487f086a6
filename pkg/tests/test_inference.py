import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from conftest import two_label_config
from inspectsim.errors import SupportMismatch
from inspectsim.inference import (
    InspectionRecord,
    LlrState,
    certificate_experiment,
    check_certificate,
    llr_update,
    ml_estimate,
)
from inspectsim.model import build_instance, derive_constants

CAT, DOG, RABBIT = 0, 1, 2
TYPE3 = 2


def apply(instance, records, state=None):
    state = state or LlrState(instance.n_labels)
    for r in records:
        state = llr_update(state, instance, r)
    return state


def s_matrix(entries, H):
    s = np.zeros((H, H))
    for (h, l), v in entries.items():
        s[h, l] = v
        s[l, h] = -v
    return s


class TestUpdate:
    def test_fresh_state(self):
        st_ = LlrState(3)
        assert np.all(st_.s_matrix == 0) and st_.n_inspections == 0

    def test_single_specialist_outcome(self, animals):
        s = apply(animals, [InspectionRecord(TYPE3, 1)])
        assert s.s_matrix[CAT, DOG] == pytest.approx(-1.098612, abs=1e-6)
        assert s.s_matrix[DOG, CAT] == pytest.approx(1.098612, abs=1e-6)
        assert s.n_inspections == 1

    def test_value_semantics(self, animals):
        a = LlrState(3)
        b = llr_update(a, animals, InspectionRecord(0, 1))
        assert a.n_inspections == 0 and b.n_inspections == 1

    def test_impossible_outcome(self):
        cfg = two_label_config()
        cfg["outcomes"] = ["0", "1", "never"]
        cfg["outcome_tensor"] = [[[0.25, 0.75, 0.0]], [[0.75, 0.25, 0.0]]]
        inst = build_instance(cfg)
        with pytest.raises(SupportMismatch):
            llr_update(LlrState(2), inst, InspectionRecord(0, 2))

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1)), min_size=1, max_size=12),
           st.randoms(use_true_random=False))
    @settings(max_examples=80, deadline=None)
    def test_order_invariance_and_antisymmetry(self, animals, recs, rnd):
        records = [InspectionRecord(k, x) for k, x in recs]
        a = apply(animals, records)
        shuffled = records[:]
        rnd.shuffle(shuffled)
        b = apply(animals, shuffled)
        assert np.allclose(a.s_matrix, b.s_matrix, atol=1e-12)
        assert np.allclose(a.s_matrix, -a.s_matrix.T, atol=1e-12)
        z_bar = derive_constants(animals).z_bar
        assert np.all(np.abs(a.s_matrix) <= a.n_inspections * z_bar + 1e-9)


class TestMlEstimate:
    def test_full_tie_is_first(self):
        assert ml_estimate(LlrState(3)) == CAT

    def test_after_specialist_outcome(self, animals):
        assert ml_estimate(apply(animals, [InspectionRecord(TYPE3, 1)])) == DOG

    def test_two_zero_outcomes(self, animals):
        s = apply(animals, [InspectionRecord(TYPE3, 0), InspectionRecord(TYPE3, 0)])
        assert ml_estimate(s) == CAT

    def test_matches_likelihood_argmax(self, animals):
        p = animals.outcome_tensor
        for recs in itertools.product(range(3), range(2), range(3), range(2)):
            records = [InspectionRecord(recs[0], recs[1]), InspectionRecord(recs[2], recs[3])]
            lik = [p[h, recs[0], recs[1]] * p[h, recs[2], recs[3]] for h in range(3)]
            best = max(lik)
            expected = next(h for h in range(3) if math.isclose(lik[h], best, rel_tol=1e-12))
            assert ml_estimate(apply(animals, records)) == expected

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.01, 100))
    @settings(max_examples=100, deadline=None)
    def test_scale_invariance(self, logliks, lam):
        ll = np.array(logliks)
        s = ll[:, None] - ll[None, :]
        assert ml_estimate(s) == ml_estimate(lam * s)


class TestCertificate:
    def test_no_margin(self):
        assert check_certificate(LlrState(3), 1.0) is None

    def test_two_labels(self):
        assert check_certificate(s_matrix({(0, 1): 5.0}, 2), 4.6) == 0

    def test_one_pair_short(self):
        assert check_certificate(s_matrix({(0, 1): 7.0, (0, 2): 3.0}, 3), 5.0) is None

    def test_reverse_direction(self):
        assert check_certificate(s_matrix({(0, 1): -5.0}, 2), 4.6) == 1

    def test_level_must_be_positive(self):
        with pytest.raises(ValueError):
            check_certificate(LlrState(2), 0.0)

    @given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(0.01, 10))
    @settings(max_examples=100, deadline=None)
    def test_certified_label_is_ml(self, logliks, x):
        ll = np.array(logliks)
        s = ll[:, None] - ll[None, :]
        h = check_certificate(s, x)
        if h is not None:
            assert ml_estimate(s) == h


def one_sided_pass(errors, n, bound, alpha=0.01):
    """Keep the hypothesis 'rate <= bound' unless P(Binom(n, bound) >= errors) < alpha."""
    return binom.sf(errors - 1, n, bound) >= alpha


class TestCertificateBound:
    def test_small_run_under_bound(self, animals):
        x = math.log(6 / 0.05)
        res = certificate_experiment(animals, x, 20_000, seed=5)
        assert res.certified + res.capped == 20_000
        assert one_sided_pass(res.errors, res.certified, res.bound)

    def test_deterministic(self, animals):
        a = certificate_experiment(animals, 3.0, 2000, seed=9)
        b = certificate_experiment(animals, 3.0, 2000, seed=9)
        assert a == b

    def test_binomial_helper(self):
        assert one_sided_pass(50, 1000, 0.05)
        assert not one_sided_pass(80, 1000, 0.05)
