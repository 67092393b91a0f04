import itertools
import math

import numpy as np
import pytest

from fhmmlearn.errors import DataError
from fhmmlearn.inference import fit_variational, viterbi_decode, _single_chain_potentials
from fhmmlearn.model import init_params, joint_log_prob, observation_log_prob
from fhmmlearn.oracle import exact_infer, exact_posterior_kl
from helpers import rand_params, rand_sentence
from naive_ref import hmm_forward_loglik, hmm_posteriors


def test_uniform_single_step():
    p = init_params(2, 2, 5, scale=0.0)
    res = exact_infer(p, np.array([3]))
    assert abs(res.log_likelihood - math.log(1 / 5)) < 1e-12
    np.testing.assert_allclose(res.unary, 0.5, atol=1e-12)
    assert res.map_path.shape == (1, 2)


def test_single_state_degenerate():
    p = rand_params(2, 1, 4, seed=3)
    sent = np.array([0, 2, 3])
    res = exact_infer(p, sent)
    expected = sum(observation_log_prob(p, [0, 0], int(y)) for y in sent)
    assert abs(res.log_likelihood - expected) < 1e-12


def test_matches_independent_forward_pass():
    for i in range(10):
        p = rand_params(1, 2, 3, seed=40 + i)
        sent = rand_sentence(3, 3, seed=i)
        res = exact_infer(p, sent)
        ref = hmm_forward_loglik(p.initial_logits[0], p.transition_logits[0],
                                 p.observation_logits[:, 0, :], sent)
        assert abs(res.log_likelihood - ref) < 1e-10


def test_single_layer_marginals_match_forward_backward():
    p = rand_params(1, 3, 4, seed=9)
    sent = rand_sentence(4, 4, seed=2)
    res = exact_infer(p, sent)
    ref_u, ref_p = hmm_posteriors(p.initial_logits[0], p.transition_logits[0],
                                  p.observation_logits[:, 0, :], sent)
    np.testing.assert_allclose(res.unary[:, 0, :], ref_u, atol=1e-10)
    np.testing.assert_allclose(res.pairwise[:, 0, :, :], ref_p, atol=1e-10)


def test_likelihood_sums_to_one_over_all_sentences():
    p = rand_params(2, 2, 2, seed=17)
    total = 0.0
    for sent in itertools.product(range(2), repeat=2):
        total += math.exp(exact_infer(p, np.array(sent)).log_likelihood)
    assert abs(total - 1.0) < 1e-8


def test_marginal_consistency_invariants():
    p = rand_params(2, 2, 3, seed=23)
    sent = np.array([0, 1, 2])
    res = exact_infer(p, sent)
    np.testing.assert_allclose(res.unary.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_allclose(res.pairwise.sum(axis=2), res.unary[1:], atol=1e-12)
    np.testing.assert_allclose(res.pairwise.sum(axis=3), res.unary[:-1], atol=1e-12)


def test_map_beats_variational_decode():
    for i in range(10):
        p = rand_params(2, 2, 3, seed=70 + i)
        sent = rand_sentence(3, 4, seed=i)
        res = exact_infer(p, sent)
        state, _ = fit_variational(sent, p)
        heuristic = viterbi_decode(sent, state, p)
        assert (joint_log_prob(p, res.map_path, sent)
                >= joint_log_prob(p, heuristic, sent) - 1e-12)


def test_map_tie_breaks_lexicographically():
    p = init_params(2, 2, 3, scale=0.0)
    res = exact_infer(p, np.array([0, 1]))
    assert np.all(res.map_path == 0)


def test_limit_enforced():
    p = rand_params(2, 2, 3, seed=1)
    with pytest.raises(DataError, match="instance too large for oracle"):
        exact_infer(p, np.zeros(4, dtype=int), limit=100)


def test_exact_kl_nonnegative_and_zero_at_posterior():
    p = rand_params(1, 2, 3, seed=31)
    sent = np.array([0, 2, 1])
    pots = _single_chain_potentials(sent, p)
    kl = exact_posterior_kl(p, sent, pots)
    assert abs(kl) < 1e-10

    p2 = rand_params(2, 2, 3, seed=32)
    state, _ = fit_variational(sent, p2)
    kl2 = exact_posterior_kl(p2, sent, state.obs_potentials)
    assert kl2 >= -1e-12
