import numpy as np
import pytest

from fhmmlearn.errors import NumericError
from fhmmlearn.inference import (
    compute_phi_aux,
    fit_variational,
    forward_backward_layer,
    kl_surrogate,
    update_obs_potentials,
    viterbi_decode,
)
from fhmmlearn.model import FhmmParams, init_params, initial_log_matrix, transition_log_matrix
from fhmmlearn.oracle import exact_infer, exact_posterior_kl
from helpers import rand_params, rand_sentence
from naive_ref import (
    chain_marginals_by_enumeration,
    hmm_posteriors,
    hmm_viterbi,
    naive_phi_aux,
    naive_update_potentials,
)


def test_forward_backward_single_step():
    p = rand_params(2, 3, 4, seed=0)
    unary, pairwise, _ = forward_backward_layer(1, np.zeros((1, 3)), p)
    np.testing.assert_allclose(unary[0], np.exp(initial_log_matrix(p))[1], atol=1e-12)
    assert pairwise.shape == (0, 3, 3)


def test_forward_backward_uniform():
    p = init_params(1, 4, 3, scale=0.0)
    unary, pairwise, _ = forward_backward_layer(0, np.zeros((5, 4)), p)
    np.testing.assert_allclose(unary, 0.25, atol=1e-12)
    np.testing.assert_allclose(pairwise, 1 / 16, atol=1e-12)


def test_forward_backward_matches_path_enumeration():
    rng = np.random.default_rng(42)
    for i in range(5):
        p = rand_params(2, 2, 3, seed=60 + i)
        pots = rng.normal(size=(3, 2))
        unary, pairwise, _ = forward_backward_layer(1, pots, p)
        ref_u, ref_p = chain_marginals_by_enumeration(
            initial_log_matrix(p)[1], transition_log_matrix(p)[1], pots)
        np.testing.assert_allclose(unary, ref_u, atol=1e-12)
        np.testing.assert_allclose(pairwise, ref_p, atol=1e-12)


def test_forward_backward_agrees_with_scaled_hmm():
    p = rand_params(1, 3, 4, seed=7)
    sent = rand_sentence(4, 5, seed=1)
    # exact emission potentials make the chain the true posterior
    from fhmmlearn.inference import _single_chain_potentials
    pots = _single_chain_potentials(sent, p)[:, 0, :]
    unary, pairwise, _ = forward_backward_layer(0, pots, p)
    ref_u, ref_p = hmm_posteriors(p.initial_logits[0], p.transition_logits[0],
                                  p.observation_logits[:, 0, :], sent)
    np.testing.assert_allclose(unary, ref_u, atol=1e-10)
    np.testing.assert_allclose(pairwise, ref_p, atol=1e-10)


def test_marginal_invariants():
    p = rand_params(3, 3, 5, seed=3)
    sent = rand_sentence(5, 6, seed=4)
    _, marg = fit_variational(sent, p)
    np.testing.assert_allclose(marg.unary.sum(axis=2), 1.0, atol=1e-9)
    assert marg.unary.min() >= 0 and marg.unary.max() <= 1 + 1e-12
    np.testing.assert_allclose(marg.pairwise.sum(axis=2), marg.unary[1:], atol=1e-9)
    np.testing.assert_allclose(marg.pairwise.sum(axis=3), marg.unary[:-1], atol=1e-9)


def test_phi_aux_uniform_logits():
    p = init_params(2, 3, 7, scale=0.0)
    unary = np.full((4, 2, 3), 1 / 3)
    np.testing.assert_allclose(compute_phi_aux(unary, p), 1 / 7, atol=1e-12)


def test_phi_aux_single_symbol():
    p = init_params(2, 2, 1, scale=0.0)
    unary = np.full((3, 2, 2), 0.5)
    np.testing.assert_allclose(compute_phi_aux(unary, p), 1.0, atol=1e-12)


def test_phi_aux_matches_naive():
    rng = np.random.default_rng(0)
    for i in range(5):
        p = rand_params(2, 2, 3, seed=80 + i)
        unary = rng.dirichlet(np.ones(2), size=(4, 2))
        np.testing.assert_allclose(
            compute_phi_aux(unary, p),
            naive_phi_aux(unary, p.observation_logits), atol=1e-12)


def test_phi_aux_degenerate_raises():
    # saturated logits drive the expected normalizer to zero
    p = FhmmParams(np.zeros((1, 2)), np.zeros((1, 2, 2)), np.full((2, 1, 2), -800.0))
    unary = np.full((2, 1, 2), 0.5)
    with pytest.raises(NumericError, match="degenerate observation parameters"):
        compute_phi_aux(unary, p)


def test_update_potentials_single_layer_formula():
    # with one layer the leave-one-out product is empty, so the update is
    # theta[y_t, k] - phi_t * sum_Y exp(theta[Y, k])
    p = rand_params(1, 3, 4, seed=5)
    sent = rand_sentence(4, 3, seed=6)
    unary = np.random.default_rng(1).dirichlet(np.ones(3), size=(3, 1))
    phi = compute_phi_aux(unary, p)
    got = update_obs_potentials(sent, unary, phi, p)
    col_sums = np.exp(p.observation_logits[:, 0, :]).sum(axis=0)
    expected = p.observation_logits[sent, 0, :] - phi[:, None] * col_sums[None, :]
    np.testing.assert_allclose(got[:, 0, :], expected, atol=1e-12)


def test_update_potentials_zero_logits_constant():
    v = 6
    p = init_params(2, 3, v, scale=0.0)
    sent = np.array([0, 3, 5])
    unary = np.full((3, 2, 3), 1 / 3)
    phi = compute_phi_aux(unary, p)
    pots = update_obs_potentials(sent, unary, phi, p)
    np.testing.assert_allclose(pots, -1.0, atol=1e-12)


def test_update_potentials_divergence_raises():
    # one layer carries a saturated logit on a state the marginals exclude,
    # so the update term overflows
    obs = np.zeros((2, 2, 2))
    obs[:, 1, 1] = 710.0
    p = FhmmParams(np.zeros((2, 2)), np.zeros((2, 2, 2)), obs)
    unary = np.zeros((2, 2, 2))
    unary[:, :, 0] = 1.0
    sent = np.array([0, 1])
    phi = compute_phi_aux(unary, p)
    with pytest.raises(NumericError, match="variational update diverged"):
        update_obs_potentials(sent, unary, phi, p)


def test_update_potentials_matches_naive():
    rng = np.random.default_rng(2)
    for i in range(5):
        p = rand_params(2, 2, 3, seed=90 + i)
        sent = rand_sentence(3, 2, seed=i)
        unary = rng.dirichlet(np.ones(2), size=(2, 2))
        phi = compute_phi_aux(unary, p)
        np.testing.assert_allclose(
            update_obs_potentials(sent, unary, phi, p),
            naive_update_potentials(sent, unary, phi, p.observation_logits),
            atol=1e-12)


def test_fit_single_layer_matches_exact_posterior():
    for i in range(10):
        rng = np.random.default_rng(300 + i)
        k, v, t = int(rng.integers(2, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 7))
        p = rand_params(1, k, v, seed=400 + i)
        sent = rng.integers(0, v, t)
        state, marg = fit_variational(sent, p)
        assert state.converged
        exact = exact_infer(p, sent)
        assert np.abs(marg.unary - exact.unary).max() < 1e-6
        if t > 1:
            assert np.abs(marg.pairwise - exact.pairwise).max() < 1e-6


def test_fit_zero_logits_converges_immediately():
    p = init_params(2, 3, 4, scale=0.0)
    sent = np.array([0, 1, 2])
    state, marg = fit_variational(sent, p)
    assert state.converged and state.iterations_used == 1
    np.testing.assert_allclose(marg.unary, 1 / 3, atol=1e-12)


def test_fit_typical_convergence_speed():
    iters = []
    for i in range(20):
        p = rand_params(2, 2, 3, seed=500 + i)
        sent = rand_sentence(3, 3, seed=i)
        state, _ = fit_variational(sent, p)
        assert state.converged
        iters.append(state.iterations_used)
    assert np.median(iters) <= 10


def test_fit_accepts_warm_start_and_reports_state():
    p = rand_params(2, 2, 3, seed=77)
    sent = np.array([0, 2, 1])
    state0, marg0 = fit_variational(sent, p)
    state1, marg1 = fit_variational(sent, p, warm_start=state0.obs_potentials)
    assert state1.iterations_used <= state0.iterations_used
    np.testing.assert_allclose(marg0.unary, marg1.unary, atol=1e-5)
    assert state1.phi_aux.shape == (3,)
    assert np.all(state1.phi_aux > 0)
    assert state1.layer_log_partitions.shape == (2,)


def test_kl_surrogate_optimum_identity():
    # with phi at its closed-form optimum the auxiliary bracket reduces to
    # sum_t log a_t, i.e. phi_t * a_t == 1
    p = rand_params(2, 2, 3, seed=6)
    sent = np.array([0, 1])
    state, marg = fit_variational(sent, p)
    log_a = -np.log(state.phi_aux)
    direct = (-state.layer_log_partitions.sum()
              + np.einsum("tmk,tmk->", marg.unary,
                          state.obs_potentials - p.observation_logits[sent])
              + log_a.sum())
    assert abs(kl_surrogate(sent, state, marg, p) - direct) < 1e-10


def test_kl_surrogate_single_layer_reconstructs_loglik():
    for i in range(5):
        p = rand_params(1, 3, 4, seed=700 + i)
        sent = rand_sentence(4, 4, seed=i)
        state, marg = fit_variational(sent, p)
        exact = exact_infer(p, sent)
        bound = -kl_surrogate(sent, state, marg, p)
        assert abs(bound - exact.log_likelihood) < 1e-8
        assert kl_surrogate(sent, state, marg, p) + exact.log_likelihood >= -1e-8


def test_bound_sandwich_at_every_iterate():
    for i in range(10):
        p = rand_params(2, 2, 3, seed=800 + i)
        sent = rand_sentence(3, 3, seed=i)
        exact = exact_infer(p, sent)
        seen = []

        def check(state, marg):
            kl_bar = kl_surrogate(sent, state, marg, p) + exact.log_likelihood
            kl_ex = exact_posterior_kl(p, sent, state.obs_potentials)
            assert kl_ex >= -1e-12
            assert kl_ex <= kl_bar + 1e-8
            seen.append(kl_bar)

        fit_variational(sent, p, callback=check)
        assert len(seen) >= 2


def test_surrogate_monotone_over_iterations():
    for i in range(10):
        p = rand_params(2, 2, 4, seed=900 + i)
        sent = rand_sentence(4, 4, seed=i)
        trace = []
        fit_variational(sent, p,
                        callback=lambda s, m: trace.append(kl_surrogate(sent, s, m, p)))
        assert np.all(np.diff(trace) <= 1e-8)


def test_viterbi_degenerate_cases():
    p = init_params(3, 1, 2, scale=0.0)
    sent = np.array([0, 1])
    state, _ = fit_variational(sent, p)
    assert np.all(viterbi_decode(sent, state, p) == 0)

    p2 = init_params(2, 3, 4, scale=0.0)
    state2, _ = fit_variational(np.array([1, 2, 3]), p2)
    assert np.all(viterbi_decode(np.array([1, 2, 3]), state2, p2) == 0)


def test_viterbi_single_layer_matches_reference():
    for i in range(8):
        p = rand_params(1, 3, 4, seed=1000 + i)
        sent = rand_sentence(4, 5, seed=i)
        state, _ = fit_variational(sent, p)
        got = viterbi_decode(sent, state, p)[:, 0]
        ref = hmm_viterbi(p.initial_logits[0], p.transition_logits[0],
                          p.observation_logits[:, 0, :], sent)
        np.testing.assert_array_equal(got, ref)


def test_viterbi_lexicographic_tie_breaking():
    # alternation-favoring transitions make 010 and 101 tie exactly; the
    # lexicographically smaller path must win
    from fhmmlearn.inference import VariationalState
    p = FhmmParams(np.zeros((1, 2)),
                   np.array([[[0.0, 1.0], [1.0, 0.0]]]),
                   np.zeros((3, 1, 2)))
    pots = np.zeros((3, 1, 2))
    state = VariationalState(pots, np.ones(3), np.zeros(1), 1, True)
    path = viterbi_decode(np.array([0, 1, 2]), state, p)
    np.testing.assert_array_equal(path[:, 0], [0, 1, 0])


def test_state_permutation_symmetry():
    # consistently permuting one layer's states permutes its marginals
    p = rand_params(2, 3, 4, seed=55)
    sent = np.array([0, 3, 1, 2])
    perm = np.array([2, 0, 1])
    init2 = p.initial_logits.copy()
    init2[1] = init2[1][perm]
    trans2 = p.transition_logits.copy()
    trans2[1] = trans2[1][perm][:, perm]
    obs2 = p.observation_logits.copy()
    obs2[:, 1, :] = obs2[:, 1, perm]
    p2 = FhmmParams(init2, trans2, obs2)
    _, marg = fit_variational(sent, p)
    _, marg2 = fit_variational(sent, p2)
    np.testing.assert_allclose(marg2.unary[:, 1, :], marg.unary[:, 1, perm], atol=1e-12)
    np.testing.assert_allclose(marg2.unary[:, 0, :], marg.unary[:, 0, :], atol=1e-12)
