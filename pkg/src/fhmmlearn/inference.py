"""Structured variational inference over independent per-layer chains.

The posterior of a factorial HMM couples all layers through the observed
symbols, so it is approximated by M independent Markov chains that share
the model's initial and transition distributions and carry free per-time
observation potentials. Those potentials are fitted by a fixed point that
alternates forward-backward passes with a closed-form update derived from
an auxiliary linearization of the observation normalizer (one positive
scalar per time step).

For a single layer the observation normalizer decouples per state, so the
exact emission term is tractable and no auxiliary linearization is needed;
the single-chain code path uses it directly and reproduces exact posterior
marginals.

All chain computations run in log space with max-subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import NumericError
from .model import FhmmParams, initial_log_matrix, transition_log_matrix

# Upper bound on elements of the (chunk, V, M) scratch arrays.
_CHUNK_BUDGET = 2 ** 21


@dataclass
class VariationalState:
    """Fitted variational parameters for one sentence.

    ``obs_potentials`` has shape (T, M, K); ``phi_aux`` is the per-time
    auxiliary scalar (strictly positive); ``layer_log_partitions`` holds
    each chain's log normalizer, and their sum is the log partition of
    the full variational distribution.
    """

    obs_potentials: np.ndarray
    phi_aux: np.ndarray
    layer_log_partitions: np.ndarray
    iterations_used: int
    converged: bool


@dataclass
class PosteriorMarginals:
    """Unary (T, M, K) and pairwise (T-1, M, K, K) state expectations."""

    unary: np.ndarray
    pairwise: np.ndarray


def _chunk_slices(total: int, width: int):
    step = max(1, _CHUNK_BUDGET // max(1, width))
    for start in range(0, total, step):
        yield slice(start, min(start + step, total))


def _lse(scores: np.ndarray, axis: int) -> np.ndarray:
    # bare-bones log-sum-exp; the chain recursions call this in a tight loop
    peak = scores.max(axis=axis)
    return peak + np.log(np.exp(scores - np.expand_dims(peak, axis)).sum(axis=axis))


def _forward_backward(log_pots: np.ndarray, log_init: np.ndarray,
                      log_trans: np.ndarray):
    """Exact marginals of M independent chains with shared shapes.

    ``log_pots`` (T, M, K) are unnormalized log evidence terms. Returns
    unary (T, M, K), pairwise (T-1, M, K, K), and per-layer log
    partitions (M,).
    """
    t_len = log_pots.shape[0]
    alpha = np.empty_like(log_pots)
    alpha[0] = log_init + log_pots[0]
    for t in range(1, t_len):
        alpha[t] = log_pots[t] + _lse(alpha[t - 1][:, :, None] + log_trans, axis=1)
    beta = np.zeros_like(log_pots)
    for t in range(t_len - 2, -1, -1):
        beta[t] = _lse(log_trans + (log_pots[t + 1] + beta[t + 1])[:, None, :], axis=2)
    log_z = _lse(alpha[-1], axis=1)
    unary = np.exp(alpha + beta - log_z[None, :, None])
    pairwise = np.exp(
        alpha[:-1, :, :, None]
        + log_trans[None]
        + (log_pots[1:] + beta[1:])[:, :, None, :]
        - log_z[None, :, None, None]
    )
    return unary, pairwise, log_z


def forward_backward_layer(m: int, unary_log_potentials: np.ndarray,
                           params: FhmmParams):
    """Exact single-chain marginals for layer ``m`` under given potentials.

    The chain uses the model's initial and transition distributions for
    that layer. Returns (unary (T, K), pairwise (T-1, K, K), log partition).
    """
    pots = np.asarray(unary_log_potentials, dtype=np.float64)[:, None, :]
    log_init = initial_log_matrix(params)[m:m + 1]
    log_trans = transition_log_matrix(params)[m:m + 1]
    unary, pairwise, log_z = _forward_backward(pots, log_init, log_trans)
    return unary[:, 0, :], pairwise[:, 0, :, :], float(log_z[0])


def _shifted_exp_obs(obs_logits: np.ndarray):
    # exp(theta) with a per-(symbol, layer) shift so entries stay <= 1
    shift = obs_logits.max(axis=2)
    return np.exp(obs_logits - shift[:, :, None]), shift


def _log_layer_sums(exp_obs, shift, unary_chunk):
    """log sum_k E[S^m_k] exp(theta[Y, m, k]) for a chunk of time steps.

    Returns shape (chunk, V, M); entries may be -inf where the sum
    underflows entirely.
    """
    sums = np.einsum("cmk,vmk->cvm", unary_chunk, exp_obs)
    with np.errstate(divide="ignore"):
        return np.log(sums) + shift[None]


def _log_coupling(log_g):
    # per-time log sum over symbols of the product over layers
    return logsumexp(log_g.sum(axis=2), axis=1)


def _leave_one_out(log_g):
    # prefix/suffix sums over the layer axis; avoids dividing by a
    # possibly-underflowed single-layer factor
    c, v, m = log_g.shape
    pre = np.zeros((c, v, m))
    suf = np.zeros((c, v, m))
    if m > 1:
        cum = np.cumsum(log_g, axis=2)
        pre[:, :, 1:] = cum[:, :, :-1]
        rcum = np.cumsum(log_g[:, :, ::-1], axis=2)[:, :, ::-1]
        suf[:, :, :-1] = rcum[:, :, 1:]
    return pre + suf


def compute_phi_aux(unary: np.ndarray, params: FhmmParams) -> np.ndarray:
    """Closed-form auxiliary scalars: the reciprocal of the expected
    observation normalizer sum_Y prod_m sum_k E[S^m_k] exp(theta[Y,m,k]).
    """
    t_len, m_count, _ = unary.shape
    exp_obs, shift = _shifted_exp_obs(params.observation_logits)
    phi = np.empty(t_len)
    with np.errstate(over="ignore"):
        for sl in _chunk_slices(t_len, params.n_symbols * m_count):
            log_g = _log_layer_sums(exp_obs, shift, unary[sl])
            phi[sl] = np.exp(-_log_coupling(log_g))
    if not np.all(np.isfinite(phi)) or np.any(phi <= 0.0):
        raise NumericError("degenerate observation parameters")
    return phi


def update_obs_potentials(sentence: np.ndarray, unary: np.ndarray,
                          phi_aux: np.ndarray, params: FhmmParams) -> np.ndarray:
    """One sweep of the fixed-point update for all potentials.

    new_pot[t,m,k] = theta[y_t,m,k]
                     - phi_t * sum_Y (prod_{n != m} sum_k' E[S^n_k'] e^theta[Y,n,k']) e^theta[Y,m,k]
    """
    obs = params.observation_logits
    t_len, m_count, k_count = unary.shape
    exp_obs, shift = _shifted_exp_obs(obs)
    col_shift = obs.max(axis=0)                       # (M, K)
    exp_cols = np.exp(obs - col_shift[None])          # (V, M, K)
    log_phi = np.log(phi_aux)
    pots = np.empty((t_len, m_count, k_count))
    for sl in _chunk_slices(t_len, params.n_symbols * m_count):
        log_g = _log_layer_sums(exp_obs, shift, unary[sl])
        log_loo = _leave_one_out(log_g)
        row_shift = log_loo.max(axis=1)               # (chunk, M)
        row_shift = np.where(np.isfinite(row_shift), row_shift, 0.0)
        scaled = np.exp(log_loo - row_shift[:, None, :])
        inner = np.einsum("cvm,vmk->cmk", scaled, exp_cols)
        with np.errstate(divide="ignore", over="ignore"):
            log_term = np.log(inner) + row_shift[:, :, None] + col_shift[None]
            pots[sl] = obs[sentence[sl]] - np.exp(log_term + log_phi[sl, None, None])
    if not np.all(np.isfinite(pots)):
        raise NumericError("variational update diverged")
    return pots


def _single_chain_log_normalizers(params: FhmmParams) -> np.ndarray:
    # log sum_Y exp(theta[Y, 0, k]) for each state k; only valid at M=1
    return logsumexp(params.observation_logits[:, 0, :], axis=0)


def _single_chain_potentials(sentence: np.ndarray, params: FhmmParams) -> np.ndarray:
    # exact log emissions theta[y_t, k] - log N_k, shape (T, 1, K)
    log_norm = _single_chain_log_normalizers(params)
    return (params.observation_logits[sentence, 0, :] - log_norm[None])[:, None, :]


def fit_variational(sentence: np.ndarray, params: FhmmParams,
                    max_iters: int = 25, tol: float = 1e-6,
                    warm_start: Optional[np.ndarray] = None,
                    callback: Optional[Callable] = None):
    """Fit the variational distribution for one sentence.

    Potentials start at ``theta[y_t, m, k]`` unless ``warm_start`` supplies
    explicit values. Each iteration recomputes chain marginals, then the
    auxiliary scalars, then all potentials; convergence is measured as the
    max absolute change in unary marginals. For M=1 the exact emission
    potentials are used directly and no iteration is needed.

    ``callback(state, marginals)``, when given, fires for the initial
    potentials and after every sweep, with auxiliary scalars recomputed
    from that iterate's marginals.

    Returns ``(VariationalState, PosteriorMarginals)`` with marginals
    consistent with the final potentials.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    log_init = initial_log_matrix(params)
    log_trans = transition_log_matrix(params)

    if params.n_layers == 1:
        pots = _single_chain_potentials(sentence, params)
        unary, pairwise, log_z = _forward_backward(pots, log_init, log_trans)
        state = VariationalState(pots, compute_phi_aux(unary, params), log_z, 1, True)
        marginals = PosteriorMarginals(unary, pairwise)
        if callback is not None:
            callback(state, marginals)
        return state, marginals

    if warm_start is not None:
        pots = np.asarray(warm_start, dtype=np.float64).copy()
        if pots.shape != (len(sentence), params.n_layers, params.n_states):
            raise ValueError("warm_start potentials have wrong shape")
    else:
        pots = params.observation_logits[sentence].copy()

    obs_ref = params.observation_logits[sentence]

    def surrogate(pots_, unary_, log_z_, phi_):
        # kl_surrogate with phi at its optimum; used to rank iterates
        return float(-log_z_.sum()
                     + np.einsum("tmk,tmk->", unary_, pots_ - obs_ref)
                     - np.log(phi_).sum())

    unary, pairwise, log_z = _forward_backward(pots, log_init, log_trans)
    phi = compute_phi_aux(unary, params)
    if callback is not None:
        callback(VariationalState(pots, phi, log_z, 0, False),
                 PosteriorMarginals(unary, pairwise))
    best = (surrogate(pots, unary, log_z, phi), pots, unary, pairwise, log_z, phi)
    converged = False
    iterations = 0
    for iteration in range(1, max_iters + 1):
        pots = update_obs_potentials(sentence, unary, phi, params)
        new_unary, pairwise, log_z = _forward_backward(pots, log_init, log_trans)
        delta = float(np.max(np.abs(new_unary - unary)))
        unary = new_unary
        phi = compute_phi_aux(unary, params)
        iterations = iteration
        converged = delta < tol
        value = surrogate(pots, unary, log_z, phi)
        if value < best[0]:
            best = (value, pots, unary, pairwise, log_z, phi)
        if callback is not None:
            callback(VariationalState(pots, phi, log_z, iterations, converged),
                     PosteriorMarginals(unary, pairwise))
        if converged:
            break
    # a sweep can overshoot on near-deterministic chains; return the best
    # iterate rather than whatever the budget ended on
    _, pots, unary, pairwise, log_z, phi = best
    state = VariationalState(pots, phi, log_z, iterations, converged)
    return state, PosteriorMarginals(unary, pairwise)


def kl_surrogate(sentence: np.ndarray, state: VariationalState,
                 marginals: PosteriorMarginals, params: FhmmParams) -> float:
    """Tractable upper bound on KL(Q || posterior), up to the additive
    constant log Z of the true posterior.

    The negated value is the per-sentence training bound. For M=1 the
    emission term is exact, so the value is the exact KL up to log Z.
    """
    unary = marginals.unary
    obs_terms = state.obs_potentials - params.observation_logits[sentence]
    total = float(-state.layer_log_partitions.sum())
    total += float(np.einsum("tmk,tmk->", unary, obs_terms))
    if params.n_layers == 1:
        log_norm = _single_chain_log_normalizers(params)
        total += float(np.einsum("tk,k->", unary[:, 0, :], log_norm))
        return total
    exp_obs, shift = _shifted_exp_obs(params.observation_logits)
    log_phi = np.log(state.phi_aux)
    for sl in _chunk_slices(unary.shape[0], params.n_symbols * params.n_layers):
        log_g = _log_layer_sums(exp_obs, shift, unary[sl])
        log_a = _log_coupling(log_g)
        total += float(np.sum(np.exp(log_phi[sl] + log_a) - log_phi[sl] - 1.0))
    return total


def viterbi_decode(sentence: np.ndarray, state: VariationalState,
                   params: FhmmParams) -> np.ndarray:
    """Per-layer MAP paths under the fitted chains, shape (T, M).

    Suffix scores are computed backward and states picked greedily forward,
    so among tied maximizers the lexicographically smallest path (lowest
    state index, earliest position first) is returned.
    """
    log_init = initial_log_matrix(params)
    log_trans = transition_log_matrix(params)
    pots = state.obs_potentials
    t_len, m_count, k_count = pots.shape
    paths = np.empty((t_len, m_count), dtype=np.int64)
    for m in range(m_count):
        suffix = np.empty((t_len, k_count))
        suffix[-1] = pots[-1, m]
        for t in range(t_len - 2, -1, -1):
            suffix[t] = pots[t, m] + np.max(log_trans[m] + suffix[t + 1][None, :], axis=1)
        paths[0, m] = int(np.argmax(log_init[m] + suffix[0]))
        for t in range(1, t_len):
            paths[t, m] = int(np.argmax(log_trans[m, paths[t - 1, m]] + suffix[t]))
    return paths
