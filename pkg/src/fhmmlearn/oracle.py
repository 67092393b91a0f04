"""Exhaustive-enumeration reference for tiny instances.

Enumerates all (K^M)^T latent state sequences of a sentence to obtain the
exact marginal likelihood, posterior marginals, and MAP assignment. This
exists solely to validate the variational machinery; it has no scalability
ambitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DataError
from .model import FhmmParams, initial_log_matrix, transition_log_matrix

_CHUNK = 1 << 14


@dataclass
class OracleResult:
    """Exact quantities for one sentence.

    ``log_likelihood`` is log P(sentence), which is also the log
    normalizer of the posterior. ``map_path`` has shape (T, M); ties
    break toward the lexicographically smallest flattened sequence.
    """

    log_likelihood: float
    unary: np.ndarray
    pairwise: np.ndarray
    map_path: np.ndarray


def _layer_configs(m_count: int, k_count: int) -> np.ndarray:
    # all K^M joint configs, last layer varying fastest (lexicographic)
    grids = np.meshgrid(*([np.arange(k_count)] * m_count), indexing="ij")
    return np.stack(grids, axis=-1).reshape(-1, m_count)


def _config_tables(params: FhmmParams, sentence: np.ndarray, configs: np.ndarray):
    m_idx = np.arange(params.n_layers)
    log_init = initial_log_matrix(params)[m_idx, configs].sum(axis=1)
    log_trans = transition_log_matrix(params)
    trans = np.zeros((len(configs), len(configs)))
    for m in m_idx:
        trans += log_trans[m][configs[:, m][:, None], configs[:, m][None, :]]
    scores = params.observation_logits[:, m_idx[None, :], configs].sum(axis=2)
    # scores[Y, c]; normalize over Y per config
    log_obs = scores - logsumexp(scores, axis=0, keepdims=True)
    return log_init, trans, log_obs[sentence, :].T  # obs (C, T)


def _sequence_chunks(n_configs: int, t_len: int):
    total = n_configs ** t_len
    powers = n_configs ** np.arange(t_len - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total), dtype=np.int64)
        yield (idx[:, None] // powers[None, :]) % n_configs


def _joint_of(seqs, log_init_c, log_trans_c, log_obs_ct):
    joint = log_init_c[seqs[:, 0]].copy()
    for t in range(1, seqs.shape[1]):
        joint += log_trans_c[seqs[:, t - 1], seqs[:, t]]
    for t in range(seqs.shape[1]):
        joint += log_obs_ct[seqs[:, t], t]
    return joint


def exact_infer(params: FhmmParams, sentence: np.ndarray,
                limit: int = 10_000_000) -> OracleResult:
    """Exact inference by full enumeration.

    Raises if the number of sequences (K^M)^T exceeds ``limit``.
    """
    sentence = np.asarray(sentence, dtype=np.int64)
    t_len = len(sentence)
    m_count, k_count = params.n_layers, params.n_states
    n_configs = k_count ** m_count
    if n_configs ** t_len > limit:
        raise DataError("instance too large for oracle")
    configs = _layer_configs(m_count, k_count)
    log_init_c, log_trans_c, log_obs_ct = _config_tables(params, sentence, configs)

    # pass 1: log likelihood and the MAP sequence
    log_like = -np.inf
    best_val = -np.inf
    best_seq = None
    for seqs in _sequence_chunks(n_configs, t_len):
        joint = _joint_of(seqs, log_init_c, log_trans_c, log_obs_ct)
        log_like = np.logaddexp(log_like, logsumexp(joint))
        top = int(np.argmax(joint))
        if joint[top] > best_val:
            best_val = float(joint[top])
            best_seq = seqs[top].copy()

    # pass 2: marginals as normalized posterior mass
    cfg_mass = np.zeros((t_len, n_configs))
    pair_mass = np.zeros((t_len - 1, n_configs, n_configs))
    for seqs in _sequence_chunks(n_configs, t_len):
        weights = np.exp(_joint_of(seqs, log_init_c, log_trans_c, log_obs_ct) - log_like)
        for t in range(t_len):
            np.add.at(cfg_mass[t], seqs[:, t], weights)
        for t in range(1, t_len):
            np.add.at(pair_mass[t - 1], (seqs[:, t - 1], seqs[:, t]), weights)

    onehot = np.zeros((n_configs, m_count, k_count))
    onehot[np.arange(n_configs)[:, None], np.arange(m_count)[None, :], configs] = 1.0
    unary = np.einsum("tc,cmk->tmk", cfg_mass, onehot)
    pairwise = np.einsum("tcd,cmj,dmk->tmjk", pair_mass, onehot, onehot)
    return OracleResult(float(log_like), unary, pairwise, configs[best_seq])


def exact_posterior_kl(params: FhmmParams, sentence: np.ndarray,
                       obs_potentials: np.ndarray,
                       limit: int = 10_000_000) -> float:
    """Exact KL between the chain-structured variational distribution with
    the given potentials (transitions tied to the model) and the true
    posterior, computed by full enumeration.
    """
    sentence = np.asarray(sentence, dtype=np.int64)
    t_len = len(sentence)
    m_count, k_count = params.n_layers, params.n_states
    n_configs = k_count ** m_count
    if n_configs ** t_len > limit:
        raise DataError("instance too large for oracle")
    configs = _layer_configs(m_count, k_count)
    log_init_c, log_trans_c, log_obs_ct = _config_tables(params, sentence, configs)

    # variational weights share the gather structure of the model tables
    m_idx = np.arange(m_count)
    log_init = initial_log_matrix(params)
    log_trans = transition_log_matrix(params)
    q_init_c = log_init[m_idx, configs].sum(axis=1)
    q_trans_c = np.zeros((n_configs, n_configs))
    for m in m_idx:
        q_trans_c += log_trans[m][configs[:, m][:, None], configs[:, m][None, :]]
    q_pots_ct = obs_potentials[:, m_idx[None, :], configs].sum(axis=2).T

    # per-layer partition functions by enumerating K^T paths per layer
    log_z_q = 0.0
    for m in range(m_count):
        acc = -np.inf
        for paths in _sequence_chunks(k_count, t_len):
            w = log_init[m, paths[:, 0]].copy()
            for t in range(1, t_len):
                w += log_trans[m][paths[:, t - 1], paths[:, t]]
            for t in range(t_len):
                w += obs_potentials[t, m, paths[:, t]]
            acc = np.logaddexp(acc, logsumexp(w))
        log_z_q += float(acc)

    log_z_p = -np.inf
    for seqs in _sequence_chunks(n_configs, t_len):
        joint = _joint_of(seqs, log_init_c, log_trans_c, log_obs_ct)
        log_z_p = np.logaddexp(log_z_p, logsumexp(joint))

    kl = 0.0
    for seqs in _sequence_chunks(n_configs, t_len):
        joint = _joint_of(seqs, log_init_c, log_trans_c, log_obs_ct)
        log_q = _joint_of(seqs, q_init_c, q_trans_c, q_pots_ct) - log_z_q
        kl += float(np.sum(np.exp(log_q) * (log_q - (joint - log_z_p))))
    return kl
