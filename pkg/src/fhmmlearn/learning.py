"""Variational EM: sufficient statistics, M-steps, and training loops.

The E-step fits per-sentence variational distributions and accumulates
expected counts. Initial and transition parameters then have a closed-form
update (normalized expected counts, stored as log probabilities, which is
a valid representative of the softmax equivalence class). Observation
parameters have no closed form and are optimized with L-BFGS on the
tractable lower bound.

``train_full_batch`` iterates E and M steps to convergence of the summed
per-sentence bound. ``train_online`` is stepwise EM over mini-batches:
persistent initial/transition statistics are interpolated with decaying
step sizes, while observation parameters are refit on each batch, warm
started from their current values.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .corpus import Corpus
from .errors import DataError, NumericError
from .inference import (
    PosteriorMarginals,
    _chunk_slices,
    _leave_one_out,
    _log_coupling,
    _log_layer_sums,
    _shifted_exp_obs,
    fit_variational,
    kl_surrogate,
)
from .model import FhmmParams, init_params


@dataclass
class TrainConfig:
    """Knobs for both training loops.

    Defaults: mini-batches of 1000 sentences, 5 epochs, at most 100 L-BFGS
    iterations in the full-batch observation M-step and 10 in the online
    one, E-step capped at 25 fixed-point sweeps.
    """

    n_layers: int = 5
    n_states: int = 10
    epochs: int = 5
    minibatch_size: int = 1000
    estep_max_iters: int = 25
    estep_tol: float = 1e-6
    mstep_max_iters: int = 100
    mstep_minibatch_iters: int = 10
    l2: float = 0.0
    stepwise_decay: float = 0.6
    seed: int = 0
    init_scale: float = 0.1
    n_threads: int = 1
    full_batch_max_iters: int = 50
    full_batch_rel_tol: float = 1e-5

    def validate(self) -> "TrainConfig":
        positive = {
            "n_layers": self.n_layers, "n_states": self.n_states,
            "epochs": self.epochs, "minibatch_size": self.minibatch_size,
            "estep_max_iters": self.estep_max_iters,
            "mstep_max_iters": self.mstep_max_iters,
            "mstep_minibatch_iters": self.mstep_minibatch_iters,
            "n_threads": self.n_threads,
            "full_batch_max_iters": self.full_batch_max_iters,
        }
        for name, value in positive.items():
            if int(value) < 1:
                raise DataError(f"{name} must be >= 1")
        if not (0.5 < self.stepwise_decay <= 1.0):
            raise DataError("stepwise_decay must lie in (0.5, 1]")
        if self.l2 < 0 or self.init_scale < 0:
            raise DataError("l2 and init_scale must be >= 0")
        if self.estep_tol <= 0 or self.full_batch_rel_tol <= 0:
            raise DataError("tolerances must be > 0")
        return self


@dataclass
class SufficientStats:
    """Expected counts from the E-step.

    ``init_counts`` (M, K) sums first-position unary marginals over
    sentences; ``trans_counts`` (M, K, K) sums pairwise marginals over all
    positions and sentences. Per-token unary marginals and the observed
    token ids are kept for the observation M-step.
    """

    init_counts: np.ndarray
    trans_counts: np.ndarray
    token_ids: list = field(default_factory=list)
    token_unaries: list = field(default_factory=list)
    n_sentences: int = 0
    n_tokens: int = 0

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        self.init_counts += other.init_counts
        self.trans_counts += other.trans_counts
        self.token_ids.extend(other.token_ids)
        self.token_unaries.extend(other.token_unaries)
        self.n_sentences += other.n_sentences
        self.n_tokens += other.n_tokens
        return self

    def token_arrays(self):
        if not self.token_ids:
            return (np.zeros(0, dtype=np.int64),
                    np.zeros((0,) + self.init_counts.shape))
        return np.concatenate(self.token_ids), np.concatenate(self.token_unaries)


def empty_stats(n_layers: int, n_states: int) -> SufficientStats:
    return SufficientStats(np.zeros((n_layers, n_states)),
                           np.zeros((n_layers, n_states, n_states)))


def accumulate_stats(stats: SufficientStats, marginals: PosteriorMarginals,
                     sentence: np.ndarray) -> SufficientStats:
    """Add one sentence's expectations. Commutative and associative across
    sentences, so partial stats from parallel workers merge freely.
    """
    unary = marginals.unary
    if unary.shape[0] != len(sentence) or unary.shape[1:] != stats.init_counts.shape:
        raise DataError("marginals do not match stats shape")
    stats.init_counts += unary[0]
    if len(sentence) > 1:
        stats.trans_counts += marginals.pairwise.sum(axis=0)
    stats.token_ids.append(np.asarray(sentence, dtype=np.int64))
    stats.token_unaries.append(unary)
    stats.n_sentences += 1
    stats.n_tokens += len(sentence)
    return stats


def _normalize_counts(init_counts, trans_counts, smoothing=1e-8):
    init = init_counts + smoothing
    init_logits = np.log(init / init.sum(axis=1, keepdims=True))
    trans = trans_counts + smoothing
    trans_logits = np.log(trans / trans.sum(axis=2, keepdims=True))
    return init_logits, trans_logits


def mstep_initial_transition(stats: SufficientStats, smoothing: float = 1e-8):
    """Closed-form update: normalized expected counts as log probabilities.

    Smoothing keeps zero-mass rows defined (they fall back to uniform).
    """
    if stats.n_sentences == 0:
        raise DataError("empty sufficient statistics")
    return _normalize_counts(stats.init_counts, stats.trans_counts, smoothing)


def _obs_objective(obs_logits, tokens, unaries, l2):
    """Observation-dependent bound terms and their gradient.

    With two or more layers the expected log normalizer is replaced by the
    log of its expectation (the auxiliary scalars at their optimum); with a
    single layer the per-state normalizer makes the term exact.
    """
    v_count, m_count, k_count = obs_logits.shape
    value = float(np.einsum("nmk,nmk->", unaries, obs_logits[tokens]))
    grad = np.zeros_like(obs_logits)
    np.add.at(grad, tokens, unaries)

    if m_count == 1:
        log_norm = logsumexp(obs_logits[:, 0, :], axis=0)
        occupancy = unaries[:, 0, :].sum(axis=0)
        value -= float(occupancy @ log_norm)
        grad[:, 0, :] -= occupancy[None, :] * np.exp(obs_logits[:, 0, :] - log_norm[None, :])
    else:
        exp_obs, shift = _shifted_exp_obs(obs_logits)
        weighted = np.zeros_like(obs_logits)
        with np.errstate(over="ignore", invalid="ignore"):
            for sl in _chunk_slices(len(tokens), v_count * m_count):
                log_g = _log_layer_sums(exp_obs, shift, unaries[sl])
                log_a = _log_coupling(log_g)
                value -= float(log_a.sum())
                w = np.exp(_leave_one_out(log_g) - log_a[:, None, None])
                weighted += np.einsum("cvm,cmk->vmk", w, unaries[sl])
            grad -= np.exp(obs_logits) * weighted

    if l2 > 0.0:
        value -= l2 * float(np.sum(obs_logits ** 2))
        grad -= 2.0 * l2 * obs_logits
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError("observation objective diverged")
    return value, grad


def observation_objective_and_gradient(obs_logits: np.ndarray,
                                       stats: SufficientStats,
                                       l2: float = 0.0):
    """Bound value and gradient with respect to the observation logits."""
    tokens, unaries = stats.token_arrays()
    return _obs_objective(np.asarray(obs_logits, dtype=np.float64), tokens, unaries, l2)


def mstep_observation(obs_logits: np.ndarray, stats: SufficientStats,
                      l2: float = 0.0, max_iters: int = 100):
    """L-BFGS ascent on the observation bound, warm started from the
    current logits. Never returns a point worse than the entry point.

    Returns ``(new_logits, iterations_used)``.
    """
    tokens, unaries = stats.token_arrays()
    shape = obs_logits.shape
    entry = np.asarray(obs_logits, dtype=np.float64)
    entry_value, _ = _obs_objective(entry, tokens, unaries, l2)

    def negated(x):
        value, grad = _obs_objective(x.reshape(shape), tokens, unaries, l2)
        return -value, -grad.ravel()

    result = minimize(negated, entry.ravel(), jac=True, method="L-BFGS-B",
                      options={"maxiter": max_iters, "ftol": 1e-12, "gtol": 1e-6})
    if -result.fun < entry_value:
        return entry.copy(), int(result.nit)
    return result.x.reshape(shape), int(result.nit)


@dataclass
class ProgressRecord:
    """One training step, formatted as a TSV line by ``tsv``."""

    step: int
    n_tokens: int
    bound: float
    estep_iters_mean: float
    mstep_iters: int
    seconds: float

    TSV_HEADER = "iter\tn_tokens\tsurrogate_bound\testep_iters_mean\tmstep_iters\tseconds"

    def tsv(self) -> str:
        return (f"{self.step}\t{self.n_tokens}\t{self.bound:.6f}"
                f"\t{self.estep_iters_mean:.2f}\t{self.mstep_iters}\t{self.seconds:.3f}")


def run_estep(sentences: Sequence[np.ndarray], params: FhmmParams,
              config: TrainConfig, warm_starts=None):
    """Fit every sentence and accumulate stats in sentence order.

    ``warm_starts`` optionally supplies per-sentence initial potentials
    (otherwise the observation logits at the observed tokens are used).
    Returns ``(stats, total_bound, mean_estep_iterations, potentials)``
    where ``potentials`` lists each sentence's fitted potentials. The
    reduction order is fixed, so thread count does not change the result.
    """

    def one(item):
        sentence, warm = item
        state, marginals = fit_variational(sentence, params,
                                           max_iters=config.estep_max_iters,
                                           tol=config.estep_tol,
                                           warm_start=warm)
        bound = -kl_surrogate(sentence, state, marginals, params)
        return marginals, bound, state.iterations_used, state.obs_potentials

    items = list(zip(sentences, warm_starts if warm_starts is not None
                     else [None] * len(sentences)))
    if config.n_threads > 1:
        with ThreadPoolExecutor(max_workers=config.n_threads) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    stats = empty_stats(params.n_layers, params.n_states)
    total = 0.0
    iters = []
    potentials = []
    for sentence, (marginals, bound, used, pots) in zip(sentences, results):
        accumulate_stats(stats, marginals, sentence)
        total += bound
        iters.append(used)
        potentials.append(pots)
    return stats, total, float(np.mean(iters)), potentials


def _resolve_corpus(corpus, n_symbols=None, initial=None):
    if isinstance(corpus, Corpus):
        sentences, n_symbols = list(corpus.sentences), corpus.n_symbols
    else:
        sentences = [np.asarray(s, dtype=np.int64) for s in corpus]
        if not sentences:
            raise DataError("empty corpus")
        if n_symbols is None:
            n_symbols = (initial.n_symbols if initial is not None
                         else int(max(int(s.max()) for s in sentences)) + 1)
    if initial is not None and initial.n_symbols != n_symbols:
        raise DataError(f"initial parameters expect {initial.n_symbols} symbols, "
                        f"corpus has {n_symbols}")
    return sentences, n_symbols


def train_full_batch(corpus, config: TrainConfig,
                     progress: Optional[Callable[[ProgressRecord], None]] = None,
                     initial: Optional[FhmmParams] = None,
                     n_symbols: Optional[int] = None):
    """Batch EM to convergence of the summed per-sentence bound.

    Stops when the relative improvement drops below
    ``config.full_batch_rel_tol`` or after ``config.full_batch_max_iters``
    EM iterations. Returns ``(params, bound_trace)``.
    """
    config.validate()
    sentences, v_count = _resolve_corpus(corpus, n_symbols, initial)
    params = initial if initial is not None else init_params(
        config.n_layers, config.n_states, v_count, config.seed, config.init_scale)
    trace = []
    previous = -np.inf
    warm_starts = None
    for iteration in range(1, config.full_batch_max_iters + 1):
        started = time.perf_counter()
        # carrying each sentence's fitted potentials keeps the bound trace
        # monotone: the new E-step starts from a distribution the M-step
        # provably improved
        stats, bound, estep_mean, warm_starts = run_estep(
            sentences, params, config, warm_starts=warm_starts)
        trace.append(bound)
        if bound - previous < config.full_batch_rel_tol * max(1.0, abs(previous)):
            if progress is not None:
                progress(ProgressRecord(iteration, stats.n_tokens, bound,
                                        estep_mean, 0, time.perf_counter() - started))
            break
        previous = bound
        init_logits, trans_logits = mstep_initial_transition(stats)
        obs_logits, mstep_iters = mstep_observation(
            params.observation_logits, stats, config.l2, config.mstep_max_iters)
        params = FhmmParams(init_logits, trans_logits, obs_logits)
        if progress is not None:
            progress(ProgressRecord(iteration, stats.n_tokens, bound,
                                    estep_mean, mstep_iters,
                                    time.perf_counter() - started))
    return params, trace


def train_online(corpus, config: TrainConfig,
                 progress: Optional[Callable[[ProgressRecord], None]] = None,
                 initial: Optional[FhmmParams] = None,
                 n_symbols: Optional[int] = None) -> FhmmParams:
    """Stepwise EM over shuffled mini-batches.

    Batch b contributes its initial/transition counts, scaled to corpus
    size, with weight (b + 2) ** -decay; observation logits are refit on
    the batch alone, warm started. Batch order is a seeded permutation per
    epoch, so runs are reproducible.
    """
    config.validate()
    sentences, v_count = _resolve_corpus(corpus, n_symbols, initial)
    params = initial if initial is not None else init_params(
        config.n_layers, config.n_states, v_count, config.seed, config.init_scale)
    rng = np.random.default_rng(config.seed)
    n_total = len(sentences)
    persistent_init = None
    persistent_trans = None
    step = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(n_total)
        for start in range(0, n_total, config.minibatch_size):
            batch_idx = order[start:start + config.minibatch_size]
            batch = [sentences[i] for i in batch_idx]
            started = time.perf_counter()
            stats, bound, estep_mean, _ = run_estep(batch, params, config)
            scale = n_total / len(batch)
            if persistent_init is None:
                persistent_init = stats.init_counts * scale
                persistent_trans = stats.trans_counts * scale
            else:
                eta = (step + 2.0) ** (-config.stepwise_decay)
                persistent_init = (1 - eta) * persistent_init + eta * scale * stats.init_counts
                persistent_trans = (1 - eta) * persistent_trans + eta * scale * stats.trans_counts
            init_logits, trans_logits = _normalize_counts(persistent_init, persistent_trans)
            obs_logits, mstep_iters = mstep_observation(
                params.observation_logits, stats, config.l2,
                config.mstep_minibatch_iters)
            params = FhmmParams(init_logits, trans_logits, obs_logits)
            step += 1
            if progress is not None:
                progress(ProgressRecord(step, stats.n_tokens, bound, estep_mean,
                                        mstep_iters, time.perf_counter() - started))
    return params


def mean_token_bound(corpus, params: FhmmParams, config: TrainConfig) -> float:
    """Held-out diagnostic: mean per-token variational bound."""
    sentences, _ = _resolve_corpus(corpus, params.n_symbols)
    stats, total, _, _ = run_estep(sentences, params, config)
    return total / stats.n_tokens
