"""Model parameters and exact probability computations.

A factorial HMM with ``M`` independent latent chains of ``K`` states each,
jointly emitting one of ``V`` discrete symbols per time step. Initial,
transition, and observation distributions are all log-linear; parameters
are stored as raw logits and normalized on demand in log space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import DataError

MODEL_MAGIC = b"FHMM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FhmmParams:
    """All model parameters. Treated as immutable outside the M-step.

    Shapes: initial ``(M, K)``, transition ``(M, K, K)`` indexed
    (layer, previous state, current state), observation ``(V, M, K)``
    indexed (symbol, layer, state).
    """

    initial_logits: np.ndarray
    transition_logits: np.ndarray
    observation_logits: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.initial_logits, dtype=np.float64)
        trans = np.asarray(self.transition_logits, dtype=np.float64)
        obs = np.asarray(self.observation_logits, dtype=np.float64)
        if init.ndim != 2 or trans.ndim != 3 or obs.ndim != 3:
            raise DataError("parameter tensors have wrong rank")
        m, k = init.shape
        if trans.shape != (m, k, k) or obs.shape[1:] != (m, k) or obs.shape[0] < 1:
            raise DataError("parameter tensors have inconsistent shapes")
        if m < 1 or k < 1:
            raise DataError("model dimensions must be >= 1")
        for arr in (init, trans, obs):
            if not np.all(np.isfinite(arr)):
                raise DataError("parameter tensors must be finite")
        object.__setattr__(self, "initial_logits", init)
        object.__setattr__(self, "transition_logits", trans)
        object.__setattr__(self, "observation_logits", obs)

    @property
    def n_layers(self) -> int:
        return self.initial_logits.shape[0]

    @property
    def n_states(self) -> int:
        return self.initial_logits.shape[1]

    @property
    def n_symbols(self) -> int:
        return self.observation_logits.shape[0]

    def with_updates(self, **kwargs) -> "FhmmParams":
        return replace(self, **kwargs)


def init_params(n_layers: int, n_states: int, n_symbols: int,
                seed: int = 0, scale: float = 0.1) -> FhmmParams:
    """Random parameters with logits drawn i.i.d. uniform on [-scale, scale]."""
    if n_layers < 1 or n_states < 1 or n_symbols < 1:
        raise DataError("model dimensions must be >= 1")
    if scale < 0:
        raise DataError("init scale must be >= 0")
    rng = np.random.default_rng(seed)
    return FhmmParams(
        initial_logits=rng.uniform(-scale, scale, size=(n_layers, n_states)),
        transition_logits=rng.uniform(-scale, scale, size=(n_layers, n_states, n_states)),
        observation_logits=rng.uniform(-scale, scale, size=(n_symbols, n_layers, n_states)),
    )


def initial_log_dist(params: FhmmParams, m: int) -> np.ndarray:
    """log P(S_1^m = k) for every state k of layer m."""
    return log_softmax(params.initial_logits[m])


def transition_log_dist(params: FhmmParams, m: int, j: int) -> np.ndarray:
    """log P(S_t^m = k | S_{t-1}^m = j) for every state k."""
    return log_softmax(params.transition_logits[m, j])


def initial_log_matrix(params: FhmmParams) -> np.ndarray:
    """All layers' initial log distributions, shape (M, K)."""
    return log_softmax(params.initial_logits, axis=1)


def transition_log_matrix(params: FhmmParams) -> np.ndarray:
    """All layers' transition log distributions, shape (M, K, K)."""
    return log_softmax(params.transition_logits, axis=2)


def _config_obs_logits(params: FhmmParams, states: Sequence[int]) -> np.ndarray:
    # sum over layers of theta[Y, m, k_m], for every symbol Y; shape (V,)
    idx = np.asarray(states, dtype=np.int64)
    if idx.shape != (params.n_layers,):
        raise DataError("state config must list one state per layer")
    if np.any(idx < 0) or np.any(idx >= params.n_states):
        raise DataError("state index out of range")
    return params.observation_logits[:, np.arange(params.n_layers), idx].sum(axis=1)


def observation_log_prob(params: FhmmParams, states: Sequence[int], y: int) -> float:
    """log P(Y_t = y | S_t = states), states given as one index per layer."""
    if not 0 <= y < params.n_symbols:
        raise DataError("symbol id out of range")
    scores = _config_obs_logits(params, states)
    return float(scores[y] - logsumexp(scores))


def joint_log_prob(params: FhmmParams, state_seq, sentence) -> float:
    """log P(states, sentence) of a full latent/observed assignment.

    ``state_seq`` has shape (T, M); ``sentence`` is a length-T id sequence.
    """
    states = np.asarray(state_seq, dtype=np.int64)
    y = np.asarray(sentence, dtype=np.int64)
    if states.ndim != 2 or states.shape[0] != len(y):
        raise DataError("state sequence and sentence lengths differ")
    log_init = initial_log_matrix(params)
    log_trans = transition_log_matrix(params)
    layers = np.arange(params.n_layers)
    total = float(log_init[layers, states[0]].sum())
    total += observation_log_prob(params, states[0], int(y[0]))
    for t in range(1, len(y)):
        total += float(log_trans[layers, states[t - 1], states[t]].sum())
        total += observation_log_prob(params, states[t], int(y[t]))
    return total


def sample_sentence(params: FhmmParams, length: int, rng: np.random.Generator):
    """Draw one latent state sequence and emitted sentence from the model.

    Returns ``(states, sentence)`` with shapes (T, M) and (T,).
    """
    if length < 1:
        raise DataError("sentence length must be >= 1")
    init_p = np.exp(initial_log_matrix(params))
    trans_p = np.exp(transition_log_matrix(params))
    m_count = params.n_layers
    states = np.empty((length, m_count), dtype=np.int64)
    for m in range(m_count):
        states[0, m] = rng.choice(params.n_states, p=init_p[m])
    for t in range(1, length):
        for m in range(m_count):
            states[t, m] = rng.choice(params.n_states, p=trans_p[m, states[t - 1, m]])
    sentence = np.empty(length, dtype=np.int64)
    for t in range(length):
        scores = _config_obs_logits(params, states[t])
        p = np.exp(scores - logsumexp(scores))
        p /= p.sum()
        sentence[t] = rng.choice(params.n_symbols, p=p)
    return states, sentence


def sample_corpus(params: FhmmParams, n_sentences: int, min_len: int, max_len: int,
                  seed: int = 0):
    """Sample sentences with lengths uniform on {min_len..max_len}.

    Returns ``(state_seqs, sentences)`` as parallel lists.
    """
    rng = np.random.default_rng(seed)
    state_seqs, sentences = [], []
    for _ in range(n_sentences):
        t = int(rng.integers(min_len, max_len + 1))
        states, sent = sample_sentence(params, t, rng)
        state_seqs.append(states)
        sentences.append(sent)
    return state_seqs, sentences


def save_params(params: FhmmParams, path) -> None:
    """Versioned binary dump: magic, version, dims, then the three tensors."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, params.n_layers,
                             params.n_states, params.n_symbols))
        fh.write(params.initial_logits.astype("<f8").tobytes())
        fh.write(params.transition_logits.astype("<f8").tobytes())
        fh.write(params.observation_logits.astype("<f8").tobytes())


def load_params(path) -> FhmmParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != MODEL_MAGIC:
        raise DataError("corrupt model file: bad header")
    version, m, k, v = struct.unpack("<4I", data[4:20])
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported model file version {version}")
    sizes = (m * k, m * k * k, v * m * k)
    expected = 20 + 8 * sum(sizes)
    if len(data) != expected:
        raise DataError("corrupt model file: truncated or oversized payload")
    offset = 20
    tensors = []
    for count, shape in zip(sizes, ((m, k), (m, k, k), (v, m, k))):
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        tensors.append(arr.reshape(shape).copy())
        offset += 8 * count
    try:
        return FhmmParams(*tensors)
    except DataError as exc:
        raise DataError(f"corrupt model file: {exc}") from exc


def params_to_json(params: FhmmParams) -> str:
    """JSON mirror of the binary format, for debugging."""
    payload = {
        "format_version": FORMAT_VERSION,
        "n_layers": params.n_layers,
        "n_states": params.n_states,
        "n_symbols": params.n_symbols,
        "initial_logits": params.initial_logits.tolist(),
        "transition_logits": params.transition_logits.tolist(),
        "observation_logits": params.observation_logits.tolist(),
    }
    return json.dumps(payload, indent=2)
