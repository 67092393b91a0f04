"""Shared builders for randomized and synthetic test instances."""

import numpy as np

from fhmmlearn.model import FhmmParams, sample_corpus


def rand_params(m, k, v, seed, scale=1.0):
    """Logits drawn uniform on [-scale, scale]."""
    rng = np.random.default_rng(seed)
    return FhmmParams(
        rng.uniform(-scale, scale, (m, k)),
        rng.uniform(-scale, scale, (m, k, k)),
        rng.uniform(-scale, scale, (v, m, k)),
    )


def rand_sentence(v, t, seed):
    return np.random.default_rng(seed).integers(0, v, t)


def latent_label_task(seed, n_train=80, n_test=40, half_v=12, oov_frac=0.3,
                      n_states=3, emission_sharpness=5.0):
    """Synthetic tagging task whose labels are the generating model's
    first-layer states.

    The vocabulary has two synonym halves with identical observation
    columns. Tagger training sentences are folded onto the first half;
    a fraction of test tokens is flipped to the second half, making them
    out-of-vocabulary for the tagger while leaving the generating
    distribution (and hence any latent-state features) unchanged.

    Returns ``(generating_params, (train_tokens, train_labels),
    (test_tokens, test_labels))``.
    """
    rng = np.random.default_rng(seed)
    m_count, k_count = 2, n_states
    v_count = 2 * half_v
    obs = rng.uniform(-0.5, 0.5, (v_count, m_count, k_count))
    for v in range(half_v):
        obs[v, 0, v % k_count] += emission_sharpness
        obs[v + half_v] = obs[v]
    init = rng.uniform(-0.5, 0.5, (m_count, k_count))
    trans = rng.uniform(-0.5, 0.5, (m_count, k_count, k_count))
    trans[0] += 1.5 * np.eye(k_count)
    gen = FhmmParams(init, trans, obs)

    states_tr, sents_tr = sample_corpus(gen, n_train, 5, 12, seed=seed + 1)
    states_te, sents_te = sample_corpus(gen, n_test, 5, 12, seed=seed + 2)
    train_tokens = [s % half_v for s in sents_tr]
    train_labels = [st[:, 0] for st in states_tr]
    flip_rng = np.random.default_rng(seed + 3)
    test_tokens = []
    for s in sents_te:
        base = s % half_v
        flip = flip_rng.random(len(base)) < oov_frac
        test_tokens.append(np.where(flip, base + half_v, base))
    test_labels = [st[:, 0] for st in states_te]
    return gen, (train_tokens, train_labels), (test_tokens, test_labels)
