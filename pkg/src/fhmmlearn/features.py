"""Per-token representations and a small downstream tagging harness.

Representations come in two flavors: per-layer Viterbi state indices, or
the concatenated per-layer posterior marginals. Both are computed from a
whole-sentence variational fit, so the same word can receive different
representations in different sentences.

The harness trains a per-token multinomial logistic tagger (word identity
alone, or word identity plus representations in a +-2 token window) and
reports error rates over all, out-of-vocabulary, and rare test tokens.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .corpus import Vocab
from .errors import DataError
from .inference import fit_variational, viterbi_decode
from .model import FhmmParams


@dataclass
class TokenRepresentation:
    """One token's representation. Exactly one payload is set, matching
    ``mode``: ``viterbi_states`` (M,) or ``posterior_vec`` (M*K,).
    """

    mode: str
    viterbi_states: Optional[np.ndarray] = None
    posterior_vec: Optional[np.ndarray] = None


def featurize(params: FhmmParams, sentence: np.ndarray, mode: str = "posterior",
              estep_max_iters: int = 25, estep_tol: float = 1e-6):
    """Whole-sentence representations for every token of one sentence."""
    if mode not in ("posterior", "viterbi"):
        raise DataError(f"unknown representation mode {mode!r}")
    state, marginals = fit_variational(sentence, params,
                                       max_iters=estep_max_iters, tol=estep_tol)
    if mode == "viterbi":
        paths = viterbi_decode(sentence, state, params)
        return [TokenRepresentation("viterbi", viterbi_states=paths[t])
                for t in range(len(sentence))]
    t_len, m_count, k_count = marginals.unary.shape
    flat = marginals.unary.reshape(t_len, m_count * k_count)
    return [TokenRepresentation("posterior", posterior_vec=flat[t])
            for t in range(t_len)]


def representation_matrix(reps: Sequence[TokenRepresentation], n_states: int) -> np.ndarray:
    """Stack representations into a (T, M*K) float matrix.

    Viterbi states are expanded to per-layer one-hot blocks.
    """
    if not reps:
        return np.zeros((0, 0))
    if reps[0].mode == "posterior":
        return np.stack([r.posterior_vec for r in reps])
    m_count = len(reps[0].viterbi_states)
    out = np.zeros((len(reps), m_count * n_states))
    for t, rep in enumerate(reps):
        for m, state in enumerate(rep.viterbi_states):
            out[t, m * n_states + int(state)] = 1.0
    return out


@dataclass
class TaggedCorpus:
    """Aligned token/label id sequences with a dense label alphabet."""

    token_ids: list
    label_ids: list
    labels: list

    def __post_init__(self):
        for toks, labs in zip(self.token_ids, self.label_ids):
            if len(toks) != len(labs):
                raise DataError("token/label length mismatch")

    @property
    def n_tokens(self) -> int:
        return sum(len(t) for t in self.token_ids)


def read_tagged_corpus(path, vocab: Vocab) -> TaggedCorpus:
    """Read token<TAB>label lines; blank lines separate sentences."""
    sentences, current = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            if current:
                sentences.append(current)
                current = []
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"malformed tagged line: {line!r}")
        current.append((parts[0], parts[1]))
    if current:
        sentences.append(current)
    labels = sorted({lab for sent in sentences for _, lab in sent})
    label_index = {lab: i for i, lab in enumerate(labels)}
    token_ids = [np.array([vocab.lookup(tok) for tok, _ in sent], dtype=np.int64)
                 for sent in sentences]
    label_ids = [np.array([label_index[lab] for _, lab in sent], dtype=np.int64)
                 for sent in sentences]
    return TaggedCorpus(token_ids, label_ids, labels)


def _window_block(rep_matrix: np.ndarray, window: int) -> np.ndarray:
    # concatenate each token's neighborhood, zero padded at the edges
    t_len, dim = rep_matrix.shape
    out = np.zeros((t_len, (2 * window + 1) * dim))
    for offset in range(-window, window + 1):
        lo, hi = max(0, -offset), min(t_len, t_len - offset)
        block = slice((offset + window) * dim, (offset + window + 1) * dim)
        out[lo:hi, block] = rep_matrix[lo + offset:hi + offset]
    return out


def _feature_rows(token_ids: np.ndarray, rep_matrix, n_symbols: int, window: int):
    t_len = len(token_ids)
    onehot = sparse.csr_matrix(
        (np.ones(t_len), (np.arange(t_len), token_ids)), shape=(t_len, n_symbols))
    if rep_matrix is None:
        return onehot
    return sparse.hstack([onehot, sparse.csr_matrix(_window_block(rep_matrix, window))],
                         format="csr")


class LinearTokenTagger:
    """Multinomial logistic tagger over per-token feature vectors."""

    def __init__(self, n_symbols: int, window: int = 2, reg: float = 1e-4,
                 max_iter: int = 500):
        self.n_symbols = n_symbols
        self.window = window
        self.reg = reg
        self.max_iter = max_iter
        self._model = None

    def fit(self, tagged: TaggedCorpus, representations=None):
        rows = []
        for i, toks in enumerate(tagged.token_ids):
            rep = None if representations is None else representations[i]
            rows.append(_feature_rows(toks, rep, self.n_symbols, self.window))
        x = sparse.vstack(rows, format="csr")
        y = np.concatenate(tagged.label_ids)
        if len(np.unique(y)) < 2:
            raise DataError("tagger training data has a single label")
        self._model = LogisticRegression(
            C=1.0 / max(self.reg, 1e-12), tol=1e-6, max_iter=self.max_iter)
        with warnings.catch_warnings():
            # hitting the iteration cap is an accepted stopping rule here
            warnings.simplefilter("ignore", category=ConvergenceWarning)
            self._model.fit(x, y)
        return self

    def predict(self, token_ids: np.ndarray, rep_matrix=None) -> np.ndarray:
        if self._model is None:
            raise DataError("tagger is not fitted")
        return self._model.predict(
            _feature_rows(token_ids, rep_matrix, self.n_symbols, self.window))


def train_tagger(tagged: TaggedCorpus, representations=None, n_symbols: int = 0,
                 reg: float = 1e-4, window: int = 2,
                 max_iter: int = 500) -> LinearTokenTagger:
    """Fit the per-token tagger; ``representations`` is a per-sentence list
    of (T, D) matrices or None for the word-identity baseline.
    """
    if n_symbols < 1:
        n_symbols = int(max(int(t.max()) for t in tagged.token_ids)) + 1
    tagger = LinearTokenTagger(n_symbols, window=window, reg=reg, max_iter=max_iter)
    return tagger.fit(tagged, representations)


def token_counts(tagged: TaggedCorpus) -> Counter:
    """Token frequencies of a tagged corpus, for OOV/rare bucketing."""
    counts = Counter()
    for toks in tagged.token_ids:
        counts.update(int(t) for t in toks)
    return counts


@dataclass
class TaggerReport:
    """Error rates (fractions) over all, OOV (count 0 in the supervised
    training set), and rare (count <= 2) tokens."""

    all_error: float
    oov_error: float
    rare_error: float
    n_all: int
    n_oov: int
    n_rare: int


def evaluate_tagger(tagger: LinearTokenTagger, test: TaggedCorpus,
                    representations=None, vocab_counts: Counter | None = None) -> TaggerReport:
    if vocab_counts is None:
        vocab_counts = Counter()
    wrong = np.zeros(3)
    totals = np.zeros(3, dtype=np.int64)
    for i, (toks, labs) in enumerate(zip(test.token_ids, test.label_ids)):
        rep = None if representations is None else representations[i]
        pred = tagger.predict(toks, rep)
        errors = pred != labs
        counts = np.array([vocab_counts.get(int(t), 0) for t in toks])
        for bucket, mask in enumerate((np.ones(len(toks), bool), counts == 0, counts <= 2)):
            wrong[bucket] += int(errors[mask].sum())
            totals[bucket] += int(mask.sum())
    rates = [wrong[i] / totals[i] if totals[i] else float("nan") for i in range(3)]
    return TaggerReport(rates[0], rates[1], rates[2],
                        int(totals[0]), int(totals[1]), int(totals[2]))


def format_report_table(rows) -> str:
    """Render (name, TaggerReport) pairs as an All/OOV/Rare error table."""
    lines = [f"{'model':<16}{'All':>8}{'OOV':>8}{'Rare':>8}"]
    for name, rep in rows:
        cells = [rep.all_error, rep.oov_error, rep.rare_error]
        text = "".join(f"{100 * c:>8.2f}" if np.isfinite(c) else f"{'-':>8}" for c in cells)
        lines.append(f"{name:<16}{text}")
    return "\n".join(lines)


def write_features(path, raw_sentences, reps_per_sentence, mode: str,
                   n_layers: int, n_states: int, states_only: bool = False) -> None:
    """Write the feature file: a ``#mode=`` header, then one token per line
    as ``sentence<TAB>token_idx<TAB>token<TAB>v1,v2,...`` with a blank line
    between sentences. Posterior values use 6 significant digits; Viterbi
    rows carry the M state indices followed by their M*K one-hot expansion
    (indices alone when ``states_only``).
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#mode={mode}\tlayers={n_layers}\tstates={n_states}\n")
        for s_idx, (raw, reps) in enumerate(zip(raw_sentences, reps_per_sentence)):
            if s_idx > 0:
                fh.write("\n")
            for t_idx, (tok, rep) in enumerate(zip(raw, reps)):
                if mode == "posterior":
                    values = ",".join(f"{x:.6g}" for x in rep.posterior_vec)
                else:
                    states = [str(int(s)) for s in rep.viterbi_states]
                    if states_only:
                        values = ",".join(states)
                    else:
                        onehot = representation_matrix([rep], n_states)[0]
                        values = ",".join(states + [str(int(x)) for x in onehot])
                fh.write(f"{s_idx}\t{t_idx}\t{tok}\t{values}\n")
