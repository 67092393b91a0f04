"""Scikit-learn style estimator wrapping training and featurization."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .features import featurize, representation_matrix
from .learning import TrainConfig, mean_token_bound, train_full_batch, train_online
from .validation import check_token_sequences


class FactorialHMM(BaseEstimator, TransformerMixin):
    """Unsupervised factorial HMM over discrete token sequences.

    ``fit`` trains the model on unlabeled id sequences with variational EM
    (online stepwise EM by default). ``transform`` turns sentences into
    per-token representations that depend on the whole sentence, and
    ``predict`` returns per-layer Viterbi state indices.

    Parameters
    ----------
    n_layers : int
        Number of independent latent chains.
    n_states : int
        States per chain.
    n_symbols : int or None
        Vocabulary size; inferred from the training data when None.
    algorithm : {"online", "full_batch"}
        Training loop to use.
    epochs, minibatch_size, stepwise_decay : online-EM schedule.
    estep_max_iters, estep_tol : fixed-point budget for the E-step.
    mstep_max_iters, mstep_minibatch_iters : L-BFGS caps for the
        observation M-step (full-batch and online respectively).
    l2 : float
        Optional L2 penalty on observation logits.
    init_scale : float
        Half-width of the uniform logit initialization.
    representation : {"posterior", "viterbi"}
        What ``transform`` emits: concatenated posterior marginals of
        dimension ``n_layers * n_states``, or per-layer state indices.
    n_threads : int
        Worker threads for the E-step; 1 gives a fully serial reduction.
    random_state : int
        Seed for initialization and batch shuffling.

    Attributes
    ----------
    params_ : FhmmParams
        Trained model parameters.
    n_symbols_ : int
        Vocabulary size actually used.
    trace_ : list of float
        Per-iteration bound values (full-batch algorithm only).
    """

    def __init__(self, n_layers=5, n_states=10, n_symbols=None,
                 algorithm="online", epochs=5, minibatch_size=1000,
                 estep_max_iters=25, estep_tol=1e-6, mstep_max_iters=100,
                 mstep_minibatch_iters=10, l2=0.0, stepwise_decay=0.6,
                 init_scale=0.1, representation="posterior", n_threads=1,
                 random_state=0):
        self.n_layers = n_layers
        self.n_states = n_states
        self.n_symbols = n_symbols
        self.algorithm = algorithm
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.estep_max_iters = estep_max_iters
        self.estep_tol = estep_tol
        self.mstep_max_iters = mstep_max_iters
        self.mstep_minibatch_iters = mstep_minibatch_iters
        self.l2 = l2
        self.stepwise_decay = stepwise_decay
        self.init_scale = init_scale
        self.representation = representation
        self.n_threads = n_threads
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            n_layers=self.n_layers, n_states=self.n_states, epochs=self.epochs,
            minibatch_size=self.minibatch_size,
            estep_max_iters=self.estep_max_iters, estep_tol=self.estep_tol,
            mstep_max_iters=self.mstep_max_iters,
            mstep_minibatch_iters=self.mstep_minibatch_iters, l2=self.l2,
            stepwise_decay=self.stepwise_decay, seed=self.random_state,
            init_scale=self.init_scale, n_threads=self.n_threads,
        ).validate()

    def fit(self, X, y=None, progress=None):
        """Train on a collection of token-id sequences."""
        sequences, n_symbols = check_token_sequences(X, self.n_symbols)
        config = self._config()
        if self.algorithm == "full_batch":
            self.params_, self.trace_ = train_full_batch(
                sequences, config, progress=progress, n_symbols=n_symbols)
        elif self.algorithm == "online":
            self.params_ = train_online(
                sequences, config, progress=progress, n_symbols=n_symbols)
            self.trace_ = []
        else:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        self.n_symbols_ = n_symbols
        return self

    def _check_is_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this FactorialHMM instance is not fitted yet")

    def transform(self, X):
        """Per-token representations, one array per sentence.

        Posterior mode yields (T, n_layers * n_states) float arrays;
        Viterbi mode yields (T, n_layers) int arrays.
        """
        self._check_is_fitted()
        sequences, _ = check_token_sequences(X, self.n_symbols_)
        out = []
        for seq in sequences:
            reps = featurize(self.params_, seq, mode=self.representation,
                             estep_max_iters=self.estep_max_iters,
                             estep_tol=self.estep_tol)
            if self.representation == "viterbi":
                out.append(np.stack([r.viterbi_states for r in reps]))
            else:
                out.append(representation_matrix(reps, self.n_states))
        return out

    def predict(self, X):
        """Per-layer Viterbi state indices, one (T, n_layers) array per sentence."""
        self._check_is_fitted()
        sequences, _ = check_token_sequences(X, self.n_symbols_)
        out = []
        for seq in sequences:
            reps = featurize(self.params_, seq, mode="viterbi",
                             estep_max_iters=self.estep_max_iters,
                             estep_tol=self.estep_tol)
            out.append(np.stack([r.viterbi_states for r in reps]))
        return out

    def score(self, X, y=None) -> float:
        """Mean per-token variational bound on the given sequences."""
        self._check_is_fitted()
        sequences, _ = check_token_sequences(X, self.n_symbols_)
        return mean_token_bound(sequences, self.params_, self._config())
