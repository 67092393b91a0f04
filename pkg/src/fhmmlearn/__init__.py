"""Factorial hidden Markov models for whole-sentence token representations.

Train discrete-observation factorial HMMs on unlabeled token sequences
with structured variational EM, then extract per-token features (Viterbi
layer states or posterior marginals) that depend on the entire sentence.
"""

from .corpus import Corpus, Vocab, build_vocab, decode_sentence, encode_sentence, normalize_token
from .errors import DataError, FhmmError, NumericError
from .estimator import FactorialHMM
from .features import TaggedCorpus, TokenRepresentation, evaluate_tagger, featurize, train_tagger
from .inference import (
    PosteriorMarginals,
    VariationalState,
    compute_phi_aux,
    fit_variational,
    forward_backward_layer,
    kl_surrogate,
    update_obs_potentials,
    viterbi_decode,
)
from .learning import (
    SufficientStats,
    TrainConfig,
    accumulate_stats,
    mstep_initial_transition,
    mstep_observation,
    observation_objective_and_gradient,
    train_full_batch,
    train_online,
)
from .model import (
    FhmmParams,
    init_params,
    initial_log_dist,
    joint_log_prob,
    load_params,
    observation_log_prob,
    sample_corpus,
    sample_sentence,
    save_params,
    transition_log_dist,
)
from .oracle import OracleResult, exact_infer, exact_posterior_kl

__version__ = "0.1.0"

__all__ = [
    "Corpus", "Vocab", "build_vocab", "decode_sentence", "encode_sentence",
    "normalize_token", "DataError", "FhmmError", "NumericError", "FactorialHMM",
    "TaggedCorpus", "TokenRepresentation", "evaluate_tagger", "featurize",
    "train_tagger", "PosteriorMarginals", "VariationalState", "compute_phi_aux",
    "fit_variational", "forward_backward_layer", "kl_surrogate",
    "update_obs_potentials", "viterbi_decode", "SufficientStats", "TrainConfig",
    "accumulate_stats", "mstep_initial_transition", "mstep_observation",
    "observation_objective_and_gradient", "train_full_batch", "train_online",
    "FhmmParams", "init_params", "initial_log_dist", "joint_log_prob",
    "load_params", "observation_log_prob", "sample_corpus", "sample_sentence",
    "save_params", "transition_log_dist", "OracleResult", "exact_infer",
    "exact_posterior_kl", "__version__",
]
