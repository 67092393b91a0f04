"""Command-line interface.

Commands: build-vocab, train, featurize, decode, oracle-check, eval-tagger,
and export-json. Options may also come from a flat key=value config file
('#' starts a comment); explicit flags win over the config file, which wins
over built-in defaults. Exit codes: 0 success, 1 usage error, 2 data or
model error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .corpus import Vocab, build_vocab, encode_corpus, encode_sentence, read_raw_corpus
from .errors import DataError, NumericError
from .features import (
    evaluate_tagger,
    featurize,
    format_report_table,
    read_tagged_corpus,
    representation_matrix,
    token_counts,
    train_tagger,
    write_features,
)
from .inference import fit_variational, kl_surrogate
from .learning import ProgressRecord, TrainConfig, train_full_batch, train_online
from .model import load_params, params_to_json, save_params
from .oracle import exact_infer, exact_posterior_kl
from .validation import check_model_vocab


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _read_config(path) -> dict:
    cfg = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"malformed config line: {raw!r}")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _load_cfg(args) -> dict:
    return _read_config(args.config) if getattr(args, "config", None) else {}


def _opt(args, cfg, name, default, cast=str):
    """Flag value, else config value, else default."""
    value = getattr(args, name)
    if value is not None:
        return value
    if name in cfg:
        raw = cfg[name]
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    return default


def _check_out_path(path) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise DataError(f"output directory does not exist: {parent}")


def _resolve_threads(args, cfg) -> int:
    value = _opt(args, cfg, "threads", None, int)
    if value is None:
        env = os.environ.get("FHMM_THREADS")
        value = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(value))


def _add_common(sub):
    sub.add_argument("--config", help="flat key=value options file")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: FHMM_THREADS or all cores)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="fhmm", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("build-vocab", help="build a vocabulary file")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--min-count", dest="min_count", type=int, default=None)
    p.add_argument("--config")

    p = commands.add_parser("train", help="train a model")
    p.add_argument("corpus")
    p.add_argument("vocab")
    p.add_argument("out")
    for flag, cast in [("--layers", int), ("--states", int), ("--epochs", int),
                       ("--minibatch", int), ("--seed", int),
                       ("--estep-max-iters", int), ("--mstep-max-iters", int),
                       ("--mstep-minibatch-iters", int)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=cast, default=None)
    for flag in ["--estep-tol", "--l2", "--decay", "--init-scale"]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=float, default=None)
    p.add_argument("--full-batch", dest="full_batch", action="store_const",
                   const=True, default=None, help="batch EM instead of online")
    p.add_argument("--progress-log", dest="progress_log", default=None,
                   help="write the TSV progress log here instead of stderr")
    _add_common(p)

    p = commands.add_parser("featurize", help="write per-token representations")
    p.add_argument("model")
    p.add_argument("vocab")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--mode", choices=["posterior", "viterbi"], default=None)
    _add_common(p)

    p = commands.add_parser("decode", help="write per-layer Viterbi states")
    p.add_argument("model")
    p.add_argument("vocab")
    p.add_argument("corpus")
    p.add_argument("out")
    _add_common(p)

    p = commands.add_parser("oracle-check", help="compare variational inference "
                            "with exhaustive enumeration on tiny sentences")
    p.add_argument("model")
    p.add_argument("vocab")
    p.add_argument("corpus")
    p.add_argument("--limit", type=int, default=None)
    _add_common(p)

    p = commands.add_parser("eval-tagger", help="downstream tagging comparison")
    p.add_argument("model")
    p.add_argument("vocab")
    p.add_argument("train_tagged")
    p.add_argument("test_tagged")
    p.add_argument("--mode", choices=["posterior", "viterbi"], default=None)
    p.add_argument("--reg", type=float, default=None)
    _add_common(p)

    p = commands.add_parser("export-json", help="dump a model file as JSON")
    p.add_argument("model")
    p.add_argument("out", nargs="?")
    p.add_argument("--config")

    return parser


def _cmd_build_vocab(args) -> int:
    cfg = _load_cfg(args)
    min_count = _opt(args, cfg, "min_count", 2, int)
    _check_out_path(args.out)
    vocab = build_vocab(read_raw_corpus(args.corpus), min_count=min_count)
    vocab.save(args.out)
    print(f"V={len(vocab)}")
    return 0


def _train_config(args, cfg) -> tuple[TrainConfig, bool]:
    config = TrainConfig(
        n_layers=_opt(args, cfg, "layers", 5, int),
        n_states=_opt(args, cfg, "states", 10, int),
        epochs=_opt(args, cfg, "epochs", 5, int),
        minibatch_size=_opt(args, cfg, "minibatch", 1000, int),
        estep_max_iters=_opt(args, cfg, "estep_max_iters", 25, int),
        estep_tol=_opt(args, cfg, "estep_tol", 1e-6, float),
        mstep_max_iters=_opt(args, cfg, "mstep_max_iters", 100, int),
        mstep_minibatch_iters=_opt(args, cfg, "mstep_minibatch_iters", 10, int),
        l2=_opt(args, cfg, "l2", 0.0, float),
        stepwise_decay=_opt(args, cfg, "decay", 0.6, float),
        seed=_opt(args, cfg, "seed", 0, int),
        init_scale=_opt(args, cfg, "init_scale", 0.1, float),
        n_threads=_resolve_threads(args, cfg),
    ).validate()
    return config, bool(_opt(args, cfg, "full_batch", False, bool))


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    config, full_batch = _train_config(args, cfg)
    _check_out_path(args.out)
    vocab = Vocab.load(args.vocab)
    corpus = encode_corpus(vocab, read_raw_corpus(args.corpus))
    if not corpus.sentences:
        raise DataError("corpus is empty")
    algorithm = "full-batch" if full_batch else "online"
    print(f"layers={config.n_layers} states={config.n_states} vocab={len(vocab)} "
          f"minibatch={config.minibatch_size} epochs={config.epochs} "
          f"algorithm={algorithm} seed={config.seed} threads={config.n_threads}")

    sink = open(args.progress_log, "w", encoding="utf-8") if args.progress_log else sys.stderr
    try:
        sink.write("#" + ProgressRecord.TSV_HEADER + "\n")

        def progress(record: ProgressRecord) -> None:
            sink.write(record.tsv() + "\n")

        if full_batch:
            params, _trace = train_full_batch(corpus, config, progress=progress)
        else:
            params = train_online(corpus, config, progress=progress)
    finally:
        if args.progress_log:
            sink.close()
    save_params(params, args.out)
    print(f"wrote model to {args.out}")
    return 0


def _load_model_vocab(args):
    params = load_params(args.model)
    vocab = Vocab.load(args.vocab)
    check_model_vocab(params, vocab)
    return params, vocab


def _cmd_featurize(args, states_only=False) -> int:
    cfg = _load_cfg(args)
    mode = "viterbi" if states_only else _opt(args, cfg, "mode", "posterior")
    _check_out_path(args.out)
    params, vocab = _load_model_vocab(args)
    raw = read_raw_corpus(args.corpus)
    reps = [featurize(params, encode_sentence(vocab, sent), mode=mode) for sent in raw]
    write_features(args.out, raw, reps, mode, params.n_layers, params.n_states,
                   states_only=states_only)
    print(f"wrote {sum(len(r) for r in reps)} token representations to {args.out}")
    return 0


def _cmd_oracle_check(args) -> int:
    cfg = _load_cfg(args)
    limit = _opt(args, cfg, "limit", 10_000_000, int)
    params, vocab = _load_model_vocab(args)
    raw = read_raw_corpus(args.corpus)
    failures = 0
    for i, sent in enumerate(raw):
        encoded = encode_sentence(vocab, sent)
        exact = exact_infer(params, encoded, limit=limit)
        state, marginals = fit_variational(encoded, params)
        deviation = float(np.max(np.abs(marginals.unary - exact.unary)))
        if len(encoded) > 1:
            deviation = max(deviation,
                            float(np.max(np.abs(marginals.pairwise - exact.pairwise))))
        kl_bound = kl_surrogate(encoded, state, marginals, params) + exact.log_likelihood
        kl_exact = exact_posterior_kl(params, encoded, state.obs_potentials, limit=limit)
        ok = -1e-8 <= kl_exact <= kl_bound + 1e-8
        if params.n_layers == 1:
            ok = ok and deviation < 1e-6
        failures += 0 if ok else 1
        print(f"sent={i}\tT={len(encoded)}\tlog_likelihood={exact.log_likelihood:.6f}"
              f"\tmax_marginal_dev={deviation:.3e}\tkl_exact={kl_exact:.6e}"
              f"\tkl_bound={kl_bound:.6e}\t{'PASS' if ok else 'FAIL'}")
    print(f"checked={len(raw)} failed={failures}")
    if failures:
        raise NumericError(f"{failures} sentence(s) failed the oracle check")
    return 0


def _cmd_eval_tagger(args) -> int:
    cfg = _load_cfg(args)
    mode = _opt(args, cfg, "mode", "posterior")
    reg = _opt(args, cfg, "reg", 1e-4, float)
    params, vocab = _load_model_vocab(args)
    train_set = read_tagged_corpus(args.train_tagged, vocab)
    test_set = read_tagged_corpus(args.test_tagged, vocab)
    if train_set.labels != test_set.labels:
        merged = sorted(set(train_set.labels) | set(test_set.labels))
        for tagged in (train_set, test_set):
            remap = np.array([merged.index(lab) for lab in tagged.labels])
            tagged.label_ids = [remap[labs] for labs in tagged.label_ids]
            tagged.labels = merged

    def reps_for(tagged):
        out = []
        for toks in tagged.token_ids:
            reps = featurize(params, toks, mode=mode)
            out.append(representation_matrix(reps, params.n_states))
        return out

    counts = token_counts(train_set)
    baseline = train_tagger(train_set, None, n_symbols=len(vocab), reg=reg)
    base_report = evaluate_tagger(baseline, test_set, None, counts)
    augmented = train_tagger(train_set, reps_for(train_set), n_symbols=len(vocab), reg=reg)
    aug_report = evaluate_tagger(augmented, test_set, reps_for(test_set), counts)
    print(format_report_table([("baseline", base_report), (mode, aug_report)]))
    return 0


def _cmd_export_json(args) -> int:
    if args.out:
        _check_out_path(args.out)
    text = params_to_json(load_params(args.model))
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "build-vocab":
            return _cmd_build_vocab(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "featurize":
            return _cmd_featurize(args)
        if args.command == "decode":
            return _cmd_featurize(args, states_only=True)
        if args.command == "oracle-check":
            return _cmd_oracle_check(args)
        if args.command == "eval-tagger":
            return _cmd_eval_tagger(args)
        if args.command == "export-json":
            return _cmd_export_json(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
