"""Command-line surface.

Subcommands: train, parse, pppl, eval-f1, eval-depcompat, export-trees,
count-calls, synth. Exit codes: 0 success, 2 configuration problem, 3 data
integrity problem. ``CHARTLM_LOG`` sets verbosity (debug/info/warning).

Configuration precedence: explicit flags override a ``key=value`` config file
(--config), which overrides defaults.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import data, evaluate, synth
from .data import DataError, Vocab, wordpiece_tokenize
from .model import ModelParams, call_counter, reset_call_counter
from .prune import ConfigError, tree_induction
from .train import TrainConfig, train

log = logging.getLogger("chartlm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def _read_config_file(path: str) -> dict:
    out = {}
    try:
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                out[k.strip().replace("-", "_")] = v.strip()
    except OSError as e:
        raise CliError(f"cannot read config file: {e}") from None
    return out


def _merge_config(args, file_keys: dict, fields: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(fields)
    for k, v in file_keys.items():
        if k not in merged:
            raise CliError(f"unknown config key {k!r}")
        try:
            merged[k] = type(merged[k])(v)
        except ValueError:
            raise CliError(f"config key {k}: cannot parse {v!r}") from None
    for k in merged:
        flag = getattr(args, k, None)
        if flag is not None:
            merged[k] = flag
    return merged


def _need(path: str | None, what: str) -> str:
    if not path:
        raise CliError(f"missing required {what}")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_model(args) -> tuple[ModelParams, Vocab]:
    params = ModelParams.load(_need(args.checkpoint, "checkpoint"))
    vocab = Vocab.load(_need(args.vocab, "vocab"))
    if len(vocab) != params.config.vocab_size:
        raise CliError(f"vocab size {len(vocab)} does not match checkpoint "
                       f"vocab_size {params.config.vocab_size}")
    return params, vocab


def _read_sentences(path: str) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def _write_metric(out, name: str, value) -> None:
    out.write(f"{name}, {value}\n")


def cmd_train(args) -> int:
    corpus_path = _need(args.corpus, "corpus")
    defaults = TrainConfig()
    fields = {k: getattr(defaults, k) for k in
              ("m", "lr", "weight_decay", "batch_size", "max_total_len",
               "max_sentence_len", "epochs", "seed", "dim", "layers",
               "heads", "ffn_dim", "dropout")}
    file_keys = _read_config_file(args.config) if args.config else {}
    try:
        config = TrainConfig(**_merge_config(args, file_keys, fields))
    except (TypeError, ValueError, ConfigError) as e:
        raise CliError(f"bad training configuration: {e}") from None

    lines = _read_sentences(corpus_path)
    if args.vocab and os.path.exists(args.vocab):
        vocab = Vocab.load(args.vocab)
    else:
        vocab = Vocab.build(lines, min_freq=args.min_freq)
        out_vocab = args.vocab or (args.checkpoint + ".vocab")
        vocab.save(out_vocab)
        log.info("built vocabulary of %d tokens -> %s", len(vocab), out_vocab)
    corpus = [wordpiece_tokenize(s, vocab).ids for s in lines]
    log_lines: list[str] = []
    train(corpus, config, len(vocab), checkpoint_path=args.checkpoint,
          log_lines=log_lines,
          stop_after_seconds=args.time_budget)
    if args.log_file:
        with open(args.log_file, "w", encoding="utf-8") as f:
            f.write("\n".join(log_lines) + "\n")
    return EXIT_OK


def cmd_parse(args) -> int:
    params, vocab = _load_model(args)
    m = args.m if args.m is not None else params.config.m
    sentences = _read_sentences(_need(args.input, "input corpus"))
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for sent in sentences:
            seq = wordpiece_tokenize(sent, vocab)
            bt = evaluate.parse(seq, params, m, word_constraint=args.word_constraint)
            if args.word_constraint:
                bt = evaluate.merge_word_leaves(bt, seq.groups)
                leaves = seq.words
            else:
                leaves = seq.pieces
            text = bt.bracket(leaves)
            if bt.is_leaf:
                text = f"({text})"
            out.write(text + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_pppl(args) -> int:
    params, vocab = _load_model(args)
    m = args.m if args.m is not None else params.config.m
    sentences = _read_sentences(_need(args.corpus, "corpus"))
    corpus = [wordpiece_tokenize(s, vocab).ids for s in sentences]
    report = evaluate.pppl(corpus, params, m)
    _write_metric(sys.stdout, "pppl", f"{report.pppl:.4f}")
    if report.skipped:
        _write_metric(sys.stdout, "skipped_sentences", report.skipped)
    if args.per_sentence:
        with open(args.per_sentence, "w", encoding="utf-8") as f:
            for i, ll in enumerate(report.per_sentence):
                f.write(f"{i}\t{ll:.6f}\n")
    return EXIT_OK


def cmd_eval_f1(args) -> int:
    preds = data.load_trees(_need(args.pred, "predicted trees"))
    golds = data.load_trees(_need(args.gold, "gold trees"),
                            strip_punct=args.strip_punct, lowercase=args.lowercase)
    if args.gold_wordpieces:
        vocab = Vocab.load(_need(args.vocab, "vocab"))
        golds = [data.tree_to_wordpieces(t, vocab) for t in golds]
    try:
        mean, scores = evaluate.corpus_f1(preds, golds)
    except evaluate.AlignmentError as e:
        raise CliError(str(e), EXIT_DATA) from None
    _write_metric(sys.stdout, "unlabeled_f1", f"{mean:.2f}")
    if args.per_sentence:
        with open(args.per_sentence, "w", encoding="utf-8") as f:
            for i, s in enumerate(scores):
                f.write(f"{i}\t{s:.2f}\n")
    return EXIT_OK


def cmd_eval_depcompat(args) -> int:
    preds = data.load_trees(_need(args.pred, "predicted trees"))
    deps = data.load_conll_deps(_need(args.deps, "dependency file"))
    if len(preds) != len(deps):
        raise CliError(f"{len(preds)} trees vs {len(deps)} dependency graphs", EXIT_DATA)
    vocab = Vocab.load(_need(args.vocab, "vocab")) if args.vocab else None
    scores = []
    for idx, (pred, dep) in enumerate(zip(preds, deps)):
        groups = None
        if vocab is not None:
            groups = wordpiece_tokenize(dep.tokens, vocab).groups
        try:
            s = evaluate.dep_compat(pred, dep, groups)
        except evaluate.AlignmentError as e:
            raise CliError(f"sentence {idx}: {e}", EXIT_DATA) from None
        if s is not None:
            scores.append(s)
    mean = float(np.mean(scores)) if scores else float("nan")
    _write_metric(sys.stdout, "dep_compat", f"{mean:.4f}")
    if args.per_sentence:
        with open(args.per_sentence, "w", encoding="utf-8") as f:
            for i, s in enumerate(scores):
                f.write(f"{i}\t{s:.4f}\n")
    return EXIT_OK


def cmd_export_trees(args) -> int:
    trees = data.load_trees(_need(args.input, "input trees"),
                            strip_punct=args.strip_punct, lowercase=args.lowercase)
    if args.wordpieces:
        vocab = Vocab.load(_need(args.vocab, "vocab"))
        trees = [data.tree_to_wordpieces(t, vocab) for t in trees]
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    try:
        for t in trees:
            out.write(t.to_string() + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_count_calls(args) -> int:
    from .model import ModelConfig
    lengths = [int(x) for x in args.lengths.split(",")]
    cfg = ModelConfig(vocab_size=args.vocab_size, dim=args.dim, layers=1,
                      heads=2, ffn_dim=args.dim * 2, dropout=0.0, m=args.m)
    params = ModelParams.init(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    means = {}
    for n in lengths:
        counts = []
        for _ in range(args.reps):
            tokens = rng.integers(0, args.vocab_size, size=n).tolist()
            reset_call_counter()
            tree_induction(tokens, args.m, params, np.random.default_rng(int(rng.integers(1 << 30))))
            counts.append(call_counter())
        means[n] = float(np.mean(counts))
        _write_metric(sys.stdout, f"calls_n{n}", f"{means[n]:.1f}")
        _write_metric(sys.stdout, f"bound_n{n}", args.m * args.m * n + n)
    for a, b in zip(lengths, lengths[1:]):
        if b == 2 * a:
            _write_metric(sys.stdout, f"ratio_{a}_to_{b}", f"{means[b] / means[a]:.3f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth.sample(synth.default_grammar(), args.n, args.seed)
    synth.write_corpus(samples, args.out_corpus, args.out_trees)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chartlm", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="pretrain on a raw corpus")
    t.add_argument("--corpus")
    t.add_argument("--vocab")
    t.add_argument("--checkpoint", required=True)
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--log-file")
    t.add_argument("--min-freq", type=int, default=1)
    t.add_argument("--time-budget", type=float, default=None,
                   help="stop after this many seconds (epoch boundary)")
    for name, typ in (("m", int), ("lr", float), ("weight_decay", float),
                      ("batch_size", int), ("max_total_len", int),
                      ("max_sentence_len", int), ("epochs", int), ("seed", int),
                      ("dim", int), ("layers", int), ("heads", int),
                      ("ffn_dim", int), ("dropout", float)):
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    t.set_defaults(fn=cmd_train)

    pa = sub.add_parser("parse", help="write one bracketed tree per input line")
    pa.add_argument("--checkpoint", required=True)
    pa.add_argument("--vocab", required=True)
    pa.add_argument("--input")
    pa.add_argument("--output")
    pa.add_argument("--m", type=int, default=None)
    pa.add_argument("--word-constraint", action="store_true")
    pa.set_defaults(fn=cmd_parse)

    pp = sub.add_parser("pppl", help="pseudo-perplexity of a corpus")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--vocab", required=True)
    pp.add_argument("--corpus")
    pp.add_argument("--m", type=int, default=None)
    pp.add_argument("--per-sentence")
    pp.set_defaults(fn=cmd_pppl)

    f1 = sub.add_parser("eval-f1", help="sentence-level unlabeled F1")
    f1.add_argument("--pred")
    f1.add_argument("--gold")
    f1.add_argument("--strip-punct", action="store_true")
    f1.add_argument("--lowercase", action="store_true")
    f1.add_argument("--gold-wordpieces", action="store_true")
    f1.add_argument("--vocab")
    f1.add_argument("--per-sentence")
    f1.set_defaults(fn=cmd_eval_f1)

    dc = sub.add_parser("eval-depcompat", help="dependency-tree compatibility")
    dc.add_argument("--pred")
    dc.add_argument("--deps")
    dc.add_argument("--vocab", help="piece-level evaluation when given")
    dc.add_argument("--per-sentence")
    dc.set_defaults(fn=cmd_eval_depcompat)

    ex = sub.add_parser("export-trees", help="normalize/convert gold tree files")
    ex.add_argument("--input")
    ex.add_argument("--output")
    ex.add_argument("--strip-punct", action="store_true")
    ex.add_argument("--lowercase", action="store_true")
    ex.add_argument("--wordpieces", action="store_true")
    ex.add_argument("--vocab")
    ex.set_defaults(fn=cmd_export_trees)

    cc = sub.add_parser("count-calls", help="composition-call counts vs length")
    cc.add_argument("--m", type=int, default=4)
    cc.add_argument("--lengths", default="16,32,64")
    cc.add_argument("--reps", type=int, default=10)
    cc.add_argument("--seed", type=int, default=0)
    cc.add_argument("--dim", type=int, default=32)
    cc.add_argument("--vocab-size", type=int, default=64)
    cc.set_defaults(fn=cmd_count_calls)

    sy = sub.add_parser("synth", help="sample the synthetic bracket corpus")
    sy.add_argument("-n", type=int, default=2000)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out-corpus", required=True)
    sy.add_argument("--out-trees")
    sy.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("CHARTLM_LOG", "warning").upper(),
                      logging.WARNING),
        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
