"""Command-line entry point: ``vrnmt <subcommand> [options]``.

Options may also come from a ``key = value`` file given with ``--config``
(before the subcommand); keys use the long option names with ``_`` or ``-``.
Command-line flags override the file. Exit status: 0 ok, 1 usage error,
2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig, rng_streams
from .data import (
    FormatError,
    ParallelCorpus,
    Vocabulary,
    build_vocab,
    format_alignment,
    generate_toy_corpus,
    load_checkpoint,
    read_alignments,
    read_lines,
    save_corpus,
    write_lines,
)
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("vrnmt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


TRAIN_FIELDS = [f for f in TrainConfig.__dataclass_fields__ if f != "extra"]


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_train_options(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    g = p.add_argument_group("model and optimisation")
    g.add_argument("--variant", default="vrnmt", help="baseline | vrnmt | vrnmt-td (default: %(default)s)")
    for name in ("d_e", "d_h", "d_z", "d_a", "d_r"):
        g.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(d, name),
                       help="default: %(default)s" + (" (0 = d_h)" if name == "d_r" else ""))
    g.add_argument("--learning-rate", type=float, default=d.learning_rate, help="default: %(default)s")
    g.add_argument("--rho", type=float, default=d.rho, help="RMSProp decay (default: %(default)s)")
    g.add_argument("--eps", type=float, default=d.eps, help="RMSProp epsilon (default: %(default)s)")
    g.add_argument("--momentum", type=float, default=d.momentum, help="default: %(default)s")
    g.add_argument("--centered", action="store_true", help="centred RMSProp (running mean gradient)")
    g.add_argument("--clip-norm", type=float, default=d.clip_norm, help="global gradient norm (default: %(default)s)")
    g.add_argument("--dropout", type=float, default=d.dropout, help="default: %(default)s")
    g.add_argument("--batch-size", type=int, default=d.batch_size, help="default: %(default)s")
    g.add_argument("--samples", type=int, default=d.samples, help="latent samples L (default: %(default)s)")
    g.add_argument("--max-len", type=int, default=d.max_len, help="training length filter (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=d.epochs, help="default: %(default)s")
    g.add_argument("--seed", type=int, default=d.seed, help="default: %(default)s")
    g.add_argument("--kl-anneal", type=int, default=d.kl_anneal,
                   help="linear KL warm-up steps, 0 = off (default: %(default)s)")
    g.add_argument("--orthogonal-init", action="store_true", help="orthogonal recurrent matrices")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="vrnmt", description=__doc__.split("\n")[0])
    root.add_argument("--config", help="key = value options file")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    p.add_argument("--task", default="lexmap_swap", help="copy | reverse | lexmap | lexmap_swap (default: %(default)s)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-pairs", type=int, default=5000, help="default: %(default)s")
    p.add_argument("--valid-pairs", type=int, default=200, help="default: %(default)s")
    p.add_argument("--test-pairs", type=int, default=500, help="pairs per test set (default: %(default)s)")
    p.add_argument("--test-sets", type=int, default=2, help="number of test sets (default: %(default)s)")
    p.add_argument("--vocab-size", type=int, default=50, help="default: %(default)s")
    p.add_argument("--min-len", type=int, default=3, help="default: %(default)s")
    p.add_argument("--max-len", type=int, default=12, help="default: %(default)s")
    p.add_argument("--swap-prob", type=float, default=0.3, help="default: %(default)s")
    p.add_argument("--seed", type=int, default=0, help="default: %(default)s")

    p = sub.add_parser("build-vocab", help="build a vocabulary file from one corpus side")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, default=30000, help="including reserved tokens (default: %(default)s)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-tgt", required=True)
    p.add_argument("--valid-src")
    p.add_argument("--valid-tgt")
    p.add_argument("--src-vocab", required=True)
    p.add_argument("--tgt-vocab", required=True)
    p.add_argument("--out-dir", required=True, help="checkpoints and train.log go here")
    p.add_argument("--init-from", help="warm-start from a checkpoint (name-matched tensors)")
    _add_train_options(p)

    def decode_opts(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--src-vocab", required=True)
        p.add_argument("--tgt-vocab", required=True)

    p = sub.add_parser("translate", help="decode a source file")
    decode_opts(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=10, help="beam size, 1 = greedy (default: %(default)s)")
    p.add_argument("--max-out-len", type=int, default=0, help="0 = 2*len(source)+10 (default: %(default)s)")
    p.add_argument("--length-norm", action="store_true", help="rank finished hypotheses by score/length")
    p.add_argument("--prior-noise", action="store_true", help="sample z from the prior instead of its mean")
    p.add_argument("--seed", type=int, default=0, help="seed for --prior-noise (default: %(default)s)")

    p = sub.add_parser("align", help="forced-decoding attention alignments")
    decode_opts(p)
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("evaluate", help="score translations")
    p.add_argument("--metric", default="bleu", help="bleu | ngrr | aer | bucketed-bleu (default: %(default)s)")
    p.add_argument("--hyp", required=True, help="translations, or predicted alignments for aer")
    p.add_argument("--ref", action="append", default=[], help="reference file (repeatable)")
    p.add_argument("--gold", help="gold alignment file for aer (i-j sure, i?j possible)")
    p.add_argument("--source", help="source file (bucketed-bleu)")
    p.add_argument("--n", type=int, default=0, help="BLEU order (default 4) / n-gram size for ngrr (default 1..4)")
    p.add_argument("--bucket-width", type=int, default=10, help="default: %(default)s")
    p.add_argument("--case-sensitive", action="store_true")
    p.add_argument("--smooth", action="store_true", help="add-one smoothing for n > 1")
    p.add_argument("--out", help="write the CSV report here")

    p = sub.add_parser("significance", help="paired bootstrap test of system B over A")
    p.add_argument("--hyp-a", required=True)
    p.add_argument("--hyp-b", required=True)
    p.add_argument("--ref", action="append", default=[], required=True)
    p.add_argument("--resamples", type=int, default=1000, help="default: %(default)s")
    p.add_argument("--seed", type=int, default=0, help="default: %(default)s")
    p.add_argument("--case-sensitive", action="store_true")

    p = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    p.add_argument("--variant", action="append", default=[],
                   help="repeatable; default checks baseline, vrnmt and vrnmt-td")
    p.add_argument("--d-e", type=int, default=8, help="default: %(default)s")
    p.add_argument("--d-h", type=int, default=12, help="default: %(default)s")
    p.add_argument("--d-z", type=int, default=6, help="default: %(default)s")
    p.add_argument("--d-a", type=int, default=12, help="default: %(default)s")
    p.add_argument("--vocab", type=int, default=20, help="source and target vocabulary size (default: %(default)s)")
    p.add_argument("--length", type=int, default=5, help="maximum sentence length (default: %(default)s)")
    p.add_argument("--step", type=float, default=1e-5, help="default: %(default)s")
    p.add_argument("--threshold", type=float, default=1e-4, help="default: %(default)s")
    p.add_argument("--init-scale", type=float, default=0.3,
                   help="std of the random test weights (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="default: %(default)s")

    p = sub.add_parser("report", help="combine evaluation CSVs and training logs")
    p.add_argument("--result", nargs=3, action="append", default=[],
                   metavar=("SYSTEM", "TESTSET", "CSV"), help="evaluation CSV (repeatable)")
    p.add_argument("--log", nargs=2, action="append", default=[], metavar=("SYSTEM", "LOG"))
    p.add_argument("--table-out", help="write the comparison table here as well")
    p.add_argument("--buckets-out", help="length-bucket CSV output")
    return root


# --------------------------------------------------------------------------
# config file handling
# --------------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str],
                  known: set[str]) -> None:
    """Install file values as defaults. Keys of other subcommands are ignored."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, value in values.items():
        if key not in known or key == "help":
            raise UsageError(f"unknown config key {key!r}")
        action = actions.get(key)
        if action is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            defaults[key] = value
    parser.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    root = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config_file(known.config)
        sub = _subparsers(root)
        command = next((a for a in argv if a in sub), None)
        if command is None:
            raise UsageError("a subcommand is required")
        known = {a.dest for p in sub.values() for a in p._actions}
        _apply_config(sub[command], values, known)
    args = root.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (see --help)")
    return args


def _subparsers(root) -> dict[str, argparse.ArgumentParser]:
    for a in root._actions:
        if isinstance(a, argparse._SubParsersAction):
            return dict(a.choices)
    return {}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    counts = [a.train_pairs, a.valid_pairs] + [a.test_pairs] * a.test_sets
    total = sum(counts)
    corpus = generate_toy_corpus(a.task, total, a.vocab_size, (a.min_len, a.max_len),
                                 a.swap_prob, a.seed, max_len=max(50, a.max_len))
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ["train", "valid"] + (["test"] if a.test_sets == 1 else
                                  [f"test{k + 1}" for k in range(a.test_sets)])
    start = 0
    for name, n in zip(names, counts):
        part = corpus.subset(range(start, start + n))
        start += n
        if n:
            save_corpus(part, out / f"{name}.src", out / f"{name}.tgt", out / f"{name}.align")
        print(f"{name}: {n} pairs")
    return EXIT_OK


def cmd_build_vocab(a) -> int:
    sents = read_lines(a.corpus)
    vocab = build_vocab(sents, a.max_size)
    vocab.save(a.out)
    print(f"{len(vocab)} entries -> {a.out}")
    return EXIT_OK


def _train_config(a) -> TrainConfig:
    kwargs = {f: getattr(a, f) for f in TRAIN_FIELDS if hasattr(a, f)}
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(a) -> int:
    from .data import load_corpus
    from .models import ModelParams, warm_start
    from .training import encode_corpus, train

    cfg = _train_config(a)
    sv, tv = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    train_c = load_corpus(a.train_src, a.train_tgt, cfg.max_len)
    valid_pairs = []
    if a.valid_src and a.valid_tgt:
        valid_pairs = encode_corpus(load_corpus(a.valid_src, a.valid_tgt, cfg.max_len), sv, tv)
    streams = rng_streams(cfg.seed)
    params = ModelParams.initialize(cfg.variant, cfg.dims(len(sv), len(tv)), streams["init"],
                                    cfg.orthogonal_init)
    if a.init_from:
        fresh = warm_start(params, load_checkpoint(a.init_from))
        print("warm start from %s; freshly initialised: %s" % (a.init_from, ", ".join(fresh) or "none"))
    out = Path(a.out_dir)
    extra = {k: getattr(cfg, k) for k in TRAIN_FIELDS
             if k not in ("variant", "d_e", "d_h", "d_z", "d_a", "d_r", "prior_noise", "beam")}
    res = train(params, encode_corpus(train_c, sv, tv), valid_pairs, cfg,
                log_path=out / "train.log", checkpoint_dir=out, extra_config=extra)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; final train loss {last.train_neg_elbo:.4f}, "
          f"valid nll {last.valid_nll:.4f}")
    return EXIT_OK


def _load_for_decoding(a):
    from .models import load_model

    params = load_model(a.checkpoint)
    sv, tv = Vocabulary.load(a.src_vocab), Vocabulary.load(a.tgt_vocab)
    if len(sv) != params.dims.src_vocab or len(tv) != params.dims.tgt_vocab:
        raise FormatError("vocabulary sizes do not match the checkpoint")
    return params, sv, tv


def cmd_translate(a) -> int:
    from .decoding import beam_search, greedy_decode

    params, sv, tv = _load_for_decoding(a)
    noise = rng_streams(a.seed)["prior_noise"] if a.prior_noise else None
    out = []
    for sent in read_lines(a.input):
        if not sent:
            out.append([])
            continue
        ids = sv.encode(sent)
        max_out = a.max_out_len or None
        if a.beam == 1 and not a.length_norm:
            hyp = greedy_decode(params, ids, max_out, prior_noise=noise)
        else:
            hyp = beam_search(params, ids, a.beam, max_out, a.length_norm, prior_noise=noise)[0]
        out.append(tv.decode(hyp.tokens))
    write_lines(a.output, out)
    return EXIT_OK


def cmd_align(a) -> int:
    from .decoding import force_decode_alignments

    params, sv, tv = _load_for_decoding(a)
    src, ref = read_lines(a.source), read_lines(a.reference)
    if len(src) != len(ref):
        raise FormatError("source and reference line counts differ")
    rows = []
    for s, r in zip(src, ref):
        rows.append(format_alignment(force_decode_alignments(params, sv.encode(s), tv.encode(r))))
    Path(a.output).write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    return EXIT_OK


def _references(paths, count):
    if not paths:
        raise UsageError("at least one --ref is required")
    sides = [read_lines(p) for p in paths]
    for p, side in zip(paths, sides):
        if len(side) != count:
            raise FormatError(f"{p} has {len(side)} lines, expected {count}")
    return [[side[k] for side in sides] for k in range(count)]


def cmd_evaluate(a) -> int:
    from . import metrics as M

    metric = a.metric.lower()
    lower = not a.case_sensitive
    if metric == "aer":
        if not a.gold:
            raise UsageError("--gold is required for aer")
        pred = [sure for sure, _ in read_alignments(a.hyp)]
        gold = read_alignments(a.gold)
        value = M.corpus_aer(pred, gold)
        report = M.EvalReport("aer", value, count=len(pred))
    elif metric == "ngrr":
        hyp = read_lines(a.hyp)
        orders = [a.n] if a.n else [1, 2, 3, 4]
        buckets = {}
        for n in orders:
            try:
                buckets[f"{n}-gram"] = (M.n_grr([[h] for h in hyp], n), len(hyp))
            except ValueError:
                continue
        if not buckets:
            raise FormatError("every translation is shorter than n")
        first = next(iter(buckets.values()))[0]
        report = M.EvalReport("ngrr", first, buckets, len(hyp), {"orders": orders})
    elif metric in ("bleu", "bucketed-bleu"):
        hyp = read_lines(a.hyp)
        refs = _references(a.ref, len(hyp))
        max_n = a.n or 4
        if metric == "bleu":
            value = 100.0 * M.bleu(hyp, refs, max_n, lower, a.smooth)
            report = M.EvalReport("bleu", value, count=len(hyp),
                                  settings={"max_n": max_n, "lowercase": lower})
        else:
            if not a.source:
                raise UsageError("--source is required for bucketed-bleu")
            lengths = [len(s) for s in read_lines(a.source)]
            report = M.bucketed_bleu(hyp, refs, lengths, a.bucket_width, max_n, lower, a.smooth)
    else:
        raise UsageError(f"unknown metric {a.metric!r}")
    text = report.to_csv()
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_significance(a) -> int:
    from . import metrics as M

    hyp_a, hyp_b = read_lines(a.hyp_a), read_lines(a.hyp_b)
    if len(hyp_a) != len(hyp_b):
        raise FormatError("the two systems have different line counts")
    refs = _references(a.ref, len(hyp_a))
    lower = not a.case_sensitive
    sa, sb = M.corpus_stats(hyp_a, refs, 4, lower), M.corpus_stats(hyp_b, refs, 4, lower)
    p = M.paired_bootstrap(sa, sb, a.resamples, a.seed)
    print(f"BLEU A = {100 * M.bleu(hyp_a, refs, 4, lower):.2f}")
    print(f"BLEU B = {100 * M.bleu(hyp_b, refs, 4, lower):.2f}")
    print(f"p = {p:.4f}  (fraction of {a.resamples} resamples where B is not better)")
    return EXIT_OK


def grad_check_variant(variant: str, d_e=8, d_h=12, d_z=6, d_a=12, vocab=20, length=5,
                       step=1e-5, init_scale=0.3, seed=0) -> float:
    """Max relative gradient error of the per-sentence objective of one variant."""
    from .config import ModelDims
    from .models import ModelParams, sentence_objective

    rng = np.random.default_rng(seed)
    dims = ModelDims(vocab, vocab, d_e, d_h, d_z, d_a)
    params = ModelParams.initialize(variant, dims, rng)
    for t in params.tensors.values():
        t.data[...] = rng.normal(0.0, init_scale, t.shape)
    x = rng.integers(4, vocab, size=length)
    y = rng.integers(4, vocab, size=max(1, length - 1))
    eps = rng.standard_normal((y.size + 1, 1, d_z))
    names = params.names()

    def objective(*tensors):
        q = type(params)(params.variant, params.dims, dict(zip(names, tensors)))
        return sentence_objective(x, y, q, noise=eps).elbo

    return T.check_gradient(objective, [params[n].data for n in names], step)


def cmd_grad_check(a) -> int:
    from .config import normalize_variant

    variants = [normalize_variant(v) for v in (a.variant or ["baseline", "vrnmt", "vrnmt_td"])]
    worst = 0.0
    for v in variants:
        t0 = time.perf_counter()
        err = grad_check_variant(v, a.d_e, a.d_h, a.d_z, a.d_a, a.vocab, a.length, a.step,
                                 a.init_scale, a.seed)
        worst = max(worst, err)
        status = "ok" if err <= a.threshold else "FAIL"
        print(f"{v:<10} max relative error {err:.3e}  ({time.perf_counter() - t0:.1f}s)  {status}")
    print(f"max relative error {worst:.3e} (threshold {a.threshold:g})")
    return EXIT_OK if worst <= a.threshold else EXIT_NUMERIC


def cmd_report(a) -> int:
    from .metrics import parse_csv
    from .training import read_log

    if not a.result and not a.log:
        raise UsageError("nothing to report: give --result and/or --log")
    systems: list[str] = []
    testsets: list[str] = []
    bleu: dict[tuple[str, str], float] = {}
    bucket_rows = []
    for system, testset, path in a.result:
        if system not in systems:
            systems.append(system)
        if testset not in testsets:
            testsets.append(testset)
        for metric, bucket, value, count in parse_csv(Path(path).read_text(encoding="utf-8")):
            if metric in ("bleu", "bucketed-bleu") and bucket == "all":
                bleu[(system, testset)] = value
            if metric == "bucketed-bleu" and bucket != "all":
                bucket_rows.append((system, testset, bucket, value, count))

    lines = []
    if a.result:
        width = max(len(s) for s in systems + ["System"])
        header = f"| {'System':<{width}} | " + " | ".join(f"{t:>7}" for t in testsets) + " |    Ave. |"
        rule = "|" + "-" * (width + 2) + "|" + "--------:|" * (len(testsets) + 1)
        lines += [header, rule]
        for s in systems:
            vals = [bleu.get((s, t)) for t in testsets]
            cells = [f"{v:7.2f}" if v is not None else "      -" for v in vals]
            known = [v for v in vals if v is not None]
            ave = f"{sum(known) / len(known):7.2f}" if known else "      -"
            lines.append(f"| {s:<{width}} | " + " | ".join(cells) + f" | {ave} |")
    if a.log:
        lines += ["", "| System | epochs | best valid nll | final train loss |",
                  "|--------|--------|----------------|------------------|"]
        for s, path in a.log:
            hist = read_log(path)
            best = min(h.valid_nll for h in hist)
            lines.append(f"| {s} | {len(hist)} | {best:.4f} | {hist[-1].train_neg_elbo:.4f} |")
    table = "\n".join(lines) + "\n"
    sys.stdout.write(table)
    if a.table_out:
        Path(a.table_out).write_text(table, encoding="utf-8")
    if a.buckets_out:
        rows = ["system,testset,bucket,value,count"]
        rows += [f"{s},{t},{b},{v:.6f},{n}" for s, t, b, v, n in bucket_rows]
        Path(a.buckets_out).write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "translate": cmd_translate,
    "align": cmd_align,
    "evaluate": cmd_evaluate,
    "significance": cmd_significance,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, IndexError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
