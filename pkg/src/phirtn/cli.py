"""Command-line surface for the grammar LM toolkit.

Exit codes: 0 success, 1 usage error, 2 data/validation error. All error
text goes to stderr prefixed with ``error:``. Commands that draw random
samples take ``--seed``; when omitted, the PHIRTN_SEED environment
variable (default 0) supplies it, so scripted pipelines stay
reproducible.
"""

from __future__ import annotations

import argparse
import contextlib
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, container
from .errors import PhirtnError
from .evaluation import (
    FastExpansion,
    default_sweep_configs,
    interpolate,
    make_weighted_corpus,
    optimize_weights,
    records_to_csv,
    sweep,
)
from .grammar import (
    Stratum,
    expand,
    expansion_size,
    parse_grammar,
    sample_stratum,
    stratify,
)
from .lm import perplexity_detailed, sequence_logprob
from .ngram import entropy_prune, estimate_witten_bell, export_arpa, import_arpa
from .oracle import build_oracle, check_normalization
from .phi_rtn import build_phi_rtn, coverage
from .vocab import Vocabulary

_STRATA = {s.value: s for s in Stratum}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def _default_seed() -> int:
    return int(os.environ.get("PHIRTN_SEED", "0"))


def _load_grammar(args) -> "Grammar":
    if getattr(args, "grammar_dir", None):
        base = Path(args.grammar_dir)
        templates = (base / "templates.tsv").read_text(encoding="utf-8")
        entities = (base / "entities.tsv").read_text(encoding="utf-8")
    else:
        if not args.templates or not args.entities:
            raise UsageError("--templates and --entities (or --grammar-dir) are required")
        templates = Path(args.templates).read_text(encoding="utf-8")
        entities = Path(args.entities).read_text(encoding="utf-8")
    return parse_grammar(templates, entities, nonterminal_name=args.nonterminal)


def _add_grammar_args(parser, with_dir: bool = False):
    parser.add_argument("--templates", help="template TSV file")
    parser.add_argument("--entities", help="entity TSV file")
    if with_dir:
        parser.add_argument(
            "--grammar-dir", help="directory holding templates.tsv and entities.tsv"
        )
    parser.add_argument("--nonterminal", default="$entity", help="non-terminal marker")


def _read_queries(path: str) -> list[tuple[str, ...]]:
    queries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        first = line.split("\t", 1)[0]
        queries.append(tuple(first.split()))
    return queries


def _out_stream(path: str | None):
    if path:
        return open(path, "w", encoding="utf-8")
    return contextlib.nullcontext(sys.stdout)


def _cmd_expand(args) -> int:
    grammar = _load_grammar(args)
    queries = list(expand(grammar, max_queries=args.max_queries))
    assignment = stratify(queries)
    with _out_stream(args.output) as out:
        for q in queries:
            out.write(f"{' '.join(q.tokens)}\t{q.joint_prob!r}\t{assignment[q]}\n")
    return 0


def _cmd_stratify(args) -> int:
    grammar = _load_grammar(args)
    queries = list(expand(grammar, max_queries=args.max_queries))
    assignment = stratify(queries)
    counts = {s: 0 for s in Stratum}
    mass = {s: 0.0 for s in Stratum}
    for q, s in assignment.items():
        counts[s] += 1
        mass[s] += q.joint_prob
    with _out_stream(args.output) as out:
        out.write("stratum\tqueries\tjoint_mass\n")
        for s in Stratum:
            out.write(f"{s}\t{counts[s]}\t{mass[s]!r}\n")
    return 0


def _cmd_sample(args) -> int:
    grammar = _load_grammar(args)
    stratum = _STRATA[args.stratum]
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        fast = FastExpansion(grammar)
        sampled = fast.sample(stratum, args.k, seed)
    except PhirtnError:
        queries = list(expand(grammar, max_queries=args.max_queries))
        sampled = sample_stratum(queries, stratum, args.k, seed)
    with _out_stream(args.output) as out:
        for q in sampled:
            out.write(f"{' '.join(q.tokens)}\t{q.joint_prob!r}\n")
    return 0


def _cmd_build(args) -> int:
    grammar = _load_grammar(args)
    if args.kind == "phi-rtn":
        model = build_phi_rtn(
            grammar, order=args.n, alpha=args.alpha, smoothing_epsilon=args.epsilon
        )
    else:
        vocab = Vocabulary.from_tokens(
            grammar.vocabulary_tokens(), nonterminal=grammar.nonterminal_name
        )
        try:
            corpus = FastExpansion(grammar).corpus(vocab)
        except PhirtnError:
            corpus = make_weighted_corpus(expand(grammar, max_queries=args.max_queries))
            corpus.vocab = vocab
        model = estimate_witten_bell(corpus, args.n)
        if args.theta:
            model = entropy_prune(model, args.theta)
    size = container.save_model(model, args.output)
    print(f"wrote {args.output} ({size} bytes)", file=sys.stderr)
    if args.arpa:
        Path(args.arpa).write_text(export_arpa(model), encoding="utf-8")
    return 0


def _cmd_prune(args) -> int:
    model = container.load_model(args.model)
    pruned = entropy_prune(model, args.theta)
    size = container.save_model(pruned, args.output)
    print(
        f"pruned {model.explicit_entry_count()} -> {pruned.explicit_entry_count()} "
        f"entries; wrote {args.output} ({size} bytes)",
        file=sys.stderr,
    )
    return 0


def _load_any_model(path: str):
    text_head = Path(path).read_bytes()[:16]
    if text_head.startswith(b"\\data\\") or text_head.lstrip().startswith(b"\\data\\"):
        return import_arpa(Path(path).read_text(encoding="utf-8"))
    return container.load_model(path)


def _cmd_score(args) -> int:
    model = _load_any_model(args.model)
    tokens = tuple(args.query)
    ids = model.vocab.encode(tokens)
    if args.trace:
        state = model.start()
        total = 0.0
        for tok, tok_id in zip(tokens, ids):
            lp, state = model.step(state, tok_id)
            total += lp
            print(f"{tok}\t{lp!r}")
        lp = model.end(state)
        total += lp
        print(f"</s>\t{lp!r}")
        print(f"total\t{total!r}")
    else:
        print(repr(sequence_logprob(model, ids)))
    return 0


def _cmd_perplexity(args) -> int:
    model = _load_any_model(args.model)
    queries = _read_queries(args.input)
    corpus = [model.vocab.encode(q) for q in queries]
    result = perplexity_detailed(model, corpus)
    if result.offenders:
        for idx in result.offenders:
            print(f"infinite: {' '.join(queries[idx])}", file=sys.stderr)
    print(repr(result.perplexity))
    return 0


def _cmd_sweep(args) -> int:
    grammar = _load_grammar(args)
    seed = args.seed if args.seed is not None else _default_seed()
    try:
        fast = FastExpansion(grammar)
        samples = fast.sample_all(args.samples, seed)
    except PhirtnError:
        queries = list(expand(grammar))
        samples = {
            s: sample_stratum(queries, s, args.samples, seed) for s in Stratum
        }
    configs = default_sweep_configs(alpha=args.alpha)
    records, failures = sweep(grammar, configs, samples, jobs=args.jobs)
    Path(args.output).write_text(records_to_csv(records), encoding="utf-8")
    for failure in failures:
        print(f"failed: {failure.model} {failure.params}: {failure.error}", file=sys.stderr)
    print(f"wrote {args.output} ({len(records)} rows)", file=sys.stderr)
    return 0


def _cmd_interpolate(args) -> int:
    models = [_load_any_model(p) for p in args.models]
    queries = _read_queries(args.input)
    corpus = [models[0].vocab.encode(q) for q in queries]
    if args.fit_budget is not None:
        result = optimize_weights(
            models[1:], corpus, budget_mass=args.fit_budget, fixed_model=models[0]
        )
        weights = [1.0 - args.fit_budget] + result.weights
        print(
            "fitted weights: " + ",".join(repr(w) for w in weights), file=sys.stderr
        )
    else:
        weights = [float(w) for w in args.weights.split(",")]
    mixture = interpolate(models, weights)
    print(repr(perplexity_detailed(mixture, corpus).perplexity))
    return 0


def _cmd_coverage(args) -> int:
    grammar = _load_grammar(args)
    if args.model:
        model = container.load_model(args.model)
    else:
        model = build_phi_rtn(grammar, order=args.n, alpha=args.alpha)
    report = coverage(model, grammar)
    print(f"weighted\t{report.weighted!r}")
    print(f"unweighted\t{report.unweighted!r}")
    print(f"uncovered\t{report.uncovered_queries}")
    print(f"total\t{report.total_queries}")
    return 0


def _cmd_check(args) -> int:
    grammar = _load_grammar(args)
    model = build_phi_rtn(grammar, order=args.n, alpha=args.alpha)
    oracle = build_oracle(
        grammar, alpha=args.alpha, order=args.n, vocab=model.vocab, max_arcs=args.max_arcs
    )
    worst = 0.0
    count = 0
    for query in expand(grammar):
        ids = model.vocab.encode(query.tokens)
        deviation = abs(sequence_logprob(model, ids) - sequence_logprob(oracle, ids))
        worst = max(worst, deviation)
        count += 1
    report = check_normalization(model)
    print(f"queries\t{count}")
    print(f"max_logprob_deviation\t{worst!r}")
    print(f"states_checked\t{report.states_checked}")
    print(f"max_normalization_deviation\t{report.max_deviation!r}")
    ok = worst <= args.tolerance and report.ok
    print(f"status\t{'ok' if ok else 'FAIL'}")
    return 0 if ok else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="phirtn", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"phirtn {__version__} (container format v{container.FORMAT_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expand", help="expand a grammar to TSV (query, prob, stratum)")
    _add_grammar_args(p)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_expand)

    p = sub.add_parser("stratify", help="per-stratum query counts and mass")
    _add_grammar_args(p)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_stratify)

    p = sub.add_parser("sample", help="weighted sample without replacement from a stratum")
    _add_grammar_args(p)
    p.add_argument("--stratum", choices=sorted(_STRATA), required=True)
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("build", help="build a model from a grammar")
    p.add_argument("kind", choices=["phi-rtn", "ngram"])
    _add_grammar_args(p)
    p.add_argument("--n", type=int, default=3, help="n-gram order")
    p.add_argument("--alpha", type=float, default=0.1, help="out-of-domain mass")
    p.add_argument("--epsilon", type=float, default=1e-6, help="unigram smoothing")
    p.add_argument("--theta", type=float, default=0.0, help="prune after building (ngram)")
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("--arpa", help="also write the model as ARPA text (ngram)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("prune", help="entropy-prune a back-off n-gram model")
    p.add_argument("--model", required=True)
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("score", help="log-probability of one query")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", action="store_true", help="print per-token log-probs")
    p.add_argument("query", nargs="+")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("perplexity", help="perplexity of a query file under a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="one query per line (TSV first column)")
    p.set_defaults(func=_cmd_perplexity)

    p = sub.add_parser("sweep", help="size/perplexity sweep over the model family")
    _add_grammar_args(p, with_dir=True)
    p.add_argument("--samples", type=int, default=10000, help="dev sample size per stratum")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("interpolate", help="score a dev file under a linear mixture")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--weights", help="comma-separated, summing to 1")
    p.add_argument(
        "--fit-budget",
        type=float,
        default=None,
        help="fit weights of models after the first, which keeps 1 - budget",
    )
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_interpolate)

    p = sub.add_parser("coverage", help="grammar coverage of a phi-RTN model")
    _add_grammar_args(p)
    p.add_argument("--model", help="existing model file (else built from the grammar)")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("check", help="validate a phi-RTN build against the oracle")
    _add_grammar_args(p)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--max-arcs", type=int, default=10**6)
    p.set_defaults(func=_cmd_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PhirtnError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
