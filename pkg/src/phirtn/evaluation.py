"""Size/perplexity sweeps, model interpolation, and weight optimization.

This module reproduces the experimental harness at desk scale: build the
competing model family over one grammar, measure each model's serialized
byte count and per-stratum perplexity on sampled dev sets, and emit a
plot-ready CSV (log2 of bytes against log10 of perplexity recovers the
usual trade-off axes). Linear interpolation combines a general stand-in
model with one or more grammar-backed query models; mixture weights are
fitted by expectation-maximization on a dev sample under a fixed total
budget for the query models.

``FastExpansion`` gives array-backed stratification/sampling/corpus
construction for single-slot grammars whose expansions are too large to
materialize as Python objects (five million queries at the default desk
scale). Its results match the object-path functions in
:mod:`phirtn.grammar` element for element.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import container
from .errors import ModelBuildError
from .grammar import (
    Entity,
    ExpandedQuery,
    Grammar,
    Stratum,
    Template,
    expand,
    stratify_order,
    stratum_boundaries,
    weighted_sample_without_replacement,
)
from .lm import LanguageModel, NEG_INF, perplexity
from .ngram import (
    BackoffNgramModel,
    WeightedCorpus,
    entropy_prune,
    estimate_witten_bell,
    make_weighted_corpus,
    paper_theta_sweep,
)
from .phi_rtn import DEFAULT_ALPHA, build_phi_rtn
from .vocab import Vocabulary

STRATA = (Stratum.HEAD, Stratum.TORSO, Stratum.TAIL)


# -- fast expansion for single-slot grammars ---------------------------------


class FastExpansion:
    """Array-backed expansion of a grammar with at most one slot per template.

    Query order matches :func:`phirtn.grammar.expand` (template major,
    entity minor); queries are reconstructed on demand by flat index
    instead of being materialized.
    """

    def __init__(self, grammar: Grammar):
        nt = grammar.nonterminal_name
        self.grammar = grammar
        self._prefix: list[tuple[str, ...]] = []
        self._suffix: list[tuple[str, ...]] = []
        self._has_slot: list[bool] = []
        for template in grammar.templates:
            slots = [i for i, tok in enumerate(template.tokens) if tok == nt]
            if len(slots) > 1:
                raise ModelBuildError(
                    "FastExpansion supports at most one slot per template"
                )
            if slots:
                cut = slots[0]
                self._prefix.append(template.tokens[:cut])
                self._suffix.append(template.tokens[cut + 1:])
                self._has_slot.append(True)
            else:
                self._prefix.append(template.tokens)
                self._suffix.append(())
                self._has_slot.append(False)

        self.entity_probs = np.array([e.prob for e in grammar.entities])
        sizes = [
            len(grammar.entities) if has_slot else 1 for has_slot in self._has_slot
        ]
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.size = int(self.offsets[-1])
        blocks = []
        for t_idx, template in enumerate(grammar.templates):
            if self._has_slot[t_idx]:
                blocks.append(template.prob * self.entity_probs)
            else:
                blocks.append(np.array([template.prob]))
        self.joints = np.concatenate(blocks)
        self._order: np.ndarray | None = None

    def tokens_at(self, flat: int) -> tuple[str, ...]:
        t_idx = int(np.searchsorted(self.offsets, flat, side="right")) - 1
        if not self._has_slot[t_idx]:
            return self._prefix[t_idx]
        e_idx = flat - int(self.offsets[t_idx])
        return (
            self._prefix[t_idx]
            + self.grammar.entities[e_idx].tokens
            + self._suffix[t_idx]
        )

    def query_at(self, flat: int) -> ExpandedQuery:
        t_idx = int(np.searchsorted(self.offsets, flat, side="right")) - 1
        if not self._has_slot[t_idx]:
            return ExpandedQuery(self._prefix[t_idx], float(self.joints[flat]), t_idx, ())
        e_idx = flat - int(self.offsets[t_idx])
        return ExpandedQuery(
            self.tokens_at(flat), float(self.joints[flat]), t_idx, (e_idx,)
        )

    def rank_order(self) -> np.ndarray:
        """Flat indices sorted by descending joint probability, ties lexicographic."""
        if self._order is None:
            self._order = stratify_order(self.joints, self.tokens_at)
        return self._order

    def stratum_indices(self, stratum: Stratum) -> np.ndarray:
        order = self.rank_order()
        head_end, torso_end = stratum_boundaries(self.size)
        if stratum is Stratum.HEAD:
            return order[:head_end]
        if stratum is Stratum.TORSO:
            return order[head_end:torso_end]
        return order[torso_end:]

    def sample(self, stratum: Stratum, k: int, seed: int) -> list[ExpandedQuery]:
        """Same draw as :func:`phirtn.grammar.sample_stratum` for a given seed."""
        members = self.stratum_indices(stratum)
        if k <= 0:
            return []
        picked = weighted_sample_without_replacement(self.joints[members], k, seed)
        return [self.query_at(int(members[i])) for i in picked]

    def sample_all(self, k: int, seed: int) -> dict[Stratum, list[ExpandedQuery]]:
        return {stratum: self.sample(stratum, k, seed) for stratum in STRATA}

    def corpus(self, vocab: Vocabulary) -> WeightedCorpus:
        """Pseudo-count training corpus as encoded fixed-length blocks."""
        min_joint = float(self.joints.min())
        by_length: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        lengths = np.array([len(e.tokens) for e in self.grammar.entities])
        for length in sorted(set(lengths.tolist())):
            sel = np.flatnonzero(lengths == length)
            ids = np.array(
                [vocab.encode(self.grammar.entities[i].tokens) for i in sel],
                dtype=np.int64,
            )
            by_length[length] = (sel, ids)
        blocks = []
        for t_idx, template in enumerate(self.grammar.templates):
            prefix = np.array(vocab.encode(self._prefix[t_idx]), dtype=np.int64)
            suffix = np.array(vocab.encode(self._suffix[t_idx]), dtype=np.int64)
            if not self._has_slot[t_idx]:
                matrix = prefix.reshape(1, -1)
                weights = np.array([template.prob / min_joint])
                blocks.append((matrix, weights))
                continue
            for _, (sel, ids) in by_length.items():
                rows = len(sel)
                matrix = np.empty((rows, len(prefix) + ids.shape[1] + len(suffix)), dtype=np.int64)
                matrix[:, : len(prefix)] = prefix
                matrix[:, len(prefix) : len(prefix) + ids.shape[1]] = ids
                if len(suffix):
                    matrix[:, len(prefix) + ids.shape[1]:] = suffix
                weights = template.prob * self.entity_probs[sel] / min_joint
                blocks.append((matrix, weights))
        return WeightedCorpus(blocks=blocks, vocab=vocab)


# -- mixtures ------------------------------------------------------------


def _logsumexp(values: list[float]) -> float:
    peak = max(values)
    if peak == NEG_INF:
        return NEG_INF
    return peak + math.log(math.fsum(math.exp(v - peak) for v in values))


class MixtureModel:
    """Linear interpolation of models sharing one vocabulary.

    The mixture state is the tuple of component states, all advanced on
    every step (components that miss a token still consume it through
    their own back-off/unknown handling), so per-state distributions stay
    properly normalized whenever the components' are.
    """

    def __init__(self, models: Sequence[LanguageModel], weights: Sequence[float]):
        if len(models) != len(weights) or not models:
            raise ModelBuildError("need one weight per component model")
        if abs(math.fsum(weights) - 1.0) > 1e-9:
            raise ModelBuildError(f"mixture weights sum to {math.fsum(weights)!r}, not 1")
        if any(w < 0.0 for w in weights):
            raise ModelBuildError("mixture weights must be non-negative")
        first = models[0].vocab
        for model in models[1:]:
            if model.vocab != first:
                raise ModelBuildError("mixture components use different vocabularies")
        self.models = list(models)
        self.weights = [float(w) for w in weights]
        self.log_weights = [math.log(w) if w > 0.0 else NEG_INF for w in weights]
        self.vocab = first

    def start(self) -> tuple:
        return tuple(m.start() for m in self.models)

    def step(self, state: tuple, token_id: int) -> tuple[float, tuple]:
        parts = []
        succ = []
        for model, sub, lw in zip(self.models, state, self.log_weights):
            lp, nxt = model.step(sub, token_id)
            parts.append(lw + lp)
            succ.append(nxt)
        return _logsumexp(parts), tuple(succ)

    def end(self, state: tuple) -> float:
        parts = [
            lw + model.end(sub)
            for model, sub, lw in zip(self.models, state, self.log_weights)
        ]
        return _logsumexp(parts)


def interpolate(models: Sequence[LanguageModel], weights: Sequence[float]) -> MixtureModel:
    return MixtureModel(models, weights)


@dataclass(slots=True)
class OptimizeResult:
    weights: list[float]  # one per query model, summing to budget_mass
    log_likelihoods: list[float]  # dev log-likelihood after each iteration
    iterations: int


def _event_prob_matrix(
    models: Sequence[LanguageModel], corpus: Sequence[Sequence[int]]
) -> np.ndarray:
    """Linear P(event) per model for every token and end event in the corpus."""
    columns = []
    for model in models:
        probs = []
        for seq in corpus:
            state = model.start()
            for token_id in seq:
                lp, state = model.step(state, token_id)
                probs.append(math.exp(lp))
            probs.append(math.exp(model.end(state)))
        columns.append(probs)
    return np.array(columns, dtype=np.float64).T


def optimize_weights(
    models: Sequence[LanguageModel],
    dev_corpus: Sequence[Sequence[int]],
    budget_mass: float = 1.0,
    fixed_model: LanguageModel | None = None,
    tol: float = 1e-9,
    max_iter: int = 500,
) -> OptimizeResult:
    """Maximize dev log-likelihood over query-model weights by EM.

    The query models share ``budget_mass`` of the mixture; the remainder
    sits on ``fixed_model`` (required when the budget is below 1). The
    objective is concave in the weights, EM ascends it monotonically, and
    iteration stops when the gain drops below ``tol`` or after
    ``max_iter`` rounds.
    """
    if not models:
        raise ModelBuildError("need at least one query model")
    if not dev_corpus:
        raise ModelBuildError("dev corpus is empty")
    if not 0.0 < budget_mass <= 1.0:
        raise ModelBuildError(f"budget_mass must be in (0, 1], got {budget_mass}")
    if budget_mass < 1.0 and fixed_model is None:
        raise ModelBuildError("budget_mass < 1 requires a fixed model for the remainder")

    matrix = _event_prob_matrix(models, dev_corpus)
    fixed = np.zeros(matrix.shape[0])
    if fixed_model is not None and budget_mass < 1.0:
        fixed = (1.0 - budget_mass) * _event_prob_matrix([fixed_model], dev_corpus)[:, 0]

    k = len(models)
    weights = np.full(k, budget_mass / k)
    history: list[float] = []
    iterations = 0
    for _ in range(max_iter):
        mix = fixed + matrix @ weights
        if np.any(mix <= 0.0):
            raise ModelBuildError(
                "dev corpus contains events with zero probability under every component"
            )
        ll = float(np.log(mix).sum())
        iterations += 1
        # Responsibilities of the query components only; the fixed share
        # stays put, so the query mass re-splits within the budget.
        resp = matrix * weights / mix[:, None]
        totals = resp.sum(axis=0)
        if totals.sum() <= 0.0:
            history.append(ll)
            break
        weights = budget_mass * totals / totals.sum()
        history.append(ll)
        if len(history) >= 2 and history[-1] - history[-2] < tol:
            break
    # Pin the simplex constraint exactly.
    weights = weights * (budget_mass / weights.sum())
    return OptimizeResult(weights.tolist(), history, iterations)


# -- sweep ----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SweepConfig:
    kind: str  # "phi-rtn" or "ngram"
    order: int
    theta: float | None = None
    alpha: float = DEFAULT_ALPHA

    @property
    def params(self) -> str:
        if self.kind == "phi-rtn":
            return f"n={self.order}"
        return f"n={self.order};theta={self.theta!r}"


@dataclass(slots=True)
class SweepRecord:
    model: str
    params: str
    bytes: int
    ppl_head: float
    ppl_torso: float
    ppl_tail: float


@dataclass(slots=True)
class SweepFailure:
    model: str
    params: str
    error: str


def default_sweep_configs(
    phi_orders: Sequence[int] = (2, 3, 4),
    ngram_orders: Sequence[int] = (2, 3, 4),
    thetas: Sequence[float] | None = None,
    alpha: float = DEFAULT_ALPHA,
) -> list[SweepConfig]:
    thetas = paper_theta_sweep() if thetas is None else list(thetas)
    configs = [SweepConfig("phi-rtn", n, alpha=alpha) for n in phi_orders]
    configs += [
        SweepConfig("ngram", n, theta=theta) for n in ngram_orders for theta in thetas
    ]
    return configs


def _stratum_perplexities(
    model: LanguageModel, dev_samples: dict[Stratum, Sequence[ExpandedQuery]]
) -> dict[Stratum, float]:
    out = {}
    for stratum in STRATA:
        corpus = [model.vocab.encode(q.tokens) for q in dev_samples[stratum]]
        out[stratum] = perplexity(model, corpus)
    return out


def _evaluate(
    name: str,
    params: str,
    model: LanguageModel,
    dev_samples: dict[Stratum, Sequence[ExpandedQuery]],
) -> SweepRecord:
    size = container.serialized_size(model)
    ppl = _stratum_perplexities(model, dev_samples)
    return SweepRecord(
        name, params, size, ppl[Stratum.HEAD], ppl[Stratum.TORSO], ppl[Stratum.TAIL]
    )


def sweep(
    grammar: Grammar,
    configs: Sequence[SweepConfig],
    dev_samples: dict[Stratum, Sequence[ExpandedQuery]],
    corpus: WeightedCorpus | None = None,
    vocab: Vocabulary | None = None,
    jobs: int = 1,
) -> tuple[list[SweepRecord], list[SweepFailure]]:
    """Build and measure every configuration; failures are recorded, not fatal.

    N-gram configurations sharing an order reuse one Witten-Bell base
    model across the pruning thresholds. ``jobs`` > 1 distributes
    independent configuration groups over worker processes.
    """
    if vocab is None:
        vocab = Vocabulary.from_tokens(
            grammar.vocabulary_tokens(), nonterminal=grammar.nonterminal_name
        )
    if corpus is None and any(c.kind == "ngram" for c in configs):
        try:
            corpus = FastExpansion(grammar).corpus(vocab)
        except ModelBuildError:
            corpus = make_weighted_corpus(expand(grammar))
            corpus.vocab = vocab

    groups: list[list[SweepConfig]] = []
    phi_configs = [c for c in configs if c.kind == "phi-rtn"]
    groups.extend([c] for c in phi_configs)
    ngram_orders = sorted({c.order for c in configs if c.kind == "ngram"})
    for order in ngram_orders:
        groups.append([c for c in configs if c.kind == "ngram" and c.order == order])

    if jobs > 1 and len(groups) > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(jobs, len(groups))) as pool:
            results = pool.starmap(
                _run_group,
                [(group, grammar, dev_samples, corpus, vocab) for group in groups],
            )
    else:
        results = [
            _run_group(group, grammar, dev_samples, corpus, vocab) for group in groups
        ]

    records: list[SweepRecord] = []
    failures: list[SweepFailure] = []
    for recs, fails in results:
        records.extend(recs)
        failures.extend(fails)
    records.sort(key=lambda r: (r.model, r.params))
    failures.sort(key=lambda f: (f.model, f.params))
    return records, failures


def _run_group(
    group: list[SweepConfig],
    grammar: Grammar,
    dev_samples: dict[Stratum, Sequence[ExpandedQuery]],
    corpus: WeightedCorpus | None,
    vocab: Vocabulary,
) -> tuple[list[SweepRecord], list[SweepFailure]]:
    records: list[SweepRecord] = []
    failures: list[SweepFailure] = []
    if group[0].kind == "phi-rtn":
        config = group[0]
        try:
            model = build_phi_rtn(
                grammar, order=config.order, alpha=config.alpha, vocab=vocab
            )
            records.append(_evaluate("phi-rtn", config.params, model, dev_samples))
        except Exception as exc:  # recorded, sweep continues
            failures.append(SweepFailure("phi-rtn", config.params, str(exc)))
        return records, failures

    order = group[0].order
    try:
        base = estimate_witten_bell(corpus, order)
    except Exception as exc:
        for config in group:
            failures.append(SweepFailure("ngram", config.params, str(exc)))
        return records, failures
    for config in sorted(group, key=lambda c: c.theta or 0.0):
        try:
            model = base if config.theta == 0.0 else entropy_prune(base, config.theta)
            records.append(_evaluate("ngram", config.params, model, dev_samples))
        except Exception as exc:
            failures.append(SweepFailure("ngram", config.params, str(exc)))
    return records, failures


CSV_HEADER = "model,params,bytes,ppl_head,ppl_torso,ppl_tail"


def records_to_csv(records: Sequence[SweepRecord]) -> str:
    lines = [CSV_HEADER]
    for r in sorted(records, key=lambda r: (r.model, r.params)):
        lines.append(
            f"{r.model},{r.params},{r.bytes},{r.ppl_head:.6g},{r.ppl_torso:.6g},{r.ppl_tail:.6g}"
        )
    return "\n".join(lines) + "\n"


# -- desk-scale synthetic grammar -----------------------------------------


def make_desk_grammar(
    num_templates: int = 50,
    num_entities: int = 100_000,
    seed: int = 0,
    name_tokens: int = 3000,
    carrier_tokens: int = 40,
) -> Grammar:
    """Seeded synthetic grammar with Zipf(1.0) template and entity weights.

    Carrier phrases are short (one or two words, like production wake
    phrases). Entities mix one-, two- and three-token names drawn from a
    synthetic name alphabet; a handful of entities deliberately start
    with carrier words (and one template carries a post-slot word with a
    matching entity continuation) so precedence collisions exist in
    measurable but small numbers, like production feeds.
    """
    rng = np.random.default_rng(seed)
    names = [f"n{i:04d}" for i in range(name_tokens)]
    carriers = [f"w{i:02d}" for i in range(carrier_tokens)]

    templates: list[tuple[str, ...]] = []
    seen = set()
    while len(templates) < num_templates:
        prefix_len = int(rng.integers(1, 3))
        tokens = tuple(carriers[int(i)] for i in rng.integers(0, carrier_tokens, prefix_len))
        tokens = tokens + ("$entity",)
        if rng.random() < 0.2:
            tokens = tokens + (carriers[int(rng.integers(0, carrier_tokens))],)
        if tokens not in seen:
            seen.add(tokens)
            templates.append(tokens)
    # One fixed exit-collision site: a post-slot carrier word that also
    # continues an entity pair (see below).
    if num_templates >= 8:
        candidate = (carriers[10], "$entity", carriers[5])
        if candidate not in seen:
            seen.add(candidate)
            templates[7] = candidate

    entities: list[tuple[str, ...]] = []
    perm_a = rng.permutation(name_tokens)
    perm_b = rng.permutation(name_tokens)
    singles = min(name_tokens, num_entities)
    entities.extend((names[int(perm_a[i])],) for i in range(singles))
    idx = 0
    while len(entities) < num_entities:
        a = names[int(perm_a[idx % name_tokens])]
        b = names[int(perm_b[(idx // name_tokens + idx) % name_tokens])]
        if idx % 50 == 17:
            c = names[int(perm_b[(idx * 31 + 7) % name_tokens])]
            entities.append((a, b, c))
        else:
            entities.append((a, b))
        idx += 1
    # Entry collisions: entities starting with carrier words, spread over
    # the rank range so every stratum can contain collided queries.
    for rank, carrier in ((9, carriers[0]), (4999, carriers[3]), (59999, carriers[12])):
        if rank < num_entities:
            entities[rank] = (carrier, names[int(perm_b[rank % name_tokens])])
    # Exit collision: an entity pair plus the same pair extended by the
    # fixed template's post-slot word.
    if num_entities > 2100:
        entities[1500] = (names[7], names[11])
        entities[2100] = (names[7], names[11], carriers[5])

    deduped = []
    used = set()
    for tokens in entities:
        while tokens in used:
            tokens = tokens + (names[int(rng.integers(0, name_tokens))],)
        used.add(tokens)
        deduped.append(tokens)

    t_weights = 1.0 / np.arange(1, num_templates + 1)
    t_probs = t_weights / t_weights.sum()
    e_weights = 1.0 / np.arange(1, num_entities + 1)
    e_probs = e_weights / e_weights.sum()
    return Grammar(
        templates=[Template(t, float(p)) for t, p in zip(templates, t_probs)],
        entities=[Entity(e, float(p)) for e, p in zip(deduped, e_probs)],
    )


def make_standin_model(
    vocab: Vocabulary, seed: int = 0, order: int = 2, sequences: int = 4000
) -> BackoffNgramModel:
    """General-traffic stand-in model for interpolation experiments.

    Trained on a seeded word-salad corpus over the shared vocabulary, it
    covers everything weakly and nothing sharply, which is the role the
    production general model plays opposite the grammar-backed ones.
    """
    rng = np.random.default_rng(seed)
    tokens = list(vocab.regular_tokens())
    if not tokens:
        raise ModelBuildError("vocabulary has no regular tokens")
    seqs = []
    for _ in range(sequences):
        length = int(rng.integers(2, 8))
        seqs.append(tuple(tokens[int(i)] for i in rng.integers(0, len(tokens), length)))
    corpus = WeightedCorpus(
        sequences=seqs, weights=np.ones(len(seqs)), vocab=vocab
    )
    return estimate_witten_bell(corpus, order)
