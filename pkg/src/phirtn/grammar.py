"""Entity-centric query grammars: parsing, expansion, strata, collisions.

A grammar is a weighted list of templates plus a weighted list of entities
sharing one non-terminal symbol. Templates are token sequences that may
contain the non-terminal marker (``$entity`` by default) in any
non-adjacent positions; entities are plain token sequences. Expanding the
grammar substitutes every entity combination into every template, giving
each query the joint probability P(template) * product of P(entity) over
filled slots.

File format (templates and entities alike): UTF-8 text, one record per
line as ``<space-separated tokens>\\t<probability>``. Lines starting with
``#`` and blank lines are ignored. Probabilities must sum to 1 within
1e-6 and are renormalized to sum to exactly 1.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ExpansionLimitError, GrammarError

PROB_SUM_TOLERANCE = 1e-6
# Sums within this distance of 1 are treated as exactly normalized, which
# makes parse -> serialize -> parse a fixed point.
_RENORM_SKIP = 1e-12


class Stratum(enum.Enum):
    """Rank-percentile band of an expanded query's joint probability."""

    HEAD = "head"
    TORSO = "torso"
    TAIL = "tail"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, slots=True)
class Template:
    """One carrier phrase; ``tokens`` may include the non-terminal marker."""

    tokens: tuple[str, ...]
    prob: float


@dataclass(frozen=True, slots=True)
class Entity:
    """One weighted entity name (plain word tokens only)."""

    tokens: tuple[str, ...]
    prob: float


@dataclass(frozen=True, slots=True)
class ExpandedQuery:
    """A fully substituted query with its joint probability.

    ``template_index`` and ``entity_indices`` record the derivation so
    collision and coverage checks can recover the intended path.
    """

    tokens: tuple[str, ...]
    joint_prob: float
    template_index: int
    entity_indices: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class CollisionRecord:
    """An expanded query whose intended derivation is precedence-shadowed."""

    query: ExpandedQuery
    reason: str


@dataclass(slots=True)
class Grammar:
    templates: list[Template]
    entities: list[Entity]
    nonterminal_name: str = "$entity"

    def validate(self) -> None:
        """Check all grammar invariants, raising :class:`GrammarError`."""
        if not self.templates:
            raise GrammarError("grammar has no templates")
        if not self.entities:
            raise GrammarError("grammar has no entities")
        nt = self.nonterminal_name
        for t in self.templates:
            if not t.tokens:
                raise GrammarError("empty template")
            if not 0.0 < t.prob <= 1.0:
                raise GrammarError(f"template probability {t.prob!r} outside (0, 1]")
            for a, b in zip(t.tokens, t.tokens[1:]):
                if a == nt and b == nt:
                    raise GrammarError(
                        f"consecutive non-terminals in template {' '.join(t.tokens)!r}"
                    )
        for e in self.entities:
            if not e.tokens:
                raise GrammarError("empty entity")
            if not 0.0 < e.prob <= 1.0:
                raise GrammarError(f"entity probability {e.prob!r} outside (0, 1]")
            if nt in e.tokens:
                raise GrammarError(
                    f"entity {' '.join(e.tokens)!r} contains the non-terminal marker"
                )
        if not any(nt in t.tokens for t in self.templates):
            raise GrammarError("no template references the non-terminal")
        for name, probs in (
            ("template", [t.prob for t in self.templates]),
            ("entity", [e.prob for e in self.entities]),
        ):
            total = math.fsum(probs)
            if abs(total - 1.0) > 1e-9:
                raise GrammarError(f"{name} probabilities sum to {total!r}, expected 1")

    def slot_count(self, template_index: int) -> int:
        return sum(
            1 for tok in self.templates[template_index].tokens if tok == self.nonterminal_name
        )

    def vocabulary_tokens(self) -> set[str]:
        """All word tokens appearing in templates or entities (no non-terminal)."""
        tokens: set[str] = set()
        for t in self.templates:
            tokens.update(tok for tok in t.tokens if tok != self.nonterminal_name)
        for e in self.entities:
            tokens.update(e.tokens)
        return tokens


def _normalize(probs: list[float], what: str) -> list[float]:
    total = math.fsum(probs)
    if abs(total - 1.0) > PROB_SUM_TOLERANCE:
        raise GrammarError(f"{what} probabilities sum to {total!r}, outside 1 +/- 1e-6")
    if abs(total - 1.0) <= _RENORM_SKIP:
        return probs
    return [p / total for p in probs]


def _parse_lines(text: str, what: str) -> list[tuple[tuple[str, ...], float, int]]:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise GrammarError(f"malformed {what} line (no tab separator)", line=lineno)
        tokens_part, _, prob_part = line.rpartition("\t")
        tokens = tuple(tokens_part.split())
        if not tokens:
            raise GrammarError(f"malformed {what} line (no tokens)", line=lineno)
        try:
            prob = float(prob_part)
        except ValueError:
            raise GrammarError(
                f"malformed {what} line (bad probability {prob_part!r})", line=lineno
            ) from None
        if not math.isfinite(prob) or prob <= 0.0:
            raise GrammarError(f"{what} probability {prob!r} not in (0, 1]", line=lineno)
        records.append((tokens, prob, lineno))
    return records


def parse_grammar(
    templates_text: str, entities_text: str, nonterminal_name: str = "$entity"
) -> Grammar:
    """Parse template and entity feeds into a validated :class:`Grammar`."""
    t_records = _parse_lines(templates_text, "template")
    e_records = _parse_lines(entities_text, "entity")
    if not t_records:
        raise GrammarError("template file contains no records")
    if not e_records:
        raise GrammarError("entity file contains no records")

    seen: set[tuple[str, ...]] = set()
    for tokens, _, lineno in t_records:
        if tokens in seen:
            raise GrammarError(f"duplicate template {' '.join(tokens)!r}", line=lineno)
        seen.add(tokens)
    seen.clear()
    for tokens, _, lineno in e_records:
        if tokens in seen:
            raise GrammarError(f"duplicate entity {' '.join(tokens)!r}", line=lineno)
        seen.add(tokens)

    t_probs = _normalize([p for _, p, _ in t_records], "template")
    e_probs = _normalize([p for _, p, _ in e_records], "entity")
    grammar = Grammar(
        templates=[Template(tokens, p) for (tokens, _, _), p in zip(t_records, t_probs)],
        entities=[Entity(tokens, p) for (tokens, _, _), p in zip(e_records, e_probs)],
        nonterminal_name=nonterminal_name,
    )
    grammar.validate()
    return grammar


def serialize_templates(grammar: Grammar) -> str:
    return "".join(f"{' '.join(t.tokens)}\t{t.prob!r}\n" for t in grammar.templates)


def serialize_entities(grammar: Grammar) -> str:
    return "".join(f"{' '.join(e.tokens)}\t{e.prob!r}\n" for e in grammar.entities)


def expansion_size(grammar: Grammar) -> int:
    """Number of queries ``expand`` yields, computed without enumerating."""
    n_entities = len(grammar.entities)
    return sum(n_entities ** grammar.slot_count(i) for i in range(len(grammar.templates)))


def expand(grammar: Grammar, max_queries: int | None = None) -> Iterator[ExpandedQuery]:
    """Yield every template with every slot filling, in deterministic order.

    Order is template-index major, entity indices minor with the rightmost
    slot cycling fastest. Raises :class:`ExpansionLimitError` up front when
    the total expansion would exceed ``max_queries``.
    """
    if max_queries is not None:
        total = expansion_size(grammar)
        if total > max_queries:
            raise ExpansionLimitError(
                f"expansion has {total} queries, exceeding the limit of {max_queries}"
            )
    nt = grammar.nonterminal_name
    entities = grammar.entities
    n_entities = len(entities)
    for t_idx, template in enumerate(grammar.templates):
        slots = sum(1 for tok in template.tokens if tok == nt)
        if slots == 0:
            yield ExpandedQuery(template.tokens, template.prob, t_idx, ())
            continue
        # Odometer over slot fillings, rightmost slot fastest.
        fill = [0] * slots
        while True:
            tokens: list[str] = []
            joint = template.prob
            slot = 0
            for tok in template.tokens:
                if tok == nt:
                    entity = entities[fill[slot]]
                    tokens.extend(entity.tokens)
                    joint *= entity.prob
                    slot += 1
                else:
                    tokens.append(tok)
            yield ExpandedQuery(tuple(tokens), joint, t_idx, tuple(fill))
            pos = slots - 1
            while pos >= 0:
                fill[pos] += 1
                if fill[pos] < n_entities:
                    break
                fill[pos] = 0
                pos -= 1
            if pos < 0:
                break


def stratum_boundaries(n: int) -> tuple[int, int]:
    """Return (head_end, torso_end) rank indices for ``n`` queries.

    Ranks 1..ceil(0.1*n) are head, ranks through ceil(0.5*n) are torso,
    the rest tail.
    """
    if n <= 0:
        raise ValueError("cannot stratify an empty expansion")
    return math.ceil(0.1 * n), math.ceil(0.5 * n)


def stratify_order(
    joint_probs: Sequence[float], tokens_of: "callable"
) -> np.ndarray:
    """Indices sorted by descending joint probability, ties token-lexicographic.

    ``tokens_of(i)`` must return the token tuple of query ``i``; it is only
    called inside tied runs, so large expansions with few ties stay cheap.
    """
    probs = np.asarray(joint_probs, dtype=np.float64)
    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    result = order.copy()
    if len(order) < 2:
        return result
    # Resolve runs of exactly-equal probabilities lexicographically.
    boundaries = np.flatnonzero(sorted_probs[1:] != sorted_probs[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(order)]))
    for i in np.flatnonzero(ends - starts > 1):
        lo, hi = starts[i], ends[i]
        result[lo:hi] = sorted(order[lo:hi], key=tokens_of)
    return result


def stratify(queries: Sequence[ExpandedQuery]) -> dict[ExpandedQuery, Stratum]:
    """Partition queries into head/torso/tail by joint-probability rank."""
    order = stratify_order([q.joint_prob for q in queries], lambda i: queries[i].tokens)
    head_end, torso_end = stratum_boundaries(len(queries))
    assignment: dict[ExpandedQuery, Stratum] = {}
    for rank, idx in enumerate(order):
        if rank < head_end:
            label = Stratum.HEAD
        elif rank < torso_end:
            label = Stratum.TORSO
        else:
            label = Stratum.TAIL
        assignment[queries[idx]] = label
    return assignment


def weighted_sample_without_replacement(
    weights: np.ndarray, k: int, seed: int
) -> np.ndarray:
    """Indices of ``k`` weighted draws without replacement (exponential-key trick).

    Drawing index i with key Exp(1)/w_i and keeping the k smallest keys is
    distributionally identical to sequential weighted sampling without
    replacement.
    """
    n = len(weights)
    if k >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    keys = rng.standard_exponential(n) / weights
    picked = np.argpartition(keys, k)[:k]
    return picked[np.argsort(keys[picked], kind="stable")]


def sample_stratum(
    queries: Sequence[ExpandedQuery],
    stratum: Stratum,
    k: int,
    seed: int,
) -> list[ExpandedQuery]:
    """Sample ``k`` queries from one stratum, weighted by joint probability.

    Draws are without replacement and reproducible for a fixed seed; asking
    for more than the stratum holds returns the whole stratum.
    """
    order = stratify_order([q.joint_prob for q in queries], lambda i: queries[i].tokens)
    head_end, torso_end = stratum_boundaries(len(queries))
    if stratum is Stratum.HEAD:
        ranks = order[:head_end]
    elif stratum is Stratum.TORSO:
        ranks = order[head_end:torso_end]
    else:
        ranks = order[torso_end:]
    members = [queries[i] for i in ranks]
    if not members:
        raise GrammarError(f"stratum {stratum} is empty")
    if k <= 0:
        return []
    weights = np.array([q.joint_prob for q in members], dtype=np.float64)
    picked = weighted_sample_without_replacement(weights, k, seed)
    return [members[i] for i in picked]


# --- collision detection -------------------------------------------------
#
# A query's intended derivation is shadowed when the deterministic
# precedence rule (regular symbols win over non-terminal entry/exit)
# reroutes it:
#   entry:  at the template state before a slot, an explicit template arc
#           matches the entity's first token;
#   exit:   at the entity n-gram state reached by the entity's final
#           context, an explicit entity arc matches the template token
#           that follows the slot.
# Both conditions depend only on (template, slot, entity), so reports over
# the full cross-product factorize per slot.


@dataclass(slots=True)
class SlotShadowing:
    """Shadowed entity indices for one (template, slot) site."""

    template_index: int
    slot: int
    prefix: tuple[str, ...]
    shadowed: dict[int, str] = field(default_factory=dict)  # entity index -> reason


@dataclass(slots=True)
class CollisionSummary:
    total_queries: int
    collided_queries: int
    collided_mass: float  # probability-weighted fraction in [0, 1]

    @property
    def fraction(self) -> float:
        return self.collided_queries / self.total_queries if self.total_queries else 0.0


def _template_arc_index(grammar: Grammar) -> dict[tuple[str, ...], set[str]]:
    """Word arcs of the template trie, keyed by token prefix."""
    arcs: dict[tuple[str, ...], set[str]] = {}
    nt = grammar.nonterminal_name
    for template in grammar.templates:
        prefix: tuple[str, ...] = ()
        for tok in template.tokens:
            if tok != nt:
                arcs.setdefault(prefix, set()).add(tok)
            prefix = prefix + (tok,)
    return arcs


def _entity_continuations(grammar: Grammar, n: int) -> dict[tuple[str, ...], set[str]]:
    """Continuation tokens per truncated (n-1)-token entity context."""
    cont: dict[tuple[str, ...], set[str]] = {}
    for entity in grammar.entities:
        context: tuple[str, ...] = ()
        for tok in entity.tokens:
            cont.setdefault(context, set()).add(tok)
            context = (context + (tok,))[-(n - 1):] if n > 1 else ()
    return cont


def shadowed_slot_fills(grammar: Grammar, n: int = 3) -> list[SlotShadowing]:
    """Per-(template, slot) map of entity fills whose derivation is shadowed.

    ``n`` is the entity n-gram order the model will be built with; exit
    shadowing depends on it because entity contexts are truncated to n-1
    tokens.
    """
    if n < 2:
        raise GrammarError(f"entity n-gram order must be >= 2, got {n}")
    arcs = _template_arc_index(grammar)
    cont = _entity_continuations(grammar, n)
    nt = grammar.nonterminal_name
    sites: list[SlotShadowing] = []
    for t_idx, template in enumerate(grammar.templates):
        prefix: tuple[str, ...] = ()
        slot = 0
        for pos, tok in enumerate(template.tokens):
            if tok == nt:
                site = SlotShadowing(t_idx, slot, prefix)
                slot_arcs = arcs.get(prefix, set())
                next_tok = (
                    template.tokens[pos + 1] if pos + 1 < len(template.tokens) else None
                )
                for e_idx, entity in enumerate(grammar.entities):
                    first = entity.tokens[0]
                    if first in slot_arcs:
                        site.shadowed[e_idx] = (
                            f"entry: token {first!r} after template prefix "
                            f"{' '.join(prefix) or '<start>'!r} matches a template arc"
                        )
                        continue
                    if next_tok is not None:
                        final_ctx = entity.tokens[-(n - 1):]
                        if next_tok in cont.get(tuple(final_ctx), set()):
                            site.shadowed[e_idx] = (
                                f"exit: template token {next_tok!r} matches an entity "
                                f"continuation after context {' '.join(final_ctx)!r}"
                            )
                sites.append(site)
                slot += 1
            prefix = prefix + (tok,)
    return sites


def collision_report(grammar: Grammar, n: int = 3) -> list[CollisionRecord]:
    """Enumerate expanded queries shadowed by the precedence rule.

    Each record names the first shadowing site along the query. Intended
    for grammars whose expansion is small enough to materialize; use
    :func:`collision_summary` for aggregate numbers at scale.
    """
    sites = shadowed_slot_fills(grammar, n)
    by_template: dict[int, list[SlotShadowing]] = {}
    for site in sites:
        by_template.setdefault(site.template_index, []).append(site)
    records = []
    for query in expand(grammar):
        for site in by_template.get(query.template_index, ()):
            reason = site.shadowed.get(query.entity_indices[site.slot])
            if reason is not None:
                records.append(CollisionRecord(query, reason))
                break
    return records


def collision_summary(grammar: Grammar, n: int = 3) -> CollisionSummary:
    """Aggregate collision counts/mass without enumerating the expansion.

    Works per (template, slot) site: a query collides when any of its slot
    fills is shadowed, so the covered fraction under template t is the
    product over slots of (1 - shadowed share at that slot).
    """
    sites = shadowed_slot_fills(grammar, n)
    by_template: dict[int, list[SlotShadowing]] = {}
    for site in sites:
        by_template.setdefault(site.template_index, []).append(site)

    n_entities = len(grammar.entities)
    total = expansion_size(grammar)
    collided_count = 0
    collided_mass = 0.0
    for t_idx, template in enumerate(grammar.templates):
        slots = grammar.slot_count(t_idx)
        covered_count_frac = 1.0
        covered_mass_frac = 1.0
        for site in by_template.get(t_idx, ()):
            shadowed_mass = math.fsum(
                grammar.entities[e].prob for e in site.shadowed
            )
            covered_count_frac *= 1.0 - len(site.shadowed) / n_entities
            covered_mass_frac *= 1.0 - shadowed_mass
        block = n_entities**slots
        collided_count += round(block * (1.0 - covered_count_frac))
        collided_mass += template.prob * (1.0 - covered_mass_frac)
    return CollisionSummary(total, collided_count, collided_mass)
