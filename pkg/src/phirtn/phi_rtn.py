"""Deterministic approximate RTN over a two-level query grammar.

The model is three components glued by failure (phi) transitions:

* a template trie whose arc probabilities are maximum-likelihood estimates
  over template weights, scaled by (1 - alpha);
* a non-backoff entity n-gram automaton, likewise (1 - alpha)-scaled, with
  final states removed (ending mass folds into the exit transition);
* a self-loop unigram state covering everything else.

Determinism comes from precedence: an explicit arc always wins; the phi
transition is followed only when the requested symbol (or the end event)
has no explicit arc at the current state. Phi-transition weights are
back-off normalizers: each is chosen so the mass routed through the phi
chain exactly fills the state's leftover (alpha plus any slot or ending
mass not covered explicitly), which keeps every state's distribution
summing to one.

Phi weights out of the template trie are computed at build time. Weights
for exiting the entity automaton back to the template trie depend on the
(entity state, return state) pair, so they are computed at runtime from
the precomputed per-state marginal unigram sums; only the entity start
state's exit weight (needed for the static template-side weights) is
stored. Runtime results are memoized per pair, and the cache never
changes results, only cost.

Storage is linear in template trie arcs plus entity n-gram arcs; the
template-entity cross-product is never materialized.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from .errors import ModelBuildError
from .grammar import Entity, ExpandedQuery, Grammar, Template
from .lm import NEG_INF, safe_log
from .vocab import EOS_ID, Vocabulary

TEMPLATE = 0
ENTITY = 1
UNIGRAM = 2

_COMPONENT_NAMES = {TEMPLATE: "template", ENTITY: "entity", UNIGRAM: "unigram"}

NO_SLOT = -1
NO_RETURN = -1

DEFAULT_ALPHA = 0.1
DEFAULT_ORDER = 3
DEFAULT_UNIGRAM_EPSILON = 1e-6


class PhiRtnState(NamedTuple):
    """Decoding position: component, state id, entity return state."""

    component: int
    state: int
    ret: int

    def describe(self) -> str:
        name = _COMPONENT_NAMES[self.component]
        if self.component == ENTITY:
            return f"{name}[{self.state}]->template[{self.ret}]"
        return f"{name}[{self.state}]"


UNIGRAM_STATE = PhiRtnState(UNIGRAM, 0, NO_RETURN)


class _FstState:
    """One automaton state: sorted explicit arcs plus scalar masses."""

    __slots__ = ("arcs", "arc_items", "final_mass", "slot_target", "marginal_uni")

    def __init__(self):
        self.arcs: dict[int, tuple[int, float]] = {}
        self.arc_items: tuple[tuple[int, int, float], ...] = ()
        self.final_mass = 0.0
        self.slot_target = NO_SLOT
        self.marginal_uni = 0.0

    def freeze(self) -> None:
        """Fix arc iteration order (ascending token id) for reproducibility."""
        self.arc_items = tuple(
            (tok, tgt, prob) for tok, (tgt, prob) in sorted(self.arcs.items())
        )
        self.arcs = {tok: (tgt, prob) for tok, tgt, prob in self.arc_items}


class TemplateFst:
    def __init__(self, states: list[_FstState], vocab: Vocabulary, alpha: float):
        self.states = states
        self.vocab = vocab
        self.alpha = alpha

    def arc_count(self) -> int:
        return sum(len(s.arcs) for s in self.states)


class EntityFst:
    def __init__(
        self,
        states: list[_FstState],
        vocab: Vocabulary,
        order: int,
        alpha: float,
        context_ids: dict[tuple[int, ...], int],
    ):
        self.states = states
        self.vocab = vocab
        self.order = order
        self.alpha = alpha
        # Build-time context map (truncated token-id history -> state id);
        # scoring never needs it but structural tests and coverage do.
        self.context_ids = context_ids

    def arc_count(self) -> int:
        return sum(len(s.arcs) for s in self.states)


def build_template_fst(
    templates: Sequence[Template], vocab: Vocabulary, alpha: float
) -> TemplateFst:
    """Trie over templates with (1 - alpha)-scaled ML arc probabilities.

    Slot (non-terminal) arcs carry no probability of their own; their ML
    mass is the leftover later routed through the phi mechanism.
    """
    if not 0.0 < alpha < 1.0:
        raise ModelBuildError(f"alpha must be in (0, 1), got {alpha}")
    if not templates:
        raise ModelBuildError("template set is empty")
    nt = vocab.nonterminal
    abar = 1.0 - alpha

    states = [_FstState()]
    through_mass = [0.0]
    end_mass = [0.0]
    children: list[dict[int, int]] = [{}]  # token id -> child state, incl. slot

    for template in templates:
        node = 0
        through_mass[0] += template.prob
        for raw in template.tokens:
            tok = vocab.add(raw) if raw != nt else vocab.id(nt)
            child = children[node].get(tok)
            if child is None:
                child = len(states)
                children[node][tok] = child
                states.append(_FstState())
                through_mass.append(0.0)
                end_mass.append(0.0)
                children.append({})
            node = child
            through_mass[node] += template.prob
        end_mass[node] += template.prob

    nt_id = vocab.id(nt)
    for state_id, state in enumerate(states):
        mass = through_mass[state_id]
        for tok, child in children[state_id].items():
            if tok == nt_id:
                state.slot_target = child
            else:
                state.arcs[tok] = (child, through_mass[child] / mass * abar)
        state.final_mass = end_mass[state_id] / mass * abar
        state.freeze()
    for state in states:
        if state.slot_target != NO_SLOT and states[state.slot_target].slot_target != NO_SLOT:
            raise ModelBuildError("templates contain consecutive non-terminal slots")
    return TemplateFst(states, vocab, alpha)


def build_entity_fst(
    entities: Sequence[Entity], vocab: Vocabulary, order: int, alpha: float
) -> EntityFst:
    """Non-backoff entity n-gram automaton with (1 - alpha)-scaled arcs.

    States are truncated (order-1)-token contexts. Per state, the ML
    denominator includes the weighted mass of entities ending there; the
    ending share is stored (1 - alpha)-scaled as the state's final mass
    and later combines with alpha into the exit leftover.
    """
    if order < 2:
        raise ModelBuildError(f"entity n-gram order must be >= 2, got {order}")
    if not entities:
        raise ModelBuildError("entity set is empty")
    if not 0.0 < alpha < 1.0:
        raise ModelBuildError(f"alpha must be in (0, 1), got {alpha}")
    abar = 1.0 - alpha

    context_ids: dict[tuple[int, ...], int] = {(): 0}
    arc_counts: list[dict[int, float]] = [{}]
    end_counts = [0.0]
    targets: list[dict[int, int]] = [{}]

    def state_for(context: tuple[int, ...]) -> int:
        sid = context_ids.get(context)
        if sid is None:
            sid = len(arc_counts)
            context_ids[context] = sid
            arc_counts.append({})
            end_counts.append(0.0)
            targets.append({})
        return sid

    keep = order - 1
    for entity in entities:
        ids = [vocab.add(t) for t in entity.tokens]
        context: tuple[int, ...] = ()
        sid = 0
        for tok in ids:
            counts = arc_counts[sid]
            counts[tok] = counts.get(tok, 0.0) + entity.prob
            context = (context + (tok,))[-keep:]
            nxt = state_for(context)
            targets[sid][tok] = nxt
            sid = nxt
        end_counts[sid] += entity.prob

    states = []
    for sid in range(len(arc_counts)):
        state = _FstState()
        mass = math.fsum(arc_counts[sid].values()) + end_counts[sid]
        for tok, count in arc_counts[sid].items():
            state.arcs[tok] = (targets[sid][tok], count / mass * abar)
        state.final_mass = end_counts[sid] / mass * abar
        state.freeze()
        states.append(state)
    return EntityFst(states, vocab, order, alpha, context_ids)


def build_unigram(
    grammar: Grammar, vocab: Vocabulary, smoothing_epsilon: float = DEFAULT_UNIGRAM_EPSILON
) -> np.ndarray:
    """Unigram distribution from expected token counts under the grammar.

    A token's expected count sums template-word occurrences weighted by
    template probability plus entity occurrences weighted by entity
    probability times the expected number of slots per query. Every
    scorable token (including <unk>) receives ``smoothing_epsilon``, and
    </s> counts once per query. Equals brute-force token counting over
    the full expansion.
    """
    counts = np.zeros(len(vocab))
    nt = grammar.nonterminal_name
    expected_slots = 0.0
    for template in grammar.templates:
        for tok in template.tokens:
            if tok == nt:
                expected_slots += template.prob
            else:
                counts[vocab.add(tok)] += template.prob
    for entity in grammar.entities:
        for tok in entity.tokens:
            counts[vocab.add(tok)] += expected_slots * entity.prob
    counts[EOS_ID] = 1.0
    probs = np.zeros(len(vocab))
    scorable = vocab.scorable_ids()
    probs[scorable] = counts[scorable] + smoothing_epsilon
    probs[EOS_ID] = counts[EOS_ID]
    return probs / probs.sum()


class PhiRtnModel:
    """Assembled model; immutable after construction, safe to share."""

    def __init__(
        self,
        template_fst: TemplateFst,
        entity_fst: EntityFst,
        unigram: np.ndarray,
        alpha: float,
        phi_weights: np.ndarray,
        start_exit_weights: np.ndarray,
    ):
        self.template_fst = template_fst
        self.entity_fst = entity_fst
        self.unigram = np.asarray(unigram, dtype=np.float64)
        self.alpha = alpha
        self.order = entity_fst.order
        self.vocab = template_fst.vocab
        # phi_weights[s]: weight of the phi arc leaving template state s
        # (target is the entity start when s has a slot, else the unigram).
        self.phi_weights = np.asarray(phi_weights, dtype=np.float64)
        # start_exit_weights[s]: for slot states, the entity start state's
        # exit weight back to s's return state; NaN elsewhere.
        self.start_exit_weights = np.asarray(start_exit_weights, dtype=np.float64)
        self._exit_cache: dict[tuple[int, int], float] = {}

    # -- scoring -----------------------------------------------------------

    def start(self) -> PhiRtnState:
        return PhiRtnState(TEMPLATE, 0, NO_RETURN)

    def exit_weight(self, entity_state: int, return_state: int) -> float:
        """Weight of the phi arc from an entity state back to the template.

        Normalizes the pass-through distribution: leftover mass at the
        entity state (alpha plus its scaled ending mass) divided by one
        minus the return-state probability of the symbols already explicit
        at the entity state. The subtraction uses the precomputed marginal
        unigram sum and touches only the sparse return-state arcs.
        """
        cached = self._exit_cache.get((entity_state, return_state))
        if cached is not None:
            return cached
        e_state = self.entity_fst.states[entity_state]
        r_state = self.template_fst.states[return_state]
        phi_r = float(self.phi_weights[return_state])
        covered = phi_r * e_state.marginal_uni
        e_arcs = e_state.arcs
        uni = self.unigram
        for tok, _, prob in r_state.arc_items:
            if tok in e_arcs:
                covered += prob - phi_r * float(uni[tok])
        denom = 1.0 - covered
        if denom <= 0.0:
            raise ModelBuildError(
                f"degenerate exit normalization at entity state {entity_state} "
                f"returning to template state {return_state}"
            )
        weight = (self.alpha + e_state.final_mass) / denom
        self._exit_cache[(entity_state, return_state)] = weight
        return weight

    def _template_token_prob(self, state_id: int, token_id: int) -> float:
        """P(token | template state) for a state without a slot."""
        state = self.template_fst.states[state_id]
        arc = state.arcs.get(token_id)
        if arc is not None:
            return arc[1]
        return float(self.phi_weights[state_id]) * float(self.unigram[token_id])

    def _template_end_prob(self, state_id: int) -> float:
        """P(</s> | template state) for a state without a slot."""
        state = self.template_fst.states[state_id]
        if state.final_mass > 0.0:
            return state.final_mass
        return float(self.phi_weights[state_id]) * float(self.unigram[EOS_ID])

    def step(self, state: PhiRtnState, token_id: int) -> tuple[float, PhiRtnState]:
        component, sid, ret = state
        if component == UNIGRAM:
            return safe_log(float(self.unigram[token_id])), UNIGRAM_STATE

        if component == ENTITY:
            e_state = self.entity_fst.states[sid]
            arc = e_state.arcs.get(token_id)
            if arc is not None:
                return math.log(arc[1]), PhiRtnState(ENTITY, arc[0], ret)
            # Fail out of the entity automaton to the recorded return state.
            weight = self.exit_weight(sid, ret)
            r_state = self.template_fst.states[ret]
            arc = r_state.arcs.get(token_id)
            if arc is not None:
                return math.log(weight * arc[1]), PhiRtnState(TEMPLATE, arc[0], NO_RETURN)
            p = weight * float(self.phi_weights[ret]) * float(self.unigram[token_id])
            return safe_log(p), UNIGRAM_STATE

        t_state = self.template_fst.states[sid]
        arc = t_state.arcs.get(token_id)
        if arc is not None:
            return math.log(arc[1]), PhiRtnState(TEMPLATE, arc[0], NO_RETURN)
        phi = float(self.phi_weights[sid])
        if t_state.slot_target == NO_SLOT:
            return safe_log(phi * float(self.unigram[token_id])), UNIGRAM_STATE
        # Enter the entity automaton, remembering where to return.
        ret_state = t_state.slot_target
        e_start = self.entity_fst.states[0]
        arc = e_start.arcs.get(token_id)
        if arc is not None:
            return math.log(phi * arc[1]), PhiRtnState(ENTITY, arc[0], ret_state)
        # Unmatched at the entity start too: fall through its exit back to
        # the return state, and possibly on to the unigram.
        weight = float(self.start_exit_weights[sid])
        r_state = self.template_fst.states[ret_state]
        arc = r_state.arcs.get(token_id)
        if arc is not None:
            return (
                math.log(phi * weight * arc[1]),
                PhiRtnState(TEMPLATE, arc[0], NO_RETURN),
            )
        p = phi * weight * float(self.phi_weights[ret_state]) * float(self.unigram[token_id])
        return safe_log(p), UNIGRAM_STATE

    def end(self, state: PhiRtnState) -> float:
        component, sid, ret = state
        if component == UNIGRAM:
            return safe_log(float(self.unigram[EOS_ID]))
        if component == ENTITY:
            weight = self.exit_weight(sid, ret)
            return safe_log(weight * self._template_end_prob(ret))
        t_state = self.template_fst.states[sid]
        if t_state.final_mass > 0.0:
            return math.log(t_state.final_mass)
        phi = float(self.phi_weights[sid])
        if t_state.slot_target == NO_SLOT:
            return safe_log(phi * float(self.unigram[EOS_ID]))
        weight = float(self.start_exit_weights[sid])
        return safe_log(phi * weight * self._template_end_prob(t_state.slot_target))

    # -- structure ---------------------------------------------------------

    def stored_arc_count(self) -> int:
        return self.template_fst.arc_count() + self.entity_fst.arc_count()


def assemble(
    template_fst: TemplateFst,
    entity_fst: EntityFst,
    unigram: np.ndarray,
    alpha: float,
) -> PhiRtnModel:
    """Compute static phi weights and wire the three components together.

    For a template state without a slot the phi arc points at the unigram:
    its weight is leftover / (1 - unigram mass of the state's explicit
    events). For a slot state the phi arc points at the entity start, and
    the target distribution chains through the start state's own exit back
    to the known return state, so the weight (and the start state's exit
    weight) can be computed here once.
    """
    if not 0.0 < alpha < 1.0:
        raise ModelBuildError(f"alpha must be in (0, 1), got {alpha}")
    if template_fst.alpha != alpha or entity_fst.alpha != alpha:
        raise ModelBuildError("components were built with a different alpha")
    if template_fst.vocab is not entity_fst.vocab:
        raise ModelBuildError("components were built with different vocabularies")

    uni = np.asarray(unigram, dtype=np.float64)
    for e_state in entity_fst.states:
        e_state.marginal_uni = math.fsum(float(uni[tok]) for tok, _, _ in e_state.arc_items)

    n_states = len(template_fst.states)
    phi_weights = np.zeros(n_states)
    start_exit_weights = np.full(n_states, math.nan)
    model = PhiRtnModel(template_fst, entity_fst, uni, alpha, phi_weights, start_exit_weights)

    slot_states = []
    for sid, state in enumerate(template_fst.states):
        if state.slot_target != NO_SLOT:
            slot_states.append(sid)
            continue
        leftover = 1.0 - math.fsum(p for _, _, p in state.arc_items) - state.final_mass
        covered = math.fsum(float(uni[tok]) for tok, _, _ in state.arc_items)
        if state.final_mass > 0.0:
            covered += float(uni[EOS_ID])
        denom = 1.0 - covered
        if denom <= 0.0:
            raise ModelBuildError(
                f"degenerate phi normalization at template state {sid}"
            )
        phi_weights[sid] = leftover / denom

    # Slot states second: their phi target distribution chains through the
    # entity start's exit back to the (slot-free) return state, whose own
    # phi weight is already known.
    e_start = entity_fst.states[0]
    for sid in slot_states:
        state = template_fst.states[sid]
        ret = state.slot_target
        exit_w = model.exit_weight(0, ret)
        start_exit_weights[sid] = exit_w
        covered = 0.0
        for tok, _, _ in state.arc_items:
            arc = e_start.arcs.get(tok)
            if arc is not None:
                covered += arc[1]
            else:
                covered += exit_w * model._template_token_prob(ret, tok)
        if state.final_mass > 0.0:
            covered += exit_w * model._template_end_prob(ret)
        leftover = 1.0 - math.fsum(p for _, _, p in state.arc_items) - state.final_mass
        denom = 1.0 - covered
        if denom <= 0.0:
            raise ModelBuildError(
                f"degenerate phi normalization at template slot state {sid}"
            )
        phi_weights[sid] = leftover / denom
    return model


def build_phi_rtn(
    grammar: Grammar,
    order: int = DEFAULT_ORDER,
    alpha: float = DEFAULT_ALPHA,
    smoothing_epsilon: float = DEFAULT_UNIGRAM_EPSILON,
    vocab: Vocabulary | None = None,
) -> PhiRtnModel:
    """Build a complete model from a grammar."""
    if vocab is None:
        vocab = Vocabulary.from_tokens(
            grammar.vocabulary_tokens(), nonterminal=grammar.nonterminal_name
        )
    template_fst = build_template_fst(grammar.templates, vocab, alpha)
    entity_fst = build_entity_fst(grammar.entities, vocab, order, alpha)
    unigram = build_unigram(grammar, vocab, smoothing_epsilon)
    return assemble(template_fst, entity_fst, unigram, alpha)


# -- coverage ----------------------------------------------------------------


class CoverageReport(NamedTuple):
    """Share of grammar queries whose model path matches the intended one."""

    weighted: float
    unweighted: float
    total_queries: int
    uncovered_queries: int


def _intended_trajectory(
    model: PhiRtnModel, grammar: Grammar, query: ExpandedQuery
) -> list[PhiRtnState] | None:
    """State sequence of the intended derivation, or None if inconsistent."""
    template = grammar.templates[query.template_index]
    nt = grammar.nonterminal_name
    vocab = model.vocab
    states: list[PhiRtnState] = []
    node = 0
    slot = 0
    for tok in template.tokens:
        if tok != nt:
            arc = model.template_fst.states[node].arcs.get(vocab.id(tok))
            if arc is None:
                return None
            node = arc[0]
            states.append(PhiRtnState(TEMPLATE, node, NO_RETURN))
        else:
            ret = model.template_fst.states[node].slot_target
            if ret == NO_SLOT:
                return None
            entity = grammar.entities[query.entity_indices[slot]]
            sid = 0
            for e_tok in entity.tokens:
                arc = model.entity_fst.states[sid].arcs.get(vocab.id(e_tok))
                if arc is None:
                    return None
                sid = arc[0]
                states.append(PhiRtnState(ENTITY, sid, ret))
            node = ret
            slot += 1
    return states


def intended_logprob(model: PhiRtnModel, grammar: Grammar, query: ExpandedQuery) -> float:
    """Log probability of the query's intended derivation under ``model``.

    Multiplies the weights along the template/entity path the derivation
    names, ignoring precedence rerouting: template arcs, the phi entry at
    each slot, entity arcs, the exit weight back to the return state, and
    the final mass of the closing template state. Equals
    ``sequence_logprob`` exactly when the query is collision-free and
    differs when it is shadowed.
    """
    template = grammar.templates[query.template_index]
    nt = grammar.nonterminal_name
    vocab = model.vocab
    total = 0.0
    node = 0
    slot = 0
    for tok in template.tokens:
        t_state = model.template_fst.states[node]
        if tok != nt:
            target, prob = t_state.arcs[vocab.id(tok)]
            total += math.log(prob)
            node = target
            continue
        ret = t_state.slot_target
        total += math.log(float(model.phi_weights[node]))
        entity = grammar.entities[query.entity_indices[slot]]
        sid = 0
        for e_tok in entity.tokens:
            target, prob = model.entity_fst.states[sid].arcs[vocab.id(e_tok)]
            total += math.log(prob)
            sid = target
        total += math.log(model.exit_weight(sid, ret))
        node = ret
        slot += 1
    final = model.template_fst.states[node].final_mass
    return total + safe_log(final)


def query_follows_intended_path(
    model: PhiRtnModel, grammar: Grammar, query: ExpandedQuery
) -> bool:
    """Walk ``query`` through ``step`` and compare against the intended states.

    Used as the trajectory-level ground truth in tests; ``coverage`` gets
    the same answer from per-slot structure without walking.
    """
    intended = _intended_trajectory(model, grammar, query)
    if intended is None:
        return False
    ids = model.vocab.encode(query.tokens)
    state = model.start()
    for tok_id, want in zip(ids, intended):
        _, state = model.step(state, tok_id)
        if state != want:
            return False
    return True


def coverage(model: PhiRtnModel, grammar: Grammar, order: int | None = None) -> CoverageReport:
    """Probability-weighted and raw fractions of unshadowed grammar queries.

    A query is covered when no slot fill is entry-shadowed (template arc
    matches the entity's first token) or exit-shadowed (entity arc matches
    the template's post-slot token). Both checks run against the model's
    own automata, per (template, slot, entity), so the cross-product is
    never enumerated.
    """
    nt = grammar.nonterminal_name
    vocab = model.vocab
    keep = model.order - 1
    n_entities = len(grammar.entities)

    total = 0
    uncovered = 0
    covered_mass = 0.0
    for t_idx, template in enumerate(grammar.templates):
        node = 0
        covered_count_frac = 1.0
        covered_mass_frac = 1.0
        slots = 0
        for pos, tok in enumerate(template.tokens):
            t_state = model.template_fst.states[node]
            if tok != nt:
                node = t_state.arcs[vocab.id(tok)][0]
                continue
            slots += 1
            next_tok = template.tokens[pos + 1] if pos + 1 < len(template.tokens) else None
            next_id = vocab.id(next_tok) if next_tok is not None else None
            shadow_count = 0
            shadow_mass = 0.0
            for entity in grammar.entities:
                first_id = vocab.id(entity.tokens[0])
                shadowed = first_id in t_state.arcs
                if not shadowed and next_id is not None:
                    context = tuple(vocab.encode(entity.tokens[-keep:]))
                    sid = model.entity_fst.context_ids.get(context)
                    shadowed = sid is not None and next_id in model.entity_fst.states[sid].arcs
                if shadowed:
                    shadow_count += 1
                    shadow_mass += entity.prob
            covered_count_frac *= 1.0 - shadow_count / n_entities
            covered_mass_frac *= 1.0 - shadow_mass
            node = t_state.slot_target
        block = n_entities**slots
        total += block
        uncovered += round(block * (1.0 - covered_count_frac))
        covered_mass += template.prob * covered_mass_frac
    return CoverageReport(
        weighted=covered_mass,
        unweighted=(total - uncovered) / total,
        total_queries=total,
        uncovered_queries=uncovered,
    )
