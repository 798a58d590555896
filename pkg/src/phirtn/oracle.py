"""Brute-force reference implementations for validating scoring models.

The oracle materializes the full cross-product automaton a grammar
denotes: every non-terminal site gets its own copy of the entity
automaton, and every state's complete distribution over the vocabulary
plus the end event is tabulated explicitly. Back-off weights are obtained
by summing tabulated target distributions rather than through the closed
forms the production model uses, so agreement between the two is a real
check and not a shared-code tautology.

Everything here is a testing device: it scales to desk-size grammars only
and enforces a materialization cap.
"""

from __future__ import annotations

import math
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import OracleCapError
from .grammar import ExpandedQuery, Grammar, expand, expansion_size
from .lm import LanguageModel, safe_log
from .vocab import EOS_ID, Vocabulary


class _TrieNode:
    __slots__ = ("arcs", "arc_probs", "slot_child", "final", "phi", "start_exit")

    def __init__(self):
        self.arcs: dict[int, int] = {}
        self.arc_probs: dict[int, float] = {}
        self.slot_child = -1
        self.final = 0.0
        self.phi = 0.0
        self.start_exit = math.nan


class _EntityState:
    __slots__ = ("arcs", "arc_probs", "final")

    def __init__(self):
        self.arcs: dict[int, int] = {}
        self.arc_probs: dict[int, float] = {}
        self.final = 0.0


class OracleModel:
    """Explicit tabulated model with the same precedence semantics.

    States are integers into ``rows``/``succs``/``ends``; ``state_keys``
    names each one (template node, or (return node, entity state) pair, or
    the unigram).
    """

    def __init__(
        self,
        grammar: Grammar,
        vocab: Vocabulary,
        alpha: float,
        order: int,
        state_keys: list[tuple],
        rows: list[np.ndarray],
        ends: list[float],
        succs: list[np.ndarray],
        start_state: int,
        trie: list[_TrieNode],
        entity_states: list[_EntityState],
        entity_context_ids: dict[tuple[int, ...], int],
        exit_weights: dict[tuple[int, int], float],
        unigram: np.ndarray,
    ):
        self.grammar = grammar
        self.vocab = vocab
        self.alpha = alpha
        self.order = order
        self.state_keys = state_keys
        self.rows = rows
        self.ends = ends
        self.succs = succs
        self.start_state = start_state
        self._trie = trie
        self._entity_states = entity_states
        self._entity_context_ids = entity_context_ids
        self._exit_weights = exit_weights
        self._unigram = unigram

    def start(self) -> int:
        return self.start_state

    def step(self, state: int, token_id: int) -> tuple[float, int]:
        return safe_log(float(self.rows[state][token_id])), int(self.succs[state][token_id])

    def end(self, state: int) -> float:
        return safe_log(self.ends[state])

    def num_states(self) -> int:
        return len(self.rows)

    # -- the intended (unshadowed) derivation ------------------------------

    def intended_logprob(self, query: ExpandedQuery) -> float:
        """Log probability of the query's intended derivation.

        Multiplies the arc weights the query's template/entity path would
        traverse if precedence never rerouted it: template arcs, the phi
        entry into the entity automaton at each slot, entity arcs, the
        exit weight back to the return state, and the final mass of the
        template leaf. Equals the model's sequence log-probability exactly
        when the query is collision-free.
        """
        template = self.grammar.templates[query.template_index]
        nt = self.grammar.nonterminal_name
        keep = self.order - 1
        total = 0.0
        node = 0
        slot = 0
        for tok in template.tokens:
            if tok != nt:
                tok_id = self.vocab.id(tok)
                total += math.log(self._trie[node].arc_probs[tok_id])
                node = self._trie[node].arcs[tok_id]
                continue
            entity = self.grammar.entities[query.entity_indices[slot]]
            ret = self._trie[node].slot_child
            total += math.log(self._trie[node].phi)
            context: tuple[int, ...] = ()
            sid = 0
            for e_tok in entity.tokens:
                e_id = self.vocab.id(e_tok)
                total += math.log(self._entity_states[sid].arc_probs[e_id])
                context = (context + (e_id,))[-keep:]
                sid = self._entity_context_ids[context]
            total += math.log(self._exit_weights[(sid, ret)])
            node = ret
            slot += 1
        total += math.log(self._trie[node].final)
        return total


def _brute_force_unigram(
    grammar: Grammar, vocab: Vocabulary, smoothing_epsilon: float
) -> np.ndarray:
    """Unigram by literally counting tokens over the full expansion."""
    counts = np.zeros(len(vocab))
    for query in expand(grammar):
        for tok in query.tokens:
            counts[vocab.id(tok)] += query.joint_prob
    counts[EOS_ID] = math.fsum(q.joint_prob for q in expand(grammar))
    probs = np.zeros(len(vocab))
    scorable = vocab.scorable_ids()
    probs[scorable] = counts[scorable] + smoothing_epsilon
    probs[EOS_ID] = counts[EOS_ID]
    return probs / probs.sum()


def build_oracle(
    grammar: Grammar,
    alpha: float = 0.1,
    order: int = 3,
    smoothing_epsilon: float = 1e-6,
    vocab: Vocabulary | None = None,
    max_arcs: int = 10**6,
) -> OracleModel:
    """Materialize the cross-product automaton and tabulate every state.

    Raises :class:`OracleCapError` when the tabulation would exceed
    ``max_arcs`` probability entries.
    """
    if vocab is None:
        vocab = Vocabulary.from_tokens(
            grammar.vocabulary_tokens(), nonterminal=grammar.nonterminal_name
        )
    abar = 1.0 - alpha
    nt = grammar.nonterminal_name
    nt_id = vocab.id(nt)

    # Template trie with ML masses, slot children, scaled finals.
    trie = [_TrieNode()]
    through = [0.0]
    ending = [0.0]
    for template in grammar.templates:
        node = 0
        through[0] += template.prob
        for tok in template.tokens:
            tok_id = vocab.id(tok)
            nxt = trie[node].arcs.get(tok_id)
            if nxt is None:
                nxt = len(trie)
                trie[node].arcs[tok_id] = nxt
                trie.append(_TrieNode())
                through.append(0.0)
                ending.append(0.0)
            node = nxt
            through[node] += template.prob
        ending[node] += template.prob
    for node_id, node in enumerate(trie):
        slot_child = node.arcs.pop(nt_id, None)
        if slot_child is not None:
            node.slot_child = slot_child
        node.final = ending[node_id] / through[node_id] * abar
        for tok_id, child in node.arcs.items():
            node.arc_probs[tok_id] = through[child] / through[node_id] * abar

    # Entity n-gram automaton over truncated contexts.
    entity_context_ids: dict[tuple[int, ...], int] = {(): 0}
    entity_states = [_EntityState()]
    e_counts: list[dict[int, float]] = [{}]
    e_end = [0.0]
    keep = order - 1
    for entity in grammar.entities:
        context: tuple[int, ...] = ()
        sid = 0
        for tok in entity.tokens:
            tok_id = vocab.id(tok)
            e_counts[sid][tok_id] = e_counts[sid].get(tok_id, 0.0) + entity.prob
            context = (context + (tok_id,))[-keep:]
            nxt = entity_context_ids.get(context)
            if nxt is None:
                nxt = len(entity_states)
                entity_context_ids[context] = nxt
                entity_states.append(_EntityState())
                e_counts.append({})
                e_end.append(0.0)
            entity_states[sid].arcs[tok_id] = nxt
            sid = nxt
        e_end[sid] += entity.prob
    for sid, state in enumerate(entity_states):
        mass = math.fsum(e_counts[sid].values()) + e_end[sid]
        state.final = e_end[sid] / mass * abar
        for tok_id, count in e_counts[sid].items():
            state.arc_probs[tok_id] = count / mass * abar

    unigram = _brute_force_unigram(grammar, vocab, smoothing_epsilon)

    # Enumerate oracle states: template nodes, one entity copy per distinct
    # return site, and the unigram.
    returns = sorted({n.slot_child for n in trie if n.slot_child != -1})
    state_keys: list[tuple] = [("template", i) for i in range(len(trie))]
    for ret in returns:
        state_keys.extend(("entity", ret, e) for e in range(len(entity_states)))
    state_keys.append(("unigram",))
    state_index = {key: i for i, key in enumerate(state_keys)}

    n_vocab = len(vocab)
    if len(state_keys) * (n_vocab + 1) > max_arcs:
        raise OracleCapError(
            f"oracle would tabulate {len(state_keys) * (n_vocab + 1)} entries, "
            f"cap is {max_arcs}"
        )

    scorable = np.array(vocab.scorable_ids(), dtype=np.int64)
    rows: list[np.ndarray | None] = [None] * len(state_keys)
    ends: list[float] = [0.0] * len(state_keys)
    succs: list[np.ndarray | None] = [None] * len(state_keys)
    exit_weights: dict[tuple[int, int], float] = {}

    uni_state = state_index[("unigram",)]
    uni_row = np.zeros(n_vocab)
    uni_row[scorable] = unigram[scorable]
    rows[uni_state] = uni_row
    ends[uni_state] = float(unigram[EOS_ID])
    succs[uni_state] = np.full(n_vocab, uni_state, dtype=np.int32)

    def tabulate_template(node_id: int) -> None:
        """Row for a slot-free template node: explicit arcs, phi to unigram."""
        node = trie[node_id]
        explicit_sum = math.fsum(node.arc_probs.values()) + node.final
        covered = math.fsum(float(unigram[t]) for t in node.arc_probs)
        if node.final > 0.0:
            covered += float(unigram[EOS_ID])
        node.phi = (1.0 - explicit_sum) / (1.0 - covered)
        row = node.phi * uni_row
        succ = np.full(n_vocab, uni_state, dtype=np.int32)
        for tok_id, p in node.arc_probs.items():
            row[tok_id] = p
            succ[tok_id] = state_index[("template", node.arcs[tok_id])]
        sid = state_index[("template", node_id)]
        rows[sid] = row
        ends[sid] = node.final if node.final > 0.0 else node.phi * float(unigram[EOS_ID])
        succs[sid] = succ

    for node_id, node in enumerate(trie):
        if node.slot_child == -1:
            tabulate_template(node_id)

    def tabulate_entity_copy(ret: int) -> None:
        """Rows for every entity state under one return site."""
        ret_sid = state_index[("template", ret)]
        ret_row = rows[ret_sid]
        ret_succ = succs[ret_sid]
        ret_end = ends[ret_sid]
        for e_id, e_state in enumerate(entity_states):
            explicit_sum = math.fsum(e_state.arc_probs.values())
            passed = math.fsum(float(ret_row[t]) for t in e_state.arc_probs)
            weight = (1.0 - explicit_sum) / (1.0 - passed)
            exit_weights[(e_id, ret)] = weight
            row = weight * ret_row
            succ = ret_succ.copy()
            for tok_id, p in e_state.arc_probs.items():
                row[tok_id] = p
                succ[tok_id] = state_index[("entity", ret, e_state.arcs[tok_id])]
            sid = state_index[("entity", ret, e_id)]
            rows[sid] = row
            ends[sid] = weight * ret_end
            succs[sid] = succ

    for ret in returns:
        tabulate_entity_copy(ret)

    def tabulate_slot_template(node_id: int) -> None:
        """Row for a template node with a slot: phi enters the entity copy."""
        node = trie[node_id]
        ret = node.slot_child
        entry_sid = state_index[("entity", ret, 0)]
        entry_row = rows[entry_sid]
        entry_succ = succs[entry_sid]
        entry_end = ends[entry_sid]
        explicit_sum = math.fsum(node.arc_probs.values()) + node.final
        covered = math.fsum(float(entry_row[t]) for t in node.arc_probs)
        if node.final > 0.0:
            covered += entry_end
        node.phi = (1.0 - explicit_sum) / (1.0 - covered)
        node.start_exit = exit_weights[(0, ret)]
        row = node.phi * entry_row
        succ = entry_succ.copy()
        for tok_id, p in node.arc_probs.items():
            row[tok_id] = p
            succ[tok_id] = state_index[("template", node.arcs[tok_id])]
        sid = state_index[("template", node_id)]
        rows[sid] = row
        ends[sid] = node.final if node.final > 0.0 else node.phi * entry_end
        succs[sid] = succ

    for node_id, node in enumerate(trie):
        if node.slot_child != -1:
            tabulate_slot_template(node_id)

    return OracleModel(
        grammar=grammar,
        vocab=vocab,
        alpha=alpha,
        order=order,
        state_keys=state_keys,
        rows=rows,
        ends=ends,
        succs=succs,
        start_state=state_index[("template", 0)],
        trie=trie,
        entity_states=entity_states,
        entity_context_ids=entity_context_ids,
        exit_weights=exit_weights,
        unigram=unigram,
    )


# -- generic model checks ------------------------------------------------


def enumerate_reachable_states(
    lm: LanguageModel, max_states: int | None = None
) -> list[Hashable]:
    """All states reachable from start() via scorable tokens (BFS order)."""
    scorable = lm.vocab.scorable_ids()
    start = lm.start()
    seen = {start}
    frontier = [start]
    states = [start]
    while frontier:
        nxt = []
        for state in frontier:
            for tok in scorable:
                _, succ = lm.step(state, tok)
                if succ not in seen:
                    seen.add(succ)
                    states.append(succ)
                    nxt.append(succ)
                    if max_states is not None and len(states) > max_states:
                        raise OracleCapError(
                            f"reachable state count exceeds cap {max_states}"
                        )
        frontier = nxt
    return states


@dataclass(slots=True)
class NormalizationReport:
    states_checked: int
    max_deviation: float
    worst_state: Hashable
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tolerance


def check_normalization(
    lm: LanguageModel,
    states: Iterable[Hashable] | None = None,
    tolerance: float = 1e-9,
) -> NormalizationReport:
    """Verify sum over tokens and </s> of P(.|state) equals 1 per state.

    With ``states=None`` the reachable state set is enumerated
    exhaustively, which is only sensible for small models.
    """
    if states is None:
        states = enumerate_reachable_states(lm)
    scorable = lm.vocab.scorable_ids()
    worst = 0.0
    worst_state = None
    count = 0
    for state in states:
        total = math.fsum(
            math.exp(lm.step(state, tok)[0]) for tok in scorable
        ) + math.exp(lm.end(state))
        deviation = abs(total - 1.0)
        if deviation > worst:
            worst = deviation
            worst_state = state
        count += 1
    return NormalizationReport(count, worst, worst_state, tolerance)


def exhaustive_mass(
    lm: LanguageModel, max_len: int, max_transitions: int = 10**7
) -> float:
    """Total probability of all terminated sequences of length <= max_len.

    Computed exactly by dynamic programming over the reachable state set:
    per-state transition totals are found by enumerating every scorable
    token, then the state-occupancy distribution is advanced length by
    length. Always <= 1 and non-decreasing in ``max_len``.
    """
    states = enumerate_reachable_states(lm)
    scorable = lm.vocab.scorable_ids()
    if len(states) * len(scorable) > max_transitions:
        raise OracleCapError(
            f"mass computation needs {len(states) * len(scorable)} transitions, "
            f"cap is {max_transitions}"
        )
    index = {state: i for i, state in enumerate(states)}
    edges: list[dict[int, float]] = []
    end_probs = np.empty(len(states))
    for i, state in enumerate(states):
        out: dict[int, float] = {}
        for tok in scorable:
            lp, succ = lm.step(state, tok)
            if lp == float("-inf"):
                continue
            j = index[succ]
            out[j] = out.get(j, 0.0) + math.exp(lp)
        edges.append(out)
        end_probs[i] = math.exp(lm.end(state))

    occupancy = np.zeros(len(states))
    occupancy[index[lm.start()]] = 1.0
    mass = float(occupancy @ end_probs)
    for _ in range(max_len):
        nxt = np.zeros(len(states))
        for i, out in enumerate(edges):
            p = occupancy[i]
            if p == 0.0:
                continue
            for j, q in out.items():
                nxt[j] += p * q
        occupancy = nxt
        mass += float(occupancy @ end_probs)
    return mass
