"""Back-off n-gram baseline: Witten-Bell estimation, entropy pruning, ARPA.

The training corpus is the (possibly capped) grammar expansion, weighted
by pseudo-counts obtained by rescaling joint probabilities so the lowest
count equals 1. Counts are fractional throughout.

Witten-Bell smoothing reserves back-off mass proportional to the number
of distinct continuation types: with c(h) the total count after history h
and t(h) the distinct-type count, an observed n-gram receives
c(h,w) / (c(h) + t(h)) and the reserved t(h) / (c(h) + t(h)) flows
through the back-off weight. No count cutoffs are applied. At the
unigram level the reserve is spread uniformly over unseen events, so
every token (including <unk>) scores above zero everywhere.

Entropy pruning removes explicit n-grams whose removal raises training
perplexity by less than a threshold theta (the weighted relative-entropy
criterion), highest order first, then recomputes back-off weights once.

Internally n-grams are packed into integer codes (``shift`` bits per
token id, leftmost token in the highest bits), so code order equals
lexicographic id order. Probabilities and back-off weights are stored as
natural logs; ARPA text uses log10.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ModelBuildError
from .grammar import ExpandedQuery
from .lm import NEG_INF
from .vocab import BOS_ID, EOS_ID, UNK_ID, Vocabulary

LN10 = math.log(10.0)
# ARPA convention for events that exist structurally but are never
# predicted (the <s> unigram).
LOG10_PSEUDO_ZERO = -99.0


@dataclass(slots=True)
class WeightedCorpus:
    """Token sequences with fractional pseudo-counts.

    Either ``sequences`` (token-string tuples) or ``blocks`` (pre-encoded
    id matrices sharing one vocabulary, one row per sequence) is set; the
    block form exists so desk-scale expansions never materialize millions
    of Python tuples.
    """

    sequences: list[tuple[str, ...]] | None = None
    weights: np.ndarray | None = None
    vocab: Vocabulary | None = None
    blocks: list[tuple[np.ndarray, np.ndarray]] | None = None

    def total_sequences(self) -> int:
        if self.blocks is not None:
            return sum(len(w) for _, w in self.blocks)
        return len(self.sequences or ())


def make_weighted_corpus(expansion: Iterable[ExpandedQuery]) -> WeightedCorpus:
    """Rescale joint probabilities so the smallest pseudo-count is exactly 1."""
    queries = list(expansion)
    if not queries:
        raise ModelBuildError("cannot build a corpus from an empty expansion")
    joints = np.array([q.joint_prob for q in queries], dtype=np.float64)
    weights = joints / joints.min()
    return WeightedCorpus(sequences=[q.tokens for q in queries], weights=weights)


class BackoffNgramModel:
    """Katz-style back-off scorer over explicit conditional probabilities."""

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        shift: int,
        probs: list[dict[int, float]],
        bows: list[dict[int, float]],
    ):
        self.vocab = vocab
        self.order = order
        self.shift = shift
        self.probs = probs  # probs[k-1]: k-gram code -> ln P(w | history)
        self.bows = bows  # bows[l-1]: length-l history code -> ln bow
        self._strip_masks = [(1 << (shift * l)) - 1 for l in range(order)]

    # -- scoring -----------------------------------------------------------

    def start(self) -> tuple[int, ...]:
        return (BOS_ID,) if self.order >= 2 else ()

    def logprob_ids(self, token_id: int, history: Sequence[int]) -> float:
        history = tuple(history)[-(self.order - 1):] if self.order >= 2 else ()
        code = 0
        for tok in history:
            code = (code << self.shift) | tok
        return self._logprob_code(token_id, code, len(history))

    def _logprob_code(self, token_id: int, hist_code: int, hist_len: int) -> float:
        total = 0.0
        while True:
            code = (hist_code << self.shift) | token_id
            lp = self.probs[hist_len].get(code)
            if lp is not None:
                return total + lp
            if hist_len == 0:
                return NEG_INF
            total += self.bows[hist_len - 1].get(hist_code, 0.0)
            hist_len -= 1
            hist_code &= self._strip_masks[hist_len]

    def step(self, state: tuple[int, ...], token_id: int) -> tuple[float, tuple[int, ...]]:
        lp = self.logprob_ids(token_id, state)
        if self.order < 2:
            return lp, ()
        history = (state + (token_id,))[-(self.order - 1):]
        # Shrink to the longest history that exists as a context.
        while history:
            code = 0
            for tok in history:
                code = (code << self.shift) | tok
            if code in self.bows[len(history) - 1]:
                break
            history = history[1:]
        return lp, history

    def end(self, state: tuple[int, ...]) -> float:
        return self.logprob_ids(EOS_ID, state)

    # -- structure ---------------------------------------------------------

    def explicit_entry_count(self) -> int:
        return sum(len(t) for t in self.probs)

    def decode_code(self, code: int, length: int) -> tuple[int, ...]:
        mask = (1 << self.shift) - 1
        ids = []
        for _ in range(length):
            ids.append(code & mask)
            code >>= self.shift
        return tuple(reversed(ids))

    def histories(self, length: int) -> Iterator[int]:
        """Distinct history codes with explicit continuations of that length."""
        seen = set()
        for code in self.probs[length]:
            seen.add(code >> self.shift)
        return iter(sorted(seen))


def _shift_for(vocab: Vocabulary) -> int:
    return max(1, (len(vocab) - 1).bit_length())


def _count_events(
    corpus: WeightedCorpus, vocab: Vocabulary, order: int, shift: int
) -> list[dict[int, float]]:
    """Fractional k-gram counts for k = 1..order, keyed by packed code.

    Sequences are padded with one <s> context token; </s> is counted as a
    predicted event. A position contributes to order k only when its full
    (k-1)-token history (possibly starting at <s>) is available, matching
    how the scorer queries growing histories after the sequence start.
    """
    counts: list[dict[int, float]] = [{} for _ in range(order)]
    if corpus.blocks is not None:
        for matrix, weights in corpus.blocks:
            _count_block(matrix, weights, order, shift, counts)
        return counts
    assert corpus.sequences is not None and corpus.weights is not None
    for tokens, weight in zip(corpus.sequences, corpus.weights):
        ids = vocab.encode(tokens)
        padded = [BOS_ID] + ids
        weight = float(weight)
        for i in range(len(ids) + 1):
            word = ids[i] if i < len(ids) else EOS_ID
            for k in range(1, order + 1):
                lo = i + 1 - (k - 1)
                if lo < 0:
                    continue
                code = 0
                for tok in padded[lo : i + 1]:
                    code = (code << shift) | tok
                code = (code << shift) | word
                table = counts[k - 1]
                table[code] = table.get(code, 0.0) + weight
    return counts


def _count_block(
    matrix: np.ndarray,
    weights: np.ndarray,
    order: int,
    shift: int,
    counts: list[dict[int, float]],
) -> None:
    """Vectorized counting over a fixed-length block of encoded sequences."""
    rows, length = matrix.shape
    if order * shift > 62:
        raise ModelBuildError("n-gram codes exceed 63 bits; vocabulary too large")
    padded = np.empty((rows, length + 2), dtype=np.int64)
    padded[:, 0] = BOS_ID
    padded[:, 1 : length + 1] = matrix
    padded[:, length + 1] = EOS_ID
    weights = np.asarray(weights, dtype=np.float64)
    for k in range(1, order + 1):
        all_codes = []
        all_sums = []
        for j in range(1, length + 2):
            lo = j - (k - 1)
            if lo < 0:
                continue
            code = padded[:, lo].copy()
            for c in range(lo + 1, j + 1):
                code <<= shift
                code |= padded[:, c]
            uniq, inverse = np.unique(code, return_inverse=True)
            sums = np.bincount(inverse, weights=weights, minlength=len(uniq))
            all_codes.append(uniq)
            all_sums.append(sums)
        if not all_codes:
            continue
        codes = np.concatenate(all_codes)
        sums = np.concatenate(all_sums)
        uniq, inverse = np.unique(codes, return_inverse=True)
        totals = np.bincount(inverse, weights=sums, minlength=len(uniq))
        table = counts[k - 1]
        for code, total in zip(uniq.tolist(), totals.tolist()):
            table[code] = table.get(code, 0.0) + total


class _SortedTables:
    """Sorted-array view of code-keyed log tables for vectorized lookups."""

    def __init__(self, shift: int, order: int):
        self.shift = shift
        self.strip_masks = [(1 << (shift * l)) - 1 for l in range(order)]
        self.prob_codes: list[np.ndarray] = []
        self.prob_values: list[np.ndarray] = []
        self.bow_codes: list[np.ndarray] = []
        self.bow_values: list[np.ndarray] = []

    @staticmethod
    def _sorted_arrays(table: dict[int, float]) -> tuple[np.ndarray, np.ndarray]:
        n = len(table)
        codes = np.fromiter(table.keys(), dtype=np.int64, count=n)
        values = np.fromiter(table.values(), dtype=np.float64, count=n)
        order = np.argsort(codes, kind="stable")
        return codes[order], values[order]

    def add_prob_level(self, table: dict[int, float]) -> None:
        codes, values = self._sorted_arrays(table)
        self.prob_codes.append(codes)
        self.prob_values.append(values)

    def add_bow_level(self, table: dict[int, float]) -> None:
        codes, values = self._sorted_arrays(table)
        self.bow_codes.append(codes)
        self.bow_values.append(values)

    @staticmethod
    def _lookup(
        codes: np.ndarray, table_codes: np.ndarray, table_values: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        if len(table_codes) == 0:
            return np.zeros(len(codes)), np.zeros(len(codes), dtype=bool)
        pos = np.searchsorted(table_codes, codes)
        pos_safe = np.minimum(pos, len(table_codes) - 1)
        found = table_codes[pos_safe] == codes
        return table_values[pos_safe], found

    def chain_logprob(
        self, words: np.ndarray, hists: np.ndarray, hist_len: int
    ) -> np.ndarray:
        """Vectorized back-off chain: ln P(word | hist) for equal-length hists."""
        out = np.full(len(words), NEG_INF)
        acc = np.zeros(len(words))
        idx = np.arange(len(words))
        cur_words = words.astype(np.int64)
        cur_hists = hists.astype(np.int64)
        length = hist_len
        while True:
            codes = (cur_hists << self.shift) | cur_words
            values, found = self._lookup(
                codes, self.prob_codes[length], self.prob_values[length]
            )
            out[idx[found]] = acc[found] + values[found]
            if length == 0 or not (~found).any():
                return out
            rem = ~found
            idx = idx[rem]
            cur_words = cur_words[rem]
            bvals, bfound = self._lookup(
                cur_hists[rem], self.bow_codes[length - 1], self.bow_values[length - 1]
            )
            acc = acc[rem] + np.where(bfound, bvals, 0.0)
            length -= 1
            cur_hists = cur_hists[rem] & self.strip_masks[length]


def _recompute_bows(
    probs: list[dict[int, float]], shift: int, order: int
) -> list[dict[int, float]]:
    """Back-off weights satisfying the per-history normalization identity.

    bow(h) = (1 - sum of explicit P(w|h)) / (1 - sum of backed-off
    P(w|h')) over the same explicit set; computed bottom-up so lower
    lookups are final.
    """
    if shift * order <= 62:
        return _recompute_bows_arrays(probs, shift, order)
    return _recompute_bows_dicts(probs, shift, order)


def _recompute_bows_arrays(
    probs: list[dict[int, float]], shift: int, order: int
) -> list[dict[int, float]]:
    bows: list[dict[int, float]] = [{} for _ in range(max(order - 1, 0))]
    tables = _SortedTables(shift, order)
    tables.add_prob_level(probs[0])
    word_mask = (1 << shift) - 1
    for length in range(1, order):
        level = probs[length]
        table = bows[length - 1]
        if level:
            codes, values = _SortedTables._sorted_arrays(level)
            hists = codes >> shift
            starts = np.concatenate(
                ([0], np.flatnonzero(hists[1:] != hists[:-1]) + 1)
            )
            explicit = np.add.reduceat(np.exp(values), starts)
            lower_hists = hists & tables.strip_masks[length - 1]
            lower_lps = tables.chain_logprob(codes & word_mask, lower_hists, length - 1)
            passed = np.add.reduceat(np.exp(lower_lps), starts)
            nums = np.maximum(1.0 - explicit, 0.0)
            dens = 1.0 - passed
            if np.any(dens <= 0.0):
                bad = hists[starts[int(np.argmax(dens <= 0.0))]]
                raise ModelBuildError(
                    f"degenerate back-off normalization for history code {bad}"
                )
            with np.errstate(divide="ignore"):
                logs = np.log(nums / dens)
            for hist, value in zip(hists[starts].tolist(), logs.tolist()):
                table[hist] = value
        tables.add_prob_level(level)
        tables.add_bow_level(table)
    return bows


def _recompute_bows_dicts(
    probs: list[dict[int, float]], shift: int, order: int
) -> list[dict[int, float]]:
    bows: list[dict[int, float]] = [{} for _ in range(max(order - 1, 0))]
    strip_masks = [(1 << (shift * l)) - 1 for l in range(order)]

    def logprob(token_id: int, hist_code: int, hist_len: int) -> float:
        total = 0.0
        while True:
            code = (hist_code << shift) | token_id
            lp = probs[hist_len].get(code)
            if lp is not None:
                return total + lp
            if hist_len == 0:
                return NEG_INF
            total += bows[hist_len - 1].get(hist_code, 0.0)
            hist_len -= 1
            hist_code &= strip_masks[hist_len]

    word_mask = (1 << shift) - 1
    for length in range(1, order):
        groups: dict[int, list[int]] = {}
        for code in probs[length]:
            groups.setdefault(code >> shift, []).append(code)
        table = bows[length - 1]
        for hist, codes in groups.items():
            explicit = math.fsum(math.exp(probs[length][c]) for c in codes)
            lower_hist = hist & strip_masks[length - 1]
            passed = math.fsum(
                math.exp(logprob(c & word_mask, lower_hist, length - 1)) for c in codes
            )
            num = max(1.0 - explicit, 0.0)
            den = 1.0 - passed
            if den <= 0.0:
                raise ModelBuildError(
                    f"degenerate back-off normalization for history code {hist}"
                )
            table[hist] = math.log(num / den) if num > 0.0 else NEG_INF
    return bows


def estimate_witten_bell(
    corpus: WeightedCorpus,
    order: int,
    vocab: Vocabulary | None = None,
    unk_floor: float = 1e-10,
) -> BackoffNgramModel:
    """Witten-Bell back-off model with fractional counts and no cutoffs.

    Every observed n-gram is retained. ``unk_floor`` mixes a guaranteed
    minimum into the unigram's <unk> probability (mass-preserving), so
    out-of-vocabulary tokens always score finitely.
    """
    if order < 1:
        raise ModelBuildError(f"n-gram order must be >= 1, got {order}")
    if corpus.blocks is not None:
        if vocab is not None and corpus.vocab is not None and vocab is not corpus.vocab:
            raise ModelBuildError("block corpus is already encoded with its own vocabulary")
        vocab = corpus.vocab
        if vocab is None:
            raise ModelBuildError("block corpus requires a vocabulary")
    elif vocab is None:
        vocab = corpus.vocab
        if vocab is None:
            tokens: set[str] = set()
            for seq in corpus.sequences or ():
                tokens.update(seq)
            vocab = Vocabulary.from_tokens(tokens)

    shift = _shift_for(vocab)
    counts = _count_events(corpus, vocab, order, shift)

    probs: list[dict[int, float]] = [{} for _ in range(order)]

    # Unigram level: Witten-Bell over observed events, reserve spread
    # uniformly over unseen ones so the table covers every event.
    uni_counts = counts[0]
    total = math.fsum(uni_counts.values())
    types = len(uni_counts)
    denom = total + types
    events = set(vocab.scorable_ids())
    events.add(EOS_ID)
    unseen = events - set(uni_counts)
    table = {}
    if unseen:
        reserve = types / denom
        for code, count in uni_counts.items():
            table[code] = count / denom
        share = reserve / len(unseen)
        for code in unseen:
            table[code] = share
    else:
        for code, count in uni_counts.items():
            table[code] = count / total
    if unk_floor > 0.0:
        for code in table:
            table[code] *= 1.0 - unk_floor
        table[UNK_ID] = table.get(UNK_ID, 0.0) + unk_floor
    probs[0] = {code: math.log(p) for code, p in table.items()}
    probs[0][BOS_ID] = LOG10_PSEUDO_ZERO * LN10

    for k in range(2, order + 1):
        k_counts = counts[k - 1]
        if k_counts and shift * order <= 62:
            codes, values = _SortedTables._sorted_arrays(k_counts)
            hists = codes >> shift
            starts = np.concatenate(([0], np.flatnonzero(hists[1:] != hists[:-1]) + 1))
            totals = np.add.reduceat(values, starts)
            types = np.diff(np.concatenate((starts, [len(codes)])))
            group_of = np.repeat(np.arange(len(starts)), types)
            logs = np.log(values / (totals[group_of] + types[group_of]))
            probs[k - 1] = dict(zip(codes.tolist(), logs.tolist()))
            continue
        hist_totals: dict[int, float] = {}
        hist_types: dict[int, int] = {}
        for code, count in k_counts.items():
            hist = code >> shift
            hist_totals[hist] = hist_totals.get(hist, 0.0) + count
            hist_types[hist] = hist_types.get(hist, 0) + 1
        level = {}
        for code, count in k_counts.items():
            hist = code >> shift
            level[code] = math.log(count / (hist_totals[hist] + hist_types[hist]))
        probs[k - 1] = level

    bows = _recompute_bows(probs, shift, order)
    return BackoffNgramModel(vocab, order, shift, probs, bows)


def paper_theta_sweep() -> list[float]:
    """Pruning thresholds used by the size/perplexity trade-off sweep."""
    return [0.0] + [4.0**-i for i in range(4, 20)]


def entropy_prune(model: BackoffNgramModel, theta: float) -> BackoffNgramModel:
    """Stolcke-pruned copy of ``model``.

    An explicit n-gram (h, w) is removed when the weighted relative
    entropy increase of backing it off is below ``theta``:

        BOW'(h)  = (num(h) + P(w|h)) / (den(h) + P(w|h'))
        dlogP    = ln P(w|h') + ln BOW'(h) - ln P(w|h)
        dH       = -P(h) * (P(w|h) * dlogP + num(h) * (ln BOW'(h) - ln BOW(h)))
        prune if exp(dH) - 1 < theta

    num/den are the back-off weight's numerator and denominator under the
    current tables. Entries whose (h, w) still has surviving longer-order
    continuations are never removed. Highest orders prune first, using the
    original model's statistics; back-off weights are recomputed once at
    the end. theta = 0 is the identity.
    """
    if theta < 0.0:
        raise ModelBuildError(f"pruning threshold must be >= 0, got {theta}")
    probs = [dict(t) for t in model.probs]
    if theta == 0.0 or model.order < 2:
        return BackoffNgramModel(
            model.vocab, model.order, model.shift, probs, [dict(t) for t in model.bows]
        )

    shift = model.shift
    word_mask = (1 << shift) - 1
    strip_masks = model._strip_masks

    def lower_logprob(token_id: int, hist_code: int, hist_len: int) -> float:
        # Lower orders are untouched while order k is processed, so the
        # original model's lookup is exact for them.
        return model._logprob_code(token_id, hist_code, hist_len)

    def history_logprob(hist_code: int, hist_len: int) -> float:
        ids = model.decode_code(hist_code, hist_len)
        total = 0.0
        for i, tok in enumerate(ids):
            ctx = 0
            for t in ids[max(0, i - (model.order - 1)) : i]:
                ctx = (ctx << shift) | t
            total += model._logprob_code(tok, ctx, min(i, model.order - 1))
        return total

    for k in range(model.order, 1, -1):
        table = probs[k - 1]
        if not table:
            continue
        live: set[int] = set()
        if k < model.order:
            live = {code >> shift for code in probs[k]}
        groups: dict[int, list[int]] = {}
        for code in table:
            groups.setdefault(code >> shift, []).append(code)
        for hist, codes in groups.items():
            hist_len = k - 1
            explicit = math.fsum(math.exp(table[c]) for c in codes)
            lower_hist = hist & strip_masks[hist_len - 1]
            lower_lps = {c: lower_logprob(c & word_mask, lower_hist, hist_len - 1) for c in codes}
            passed = math.fsum(math.exp(lp) for lp in lower_lps.values())
            num = 1.0 - explicit
            den = 1.0 - passed
            if den <= 0.0 or num <= 0.0:
                continue
            old_bow = model.bows[hist_len - 1].get(hist, 0.0)
            hist_lp = history_logprob(hist, hist_len)
            hist_p = math.exp(hist_lp)
            pruned = []
            for code in codes:
                if code in live:
                    continue
                logp = table[code]
                lower_lp = lower_lps[code]
                new_bow = math.log(num + math.exp(logp)) - math.log(
                    den + math.exp(lower_lp)
                )
                delta_logp = lower_lp + new_bow - logp
                delta_entropy = -hist_p * (
                    math.exp(logp) * delta_logp + num * (new_bow - old_bow)
                )
                if math.expm1(delta_entropy) < theta:
                    pruned.append(code)
            for code in pruned:
                del table[code]

    bows = _recompute_bows(probs, shift, model.order)
    return BackoffNgramModel(model.vocab, model.order, shift, probs, bows)


# -- ARPA text format ----------------------------------------------------


def export_arpa(model: BackoffNgramModel) -> str:
    """Serialize to ARPA text (log10, 7 decimal places, id-sorted entries)."""
    lines = ["\\data\\"]
    for k in range(1, model.order + 1):
        lines.append(f"ngram {k}={len(model.probs[k - 1])}")
    lines.append("")
    for k in range(1, model.order + 1):
        lines.append(f"\\{k}-grams:")
        bow_table = model.bows[k - 1] if k - 1 < len(model.bows) else {}
        for code in sorted(model.probs[k - 1]):
            logp10 = model.probs[k - 1][code] / LN10
            tokens = " ".join(model.vocab.decode(model.decode_code(code, k)))
            line = f"{logp10:.7f}\t{tokens}"
            bow = bow_table.get(code)
            if bow is not None:
                line += f"\t{bow / LN10:.7f}"
            lines.append(line)
        lines.append("")
    lines.append("\\end\\")
    lines.append("")
    return "\n".join(lines)


def import_arpa(text: str) -> BackoffNgramModel:
    """Parse ARPA text into a scorer; inverse of :func:`export_arpa`."""
    lines = iter(text.splitlines())
    for line in lines:
        if line.strip() == "\\data\\":
            break
    else:
        raise FormatError("ARPA text has no \\data\\ header")
    declared: dict[int, int] = {}
    for line in lines:
        line = line.strip()
        if not line:
            break
        if not line.startswith("ngram "):
            raise FormatError(f"unexpected line in \\data\\ section: {line!r}")
        spec, _, count = line[len("ngram "):].partition("=")
        try:
            declared[int(spec)] = int(count)
        except ValueError:
            raise FormatError(f"bad ngram count line: {line!r}") from None
    if not declared:
        raise FormatError("ARPA \\data\\ section declares no n-gram orders")
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise FormatError("ARPA \\data\\ section skips an n-gram order")

    entries: list[list[tuple[float, tuple[str, ...], float | None]]] = [
        [] for _ in range(order)
    ]
    current = None
    ended = False
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line == "\\end\\":
            ended = True
            break
        if line.endswith("-grams:") and line.startswith("\\"):
            current = int(line[1:-7])
            if current not in declared:
                raise FormatError(f"section for undeclared order {current}")
            continue
        if current is None:
            raise FormatError(f"entry before any n-gram section: {line!r}")
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) == 2:
            logp, tokens_part = parts
            bow = None
        elif len(parts) == 3:
            logp, tokens_part, bow = parts
        else:
            raise FormatError(f"malformed n-gram line: {line!r}")
        tokens = tuple(tokens_part.split())
        if len(tokens) != current:
            raise FormatError(
                f"{current}-gram line has {len(tokens)} tokens: {line!r}"
            )
        try:
            logp_value = float(logp)
            bow_value = float(bow) if bow is not None else None
        except ValueError:
            raise FormatError(f"bad number on line: {line!r}") from None
        if not math.isfinite(logp_value) or (
            bow_value is not None and not math.isfinite(bow_value)
        ):
            raise FormatError(f"non-finite value on line: {line!r}")
        entries[current - 1].append((logp_value, tokens, bow_value))
    if not ended:
        raise FormatError("ARPA text has no \\end\\ marker")
    for k, count in declared.items():
        if len(entries[k - 1]) != count:
            raise FormatError(
                f"order {k} declares {count} entries but lists {len(entries[k - 1])}"
            )

    vocab = Vocabulary()
    for logp_value, tokens, _ in entries[0]:
        vocab.add(tokens[0])
    for k in range(2, order + 1):
        for _, tokens, _ in entries[k - 1]:
            for tok in tokens:
                vocab.add(tok)
    shift = _shift_for(vocab)
    probs: list[dict[int, float]] = [{} for _ in range(order)]
    bows: list[dict[int, float]] = [{} for _ in range(max(order - 1, 0))]
    for k in range(1, order + 1):
        for logp_value, tokens, bow_value in entries[k - 1]:
            code = 0
            for tok in tokens:
                code = (code << shift) | vocab.id(tok)
            probs[k - 1][code] = logp_value * LN10
            if bow_value is not None:
                if k - 1 >= len(bows):
                    raise FormatError(
                        f"back-off weight on a highest-order entry: {tokens}"
                    )
                bows[k - 1][code] = bow_value * LN10
    return BackoffNgramModel(vocab, order, shift, probs, bows)
