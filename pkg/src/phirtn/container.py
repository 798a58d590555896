"""Versioned binary container for trained models.

Layout (all little-endian):

    magic 'PRLM' | u16 version | u8 kind | u8 flags | u32 n_sections
    n_sections * (u16 tag, u16 reserved, u32 offset, u32 length)
    payload bytes
    u32 CRC32 of the payload

Model kinds: 0 unigram, 1 back-off n-gram, 2 phi-RTN. Offsets are
relative to the payload start. Sections hold raw numpy arrays or
length-prefixed strings; float payloads are written as raw IEEE-754
doubles so a load/save round trip reproduces scores bit for bit.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .lm import UnigramModel
from .ngram import BackoffNgramModel
from .phi_rtn import EntityFst, PhiRtnModel, TemplateFst, _FstState
from .vocab import NONTERMINAL_ID, Vocabulary

MAGIC = b"PRLM"
FORMAT_VERSION = 1

KIND_UNIGRAM = 0
KIND_BACKOFF_NGRAM = 1
KIND_PHI_RTN = 2

SEC_VOCAB = 1
SEC_SCALARS = 2
SEC_UNIGRAM_TABLE = 3
SEC_TEMPLATE_TRIE = 4
SEC_ENTITY_NGRAM = 5
SEC_PHI_WEIGHTS = 6
SEC_MARGINAL_SUMS = 7
SEC_NGRAM_PROBS = 8
SEC_NGRAM_BOWS = 9

_HEADER = struct.Struct("<4sHBBI")
_SECTION = struct.Struct("<HHII")


def write_container(kind: int, sections: list[tuple[int, bytes]]) -> bytes:
    payload = b"".join(data for _, data in sections)
    out = bytearray()
    out += _HEADER.pack(MAGIC, FORMAT_VERSION, kind, 0, len(sections))
    offset = 0
    for tag, data in sections:
        out += _SECTION.pack(tag, 0, offset, len(data))
        offset += len(data)
    out += payload
    out += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return bytes(out)


def read_container(data: bytes) -> tuple[int, dict[int, bytes]]:
    if len(data) < _HEADER.size + 4:
        raise FormatError("container truncated")
    magic, version, kind, _, n_sections = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    table_end = _HEADER.size + n_sections * _SECTION.size
    payload = data[table_end:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("payload CRC mismatch")
    sections = {}
    for i in range(n_sections):
        tag, _, offset, length = _SECTION.unpack_from(data, _HEADER.size + i * _SECTION.size)
        sections[tag] = payload[offset : offset + length]
    return kind, sections


# -- section codecs ----------------------------------------------------------


def _pack_vocab(vocab: Vocabulary) -> bytes:
    out = bytearray(struct.pack("<I", len(vocab)))
    for i in range(len(vocab)):
        encoded = vocab.token(i).encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
    return bytes(out)


def _unpack_vocab(data: bytes) -> Vocabulary:
    (count,) = struct.unpack_from("<I", data, 0)
    pos = 4
    tokens = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        tokens.append(data[pos : pos + length].decode("utf-8"))
        pos += length
    if count < 4:
        raise FormatError("vocabulary section missing reserved tokens")
    vocab = Vocabulary(nonterminal=tokens[NONTERMINAL_ID])
    for token in tokens[4:]:
        vocab.add(token)
    if vocab.decode(range(len(vocab))) != tokens:
        raise FormatError("vocabulary section is not in id order")
    return vocab


def _pack_f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def _unpack_f64(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype="<f8").copy()


def _pack_fst_states(states: list[_FstState], with_slots: bool) -> bytes:
    n = len(states)
    counts = np.array([len(s.arc_items) for s in states], dtype="<u4")
    finals = np.array([s.final_mass for s in states], dtype="<f8")
    toks = np.empty(int(counts.sum()), dtype="<u4")
    tgts = np.empty(int(counts.sum()), dtype="<u4")
    probs = np.empty(int(counts.sum()), dtype="<f8")
    pos = 0
    for s in states:
        for tok, tgt, prob in s.arc_items:
            toks[pos] = tok
            tgts[pos] = tgt
            probs[pos] = prob
            pos += 1
    parts = [struct.pack("<I", n), counts.tobytes()]
    if with_slots:
        slots = np.array([s.slot_target for s in states], dtype="<i4")
        parts.append(slots.tobytes())
    parts += [finals.tobytes(), toks.tobytes(), tgts.tobytes(), probs.tobytes()]
    return b"".join(parts)


def _unpack_fst_states(data: bytes, with_slots: bool) -> list[_FstState]:
    (n,) = struct.unpack_from("<I", data, 0)
    pos = 4
    counts = np.frombuffer(data, dtype="<u4", count=n, offset=pos)
    pos += 4 * n
    if with_slots:
        slots = np.frombuffer(data, dtype="<i4", count=n, offset=pos)
        pos += 4 * n
    finals = np.frombuffer(data, dtype="<f8", count=n, offset=pos)
    pos += 8 * n
    total = int(counts.sum())
    toks = np.frombuffer(data, dtype="<u4", count=total, offset=pos)
    pos += 4 * total
    tgts = np.frombuffer(data, dtype="<u4", count=total, offset=pos)
    pos += 4 * total
    probs = np.frombuffer(data, dtype="<f8", count=total, offset=pos)

    states = []
    arc_pos = 0
    for i in range(n):
        state = _FstState()
        state.final_mass = float(finals[i])
        if with_slots:
            state.slot_target = int(slots[i])
        for _ in range(int(counts[i])):
            state.arcs[int(toks[arc_pos])] = (int(tgts[arc_pos]), float(probs[arc_pos]))
            arc_pos += 1
        state.freeze()
        states.append(state)
    return states


def _entity_context_ids(states: list[_FstState], order: int) -> dict[tuple[int, ...], int]:
    """Rebuild context keys from arc structure (start state has key ())."""
    keep = order - 1
    contexts: dict[int, tuple[int, ...]] = {0: ()}
    frontier = [0]
    while frontier:
        nxt = []
        for sid in frontier:
            base = contexts[sid]
            for tok, tgt, _ in states[sid].arc_items:
                if tgt not in contexts:
                    contexts[tgt] = (base + (tok,))[-keep:]
                    nxt.append(tgt)
        frontier = nxt
    return {ctx: sid for sid, ctx in contexts.items()}


def _pack_ngram_table(tables: list[dict[int, float]], shift: int) -> bytes:
    parts = [struct.pack("<II", len(tables), shift)]
    mask = (1 << shift) - 1
    for k, table in enumerate(tables, start=1):
        n = len(table)
        parts.append(struct.pack("<I", n))
        if n == 0:
            continue
        if k * shift <= 62:
            codes = np.fromiter(table.keys(), dtype=np.int64, count=n)
            values = np.fromiter(table.values(), dtype=np.float64, count=n)
            order = np.argsort(codes, kind="stable")
            codes = codes[order]
            values = values[order]
            ids = np.empty((n, k), dtype="<u4")
            work = codes.copy()
            for col in range(k - 1, -1, -1):
                ids[:, col] = (work & mask).astype("<u4")
                work >>= shift
            parts.append(ids.tobytes())
            parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
        else:
            # Codes wider than 63 bits stay Python ints; pack row by row.
            ids = np.empty((n, k), dtype="<u4")
            values = np.empty(n, dtype="<f8")
            for row, code in enumerate(sorted(table)):
                values[row] = table[code]
                work = code
                for col in range(k - 1, -1, -1):
                    ids[row, col] = work & mask
                    work >>= shift
            parts.append(ids.tobytes())
            parts.append(values.tobytes())
    return b"".join(parts)


def _unpack_ngram_table(data: bytes) -> tuple[list[dict[int, float]], int]:
    n_tables, shift = struct.unpack_from("<II", data, 0)
    pos = 8
    tables = []
    for k in range(1, n_tables + 1):
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids = np.frombuffer(data, dtype="<u4", count=count * k, offset=pos).reshape(count, k)
        pos += 4 * count * k
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        if count and k * shift <= 62:
            codes = ids[:, 0].astype(np.int64)
            for col in range(1, k):
                codes = (codes << shift) | ids[:, col]
            table = dict(zip(codes.tolist(), values.tolist()))
        else:
            table = {}
            for row in range(count):
                code = 0
                for col in range(k):
                    code = (code << shift) | int(ids[row, col])
                table[code] = float(values[row])
        tables.append(table)
    return tables, shift


# -- model <-> bytes ---------------------------------------------------------


def model_to_bytes(model) -> bytes:
    if isinstance(model, PhiRtnModel):
        sections = [
            (SEC_VOCAB, _pack_vocab(model.vocab)),
            (SEC_SCALARS, struct.pack("<dI", model.alpha, model.order)),
            (SEC_UNIGRAM_TABLE, _pack_f64(model.unigram)),
            (SEC_TEMPLATE_TRIE, _pack_fst_states(model.template_fst.states, with_slots=True)),
            (SEC_ENTITY_NGRAM, _pack_fst_states(model.entity_fst.states, with_slots=False)),
            (SEC_PHI_WEIGHTS, _pack_f64(model.phi_weights) + _pack_f64(model.start_exit_weights)),
            (
                SEC_MARGINAL_SUMS,
                _pack_f64(np.array([s.marginal_uni for s in model.entity_fst.states])),
            ),
        ]
        return write_container(KIND_PHI_RTN, sections)
    if isinstance(model, BackoffNgramModel):
        sections = [
            (SEC_VOCAB, _pack_vocab(model.vocab)),
            (SEC_SCALARS, struct.pack("<I", model.order)),
            (SEC_NGRAM_PROBS, _pack_ngram_table(model.probs, model.shift)),
            (SEC_NGRAM_BOWS, _pack_ngram_table(model.bows, model.shift)),
        ]
        return write_container(KIND_BACKOFF_NGRAM, sections)
    if isinstance(model, UnigramModel):
        sections = [
            (SEC_VOCAB, _pack_vocab(model.vocab)),
            (SEC_UNIGRAM_TABLE, _pack_f64(model.probs)),
        ]
        return write_container(KIND_UNIGRAM, sections)
    raise FormatError(f"cannot serialize model of type {type(model).__name__}")


def model_from_bytes(data: bytes):
    kind, sections = read_container(data)
    vocab = _unpack_vocab(sections[SEC_VOCAB])
    if kind == KIND_UNIGRAM:
        return UnigramModel(vocab, _unpack_f64(sections[SEC_UNIGRAM_TABLE]))
    if kind == KIND_BACKOFF_NGRAM:
        (order,) = struct.unpack("<I", sections[SEC_SCALARS])
        probs, shift = _unpack_ngram_table(sections[SEC_NGRAM_PROBS])
        bows, _ = _unpack_ngram_table(sections[SEC_NGRAM_BOWS])
        return BackoffNgramModel(vocab, order, shift, probs, bows)
    if kind == KIND_PHI_RTN:
        alpha, order = struct.unpack("<dI", sections[SEC_SCALARS])
        unigram = _unpack_f64(sections[SEC_UNIGRAM_TABLE])
        t_states = _unpack_fst_states(sections[SEC_TEMPLATE_TRIE], with_slots=True)
        e_states = _unpack_fst_states(sections[SEC_ENTITY_NGRAM], with_slots=False)
        weights = _unpack_f64(sections[SEC_PHI_WEIGHTS])
        n = len(t_states)
        phi_weights, start_exit = weights[:n], weights[n:]
        marginal = _unpack_f64(sections[SEC_MARGINAL_SUMS])
        for state, value in zip(e_states, marginal):
            state.marginal_uni = float(value)
        template_fst = TemplateFst(t_states, vocab, alpha)
        entity_fst = EntityFst(
            e_states, vocab, order, alpha, _entity_context_ids(e_states, order)
        )
        return PhiRtnModel(template_fst, entity_fst, unigram, alpha, phi_weights, start_exit)
    raise FormatError(f"unknown model kind {kind}")


def serialized_size(model) -> int:
    """Exact byte length of the model's serialized form."""
    return len(model_to_bytes(model))


def save_model(model, path: str | Path) -> int:
    data = model_to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: str | Path):
    return model_from_bytes(Path(path).read_bytes())
