"""Text to encoder input for the three supported families.

bert uses basic pre-tokenization plus greedy longest-match WordPiece,
roberta uses byte-level BPE driven by merge ranks, and xlm-roberta uses
maximum-likelihood unigram segmentation solved with a Viterbi pass over a
piece/score table. Vocabulary files are read exactly as published in hub
repos: newline-delimited ``vocab.txt``, ``vocab.json`` plus ``merges.txt``,
or the combined ``tokenizer.json`` with a unigram vocab.

All vocab objects are immutable after load and the encode functions are
reentrant; the only mutable state is the BPE per-pretoken cache, which is a
plain dict guarded by the interpreter lock.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import regex

from .tensor import DType, Tensor

MAX_SEQUENCE_LENGTH = 512
WORDPIECE_MAX_WORD_CHARS = 100
UNIGRAM_UNK_PENALTY = 10.0


class VocabError(ValueError):
    """A vocabulary file is malformed or inconsistent."""


@dataclass(frozen=True)
class SpecialTokens:
    cls_id: int    # cls or bos
    sep_id: int    # sep or eos
    pad_id: int
    unk_id: int
    mask_id: int


@dataclass(frozen=True)
class Encoding:
    input_ids: Tensor
    attention_mask: Tensor
    token_type_ids: Tensor

    def to_encoder_input(self):
        from .models import EncoderInput

        return EncoderInput(self.input_ids, self.attention_mask, self.token_type_ids)


# ---------------------------------------------------------------------------
# bert: basic tokenization + WordPiece
# ---------------------------------------------------------------------------

def _is_whitespace(ch: str) -> bool:
    if ch in " \t\n\r":
        return True
    return unicodedata.category(ch) == "Zs"


def _is_control(ch: str) -> bool:
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch).startswith("C")


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if (33 <= cp <= 47) or (58 <= cp <= 64) or (91 <= cp <= 96) or (123 <= cp <= 126):
        return True
    return unicodedata.category(ch).startswith("P")


def _is_cjk(cp: int) -> bool:
    return (
        0x4E00 <= cp <= 0x9FFF or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF or 0x2A700 <= cp <= 0x2B73F
        or 0x2B740 <= cp <= 0x2B81F or 0x2B820 <= cp <= 0x2CEAF
        or 0xF900 <= cp <= 0xFAFF or 0x2F800 <= cp <= 0x2FA1F
    )


def basic_tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace and punctuation split with the bert cleanup rules.

    Control characters are dropped, CJK ideographs become standalone tokens,
    punctuation splits into single-character tokens, and lowercasing also
    removes combining marks.
    """
    cleaned = []
    for ch in text:
        cp = ord(ch)
        if cp == 0 or cp == 0xFFFD or _is_control(ch):
            continue
        if _is_cjk(cp):
            cleaned.append(f" {ch} ")
        elif _is_whitespace(ch):
            cleaned.append(" ")
        else:
            cleaned.append(ch)
    out: list[str] = []
    for word in "".join(cleaned).split():
        if lowercase:
            word = word.lower()
            word = "".join(
                c for c in unicodedata.normalize("NFD", word)
                if unicodedata.category(c) != "Mn"
            )
        current = []
        for ch in word:
            if _is_punctuation(ch):
                if current:
                    out.append("".join(current))
                    current = []
                out.append(ch)
            else:
                current.append(ch)
        if current:
            out.append("".join(current))
    return out


@dataclass(frozen=True)
class WordPieceVocab:
    token_to_id: Mapping[str, int]
    lowercase: bool = True
    continuation: str = "##"
    max_word_chars: int = WORDPIECE_MAX_WORD_CHARS
    unk_token: str = "[UNK]"

    def __post_init__(self):
        if self.unk_token not in self.token_to_id:
            raise VocabError(f"vocab has no {self.unk_token!r} entry")

    @property
    def unk_id(self) -> int:
        return self.token_to_id[self.unk_token]

    def __len__(self) -> int:
        return len(self.token_to_id)


def load_wordpiece(path: str | Path, lowercase: bool = True) -> WordPieceVocab:
    token_to_id: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            token = line.rstrip("\n")
            if token:
                token_to_id.setdefault(token, i)
    return WordPieceVocab(token_to_id, lowercase=lowercase)


def wordpiece_encode(words: Iterable[str], vocab: WordPieceVocab) -> list[int]:
    """Greedy longest-match-first subword split of pre-tokenized words."""
    ids: list[int] = []
    for word in words:
        if len(word) > vocab.max_word_chars:
            ids.append(vocab.unk_id)
            continue
        pieces: list[int] | None = []
        start = 0
        while start < len(word):
            end = len(word)
            piece_id = None
            while start < end:
                sub = word[start:end]
                if start > 0:
                    sub = vocab.continuation + sub
                if sub in vocab.token_to_id:
                    piece_id = vocab.token_to_id[sub]
                    break
                end -= 1
            if piece_id is None:
                pieces = None
                break
            pieces.append(piece_id)
            start = end
        ids.extend(pieces if pieces is not None else [vocab.unk_id])
    return ids


# ---------------------------------------------------------------------------
# roberta: byte-level BPE
# ---------------------------------------------------------------------------

def byte_to_unicode_table() -> dict[int, str]:
    """Bijection from byte values to printable codepoints.

    Printable latin bytes map to themselves; the rest shift into the
    256..288 range so every byte has a visible stand-in.
    """
    keep = (list(range(ord("!"), ord("~") + 1))
            + list(range(0xA1, 0xAC + 1))
            + list(range(0xAE, 0xFF + 1)))
    mapped = keep[:]
    bump = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            mapped.append(256 + bump)
            bump += 1
    return dict(zip(keep, (chr(c) for c in mapped)))


_BYTE_TABLE = byte_to_unicode_table()
_BYTE_TABLE_INV = {v: k for k, v in _BYTE_TABLE.items()}

# contractions, letter runs, digit runs, other runs, then whitespace
_PRETOKEN_RE = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


@dataclass(frozen=True)
class BpeVocab:
    token_to_id: Mapping[str, int]
    merge_ranks: Mapping[tuple[str, str], int]
    unk_token: str = "<unk>"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        missing = [a for pair in self.merge_ranks for a in pair if len(a) == 0]
        if missing:
            raise VocabError("merge list contains empty symbols")
        if len(set(_BYTE_TABLE.values())) != 256:
            raise VocabError("byte table is not a bijection")

    def __len__(self) -> int:
        return len(self.token_to_id)


def load_bpe(vocab_path: str | Path, merges_path: str | Path) -> BpeVocab:
    with open(vocab_path, encoding="utf-8") as fh:
        token_to_id = json.load(fh)
    if not isinstance(token_to_id, dict):
        raise VocabError("vocab.json must map tokens to ids")
    ranks: dict[tuple[str, str], int] = {}
    with open(merges_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#version"):
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise VocabError(f"bad merge line {line!r}")
            ranks[(parts[0], parts[1])] = len(ranks)
    return BpeVocab(token_to_id, ranks)


def _merge_word(word: tuple[str, ...], ranks: Mapping[tuple[str, str], int]) -> tuple[str, ...]:
    while len(word) > 1:
        pairs = set(zip(word, word[1:]))
        best = min(pairs, key=lambda p: ranks.get(p, float("inf")))
        if best not in ranks:
            break
        first, second = best
        merged: list[str] = []
        i = 0
        while i < len(word):
            try:
                j = word.index(first, i)
            except ValueError:
                merged.extend(word[i:])
                break
            merged.extend(word[i:j])
            if j < len(word) - 1 and word[j + 1] == second:
                merged.append(first + second)
                i = j + 2
            else:
                merged.append(word[j])
                i = j + 1
        word = tuple(merged)
    return word


def bpe_encode(text: str, vocab: BpeVocab) -> list[int]:
    """Rank-ordered merges over byte-mapped pretokens.

    The lowest-rank adjacent pair merges first wherever it occurs, so merge
    order follows training rank, not text position.
    """
    ids: list[int] = []
    for pretoken in _PRETOKEN_RE.findall(text):
        pieces = vocab._cache.get(pretoken)
        if pieces is None:
            word = tuple(_BYTE_TABLE[b] for b in pretoken.encode("utf-8"))
            pieces = _merge_word(word, vocab.merge_ranks)
            vocab._cache[pretoken] = pieces
        for piece in pieces:
            if piece not in vocab.token_to_id:
                raise VocabError(
                    f"piece {piece!r} survived merging but is not in the vocab; "
                    "vocab.json and merges.txt disagree"
                )
            ids.append(vocab.token_to_id[piece])
    return ids


def bpe_decode(ids: Sequence[int], vocab: BpeVocab) -> str:
    by_id = {v: k for k, v in vocab.token_to_id.items()}
    chars = "".join(by_id[i] for i in ids)
    return bytes(_BYTE_TABLE_INV[c] for c in chars).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# xlm-roberta: unigram
# ---------------------------------------------------------------------------

METASPACE = "▁"


@dataclass(frozen=True)
class UnigramVocab:
    pieces: Mapping[str, tuple[int, float]]   # piece -> (id, log prob)
    unk_id: int
    special_pieces: frozenset[str] = frozenset()
    fuse_unk: bool = False
    max_piece_len: int = 1
    min_score: float = 0.0

    def __len__(self) -> int:
        return len(self.pieces)


def build_unigram_vocab(entries: Sequence[tuple[str, float]], unk_id: int,
                        special_pieces: Iterable[str] = (), fuse_unk: bool = False
                        ) -> UnigramVocab:
    specials = frozenset(special_pieces)
    pieces: dict[str, tuple[int, float]] = {}
    for idx, (piece, score) in enumerate(entries):
        if (not np.isfinite(score) or score > 0.0) and piece not in specials:
            raise VocabError(f"piece {piece!r} has invalid log prob {score}")
        pieces.setdefault(piece, (idx, float(score)))
    matchable = [s for p, (_, s) in pieces.items() if p not in specials]
    min_score = min(matchable) if matchable else 0.0
    max_len = max((len(p) for p in pieces if p not in specials), default=1)
    return UnigramVocab(pieces, unk_id, specials, fuse_unk, max_len, min_score)


def load_unigram(path: str | Path) -> UnigramVocab:
    """Read the combined tokenizer description file (unigram model section)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    model = doc.get("model", {})
    if model.get("type") != "Unigram":
        raise VocabError(f"expected a Unigram model section, got {model.get('type')!r}")
    entries = [(piece, float(score)) for piece, score in model["vocab"]]
    specials = [tok["content"] for tok in doc.get("added_tokens", []) if tok.get("special")]
    return build_unigram_vocab(
        entries,
        unk_id=int(model["unk_id"]),
        special_pieces=specials,
        fuse_unk=bool(model.get("fuse_unk", False)),
    )


def _metaspace(text: str) -> str:
    words = text.split()
    if not words:
        return ""
    return METASPACE + METASPACE.join(words)


def unigram_encode(text: str, vocab: UnigramVocab) -> list[int]:
    """Viterbi maximum-likelihood segmentation.

    Characters not covered by any piece emit the unk id at a fixed penalty
    of ``min in-vocab log prob - 10``. Exact score ties prefer fewer pieces,
    then the lexicographically smaller piece sequence.
    """
    s = _metaspace(text)
    n = len(s)
    if n == 0:
        return []
    unk_score = vocab.min_score - UNIGRAM_UNK_PENALTY
    neg_inf = -float("inf")
    best_score = [neg_inf] * (n + 1)
    best_count = [0] * (n + 1)
    back: list[tuple[int, str, int] | None] = [None] * (n + 1)  # (start, piece, id)
    best_score[0] = 0.0

    def chain(pos: int) -> list[str]:
        out = []
        while pos > 0:
            start, piece, _ = back[pos]
            out.append(piece)
            pos = start
        return out[::-1]

    for end in range(1, n + 1):
        for start in range(max(0, end - vocab.max_piece_len), end):
            if best_score[start] == neg_inf:
                continue
            piece = s[start:end]
            entry = vocab.pieces.get(piece)
            if entry is not None and piece not in vocab.special_pieces:
                cand_id, score = entry
            elif end - start == 1:
                cand_id, score = vocab.unk_id, unk_score
            else:
                continue
            cand_score = best_score[start] + score
            cand_count = best_count[start] + 1
            if cand_score > best_score[end]:
                take = True
            elif cand_score == best_score[end]:
                if cand_count != best_count[end]:
                    take = cand_count < best_count[end]
                else:
                    take = chain(start) + [piece] < chain(end)
            else:
                take = False
            if take:
                best_score[end] = cand_score
                best_count[end] = cand_count
                back[end] = (start, piece, cand_id)

    ids: list[int] = []
    pos = n
    while pos > 0:
        start, _, piece_id = back[pos]
        ids.append(piece_id)
        pos = start
    ids.reverse()
    if vocab.fuse_unk:
        fused: list[int] = []
        for i in ids:
            if fused and i == vocab.unk_id and fused[-1] == vocab.unk_id:
                continue
            fused.append(i)
        ids = fused
    return ids


# ---------------------------------------------------------------------------
# family facade + batching
# ---------------------------------------------------------------------------

_BERT_SPECIAL_NAMES = ("[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]")
_ROBERTA_SPECIAL_NAMES = ("<s>", "</s>", "<pad>", "<unk>", "<mask>")


@dataclass(frozen=True)
class FamilyTokenizer:
    family: str
    specials: SpecialTokens
    vocab: WordPieceVocab | BpeVocab | UnigramVocab
    vocab_size: int

    def encode_text(self, text: str) -> list[int]:
        """Token ids for one text, without specials."""
        if self.family == "bert":
            return wordpiece_encode(basic_tokenize(text, self.vocab.lowercase), self.vocab)
        if self.family == "roberta":
            return bpe_encode(text, self.vocab)
        return unigram_encode(text, self.vocab)


def _specials_from_mapping(token_to_id: Mapping[str, int], names) -> SpecialTokens:
    missing = [n for n in names if n not in token_to_id]
    if missing:
        raise VocabError(f"vocab lacks special tokens: {missing}")
    cls_t, sep_t, pad_t, unk_t, mask_t = names
    return SpecialTokens(
        cls_id=token_to_id[cls_t],
        sep_id=token_to_id[sep_t],
        pad_id=token_to_id[pad_t],
        unk_id=token_to_id[unk_t],
        mask_id=token_to_id[mask_t],
    )


def load_tokenizer(family: str, files: Mapping[str, Path]) -> FamilyTokenizer:
    """Build a tokenizer from the files fetched for a checkpoint repo."""
    if family == "bert":
        lowercase = True
        cfg_path = files.get("tokenizer_config.json")
        if cfg_path is not None:
            tk_cfg = json.loads(Path(cfg_path).read_text())
            lowercase = bool(tk_cfg.get("do_lower_case", True))
        vocab = load_wordpiece(files["vocab.txt"], lowercase=lowercase)
        specials = _specials_from_mapping(vocab.token_to_id, _BERT_SPECIAL_NAMES)
        return FamilyTokenizer("bert", specials, vocab, len(vocab.token_to_id))
    if family == "roberta":
        vocab = load_bpe(files["vocab.json"], files["merges.txt"])
        specials = _specials_from_mapping(vocab.token_to_id, _ROBERTA_SPECIAL_NAMES)
        return FamilyTokenizer("roberta", specials, vocab, len(vocab.token_to_id))
    if family == "xlm-roberta":
        vocab = load_unigram(files["tokenizer.json"])
        ids_by_piece = {p: i for p, (i, _) in vocab.pieces.items()}
        specials = _specials_from_mapping(ids_by_piece, _ROBERTA_SPECIAL_NAMES)
        return FamilyTokenizer("xlm-roberta", specials, vocab, len(vocab.pieces))
    raise ValueError(f"unknown family {family!r}")


def encode_batch(texts: Sequence[str], tokenizer: FamilyTokenizer,
                 max_len: int = MAX_SEQUENCE_LENGTH) -> Encoding:
    """Per-family encode, specials added, truncated to ``max_len`` total,
    right-padded to the longest row."""
    if not texts:
        raise ValueError("encode_batch needs a nonempty batch")
    sp = tokenizer.specials
    rows = []
    for text in texts:
        body = tokenizer.encode_text(text)[: max_len - 2]
        rows.append([sp.cls_id] + body + [sp.sep_id])
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), sp.pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1
    types = np.zeros((len(rows), width), dtype=np.int64)
    return Encoding(
        input_ids=Tensor.from_array(ids, DType.I64),
        attention_mask=Tensor.from_array(mask, DType.I64),
        token_type_ids=Tensor.from_array(types, DType.I64),
    )
