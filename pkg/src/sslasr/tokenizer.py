"""Character-level byte-pair encoding for transducer output units.

Words are split on whitespace and the first character of every word carries
the marker ``▁``, so decoding restores single-space separated text exactly.
Id 0 is the transducer blank and id 1 stands for unknown characters.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

from .errors import ConfigError, FormatError

MARK = "▁"
BLANK, UNK = 0, 1
SPECIALS = ("<blank>", "<unk>")


def _word_symbols(word: str) -> list:
    return [MARK + word[0]] + list(word[1:])


def _merge_word(syms, a, b):
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


class BpeModel:
    def __init__(self, merges, vocab):
        self.merges = [tuple(m) for m in merges]
        self.vocab = dict(vocab)
        self.id_to_token = [None] * len(self.vocab)
        for tok, i in self.vocab.items():
            self.id_to_token[i] = tok
        if None in self.id_to_token or self.vocab.get(SPECIALS[0]) != BLANK:
            raise FormatError("vocabulary ids must be dense with blank at 0")
        self._cache = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def segment(self, word: str) -> list:
        if word not in self._cache:
            syms = _word_symbols(word)
            for a, b in self.merges:
                if len(syms) < 2:
                    break
                if a in syms:
                    syms = _merge_word(syms, a, b)
            self._cache[word] = syms
        return self._cache[word]

    def encode(self, text: str) -> list:
        ids = []
        for word in text.split():
            ids.extend(self.vocab.get(s, UNK) for s in self.segment(word))
        return ids

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise ValueError(f"token id {i} outside vocabulary of {len(self.id_to_token)}")
            if i == BLANK:
                continue
            parts.append("⁇" if i == UNK else self.id_to_token[i])
        return "".join(parts).replace(MARK, " ").strip()

    def to_json(self) -> str:
        return json.dumps({"merges": [list(m) for m in self.merges], "vocab": self.vocab},
                          sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(d["merges"], d["vocab"])


def bpe_train(texts, vocab_size: int) -> BpeModel:
    """Greedy merge loop; frequency ties go to the lexicographically smallest pair."""
    words = Counter(w for t in texts for w in t.split())
    if not words:
        raise ConfigError("cannot train BPE on an empty corpus")
    segs = {w: _word_symbols(w) for w in words}
    base = sorted({s for syms in segs.values() for s in syms})
    vocab = {tok: i for i, tok in enumerate(SPECIALS)}
    for s in base:
        vocab[s] = len(vocab)
    if vocab_size < len(vocab):
        raise ConfigError(f"vocab_size={vocab_size} is below the {len(vocab)} base symbols and specials")
    merges = []
    while len(vocab) < vocab_size:
        pairs = Counter()
        for w, syms in segs.items():
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] += words[w]
        if not pairs:
            raise ConfigError(f"vocab_size={vocab_size} unreachable: corpus supports only {len(vocab)} tokens")
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for w in segs:
            segs[w] = _merge_word(segs[w], *best)
        tok = best[0] + best[1]
        if tok not in vocab:
            vocab[tok] = len(vocab)
    return BpeModel(merges, vocab)
