"""Word error rate with word-count weighted aggregation across test sets."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field

from . import _kernels


def normalize_text(text: str) -> str:
    """Lower-case, drop punctuation and collapse whitespace (applied to refs and hyps alike)."""
    text = unicodedata.normalize("NFC", text).lower()
    text = "".join(" " if unicodedata.category(c).startswith("P") else c for c in text)
    return re.sub(r"\s+", " ", text).strip()


def edit_distance(ref, hyp):
    """``(S, D, I)`` of a minimal Levenshtein alignment of two word lists.

    The backtrace prefers substitution (or match), then insertion, then deletion.
    """
    table = {}
    r = [table.setdefault(w, len(table)) for w in ref]
    h = [table.setdefault(w, len(table)) for w in hyp]
    return _kernels.edit_ops(r, h)


@dataclass
class SetScore:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_words

    def as_dict(self) -> dict:
        return {"S": self.substitutions, "D": self.deletions, "I": self.insertions,
                "words": self.ref_words, "wer": self.wer}


@dataclass
class WerReport:
    sets: dict = field(default_factory=dict)  # name -> SetScore

    @property
    def average(self) -> float:
        words = sum(s.ref_words for s in self.sets.values())
        errs = sum(s.errors for s in self.sets.values())
        return errs / words if words else 0.0

    def as_dict(self) -> dict:
        return {"sets": {k: v.as_dict() for k, v in self.sets.items()}, "avg": self.average}

    def table(self) -> str:
        names = list(self.sets)
        head = " | ".join(f"{n:>10}" for n in names + ["Avg"])
        row = " | ".join(f"{100 * self.sets[n].wer:>10.2f}" for n in names)
        return f"{head}\n{row} | {100 * self.average:>10.2f}" if names else f"{'Avg':>10}\n{0.0:>10.2f}"


def score_set(refs: dict, hyps: dict, normalize: bool = True) -> SetScore:
    """Score hypotheses (id -> text) against references (id -> text).

    Every hypothesis id must have a reference; references without a
    hypothesis count as empty output.
    """
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise KeyError(f"hypothesis ids without reference: {missing}")
    score = SetScore()
    for uid, ref in refs.items():
        hyp = hyps.get(uid, "")
        if normalize:
            ref, hyp = normalize_text(ref), normalize_text(hyp)
        r, h = ref.split(), hyp.split()
        s, d, i = edit_distance(r, h)
        score.substitutions += s
        score.deletions += d
        score.insertions += i
        score.ref_words += len(r)
    return score


def manifest_refs(manifest) -> dict:
    return {u.id: u.text for u in manifest if u.text is not None}


def wer(sets: dict, normalize: bool = True) -> WerReport:
    """``sets`` maps a set name to ``(refs, hyps)``; refs may be a Manifest."""
    report = WerReport()
    for name, (refs, hyps) in sets.items():
        if not isinstance(refs, dict):
            refs = manifest_refs(refs)
        report.sets[name] = score_set(refs, hyps, normalize)
    return report
