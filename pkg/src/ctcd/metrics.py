"""Levenshtein-based error rates and relative error reduction."""

from __future__ import annotations

from collections.abc import Hashable, Sequence
from dataclasses import dataclass

from ctcd.errors import UsageError


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.reference_length == 0:
            raise UsageError("error rate undefined for an empty reference")
        return self.errors / self.reference_length

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_length + other.reference_length,
        )


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> ErrorCounts:
    """Minimum-cost alignment counts with unit costs.

    Among alignments of equal total cost the one with the most substitutions
    is chosen, i.e. a substitution beats an insertion/deletion pair.
    """
    n, m = len(ref), len(hyp)
    # cell = (cost, -subs, ins, dels); tuple order gives the tie-break
    prev = [(j, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)]
        for j in range(1, m + 1):
            c, s, ins, dels = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, s, ins, dels)
            else:
                diag = (c + 1, s - 1, ins, dels)
            c, s, ins, dels = prev[j]
            up = (c + 1, s, ins, dels + 1)
            c, s, ins, dels = cur[j - 1]
            left = (c + 1, s, ins + 1, dels)
            cur.append(min(diag, up, left))
        prev = cur
    _, neg_subs, ins, dels = prev[m]
    return ErrorCounts(-neg_subs, ins, dels, n)


def split_words(tokens: Sequence[int], space: int) -> list[tuple[int, ...]]:
    words, cur = [], []
    for tok in tokens:
        if tok == space:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(tok)
    if cur:
        words.append(tuple(cur))
    return words


def corpus_counts(refs, hyps, level: str = "token", space: int | None = None) -> ErrorCounts:
    if len(refs) != len(hyps):
        raise UsageError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if level not in ("word", "token"):
        raise UsageError(f"unknown level {level!r}")
    if level == "word" and space is None:
        raise UsageError("word level needs the space symbol")
    total = ErrorCounts()
    for ref, hyp in zip(refs, hyps):
        if level == "word":
            ref, hyp = split_words(ref, space), split_words(hyp, space)
        total = total + edit_distance(ref, hyp)
    return total


def wer(refs, hyps, level: str = "word", space: int | None = None) -> float:
    """Corpus-pooled error rate: total S+I+D over total reference length.

    ``level="word"`` splits token sequences on ``space``; ``"token"`` scores
    the raw label sequences (token error rate).
    """
    return corpus_counts(refs, hyps, level, space).rate


def rerr(baseline_wer: float, new_wer: float) -> float:
    """Relative error rate reduction in percent."""
    if baseline_wer <= 0:
        raise UsageError("baseline WER must be positive")
    return (baseline_wer - new_wer) / baseline_wer * 100.0
