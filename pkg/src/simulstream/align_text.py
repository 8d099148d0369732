"""Word-level source dependencies from a conditional translation scorer.

For every target word j and source truncation length i, the scorer estimates
log P[T_j | S_1..S_i, T_1..T_{j-1}]. The source index a_j a target word
depends on is where the first difference of that row is largest: the word's
likelihood jumps once the source word carrying its content becomes visible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

__all__ = [
    "Scorer",
    "ScorerError",
    "PlantedStepScorer",
    "WordTableScorer",
    "loglik_matrix",
    "contextual_align",
    "save_alignment",
    "load_alignment",
    "dump_loglik_csv",
]


class ScorerError(RuntimeError):
    """A scorer call failed; the message carries the (j, i) cell."""


class Scorer(Protocol):
    """Conditional log-likelihood of a target word given truncated context.

    Implementations must be deterministic and return finite floats;
    ``concurrent_safe`` declares whether distinct calls may run on threads.
    """

    concurrent_safe: bool

    def score(
        self,
        source_prefix: Sequence[str],
        target_prefix: Sequence[str],
        target_word: str,
    ) -> float: ...


@dataclass
class PlantedStepScorer:
    """Oracle scorer with a planted alignment: low likelihood until the
    aligned source word is visible, high afterwards."""

    planted: Sequence[int]  # 1-indexed source index per target word
    target_words: Sequence[str]
    high: float = float(np.log(0.9))
    low: float = float(np.log(0.1))
    concurrent_safe: bool = True

    def __post_init__(self):
        self._index = {w: j for j, w in enumerate(self.target_words)}

    def score(self, source_prefix, target_prefix, target_word):
        j = self._index[target_word]
        return self.high if len(source_prefix) >= self.planted[j] else self.low


class WordTableScorer:
    """Small co-occurrence scorer for end-to-end demos.

    Counts (source word, target word) pairs over a parallel corpus and scores
    a target word by the best translation probability among the visible
    source words, smoothed so empty or uninformative prefixes stay finite.
    """

    concurrent_safe = True

    def __init__(self, smoothing: float = 1e-3):
        self.smoothing = smoothing
        self._counts: dict[str, dict[str, float]] = {}
        self._totals: dict[str, float] = {}

    def fit(self, pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> "WordTableScorer":
        for source_words, target_words in pairs:
            for s in source_words:
                row = self._counts.setdefault(s, {})
                for t in target_words:
                    row[t] = row.get(t, 0.0) + 1.0
                self._totals[s] = self._totals.get(s, 0.0) + len(target_words)
        return self

    def translation_prob(self, source_word: str, target_word: str) -> float:
        total = self._totals.get(source_word, 0.0)
        hit = self._counts.get(source_word, {}).get(target_word, 0.0)
        return (hit + self.smoothing) / (total + 1.0)

    def score(self, source_prefix, target_prefix, target_word):
        if not source_prefix:
            return float(np.log(self.smoothing))
        best = max(self.translation_prob(s, target_word) for s in source_prefix)
        return float(np.log(best))


def loglik_matrix(
    scorer: Scorer,
    source_words: Sequence[str],
    target_words: Sequence[str],
    cache: dict | None = None,
    max_workers: int = 1,
) -> np.ndarray:
    """Evaluate the (m, n+1) table of log p_{j,i}, i = 0..n.

    Column 0 scores against the empty source prefix. Exactly one scorer call
    per (j, i) cell; ``cache`` (keyed on (j, i)) skips cells already computed.
    Threaded evaluation requires ``scorer.concurrent_safe``.
    """
    n, m = len(source_words), len(target_words)
    if n < 1 or m < 1:
        raise ValueError("need at least one source and one target word")
    if cache is None:
        cache = {}
    table = np.empty((m, n + 1), dtype=np.float64)

    def cell(j: int, i: int) -> float:
        try:
            return scorer.score(
                source_words[:i], target_words[:j], target_words[j]
            )
        except Exception as exc:
            raise ScorerError(f"scorer failed at (j={j + 1}, i={i})") from exc

    pending = [(j, i) for j in range(m) for i in range(n + 1) if (j, i) not in cache]
    if max_workers > 1 and getattr(scorer, "concurrent_safe", False):
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for (j, i), value in zip(pending, pool.map(lambda ji: cell(*ji), pending)):
                cache[(j, i)] = value
    else:
        for j, i in pending:
            cache[(j, i)] = cell(j, i)

    for j in range(m):
        for i in range(n + 1):
            value = float(cache[(j, i)])
            if not np.isfinite(value):
                raise ScorerError(f"non-finite score at (j={j + 1}, i={i})")
            table[j, i] = value
    return table


def contextual_align(table: np.ndarray) -> np.ndarray:
    """Per-row argmax of first differences; 1-indexed, ties to the smallest i."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] < 2:
        raise ValueError("table must be (m, n+1) with n >= 1")
    if not np.all(np.isfinite(table)):
        raise ValueError("table must be finite")
    diffs = table[:, 1:] - table[:, :-1]
    return np.argmax(diffs, axis=1) + 1  # np.argmax keeps the first maximum


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def save_alignment(path, alignment: np.ndarray, deltas: np.ndarray | None = None) -> None:
    """One line per target word: ``j<TAB>a_j<TAB>delta``."""
    alignment = np.asarray(alignment)
    if deltas is None:
        deltas = np.zeros(alignment.shape[0])
    with open(path, "w", encoding="utf-8") as fh:
        for j, (a, d) in enumerate(zip(alignment, deltas), start=1):
            fh.write(f"{j}\t{int(a)}\t{float(d):.6g}\n")


def load_alignment(path) -> np.ndarray:
    values = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            _, a, _ = line.split("\t")
            values.append(int(a))
    return np.array(values, dtype=np.int64)


def dump_loglik_csv(path, table: np.ndarray) -> None:
    """Table dump for inspecting where each row's likelihood jumps."""
    table = np.asarray(table)
    header = ",".join(["j"] + [f"i{i}" for i in range(table.shape[1])])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for j, row in enumerate(table, start=1):
            fh.write(",".join([str(j)] + [f"{v:.9g}" for v in row]) + "\n")
