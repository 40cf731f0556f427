"""Structure, repetition and distribution metrics for generated melodies.

Bar-level self-similarity matrices (rhythm and interval kinds), their
RMSE comparison, duplicate rates, repeat statistics over the frame
skeleton, pitch / duration distributions and smoothed KL divergence.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyCorpus
from .score_io import BEATS_PER_BAR, TICKS_PER_BAR, Score, tick_to_beat

KL_EPS = 1e-8
KINDS = ("rhythm", "interval")


@dataclass(frozen=True)
class BarPattern:
    rhythm: tuple[tuple[Fraction, Fraction], ...]
    intervals: tuple[int | None, ...]


def bar_patterns(score: Score) -> list[BarPattern]:
    """Per-bar (start, duration) tuples in beats and staff intervals of the notes.

    Durations are clipped at the bar line.  An interval is None for the
    first note of the piece and for a note that follows a rest.
    """
    rhythms: list[list] = [[] for _ in range(score.n_bars)]
    intervals: list[list] = [[] for _ in range(score.n_bars)]
    prev = None
    prev_end = 0
    for note in score.notes:
        if note.is_rest:
            prev = None
            prev_end = note.offset
            continue
        bar = note.onset // TICKS_PER_BAR
        bar_start = Fraction(bar * BEATS_PER_BAR)
        start = tick_to_beat(note.onset)
        end = min(tick_to_beat(note.offset), bar_start + BEATS_PER_BAR)
        rhythms[bar].append((start - bar_start, end - start))
        if prev is None or prev_end != note.onset:
            intervals[bar].append(None)
        else:
            intervals[bar].append(note.pitch.step - prev.step)
        prev, prev_end = note.pitch, note.offset
    return [BarPattern(tuple(r), tuple(i)) for r, i in zip(rhythms, intervals)]


def rhythm_similarity(a: BarPattern, b: BarPattern) -> float:
    """Duration of a's tuples also present in b, over the 4-beat bar."""
    if not a.rhythm and not b.rhythm:
        return 1.0
    other = set(b.rhythm)
    return float(sum((t[1] for t in a.rhythm if t in other), Fraction(0)) / BEATS_PER_BAR)


def longest_common_run(a: Sequence, b: Sequence) -> int:
    """Length of the longest common contiguous run (None matches None)."""
    best = 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, 1):
            if x == y:
                cur[j] = prev[j - 1] + 1
                if cur[j] > best:
                    best = cur[j]
        prev = cur
    return best


def interval_similarity(a: BarPattern, b: BarPattern) -> float:
    if not a.intervals and not b.intervals:
        return 1.0
    return longest_common_run(a.intervals, b.intervals) / max(len(a.intervals), len(b.intervals))


_SIM = {"rhythm": rhythm_similarity, "interval": interval_similarity}


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")


def ssm(score: Score | Sequence[BarPattern], kind: str) -> np.ndarray:
    """Bar-by-bar self-similarity matrix of the given kind."""
    _check_kind(kind)
    bars = bar_patterns(score) if isinstance(score, Score) else list(score)
    sim = _SIM[kind]
    n = len(bars)
    m = np.empty((n, n))
    for i in range(n):
        m[i, i] = sim(bars[i], bars[i])
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = sim(bars[i], bars[j])
    return m


def structure_similarity(ssm_a: np.ndarray, ssm_b: np.ndarray) -> float:
    """RMSE between two SSMs over their shared top-left crop (RSS / ISS)."""
    n = min(len(ssm_a), len(ssm_b))
    if n == 0:
        return 0.0
    diff = np.asarray(ssm_a)[:n, :n] - np.asarray(ssm_b)[:n, :n]
    return float(np.sqrt(np.mean(diff * diff)))


def duplicate_rate(a: Score, b: Score, kind: str) -> float:
    """Fraction of position-aligned bars with identical rhythm or interval lists."""
    _check_kind(kind)
    pa, pb = bar_patterns(a), bar_patterns(b)
    n = min(len(pa), len(pb))
    if n == 0:
        return 0.0
    attr = "rhythm" if kind == "rhythm" else "intervals"
    return sum(getattr(pa[i], attr) == getattr(pb[i], attr) for i in range(n)) / n


# --------------------------------------------------------------------------
# repeat statistics

_HOLD, _REST = ("H",), ("R",)


def frame_skeleton(score: Score, with_intervals: bool) -> list[tuple]:
    """Per-tick symbols: note onset, rest onset or hold; DI adds the interval."""
    sym: list[tuple] = [_HOLD] * score.n_ticks
    prev = None
    prev_end = 0
    for note in score.notes:
        if note.is_rest:
            sym[note.onset] = _REST
            prev = None
        else:
            if with_intervals:
                iv = None if prev is None or prev_end != note.onset else note.pitch.step - prev.step
                sym[note.onset] = ("N", iv)
            else:
                sym[note.onset] = ("N",)
            prev = note.pitch
        prev_end = note.offset
    return sym


@dataclass
class RepeatHistograms:
    kind: str  # "D" or "DI"
    rc: Counter = field(default_factory=Counter)  # lookback (bars) -> repeats
    rd: Counter = field(default_factory=Counter)  # repeat length (whole bars) -> repeats
    ro: Counter = field(default_factory=Counter)  # onset tick within bar -> repeats

    def merge(self, other: "RepeatHistograms") -> None:
        self.rc.update(other.rc)
        self.rd.update(other.rd)
        self.ro.update(other.ro)


def find_repeats(symbols: Sequence, lookback: int, min_len: int = TICKS_PER_BAR) -> list[tuple[int, int]]:
    """Maximal runs [start, end) where symbols[t] == symbols[t - lookback], of length >= min_len."""
    runs = []
    start = None
    for t in range(lookback, len(symbols) + 1):
        match = t < len(symbols) and symbols[t] == symbols[t - lookback]
        if match and start is None:
            start = t
        elif not match and start is not None:
            if t - start >= min_len:
                runs.append((start, t))
            start = None
    return runs


def repeat_statistics(score: Score, kind: str, max_lookback_bars: int | None = None) -> RepeatHistograms:
    """Repeat count / duration / onset histograms at bar-multiple lookbacks.

    ``kind`` "D" compares the onset/hold skeleton, "DI" also the staff
    interval at each note onset.  A repeat is a maximal run of at least
    one bar where the piece equals itself shifted by the lookback.
    """
    if kind not in ("D", "DI"):
        raise ValueError("kind must be 'D' or 'DI'")
    symbols = frame_skeleton(score, kind == "DI")
    if max_lookback_bars is None:
        max_lookback_bars = score.n_bars - 1
    hist = RepeatHistograms(kind)
    for lb in range(1, max_lookback_bars + 1):
        for start, end in find_repeats(symbols, lb * TICKS_PER_BAR):
            hist.rc[lb] += 1
            hist.rd[(end - start) // TICKS_PER_BAR] += 1
            hist.ro[start % TICKS_PER_BAR] += 1
    return hist


# --------------------------------------------------------------------------
# distributions


def normalize(counts: Mapping) -> dict:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {k: v / total for k, v in counts.items()}


def pitch_duration_distributions(corpus: Iterable[Score]) -> tuple[dict, dict]:
    """Normalized pitch-name and note-duration (beats) frequencies; rests excluded."""
    pitches, durations = Counter(), Counter()
    n = 0
    for s in corpus:
        n += 1
        for note in s.notes:
            if note.is_rest:
                continue
            pitches[note.pitch.name] += 1
            durations[tick_to_beat(note.offset) - tick_to_beat(note.onset)] += 1
    if n == 0:
        raise EmptyCorpus("no pieces to count")
    return normalize(pitches), normalize(durations)


def kl_divergence(p: Mapping, q: Mapping, eps: float = KL_EPS) -> float:
    """KL(p || q) over the union support after additive eps smoothing."""
    support = sorted(set(p) | set(q), key=repr)
    if not support:
        return 0.0
    pv = np.array([p.get(k, 0.0) for k in support], dtype=float) + eps
    qv = np.array([q.get(k, 0.0) for k in support], dtype=float) + eps
    pv /= pv.sum()
    qv /= qv.sum()
    return float(max(0.0, np.sum(pv * np.log(pv / qv))))


def repeat_distributions(corpus: Iterable[Score]) -> dict[str, dict]:
    """Corpus-level normalized RC/RD/RO histograms for both repeat kinds."""
    totals = {k: RepeatHistograms(k) for k in ("D", "DI")}
    for s in corpus:
        for k in totals:
            totals[k].merge(repeat_statistics(s, k))
    out = {}
    for k, h in totals.items():
        out[f"RC-{k}"] = normalize(h.rc)
        out[f"RD-{k}"] = normalize(h.rd)
        out[f"RO-{k}"] = normalize(h.ro)
    return out


KL_FIELDS = ("RC-D", "RD-D", "RO-D", "RC-DI", "RD-DI", "RO-DI", "PD", "DD")
SIMILARITY_FIELDS = ("RSS", "ISS", "RDR_TAB", "IDR_TAB", "RDR_AB", "IDR_AB")


def corpus_distributions(corpus: Sequence[Score]) -> dict[str, dict]:
    dists = repeat_distributions(corpus)
    dists["PD"], dists["DD"] = pitch_duration_distributions(corpus)
    return dists


def distribution_kls(reference: Sequence[Score], generated: Sequence[Score]) -> dict[str, float]:
    ref, gen = corpus_distributions(reference), corpus_distributions(generated)
    return {f: kl_divergence(ref[f], gen[f]) for f in KL_FIELDS}


def pair_metrics(template: Score, samples: Sequence[Score]) -> dict[str, float]:
    """RSS/ISS and TAB duplicate rates averaged over samples; AB rates over sample pairs."""
    t_rhy, t_int = ssm(template, "rhythm"), ssm(template, "interval")
    rss = [structure_similarity(ssm(s, "rhythm"), t_rhy) for s in samples]
    iss = [structure_similarity(ssm(s, "interval"), t_int) for s in samples]
    out = {
        "RSS": float(np.mean(rss)),
        "ISS": float(np.mean(iss)),
        "RDR_TAB": float(np.mean([duplicate_rate(template, s, "rhythm") for s in samples])),
        "IDR_TAB": float(np.mean([duplicate_rate(template, s, "interval") for s in samples])),
        "per_sample_RSS": rss,
        "per_sample_ISS": iss,
    }
    pairs = [(a, b) for i, a in enumerate(samples) for b in samples[i + 1:]]
    if pairs:
        out["RDR_AB"] = float(np.mean([duplicate_rate(a, b, "rhythm") for a, b in pairs]))
        out["IDR_AB"] = float(np.mean([duplicate_rate(a, b, "interval") for a, b in pairs]))
    else:
        out["RDR_AB"] = out["IDR_AB"] = math.nan
    return out
