"""Small random melodies with controllable sectional form, for tests and desk experiments."""

from __future__ import annotations

import random
from typing import Sequence

from .score_io import TICKS_PER_BEAT, Note, Score, SpelledPitch, transpose

# beat fillers in ticks: quarter, eighths, triplet eighths, sixteenths, dotted eighth + sixteenth
BEAT_PATTERNS = ((6,), (3, 3), (2, 2, 2), (1, 2, 2, 1), (5, 1))
C_MAJOR = ("C", "D", "E", "F", "G", "A", "B")


def random_rhythm(rng: random.Random, rest_prob: float = 0.15) -> list[tuple[int, bool]]:
    """One bar as (duration ticks, is_rest) pairs."""
    out: list[tuple[int, bool]] = []
    beat = 0
    while beat < 4:
        if beat % 2 == 0 and rng.random() < 0.2:
            durs: Sequence[int] = (2 * TICKS_PER_BEAT,)
            beat += 2
        else:
            durs = rng.choice(BEAT_PATTERNS)
            beat += 1
        for d in durs:
            rest = rng.random() < rest_prob and not (out and out[-1][1])
            out.append((d, rest))
    if all(r for _, r in out):
        out[0] = (out[0][0], False)
    return out


def _scale_pitch(degree: int) -> SpelledPitch:
    octave, idx = divmod(degree, 7)
    return SpelledPitch.from_name(f"{C_MAJOR[idx]}{4 + octave}")


def random_bar(rng: random.Random, degree: int) -> tuple[list[tuple[int, int | None]], int]:
    """(duration, scale degree or None) events for one bar, plus the final degree."""
    events = []
    for dur, rest in random_rhythm(rng):
        if rest:
            events.append((dur, None))
            continue
        degree = min(13, max(0, degree + rng.choice((-2, -1, -1, 1, 1, 2, 0, 3, -3))))
        events.append((dur, degree))
    return events, degree


def _score(score_id: str, bars: list[list[tuple[int, int | None]]]) -> Score:
    notes = []
    pos = 0
    for bar in bars:
        for dur, degree in bar:
            pitch = None if degree is None else _scale_pitch(degree)
            if pitch is None and notes and notes[-1].pitch is None:
                prev = notes.pop()
                notes.append(Note(None, prev.onset, prev.duration + dur))
            else:
                notes.append(Note(pitch, pos, dur))
            pos += dur
    return Score(score_id, "C", "major", tuple(notes), len(bars))


def random_piece(rng: random.Random, score_id: str, n_bars: int = 8, shift: int = 0) -> Score:
    """Free random melody in C major transposed by ``shift`` semitones."""
    bars, degree = [], rng.randrange(3, 10)
    for _ in range(n_bars):
        bar, degree = random_bar(rng, degree)
        bars.append(bar)
    return transpose(_score(score_id, bars), shift)


def form_piece(rng: random.Random, score_id: str, form: str, section_bars: int = 4, shift: int = 0) -> Score:
    """Piece whose sections follow ``form`` (e.g. "AABB"); equal letters repeat exactly."""
    sections: dict[str, list] = {}
    degree = rng.randrange(3, 10)
    bars = []
    for letter in form:
        if letter not in sections:
            body = []
            for _ in range(section_bars):
                bar, degree = random_bar(rng, degree)
                body.append(bar)
            sections[letter] = body
        bars.extend(sections[letter])
    return transpose(_score(score_id, bars), shift)


def form_corpus(n_pieces: int, forms: Sequence[str] = ("AABB", "ABAB"), section_bars: int = 4,
                seed: int = 0) -> list[tuple[Score, str]]:
    """(score, form) pairs cycling through ``forms``, each in a random key."""
    rng = random.Random(seed)
    out = []
    for i in range(n_pieces):
        form = forms[i % len(forms)]
        out.append((form_piece(rng, f"{form.lower()}{i:03d}", form, section_bars, rng.randint(-5, 6)), form))
    return out

