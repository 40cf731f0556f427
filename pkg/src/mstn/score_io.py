"""Score model plus ABC / MusicXML ingestion for monophonic 4/4 melodies.

Time is kept on an uneven frame grid: every beat holds six ticks at beat
fractions 0, 1/4, 1/3, 1/2, 2/3 and 3/4, so sixteenths and eighth-note
triplets are representable and finer values are not.  Notes store their
onset and duration in ticks; conversion to musical time goes through
:func:`tick_to_beat`.

Parsed scores always cover the timeline completely: gaps become rests,
adjacent rests are merged, a short first bar (pickup) is padded with a
leading rest and the last bar is padded with a trailing rest.
"""

from __future__ import annotations

import json
import math
import random
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import (
    MalformedInput,
    OutOfRange,
    UnrepresentableDuration,
    UnsupportedTimeSignature,
)

TICKS_PER_BEAT = 6
BEATS_PER_BAR = 4
TICKS_PER_BAR = TICKS_PER_BEAT * BEATS_PER_BAR
GRID = tuple(Fraction(f) for f in ("0", "1/4", "1/3", "1/2", "2/3", "3/4"))
_GRID_INDEX = {f: i for i, f in enumerate(GRID)}

MAX_BARS = 100
MIN_PITCH, MAX_PITCH = 21, 108  # piano range, inclusive
MODES = ("major", "minor", "dorian", "mixolydian", "other")

LETTERS = "CDEFGAB"
_NATURAL_PC = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_FIFTHS_BASE = {"F": -1, "C": 0, "G": 1, "D": 2, "A": 3, "E": 4, "B": 5}
_SHARP_ORDER = "FCGDAEB"
_FLAT_ORDER = "BEADGCF"

# Position of the tonic relative to its parent major key, on the circle of fifths.
_MODE_FIFTHS = {
    "major": 0, "minor": -3, "dorian": -2, "mixolydian": -1,
    "lydian": 1, "phrygian": -4, "locrian": -5,
}


def tick_to_beat(tick: int) -> Fraction:
    """Musical position in beats of an absolute tick index."""
    beat, sub = divmod(tick, TICKS_PER_BEAT)
    return beat + GRID[sub]


def beat_to_tick(pos: Fraction) -> int:
    beat = math.floor(pos)
    try:
        return beat * TICKS_PER_BEAT + _GRID_INDEX[Fraction(pos) - beat]
    except KeyError:
        raise UnrepresentableDuration(f"position {pos} beats is off the tick grid") from None


def ticks_to_beats(onset: int, duration: int) -> Fraction:
    """Length in beats of a tick span (ticks are not uniform in time)."""
    return tick_to_beat(onset + duration) - tick_to_beat(onset)


def _accidental_str(acc: int) -> str:
    return "#" * acc if acc >= 0 else "b" * -acc


def _parse_accidental(text: str) -> int:
    if text and set(text) == {"#"}:
        return len(text)
    if text and set(text) == {"b"}:
        return -len(text)
    if text == "":
        return 0
    raise ValueError(f"bad accidental {text!r}")


@dataclass(frozen=True, order=True)
class SpelledPitch:
    letter: str
    accidental: int
    octave: int

    def __post_init__(self):
        if self.letter not in _NATURAL_PC:
            raise ValueError(f"bad letter {self.letter!r}")
        if not -2 <= self.accidental <= 2:
            raise ValueError(f"accidental {self.accidental} outside [-2, 2]")
        if not 0 <= self.midi <= 127:
            raise ValueError(f"{self.name} outside MIDI range")

    @property
    def midi(self) -> int:
        return 12 * (self.octave + 1) + _NATURAL_PC[self.letter] + self.accidental

    @property
    def step(self) -> int:
        """Diatonic staff position; differences give staff intervals."""
        return 7 * self.octave + LETTERS.index(self.letter)

    @property
    def name(self) -> str:
        return f"{self.letter}{_accidental_str(self.accidental)}{self.octave}"

    @classmethod
    def from_name(cls, name: str) -> "SpelledPitch":
        m = re.fullmatch(r"([A-G])(#{0,2}|b{0,2})(-?\d+)", name)
        if not m:
            raise ValueError(f"bad pitch name {name!r}")
        return cls(m.group(1), _parse_accidental(m.group(2)), int(m.group(3)))

    @classmethod
    def from_step(cls, step: int, midi: int) -> "SpelledPitch":
        octave, idx = divmod(step, 7)
        letter = LETTERS[idx]
        return cls(letter, midi - (12 * (octave + 1) + _NATURAL_PC[letter]), octave)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Note:
    """One sounding note, or a rest when ``pitch`` is None."""

    pitch: SpelledPitch | None
    onset: int
    duration: int

    @property
    def is_rest(self) -> bool:
        return self.pitch is None

    @property
    def offset(self) -> int:
        return self.onset + self.duration


@dataclass(frozen=True)
class Score:
    id: str
    tonic: str
    mode: str
    notes: tuple[Note, ...]
    n_bars: int
    time_signature: str = "4/4"

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))

    @property
    def n_ticks(self) -> int:
        return self.n_bars * TICKS_PER_BAR

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tonic": self.tonic,
            "mode": self.mode,
            "time_signature": self.time_signature,
            "n_bars": self.n_bars,
            "notes": [[None if n.is_rest else n.pitch.name, n.onset, n.duration] for n in self.notes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Score":
        notes = tuple(
            Note(None if p is None else SpelledPitch.from_name(p), onset, dur)
            for p, onset, dur in d["notes"]
        )
        return cls(d["id"], d["tonic"], d["mode"], notes, d["n_bars"], d.get("time_signature", "4/4"))


def tonic_parts(tonic: str) -> tuple[str, int]:
    return tonic[0], _parse_accidental(tonic[1:])


def tonic_name(letter: str, acc: int) -> str:
    return letter + _accidental_str(acc)


def _key_fifths(tonic: str, mode: str) -> int:
    letter, acc = tonic_parts(tonic)
    return _FIFTHS_BASE[letter] + 7 * acc + _MODE_FIFTHS.get(mode, 0)


def _tonic_from_fifths(fifths: int) -> str:
    idx = fifths + 1
    return tonic_name(_SHARP_ORDER[idx % 7], idx // 7)


def key_signature(fifths: int) -> dict[str, int]:
    """Accidental per letter implied by a key with ``fifths`` sharps (negative: flats)."""
    sig = dict.fromkeys(LETTERS, 0)
    order, sign = (_SHARP_ORDER, 1) if fifths >= 0 else (_FLAT_ORDER, -1)
    for i in range(abs(fifths)):
        sig[order[i % 7]] += sign
    return sig


def _normalize_mode(word: str) -> tuple[str, int]:
    """Map a mode word to (stored mode, fifths offset used for the key signature)."""
    w = word.lower()
    if w in ("", "maj", "major", "ion", "ionian"):
        return "major", 0
    if w in ("m", "min", "minor", "aeo", "aeolian"):
        return "minor", _MODE_FIFTHS["minor"]
    for full in ("dorian", "mixolydian", "lydian", "phrygian", "locrian"):
        if len(w) >= 3 and full.startswith(w):
            stored = full if full in MODES else "other"
            return stored, _MODE_FIFTHS[full]
    raise MalformedInput(f"unknown mode {word!r}")


# --------------------------------------------------------------------------
# shared assembly


@dataclass
class _Event:
    pitch: SpelledPitch | None
    dur: Fraction  # beats
    tie: bool = False


def _assemble(
    score_id: str,
    tonic: str,
    mode: str,
    events: Sequence[_Event],
    pickup: Fraction | None,
) -> Score:
    pos = Fraction(0)
    if pickup is not None and 0 < pickup < BEATS_PER_BAR:
        pos = BEATS_PER_BAR - pickup
    timeline: list[list] = []  # [pitch, start, end, tie]
    if pos:
        timeline.append([None, Fraction(0), pos, False])
    for ev in events:
        if ev.dur <= 0:
            raise MalformedInput(f"non-positive duration {ev.dur}")
        start, end = pos, pos + ev.dur
        pos = end
        prev = timeline[-1] if timeline else None
        if prev is not None and ev.pitch is not None and prev[3] and prev[0] == ev.pitch:
            prev[2], prev[3] = end, ev.tie
            continue
        if prev is not None and ev.pitch is None and prev[0] is None:
            prev[2] = end
            continue
        timeline.append([ev.pitch, start, end, ev.tie])
    if not timeline:
        raise MalformedInput("melody has no notes or rests")
    n_bars = max(1, math.ceil(pos / BEATS_PER_BAR))
    total = Fraction(n_bars * BEATS_PER_BAR)
    if pos < total:
        if timeline[-1][0] is None:
            timeline[-1][2] = total
        else:
            timeline.append([None, pos, total, False])
    notes = []
    for pitch, start, end, _ in timeline:
        onset = beat_to_tick(start)
        notes.append(Note(pitch, onset, beat_to_tick(end) - onset))
    return Score(score_id, tonic, mode, tuple(notes), n_bars)


# --------------------------------------------------------------------------
# ABC


_NOTE_RE = re.compile(r"(\^\^|\^|__|_|=)?([A-Ga-g])([',]*)(\d*)(/*)(\d*)")
_REST_RE = re.compile(r"([zx])(\d*)(/*)(\d*)")
_MREST_RE = re.compile(r"Z(\d*)")
_BAR_RE = re.compile(r"::|:*\[?\|[\]|]*:*")
_VOLTA_RE = re.compile(r"\s*\[?(\d+)")
_TUPLET_RE = re.compile(r"\((\d)(?::(\d?))?(?::(\d?))?")
_FIELD_RE = re.compile(r"^([A-Za-z]):(.*)$")
_ABC_ACC = {"^^": 2, "^": 1, "__": -2, "_": -1, "=": 0}
_DECORATIONS = set("~.HLMOPSTuvJR")


def _abc_length(num: str, slashes: str, den: str) -> Fraction:
    n = int(num) if num else 1
    if den:
        d = int(den)
    elif slashes:
        d = 2 ** len(slashes)
    else:
        d = 1
    return Fraction(n, d)


def _parse_meter(value: str) -> None:
    v = value.strip()
    if v in ("C", "4/4"):
        return
    raise UnsupportedTimeSignature(f"meter {v!r}")


def _parse_abc_key(value: str) -> tuple[str, str, int]:
    v = value.strip()
    if v.lower() in ("", "none") or v.startswith("HP") or v.startswith("Hp"):
        return "C", "major", 0
    m = re.match(r"([A-Ga-g])([#b]?)\s*([A-Za-z]*)", v)
    if not m:
        raise MalformedInput(f"bad key {value!r}")
    tonic = tonic_name(m.group(1).upper(), _parse_accidental(m.group(2)))
    mode, offset = _normalize_mode(m.group(3))
    letter, acc = tonic_parts(tonic)
    return tonic, mode, _FIFTHS_BASE[letter] + 7 * acc + offset


@dataclass
class _AbcBar:
    events: list[_Event] = field(default_factory=list)
    start_repeat: bool = False
    end_repeat: bool = False
    volta: int | None = None


def _expand_repeats(bars: list[_AbcBar]) -> list[_AbcBar]:
    out: list[_AbcBar] = []
    start = 0
    for i, bar in enumerate(bars):
        if bar.start_repeat:
            start = i
        out.append(bar)
        if bar.end_repeat:
            out.extend(b for b in bars[start:i + 1] if b.volta != 1)
            start = i + 1
    return out


class _AbcBody:
    """Single-pass scanner over an ABC tune body."""

    def __init__(self, unit: Fraction, fifths: int):
        self.unit = unit
        self.sig = key_signature(fifths)
        self.bars = [_AbcBar()]
        self.bar_acc: dict[tuple[str, int], int] = {}
        self.tuplet: list = []  # [factor, remaining]
        self.broken: Fraction | None = None
        self.in_volta1 = False

    @property
    def bar(self) -> _AbcBar:
        return self.bars[-1]

    def last_event(self) -> _Event | None:
        for bar in reversed(self.bars):
            if bar.events:
                return bar.events[-1]
        return None

    def add(self, pitch, dur: Fraction) -> None:
        if self.broken is not None:
            dur *= self.broken
            self.broken = None
        if self.tuplet:
            dur *= self.tuplet[0]
            self.tuplet[1] -= 1
            if self.tuplet[1] == 0:
                self.tuplet = []
        self.bar.events.append(_Event(pitch, dur * 4))

    def pitch(self, acc_tok: str | None, letter: str, marks: str) -> SpelledPitch:
        octave = 4 if letter.isupper() else 5
        octave += marks.count("'") - marks.count(",")
        up = letter.upper()
        key = (up, octave)
        if acc_tok is not None:
            self.bar_acc[key] = _ABC_ACC[acc_tok]
        acc = self.bar_acc.get(key, self.sig[up])
        try:
            return SpelledPitch(up, acc, octave)
        except ValueError as exc:
            raise MalformedInput(str(exc)) from None

    def barline(self, token: str) -> None:
        closing = token.startswith(":")
        opening = token.endswith(":") and token != ":"
        if token == "::":
            closing = opening = True
        self.bar.end_repeat = self.bar.end_repeat or closing
        if closing or "||" in token or "]" in token:
            self.in_volta1 = False
        new = _AbcBar(start_repeat=opening)
        if self.in_volta1:
            new.volta = 1
        self.bars.append(new)
        self.bar_acc = {}

    def volta(self, number: int) -> None:
        self.in_volta1 = number == 1
        self.bar.volta = number if number == 1 else None

    def set_field(self, name: str, value: str) -> None:
        if name == "M":
            _parse_meter(value)
        elif name == "L":
            self.unit = Fraction(value.strip())
        elif name == "K":
            _, _, fifths = _parse_abc_key(value)
            self.sig = key_signature(fifths)

    def scan(self, s: str) -> None:
        i, n = 0, len(s)
        while i < n:
            c = s[i]
            if c in " \t\n\r`\\y)":
                i += 1
            elif c == "%":
                j = s.find("\n", i)
                i = n if j < 0 else j
            elif c in "\"!+":
                j = s.find(c, i + 1)
                if j < 0:
                    raise MalformedInput(f"unterminated {c}")
                i = j + 1
            elif c == "{":
                j = s.find("}", i)
                if j < 0:
                    raise MalformedInput("unterminated grace group")
                i = j + 1
            elif c == "[" and re.match(r"\[[A-Za-z]:", s[i:]):
                j = s.find("]", i)
                if j < 0:
                    raise MalformedInput("unterminated inline field")
                self.set_field(s[i + 1], s[i + 3:j])
                i = j + 1
            elif c == "[" and i + 1 < n and s[i + 1].isdigit():
                m = _VOLTA_RE.match(s, i)
                self.volta(int(m.group(1)))
                i = m.end()
            elif (c in "|:" or s.startswith("[|", i)) and _BAR_RE.match(s, i):
                m = _BAR_RE.match(s, i)
                self.barline(m.group(0))
                i = m.end()
                v = re.match(r"\d+", s[i:]) or (re.match(r"\s*\[(\d+)", s[i:]))
                if v:
                    num = v.group(1) if v.lastindex else v.group(0)
                    self.volta(int(num))
                    i += v.end()
            elif c == "[":
                i = self.chord(s, i)
            elif c == "(":
                m = _TUPLET_RE.match(s, i)
                if m:
                    p = int(m.group(1))
                    q = int(m.group(2)) if m.group(2) else (3 if p in (2, 4, 8) else 2)
                    r = int(m.group(3)) if m.group(3) else p
                    self.tuplet = [Fraction(q, p), r]
                    i = m.end()
                else:
                    i += 1
            elif c == "-":
                ev = self.last_event()
                if ev is not None:
                    ev.tie = True
                i += 1
            elif c in "<>":
                j = i
                while j < n and s[j] == c:
                    j += 1
                k = j - i
                ev = self.last_event()
                if ev is None:
                    raise MalformedInput("broken rhythm without a preceding note")
                longer, shorter = 2 - Fraction(1, 2 ** k), Fraction(1, 2 ** k)
                ev.dur *= longer if c == ">" else shorter
                self.broken = shorter if c == ">" else longer
                i = j
            elif c in _DECORATIONS:
                i += 1
            elif (m := _NOTE_RE.match(s, i)):
                p = self.pitch(m.group(1), m.group(2), m.group(3))
                self.add(p, self.unit * _abc_length(*m.group(4, 5, 6)))
                i = m.end()
            elif (m := _REST_RE.match(s, i)):
                self.add(None, self.unit * _abc_length(*m.group(2, 3, 4)))
                i = m.end()
            elif (m := _MREST_RE.match(s, i)):
                for _ in range(int(m.group(1) or 1)):
                    self.bar.events.append(_Event(None, Fraction(BEATS_PER_BAR)))
                i = m.end()
            else:
                raise MalformedInput(f"unexpected character {c!r} in ABC body")

    def chord(self, s: str, i: int) -> int:
        j = s.find("]", i)
        if j < 0:
            raise MalformedInput("unterminated chord")
        inner = s[i + 1:j]
        best, first_len = None, None
        for m in _NOTE_RE.finditer(inner):
            p = self.pitch(m.group(1), m.group(2), m.group(3))
            if first_len is None:
                first_len = _abc_length(*m.group(4, 5, 6))
            if best is None or p.midi > best.midi:
                best = p
        if best is None:
            raise MalformedInput(f"empty chord {inner!r}")
        m = re.compile(r"(\d*)(/*)(\d*)").match(s, j + 1)
        self.add(best, self.unit * first_len * _abc_length(*m.group(1, 2, 3)))
        return m.end()


def split_abc_tunes(text: str) -> list[str]:
    """Split a multi-tune ABC file into one string per ``X:`` tune."""
    tunes, cur = [], None
    for line in text.splitlines():
        if re.match(r"X:", line):
            if cur is not None:
                tunes.append("\n".join(cur))
            cur = [line]
        elif cur is not None:
            cur.append(line)
    if cur is not None:
        tunes.append("\n".join(cur))
    return tunes


def parse_abc(text: str, score_id: str | None = None) -> Score:
    """Parse one ABC tune into a Score.

    Supports the monophonic subset used by folk-tune corpora: header
    fields X/M/L/K, accidentals and key signatures, octave marks, note
    lengths, broken rhythm, tuplets, ties, chords (highest note kept),
    repeats with first/second endings and inline fields.  Chord symbols,
    decorations and grace notes are skipped.
    """
    headers: dict[str, str] = {}
    body_lines: list[str] = []
    in_body = False
    for raw in text.replace("\r\n", "\n").split("\n"):
        line = raw.split("%", 1)[0] if not in_body else raw
        if not in_body:
            m = _FIELD_RE.match(line.strip())
            if m:
                name, value = m.group(1), m.group(2)
                headers.setdefault(name, value)
                if name == "K":
                    in_body = True
                continue
            if line.strip():
                raise MalformedInput(f"unexpected header line {line!r}")
            continue
        m = _FIELD_RE.match(raw.strip())
        if m and m.group(1) not in "ABCDEFGabcdefg":
            # body field lines; only meter, unit length and key affect the melody
            if m.group(1) in "MLK":
                body_lines.append(f"[{m.group(1)}:{m.group(2).split('%', 1)[0]}]")
        else:
            body_lines.append(raw)
    for required in ("X", "K"):
        if required not in headers:
            raise MalformedInput(f"missing {required}: header")
    meter = headers.get("M")
    if meter is None:
        raise MalformedInput("missing M: header")
    _parse_meter(meter)
    unit = Fraction(headers["L"].strip()) if "L" in headers else Fraction(1, 8)
    tonic, mode, fifths = _parse_abc_key(headers["K"])

    body = _AbcBody(unit, fifths)
    body.scan("\n".join(body_lines))
    bars = list(body.bars)
    while len(bars) > 1 and not bars[0].events:
        bars[1].start_repeat = bars[1].start_repeat or bars[0].start_repeat
        bars.pop(0)
    while len(bars) > 1 and not bars[-1].events:
        last = bars.pop()
        bars[-1].end_repeat = bars[-1].end_repeat or last.end_repeat
    first_len = sum((e.dur for e in bars[0].events), Fraction(0))
    pickup = first_len if len(bars) > 1 and first_len < BEATS_PER_BAR else None
    events = [e for b in _expand_repeats(bars) for e in b.events]
    sid = score_id if score_id is not None else headers["X"].strip()
    return _assemble(sid, tonic, mode, events, pickup)


# --------------------------------------------------------------------------
# MusicXML


def _strip_ns(root: ET.Element) -> None:
    for el in root.iter():
        if isinstance(el.tag, str) and "}" in el.tag:
            el.tag = el.tag.split("}", 1)[1]


def parse_musicxml(text: str, score_id: str = "musicxml") -> Score:
    """Parse the first part of a partwise MusicXML document into a Score.

    Only the first voice is read; chord notes after the first, grace and
    cue notes, harmony symbols and lyrics are ignored.
    """
    try:
        root = ET.fromstring(text.encode() if isinstance(text, str) else text)
    except ET.ParseError as exc:
        raise MalformedInput(f"invalid XML: {exc}") from None
    _strip_ns(root)
    if root.tag != "score-partwise":
        raise MalformedInput(f"unsupported root element <{root.tag}>")
    part = root.find("part")
    if part is None:
        raise MalformedInput("no <part> element")

    divisions = None
    tonic, mode = "C", "major"
    key_seen = False
    main_voice = None
    events: list[_Event] = []
    first_len = None
    measures = part.findall("measure")
    if not measures:
        raise MalformedInput("part has no measures")
    for mi, measure in enumerate(measures):
        measure_len = Fraction(0)
        for el in measure:
            if el.tag == "attributes":
                d = el.findtext("divisions")
                if d is not None:
                    divisions = int(d)
                for t in el.findall("time"):
                    beats, beat_type = t.findtext("beats"), t.findtext("beat-type")
                    if (beats or "").strip() != "4" or (beat_type or "").strip() != "4":
                        raise UnsupportedTimeSignature(f"time {beats}/{beat_type}")
                key = el.find("key")
                if key is not None and not key_seen and key.findtext("fifths") is not None:
                    key_seen = True
                    fifths = int(key.findtext("fifths"))
                    mode, offset = _normalize_mode(key.findtext("mode") or "major")
                    tonic = _tonic_from_fifths(fifths - offset)
            elif el.tag == "note":
                if el.find("grace") is not None or el.find("cue") is not None:
                    continue
                if el.find("chord") is not None:
                    continue
                voice = el.findtext("voice", "1").strip()
                if main_voice is None:
                    main_voice = voice
                if voice != main_voice:
                    continue
                if divisions is None:
                    raise MalformedInput("note before <divisions>")
                dur_text = el.findtext("duration")
                if dur_text is None:
                    raise MalformedInput("note without <duration>")
                dur = Fraction(int(dur_text), divisions)
                pitch = None
                if el.find("rest") is None:
                    p = el.find("pitch")
                    if p is None:
                        raise MalformedInput("note without pitch or rest")
                    alter = float(p.findtext("alter", "0"))
                    if alter != int(alter):
                        raise MalformedInput(f"microtonal alter {alter}")
                    try:
                        pitch = SpelledPitch(p.findtext("step").strip(), int(alter), int(p.findtext("octave")))
                    except (ValueError, AttributeError) as exc:
                        raise MalformedInput(f"bad pitch: {exc}") from None
                tie = any(t.get("type") == "start" for t in el.findall("tie"))
                events.append(_Event(pitch, dur, tie))
                measure_len += dur
            elif el.tag == "forward":
                voice = el.findtext("voice")
                if voice is None or voice.strip() == main_voice:
                    dur = Fraction(int(el.findtext("duration")), divisions)
                    events.append(_Event(None, dur))
                    measure_len += dur
        if mi == 0:
            first_len = measure_len
    pickup = first_len if len(measures) > 1 and first_len < BEATS_PER_BAR else None
    return _assemble(score_id, tonic, mode, events, pickup)


_XML_TYPES = {48: "whole", 36: "half", 24: "half", 18: "quarter", 12: "quarter",
              9: "eighth", 6: "eighth", 3: "16th"}
_XML_DIVISIONS = 12  # per quarter; lcm of the grid denominators


def write_musicxml(score: Score) -> str:
    """Render a Score as a single-part MusicXML string (divisions = 12)."""
    fifths = _key_fifths(score.tonic, score.mode)
    xml_mode = score.mode if score.mode != "other" else "major"
    root = ET.Element("score-partwise", version="3.1")
    plist = ET.SubElement(root, "part-list")
    sp = ET.SubElement(plist, "score-part", id="P1")
    ET.SubElement(sp, "part-name").text = "Melody"
    part = ET.SubElement(root, "part", id="P1")

    pieces: dict[int, list] = {b: [] for b in range(score.n_bars)}
    for note in score.notes:
        start = tick_to_beat(note.onset)
        end = tick_to_beat(note.offset)
        while start < end:
            bar = int(start // BEATS_PER_BAR)
            stop = min(end, Fraction((bar + 1) * BEATS_PER_BAR))
            pieces[bar].append((note.pitch, stop - start, start > tick_to_beat(note.onset), stop < end))
            start = stop
    for b in range(score.n_bars):
        m = ET.SubElement(part, "measure", number=str(b + 1))
        if b == 0:
            attrs = ET.SubElement(m, "attributes")
            ET.SubElement(attrs, "divisions").text = str(_XML_DIVISIONS)
            key = ET.SubElement(attrs, "key")
            ET.SubElement(key, "fifths").text = str(fifths)
            ET.SubElement(key, "mode").text = xml_mode
            t = ET.SubElement(attrs, "time")
            ET.SubElement(t, "beats").text = "4"
            ET.SubElement(t, "beat-type").text = "4"
            clef = ET.SubElement(attrs, "clef")
            ET.SubElement(clef, "sign").text = "G"
            ET.SubElement(clef, "line").text = "2"
        for pitch, dur, tie_stop, tie_start in pieces[b]:
            n = ET.SubElement(m, "note")
            if pitch is None:
                ET.SubElement(n, "rest")
            else:
                p = ET.SubElement(n, "pitch")
                ET.SubElement(p, "step").text = pitch.letter
                if pitch.accidental:
                    ET.SubElement(p, "alter").text = str(pitch.accidental)
                ET.SubElement(p, "octave").text = str(pitch.octave)
            divs = int(dur * _XML_DIVISIONS)
            ET.SubElement(n, "duration").text = str(divs)
            if pitch is not None:
                if tie_stop:
                    ET.SubElement(n, "tie", type="stop")
                if tie_start:
                    ET.SubElement(n, "tie", type="start")
            ET.SubElement(n, "voice").text = "1"
            if divs in _XML_TYPES:
                ET.SubElement(n, "type").text = _XML_TYPES[divs]
                if divs in (36, 18, 9):
                    ET.SubElement(n, "dot")
    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode")


# --------------------------------------------------------------------------
# corpus operations


def check_score(score: Score) -> str | None:
    """Return the reason a score is not representable, or None if it is."""
    if score.time_signature != "4/4":
        return "time_signature"
    if score.n_bars > MAX_BARS:
        return "too_long"
    pos = 0
    for note in score.notes:
        if not (isinstance(note.onset, int) and isinstance(note.duration, int)):
            return "off_grid"
        if note.onset != pos or note.duration < 1:
            return "off_grid"
        pos = note.offset
    if pos != score.n_ticks:
        return "off_grid"
    return None


def filter_corpus(scores: Iterable[Score], counts: Counter | None = None) -> list[Score]:
    """Keep representable 4/4 pieces of at most MAX_BARS bars.

    Drop reasons are tallied into ``counts`` when given.
    """
    kept = []
    for s in scores:
        reason = check_score(s)
        if counts is not None:
            counts[reason or "kept"] += 1
        if reason is None:
            kept.append(s)
    return kept


def _respell(step: int, midi: int) -> SpelledPitch:
    for delta in (0, -1, 1, -2, 2):
        try:
            return SpelledPitch.from_step(step + delta, midi)
        except ValueError:
            continue
    raise OutOfRange(f"cannot spell MIDI {midi}")


def transpose_tonic(tonic: str, mode: str, k: int) -> tuple[str, int]:
    """New tonic name and signed diatonic shift for a transposition by k semitones.

    The new tonic is the spelling whose key signature has the fewest
    accidentals; ties go to sharps when moving up and flats when moving down.
    """
    letter, acc = tonic_parts(tonic)
    target_pc = (_NATURAL_PC[letter] + acc + k) % 12
    best = None
    for cand in LETTERS:
        cand_acc = (target_pc - _NATURAL_PC[cand] + 6) % 12 - 6
        if abs(cand_acc) > 1:
            continue
        name = tonic_name(cand, cand_acc)
        fifths = _key_fifths(name, mode)
        rank = (abs(fifths), 0 if (fifths >= 0) == (k >= 0) else 1)
        if best is None or rank < best[0]:
            best = (rank, cand, name)
    _, new_letter, new_name = best
    d = (LETTERS.index(new_letter) - LETTERS.index(letter)) % 7
    if k < 0 and d > 0:
        d -= 7
    return new_name, d


def transpose(
    score: Score,
    k: int,
    pitch_range: tuple[int, int] = (MIN_PITCH, MAX_PITCH),
) -> Score:
    """Shift every pitch and the tonic by ``k`` semitones, keeping staff intervals."""
    if not -6 <= k <= 6:
        raise ValueError(f"transposition {k} outside [-6, 6]")
    if k == 0:
        return score
    lo, hi = pitch_range
    new_tonic, d = transpose_tonic(score.tonic, score.mode, k)
    notes = []
    for note in score.notes:
        if note.is_rest:
            notes.append(note)
            continue
        midi = note.pitch.midi + k
        if not lo <= midi <= hi:
            raise OutOfRange(f"{note.pitch.name}{k:+d} leaves [{lo}, {hi}]")
        try:
            p = SpelledPitch.from_step(note.pitch.step + d, midi)
        except ValueError:
            p = _respell(note.pitch.step + d, midi)
        notes.append(replace(note, pitch=p))
    return replace(score, tonic=new_tonic, notes=tuple(notes))


def split_train_valid(scores: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    order = list(range(len(scores)))
    random.Random(seed).shuffle(order)
    n_train = math.ceil(round(len(scores) * ratio, 9))
    return [scores[i] for i in order[:n_train]], [scores[i] for i in order[n_train:]]


def write_manifest(path, entries: list[dict], counts: Counter, seed: int | None = None) -> None:
    doc = {"seed": seed, "counts": dict(counts), "pieces": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
