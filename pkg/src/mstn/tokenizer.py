"""Frame-based token sequences on the 6-ticks-per-beat grid.

A sequence is ``[tonic, mode]`` followed by one token per tick: the pitch
(or REST) token where an event starts and HOLD (``__``) on every later
tick that the event sustains through.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import EmptyCorpus, MalformedSequence, OutOfRange, UnrepresentableDuration
from .score_io import TICKS_PER_BAR, Note, Score, SpelledPitch, transpose

log = logging.getLogger(__name__)

PAD, HOLD, REST = "PAD", "__", "REST"
SPECIALS = (PAD, HOLD, REST)
TONIC_PREFIX, MODE_PREFIX = "tonic_", "mode_"
PREFIX_LEN = 2
TRANSPOSITIONS = range(-6, 7)


def tonic_token(tonic: str) -> str:
    return TONIC_PREFIX + tonic


def mode_token(mode: str) -> str:
    return MODE_PREFIX + mode


def _pitch_key(name: str):
    p = SpelledPitch.from_name(name)
    return (p.midi, p.step)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})
        if len(self._ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def pad(self) -> int:
        return self._ids[PAD]

    @property
    def hold(self) -> int:
        return self._ids[HOLD]

    @property
    def rest(self) -> int:
        return self._ids[REST]

    def is_tonic(self, idx: int) -> bool:
        return self.tokens[idx].startswith(TONIC_PREFIX)

    def is_mode(self, idx: int) -> bool:
        return self.tokens[idx].startswith(MODE_PREFIX)

    def is_frame(self, idx: int) -> bool:
        """True for tokens allowed after the key prefix (pitches, REST, HOLD)."""
        t = self.tokens[idx]
        return t not in (PAD,) and not t.startswith((TONIC_PREFIX, MODE_PREFIX))

    def ids_where(self, pred) -> list[int]:
        return [i for i in range(len(self.tokens)) if pred(i)]

    def to_json(self) -> str:
        return json.dumps({t: i for i, t in enumerate(self.tokens)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        mapping = json.loads(text)
        tokens = sorted(mapping, key=mapping.__getitem__)
        if [mapping[t] for t in tokens] != list(range(len(tokens))):
            raise ValueError("vocabulary ids are not dense")
        return cls(tuple(tokens))


def build_vocab(corpus: Iterable[Score]) -> Vocab:
    """Vocabulary covering every pitch, tonic and mode in the corpus.

    Order: specials, tonics, modes, then pitches by (MIDI number, staff step).
    """
    pitches, tonics, modes = set(), set(), set()
    n = 0
    for s in corpus:
        n += 1
        tonics.add(s.tonic)
        modes.add(s.mode)
        pitches.update(note.pitch.name for note in s.notes if not note.is_rest)
    if n == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    tokens = list(SPECIALS)
    tokens += [tonic_token(t) for t in sorted(tonics)]
    tokens += [mode_token(m) for m in sorted(modes)]
    tokens += sorted(pitches, key=_pitch_key)
    return Vocab(tuple(tokens))


@dataclass(frozen=True)
class TokenSequence:
    template_id: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))

    def __len__(self):
        return len(self.tokens)

    @property
    def n_bars(self) -> int:
        return (len(self.tokens) - PREFIX_LEN) // TICKS_PER_BAR


def encode(score: Score, vocab: Vocab, template_id: str | None = None) -> TokenSequence:
    """Frame tokens for a filtered score; gaps between notes are encoded as rests."""
    frames = [None] * score.n_ticks
    pos = 0
    for note in score.notes:
        if note.onset < pos or note.duration < 1 or note.offset > score.n_ticks:
            raise UnrepresentableDuration(f"note {note} overlaps or leaves the bar grid")
        for t in range(pos, note.onset):
            frames[t] = vocab.rest if t == pos else vocab.hold
        frames[note.onset] = vocab.rest if note.is_rest else vocab.id(note.pitch.name)
        for t in range(note.onset + 1, note.offset):
            frames[t] = vocab.hold
        pos = note.offset
    for t in range(pos, score.n_ticks):
        frames[t] = vocab.rest if t == pos else vocab.hold
    prefix = [vocab.id(tonic_token(score.tonic)), vocab.id(mode_token(score.mode))]
    return TokenSequence(template_id if template_id is not None else score.id, prefix + frames)


def repair(tokens: Sequence[int], vocab: Vocab) -> tuple[list[int], int]:
    """Replace frame positions that cannot be decoded with REST.

    Fixes a HOLD with nothing to continue and any non-frame token (PAD,
    tonic, mode) inside the frame body.  Returns the repaired list and
    the number of replacements.
    """
    out = list(tokens)
    n = 0
    for i in range(PREFIX_LEN, len(out)):
        bad = not vocab.is_frame(out[i]) or (i == PREFIX_LEN and out[i] == vocab.hold)
        if bad:
            out[i] = vocab.rest
            n += 1
    return out, n


def decode(seq: TokenSequence, vocab: Vocab, score_id: str | None = None) -> Score:
    toks = seq.tokens
    if len(toks) < PREFIX_LEN + TICKS_PER_BAR or (len(toks) - PREFIX_LEN) % TICKS_PER_BAR:
        raise MalformedSequence(f"length {len(toks)} is not 2 + 24*n_bars")
    if not vocab.is_tonic(toks[0]) or not vocab.is_mode(toks[1]):
        raise MalformedSequence("sequence must start with tonic and mode tokens")
    tonic = vocab.token(toks[0])[len(TONIC_PREFIX):]
    mode = vocab.token(toks[1])[len(MODE_PREFIX):]
    notes: list[Note] = []
    current = None  # [pitch, onset]
    body = toks[PREFIX_LEN:]
    for t, idx in enumerate(body):
        if idx == vocab.hold:
            if current is None:
                raise MalformedSequence("HOLD with no preceding onset")
            continue
        if not vocab.is_frame(idx):
            raise MalformedSequence(f"token {vocab.token(idx)!r} inside frame body")
        if current is not None:
            notes.append(Note(current[0], current[1], t - current[1]))
        tok = vocab.token(idx)
        current = [None if tok == REST else SpelledPitch.from_name(tok), t]
    notes.append(Note(current[0], current[1], len(body) - current[1]))
    return Score(score_id if score_id is not None else seq.template_id, tonic, mode, tuple(notes),
                 len(body) // TICKS_PER_BAR)


def augment_corpus(corpus: Iterable[Score]) -> tuple[list[Score], dict[str, str]]:
    """Transpose each piece by -6..6 semitones, skipping out-of-range copies.

    Copies are named ``<id>@<k>``; the k=0 copy keeps the source id.  The
    returned map sends every augmented id to its source (template) id.
    """
    out: list[Score] = []
    template_map: dict[str, str] = {}
    for s in corpus:
        for k in TRANSPOSITIONS:
            try:
                t = transpose(s, k)
            except OutOfRange:
                continue
            if k:
                t = replace(t, id=f"{s.id}@{k:+d}")
            out.append(t)
            template_map[t.id] = s.id
    return out, template_map


def write_token_file(path, seqs: Iterable[TokenSequence], vocab: Vocab, header: str | None = None) -> None:
    """One sequence per line; ``header`` becomes a leading ``#`` comment line."""
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for seq in seqs:
            fh.write(f"template_id={seq.template_id} " + " ".join(vocab.token(i) for i in seq.tokens) + "\n")


def read_token_file(path, vocab: Vocab) -> list[TokenSequence]:
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, _, rest = line.partition(" ")
            if not head.startswith("template_id="):
                raise MalformedSequence(f"{path}:{lineno}: missing template_id= prefix")
            try:
                ids = [vocab.id(t) for t in rest.split()]
            except KeyError as exc:
                raise MalformedSequence(f"{path}:{lineno}: unknown token {exc}") from None
            seqs.append(TokenSequence(head[len("template_id="):], ids))
    return seqs
