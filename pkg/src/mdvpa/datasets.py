"""Experiment data: synthetic concatenated HMMs, character streams, web clicks.

Symbols are 0-based in memory. Files use 1-based symbol tokens (MSNBC
categories 1..17, the sequence format below) and 1-based step indices for
segment boundaries.

Sequence file format::

    vocab=8 boundaries=151
    # comment lines start with '#'
    1 3 2 2 ...
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .ihmm_core import HmmSpec

PathLike = Union[str, Path]

TEXT_ALPHABET = string.ascii_lowercase
TEXT_VOCAB = len(TEXT_ALPHABET) + 1  # plus one catch-all symbol
TEXT_CATCH_ALL = len(TEXT_ALPHABET)
_TEXT_INDEX = {ch: i for i, ch in enumerate(TEXT_ALPHABET)}

MSNBC_VOCAB = 17

# Substitution for the copyrighted middle source; recorded in run metadata.
DEFAULT_TEXT_SOURCES = ("alice_in_wonderland.txt", "pride_and_prejudice.txt",
                        "war_and_peace.txt")
TEXT_SOURCE_NOTE = ("middle text source replaced by the opening of Pride and Prejudice "
                    "(public domain) in place of a copyrighted novel")


class DataError(ValueError):
    """Input data could not be read or does not match its format."""


_THIRD = 1.0 / 3.0

SYNTH_HMM_A = HmmSpec(
    transition=[[0.0, 0.5, 0.5],
                [0.5, 0.5, 0.0],
                [0.5, 0.0, 0.5]],
    emission=[[0.5, 0.0, 0.5],
              [_THIRD, _THIRD, _THIRD],
              [0.0, 0.5, 0.5]],
)

SYNTH_HMM_B = HmmSpec(
    transition=[[0.0, 0.5, 0.5, 0.0],
                [0.0, 0.0, 0.5, 0.5],
                [0.5, 0.0, 0.0, 0.5],
                [0.5, 0.5, 0.0, 0.0]],
    emission=[[_THIRD, 0, 0, 0, 0, 0, _THIRD, _THIRD],
              [_THIRD, _THIRD, _THIRD, 0, 0, 0, 0, 0],
              [0, 0, _THIRD, _THIRD, _THIRD, 0, 0, 0],
              [0, 0, 0, 0, _THIRD, _THIRD, _THIRD, 0]],
)


def embed_vocab(spec: HmmSpec, vocab_size: int) -> HmmSpec:
    """Same HMM over a larger alphabet; extra symbols get probability 0."""
    if vocab_size < spec.vocab_size:
        raise ValueError("cannot shrink the alphabet")
    emis = np.zeros((spec.num_states, vocab_size))
    emis[:, : spec.vocab_size] = spec.emission
    return HmmSpec(spec.transition, emis, spec.initial)


@dataclass(frozen=True, eq=False)
class LabeledSequence:
    symbols: np.ndarray
    vocab_size: int
    boundaries: Tuple[int, ...] = ()  # 0-based index where each new segment starts
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        symbols = np.asarray(self.symbols, dtype=np.int64)
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if symbols.ndim != 1:
            raise ValueError("symbols must be one-dimensional")
        if len(symbols) and (symbols.min() < 0 or symbols.max() >= self.vocab_size):
            raise ValueError(f"symbols must lie in 0..{self.vocab_size - 1}")
        b = self.boundaries
        if any(x >= y for x, y in zip(b, b[1:])) or any(not 0 < x < len(symbols) for x in b):
            raise ValueError("boundaries must be strictly increasing and inside the sequence")

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        if not isinstance(other, LabeledSequence):
            return NotImplemented
        return (self.vocab_size == other.vocab_size
                and self.boundaries == other.boundaries
                and np.array_equal(self.symbols, other.symbols))


def generate_hmm(spec: HmmSpec, n: int, rng: np.random.Generator):
    """Ancestral sample of ``n`` steps; returns ``(states, symbols)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cum_t = np.cumsum(spec.transition, axis=1)
    cum_t[:, -1] = 1.0
    u = rng.random(n)
    states = np.empty(n, dtype=np.int64)
    cum_i = np.cumsum(spec.initial)
    cum_i[-1] = 1.0
    states[0] = np.searchsorted(cum_i, u[0], side="right")
    for t in range(1, n):
        states[t] = np.searchsorted(cum_t[states[t - 1]], u[t], side="right")
    cum_e = np.cumsum(spec.emission, axis=1)
    cum_e[:, -1] = 1.0
    v = rng.random(n)
    symbols = (cum_e[states] <= v[:, None]).sum(axis=1)
    return states, symbols.astype(np.int64)


def build_synthetic_experiment(rng: np.random.Generator, segment_length: int = 150
                               ) -> LabeledSequence:
    """Positively correlated 3-state HMM followed by the 4-state, 8-symbol HMM."""
    vocab = SYNTH_HMM_B.vocab_size
    _, first = generate_hmm(embed_vocab(SYNTH_HMM_A, vocab), segment_length, rng)
    _, second = generate_hmm(SYNTH_HMM_B, segment_length, rng)
    return LabeledSequence(np.concatenate([first, second]), vocab, (segment_length,),
                           {"source": "synthetic"})


# ------------------------------------------------------------------------ text


def text_to_symbols(text: str) -> np.ndarray:
    return np.array([_TEXT_INDEX.get(ch, TEXT_CATCH_ALL) for ch in text.lower()],
                    dtype=np.int64)


def bundled_text_paths() -> List[Path]:
    root = resources.files("mdvpa") / "data"
    return [Path(str(root / name)) for name in DEFAULT_TEXT_SOURCES]


def load_text_chars(paths: Sequence[PathLike], chars_per_source: int = 600
                    ) -> LabeledSequence:
    """First ``chars_per_source`` characters of each file, concatenated."""
    if chars_per_source < 1:
        raise ValueError("chars_per_source must be >= 1")
    parts = []
    for path in paths:
        try:
            text = Path(path).read_bytes().decode("utf-8", errors="replace")
        except OSError as exc:
            raise DataError(f"cannot read text source {path}: {exc}") from exc
        if len(text) < chars_per_source:
            raise DataError(
                f"text source {path} has {len(text)} characters, "
                f"need {chars_per_source}"
            )
        parts.append(text_to_symbols(text[:chars_per_source]))
    boundaries = tuple(chars_per_source * i for i in range(1, len(parts)))
    return LabeledSequence(np.concatenate(parts), TEXT_VOCAB, boundaries,
                           {"sources": [str(p) for p in paths]})


# ---------------------------------------------------------------------- msnbc


def parse_msnbc(path: PathLike) -> List[np.ndarray]:
    """Sessions of the MSNBC anonymous web data, as 0-based category arrays.

    Lines starting with '%' are skipped; if a ``% Sequences`` marker is present
    everything before it (including the category-name line) is header.
    """
    try:
        lines = Path(path).read_text(encoding="ascii", errors="replace").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read MSNBC file {path}: {exc}") from exc
    start = 0
    for i, line in enumerate(lines):
        if line.lstrip().lower().startswith("% sequences"):
            start = i + 1
            break
    sessions = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if line.startswith("%") or not line.strip():
            continue
        seq = []
        for tok in line.split():
            try:
                value = int(tok)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer token {tok!r}") from None
            if not 1 <= value <= MSNBC_VOCAB:
                raise DataError(
                    f"{path}:{lineno}: category {value} outside 1..{MSNBC_VOCAB}"
                )
            seq.append(value - 1)
        sessions.append(np.array(seq, dtype=np.int64))
    return sessions


def write_msnbc(sessions: Sequence[Sequence[int]], path: PathLike) -> None:
    lines = ["% Sequences:"]
    lines += [" ".join(str(int(s) + 1) for s in seq) for seq in sessions]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def msnbc_stream(sessions: Sequence[np.ndarray], max_events: int = 10_000
                 ) -> LabeledSequence:
    """Concatenate sessions in file order, truncated to ``max_events``."""
    symbols: List[np.ndarray] = []
    starts = []
    total = 0
    for seq in sessions:
        if total >= max_events:
            break
        seq = seq[: max_events - total]
        if len(seq) == 0:
            continue
        starts.append(total)
        symbols.append(seq)
        total += len(seq)
    if not symbols:
        raise DataError("MSNBC input contains no events")
    stream = np.concatenate(symbols)
    return LabeledSequence(stream, MSNBC_VOCAB, (),
                           {"session_starts": starts, "max_events": max_events})


# --------------------------------------------------------- sequence file format


def write_sequence(seq: LabeledSequence, path: PathLike, per_line: int = 30) -> None:
    bounds = ",".join(str(b + 1) for b in seq.boundaries)
    lines = [f"vocab={seq.vocab_size} boundaries={bounds}"]
    tokens = [str(int(s) + 1) for s in seq.symbols]
    lines += [" ".join(tokens[i:i + per_line]) for i in range(0, len(tokens), per_line)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_sequence(path: PathLike) -> LabeledSequence:
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read sequence file {path}: {exc}") from exc
    header = None
    tokens: List[int] = []
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if header is None:
            header = _parse_header(stripped, path, lineno)
            continue
        for tok in stripped.split():
            try:
                value = int(tok)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer token {tok!r}") from None
            if not 1 <= value <= header[0]:
                raise DataError(f"{path}:{lineno}: symbol {value} outside 1..{header[0]}")
            tokens.append(value - 1)
    if header is None:
        raise DataError(f"{path}: missing 'vocab=<V> boundaries=<list>' header")
    vocab, bounds = header
    try:
        return LabeledSequence(np.array(tokens, dtype=np.int64), vocab,
                               tuple(b - 1 for b in bounds), {"source": str(path)})
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _parse_header(line: str, path, lineno: int):
    fields = dict(part.split("=", 1) for part in line.split() if "=" in part)
    try:
        vocab = int(fields["vocab"])
        raw = fields.get("boundaries", "")
        bounds = [int(b) for b in raw.split(",") if b]
    except (KeyError, ValueError):
        raise DataError(f"{path}:{lineno}: bad header {line!r}") from None
    return vocab, bounds
