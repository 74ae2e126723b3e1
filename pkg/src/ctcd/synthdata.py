"""Synthetic "toy speech": noisy template sequences with CTC-expressible labels.

Each label has a fixed template vector. An utterance renders its labels as
runs of the template (random duration) plus Gaussian noise, with optional
silence runs (zero template plus noise) in between. Adjacent repeated labels
are always separated by silence, so every target fits its frame count.

The label ``alphabet_size - 1`` is the space symbol that separates words.
Models add a blank after it, so they predict ``alphabet_size + 1`` classes.

Dataset text format::

    CTCD1 <|Y|> <D_in>
    <id>
    <N>
    <N labels, space separated>
    <T>
    <T lines of D_in floats>
    <blank line>
    ... next record ...
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ctcd.ctc import min_frames
from ctcd.errors import ConfigError, FormatError, TruncatedError
from ctcd.models import atomic_write
from ctcd.numcore import Rng

MAGIC = "CTCD1"
TEMPLATE_STREAM = 7919


@dataclass
class TaskSpec:
    alphabet_size: int
    feature_dim: int
    templates: np.ndarray | None = None
    d_min: int = 2
    d_max: int = 4
    sigma: float = 0.5
    silence_prob: float = 0.25
    min_symbols: int = 3
    max_symbols: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.alphabet_size < 1 or self.feature_dim < 1:
            raise ConfigError("alphabet_size and feature_dim must be >= 1")
        if self.d_min < 1:
            raise ConfigError("d_min must be >= 1: a zero-frame symbol cannot be emitted")
        if self.d_max < self.d_min:
            raise ConfigError("d_max must be >= d_min")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if not 0 <= self.silence_prob <= 1:
            raise ConfigError("silence_prob must lie in [0, 1]")
        if not 1 <= self.min_symbols <= self.max_symbols:
            raise ConfigError("need 1 <= min_symbols <= max_symbols")
        if self.templates is None:
            rng = Rng(self.seed, TEMPLATE_STREAM)
            self.templates = rng.normal_array((self.alphabet_size, self.feature_dim))
        self.templates = np.asarray(self.templates, dtype=np.float64)
        if self.templates.shape != (self.alphabet_size, self.feature_dim):
            raise ConfigError(f"templates must be {(self.alphabet_size, self.feature_dim)}, got {self.templates.shape}")
        rows = [tuple(r) for r in self.templates] + [(0.0,) * self.feature_dim]
        if len(set(rows)) != len(rows):
            raise ConfigError("templates must be pairwise distinct and differ from silence (zero)")

    @property
    def space(self) -> int:
        return self.alphabet_size - 1

    @property
    def num_classes(self) -> int:
        """|Y'|: labels plus the blank."""
        return self.alphabet_size + 1


@dataclass
class Utterance:
    id: str
    labels: tuple[int, ...]
    features: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    alphabet_size: int
    feature_dim: int
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def space(self) -> int:
        return self.alphabet_size - 1


def _render(spec: TaskSpec, rng: Rng, labels: list[int]) -> np.ndarray:
    silence = np.zeros(spec.feature_dim)
    rows: list[np.ndarray] = []

    def run(template):
        for _ in range(rng.randint(spec.d_min, spec.d_max)):
            rows.append(template)

    if rng.uniform() < spec.silence_prob:
        run(silence)
    for i, lab in enumerate(labels):
        if i > 0:
            forced = lab == labels[i - 1]
            if rng.uniform() < spec.silence_prob or forced:
                run(silence)
        run(spec.templates[lab])
    if rng.uniform() < spec.silence_prob:
        run(silence)
    clean = np.array(rows)
    return clean + rng.normal_array(clean.shape, spec.sigma) if spec.sigma > 0 else clean


def generate(spec: TaskSpec, count: int, stream: int = 0, prefix: str = "utt") -> list[Utterance]:
    """``count`` utterances; ``stream`` selects an independent split of the same task."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = Rng(spec.seed, stream)
    out = []
    for i in range(count):
        n = rng.randint(spec.min_symbols, spec.max_symbols)
        labels = [rng.randint(0, spec.alphabet_size - 1) for _ in range(n)]
        feats = _render(spec, rng, labels)
        if min_frames(labels) > feats.shape[0]:
            raise ConfigError(f"{prefix}{i}: {len(labels)} labels do not fit {feats.shape[0]} frames")
        out.append(Utterance(f"{prefix}{i:05d}", tuple(labels), feats))
    return out


def make_dataset(spec: TaskSpec, count: int, stream: int = 0, prefix: str = "utt") -> Dataset:
    return Dataset(spec.alphabet_size, spec.feature_dim, generate(spec, count, stream, prefix))


# -- text format ----------------------------------------------------------------------


def format_dataset(ds: Dataset) -> str:
    lines = [f"{MAGIC} {ds.alphabet_size} {ds.feature_dim}"]
    for u in ds.utterances:
        if u.features.ndim != 2 or u.features.shape[1] != ds.feature_dim:
            raise ConfigError(f"{u.id}: features {u.features.shape} do not match D_in={ds.feature_dim}")
        if any(not 0 <= lab < ds.alphabet_size for lab in u.labels):
            raise ConfigError(f"{u.id}: label outside [0, {ds.alphabet_size})")
        if not u.id or any(c.isspace() for c in u.id):
            raise ConfigError(f"utterance id {u.id!r} must be non-empty without whitespace")
        lines += [u.id, str(len(u.labels)), " ".join(map(str, u.labels)), str(u.num_frames)]
        lines += [" ".join(repr(v) for v in row) for row in u.features.tolist()]
        lines.append("")
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    atomic_write(path, format_dataset(ds).encode())


class _Lines:
    def __init__(self, text: str):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0

    def next(self, what: str, record: str | None) -> str:
        if self.pos >= len(self.lines):
            where = f"record {record!r}" if record else "file"
            raise TruncatedError(f"line {self.pos + 1}: {where} truncated, expected {what}")
        self.pos += 1
        return self.lines[self.pos - 1]

    def fail(self, msg: str, record: str | None = None) -> FormatError:
        where = f" (record {record!r})" if record else ""
        return FormatError(f"line {self.pos}{where}: {msg}")

    def integer(self, what: str, record: str | None) -> int:
        raw = self.next(what, record)
        try:
            value = int(raw)
        except ValueError:
            raise self.fail(f"expected {what}, got {raw!r}", record) from None
        if value < 0:
            raise self.fail(f"{what} must be >= 0", record)
        return value


def parse_dataset(text: str) -> Dataset:
    src = _Lines(text)
    header = src.next("header", None).split()
    if len(header) != 3 or header[0] != MAGIC:
        raise src.fail(f"bad header, expected '{MAGIC} <|Y|> <D_in>'")
    try:
        alphabet_size, feature_dim = int(header[1]), int(header[2])
    except ValueError:
        raise src.fail("header sizes must be integers") from None
    if alphabet_size < 1 or feature_dim < 1:
        raise src.fail("header sizes must be >= 1")
    utts = []
    while src.pos < len(src.lines):
        uid = src.next("utterance id", None)
        if not uid or uid != uid.strip():
            raise src.fail(f"bad utterance id {uid!r}")
        n = src.integer("label count", uid)
        raw = src.next("labels", uid).split()
        try:
            labels = tuple(int(v) for v in raw)
        except ValueError:
            raise src.fail("labels must be integers", uid) from None
        if len(labels) != n:
            raise src.fail(f"expected {n} labels, found {len(labels)}", uid)
        if any(not 0 <= lab < alphabet_size for lab in labels):
            raise src.fail(f"label outside [0, {alphabet_size})", uid)
        t_len = src.integer("frame count", uid)
        feats = np.empty((t_len, feature_dim))
        for t in range(t_len):
            row = src.next(f"frame {t}", uid).split()
            if len(row) != feature_dim:
                raise src.fail(f"frame {t} has {len(row)} values, expected {feature_dim}", uid)
            try:
                feats[t] = [float(v) for v in row]
            except ValueError:
                raise src.fail(f"frame {t} has a non-numeric value", uid) from None
        if src.next("blank separator line", uid) != "":
            raise src.fail("expected a blank line after the record", uid)
        utts.append(Utterance(uid, labels, feats))
    return Dataset(alphabet_size, feature_dim, utts)


def read_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read())
