"""Corpus statistics and a schema-faithful synthetic corpus."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..dsp import MAX_PITCH, MIN_PITCH, VELOCITIES, SynthNoteSpec, midi_to_hz, synth_note
from .example import FAMILIES, QUALITIES, SOURCES, NoteRecord, encode_example, parse_example
from .records import read_records, write_records

# Published family x source note counts (rows follow FAMILIES, columns SOURCES).
PUBLISHED_FAMILY_SOURCE = np.array([
    [200, 8387, 60368],
    [13760, 70, 0],
    [6572, 70, 2816],
    [13343, 16805, 5275],
    [8508, 42709, 3838],
    [27722, 5581, 1763],
    [176, 36401, 0],
    [14262, 76, 528],
    [20510, 84, 0],
    [0, 0, 5501],
    [3925, 140, 6688],
])
# The published grand total; the published cells sum to 306078 (electronic column off by 99).
PUBLISHED_TOTAL = 306043
PUBLISHED_AVG_PITCHES_PER_INSTRUMENT = 65.4
PUBLISHED_AVG_VELOCITIES_PER_PITCH = 4.75
# Published marginal frequency (percent) of each quality tag, in QUALITIES order.
QUALITY_MARGINALS = np.array([13.5, 11.0, 17.0, 14.7, 8.5, 3.4, 3.2, 10.2, 16.8, 1.8])


@dataclass
class CorpusStats:
    """Counts over a corpus.

    ``cooccurrence[i, j]`` is the percentage of notes carrying tag ``i`` or
    ``j`` that carry both (intersection over union); the diagonal holds the
    marginals.
    """

    total_notes: int
    family_source: np.ndarray
    avg_pitches_per_instrument: float
    avg_velocities_per_pitch: float
    quality_marginals: np.ndarray
    cooccurrence: np.ndarray
    n_instruments: int = 0

    def __eq__(self, other):
        return (self.total_notes == other.total_notes
                and np.array_equal(self.family_source, other.family_source)
                and self.avg_pitches_per_instrument == other.avg_pitches_per_instrument
                and self.avg_velocities_per_pitch == other.avg_velocities_per_pitch
                and np.array_equal(self.quality_marginals, other.quality_marginals)
                and np.array_equal(self.cooccurrence, other.cooccurrence)
                and self.n_instruments == other.n_instruments)

    def report_lines(self) -> list[str]:
        lines = [f"total_notes={self.total_notes}", f"instruments={self.n_instruments}",
                 f"avg_pitches_per_instrument={self.avg_pitches_per_instrument:.4f}",
                 f"avg_velocities_per_pitch={self.avg_velocities_per_pitch:.4f}"]
        for fi, fam in enumerate(FAMILIES):
            for si, src in enumerate(SOURCES):
                lines.append(f"count.{fam}.{src}={int(self.family_source[fi, si])}")
        for qi, q in enumerate(QUALITIES):
            lines.append(f"quality.{q}={self.quality_marginals[qi]:.2f}")
        for i in range(len(QUALITIES)):
            for j in range(i):
                lines.append(f"cooccurrence.{QUALITIES[i]}.{QUALITIES[j]}={self.cooccurrence[i, j]:.2f}")
        return lines


def corpus_stats(records: Iterable[NoteRecord]) -> CorpusStats:
    """Exact counts in one streaming pass; independent of record order."""
    fam_src = np.zeros((len(FAMILIES), len(SOURCES)), dtype=np.int64)
    pitches: dict[int, set] = defaultdict(set)
    velocities: dict[tuple[int, int], set] = defaultdict(set)
    tag_counts = np.zeros(len(QUALITIES), dtype=np.int64)
    pair_counts = np.zeros((len(QUALITIES), len(QUALITIES)), dtype=np.int64)
    total = 0
    for rec in records:
        total += 1
        fam_src[FAMILIES.index(rec.family), SOURCES.index(rec.source)] += 1
        pitches[rec.instrument_id].add(rec.pitch)
        velocities[(rec.instrument_id, rec.pitch)].add(rec.velocity)
        q = np.asarray(rec.qualities, dtype=np.int64)
        tag_counts += q
        pair_counts += np.outer(q, q)
    if total == 0:
        raise ValueError("empty corpus")
    union = tag_counts[:, None] + tag_counts[None, :] - pair_counts
    with np.errstate(invalid="ignore", divide="ignore"):
        co = np.where(union > 0, 100.0 * pair_counts / np.maximum(union, 1), 0.0)
    np.fill_diagonal(co, 100.0 * tag_counts / total)
    return CorpusStats(
        total_notes=total,
        family_source=fam_src,
        avg_pitches_per_instrument=float(np.mean([len(s) for s in pitches.values()])),
        avg_velocities_per_pitch=float(np.mean([len(s) for s in velocities.values()])),
        quality_marginals=100.0 * tag_counts / total,
        cooccurrence=co,
        n_instruments=len(pitches),
    )


def sample_qualities(rng: np.random.Generator, marginals=QUALITY_MARGINALS) -> np.ndarray:
    """Independent tags at the given percentages, except bright/dark which are drawn
    as one three-way choice so they never co-occur."""
    p = np.asarray(marginals, dtype=np.float64) / 100.0
    q = (rng.random(len(p)) < p).astype(np.int64)
    u = rng.random()
    q[0] = int(u < p[0])
    q[1] = int(p[0] <= u < p[0] + p[1])
    return q


@dataclass
class ToyInstrument:
    instrument_id: int
    family: str
    source: str
    n_harmonics: int
    harmonic_decay: float
    pitches: list[int] = field(default_factory=list)


def _toy_instruments(n: int, rng: np.random.Generator, n_pitches: int) -> list[ToyInstrument]:
    fam_p = PUBLISHED_FAMILY_SOURCE.sum(axis=1) / PUBLISHED_FAMILY_SOURCE.sum()
    out = []
    for i in range(n):
        fi = int(rng.choice(len(FAMILIES), p=fam_p))
        row = PUBLISHED_FAMILY_SOURCE[fi]
        si = int(rng.choice(len(SOURCES), p=row / row.sum()))
        span = min(n_pitches, MAX_PITCH - MIN_PITCH + 1)
        lo = int(rng.integers(MIN_PITCH, MAX_PITCH - span + 2))
        out.append(ToyInstrument(i, FAMILIES[fi], SOURCES[si], int(rng.integers(3, 13)),
                                 float(rng.uniform(0.5, 2.5)), list(range(lo, lo + span))))
    return out


def generate_toy_corpus(n_instruments: int, seed: int = 0, n_pitches: int = 12,
                        velocities=(100, 127), duration_s: float = 4.0) -> Iterator[NoteRecord]:
    """Deterministic stream of synthetic notes with NSynth-style annotations.

    Each instrument gets a family/source drawn from the published table, a
    fixed harmonic profile and a contiguous run of ``n_pitches`` pitches,
    each rendered at every velocity in ``velocities``.
    """
    if n_instruments < 1:
        raise ValueError("n_instruments must be >= 1")
    rng = np.random.default_rng(seed)
    for inst in _toy_instruments(n_instruments, rng, n_pitches):
        for pitch in inst.pitches:
            for vel in velocities:
                note_seed = int(rng.integers(2 ** 31))
                audio = synth_note(SynthNoteSpec(pitch, vel, inst.n_harmonics, inst.harmonic_decay, note_seed),
                                   duration_s)
                yield NoteRecord(
                    note_id=f"{inst.family}_{inst.source}_{inst.instrument_id:03d}-{pitch:03d}-{vel:03d}",
                    instrument_id=inst.instrument_id, pitch=pitch, velocity=vel, source=inst.source,
                    family=inst.family, qualities=sample_qualities(rng), audio=audio)


def write_corpus(records: Iterable[NoteRecord], path) -> int:
    with open(path, "wb") as f:
        return write_records((encode_example(r) for r in records), f)


def read_corpus(path) -> Iterator[NoteRecord]:
    """Records from one file, or from every ``*.tfrecord`` file in a directory (sorted)."""
    path = Path(path)
    files = sorted(path.glob("*.tfrecord*")) if path.is_dir() else [path]
    for fp in files:
        with open(fp, "rb") as f:
            for payload in read_records(f):
                yield parse_example(payload)
