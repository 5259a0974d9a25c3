"""Synthetic source/target domains.

Point testbed: Gaussian modes on a ring. Icon testbed: noisy 8x8 glyphs.
The target keeps a few source modes, adds novel ones, and drops the rest;
the dropped modes are the incompatible knowledge.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import SHARED, SOURCE_ONLY, TARGET_ONLY, ModeSpec


@dataclass
class SyntheticSourceSpec:
    testbed: str = "point"
    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.15
    per_mode: int = 2000

    def __post_init__(self):
        if self.testbed not in ("point", "icon"):
            raise ValueError(f"unknown testbed {self.testbed!r}")
        if self.n_modes < 4:
            raise ValueError("need at least 4 source modes")
        if self.std <= 0:
            raise ValueError("std must be positive")
        if self.testbed == "icon" and self.n_modes > len(GLYPHS):
            raise ValueError(f"icon testbed has only {len(GLYPHS)} glyphs")


@dataclass
class SyntheticTargetSpec:
    shared: tuple[int, ...] = (0, 2, 4)
    novel_from: tuple[int, ...] = (6,)   # source modes whose shifted copy becomes a target-only mode
    shift: float = 1.0
    shots: int = 10
    per_mode: int = 2000

    def validate(self, source: SyntheticSourceSpec) -> None:
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if any(not 0 <= i < source.n_modes for i in self.shared + self.novel_from):
            raise ValueError("mode index out of range")
        if len(set(self.shared)) >= source.n_modes:
            raise ValueError("target must exclude at least one source mode")


@dataclass
class Domain:
    samples: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    extra: dict = field(default_factory=dict)


# 8x8 glyphs, values in {-1, 1}
def _glyph(rows: list[str]) -> np.ndarray:
    return np.array([[1.0 if c == "#" else -1.0 for c in r] for r in rows]).ravel()


GLYPHS = [_glyph(g) for g in (
    ["........", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "........"],
    ["........", "........", "........", "########", "########", "........", "........", "........"],
    ["##......", ".##.....", "..##....", "...##...", "....##..", ".....##.", "......##", "........"],
    ["........", ".######.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".######.", "........"],
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."],
    ["........", "..####..", ".##..##.", ".#....#.", ".#....#.", ".##..##.", "..####..", "........"],
    ["#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#", "#.#.#.#.", ".#.#.#.#"],
    ["........", "......#.", ".....##.", "....###.", "...####.", "..#####.", ".######.", "........"],
)]


def ring_centers(n_modes: int, radius: float) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def source_centers(spec: SyntheticSourceSpec) -> np.ndarray:
    if spec.testbed == "point":
        return ring_centers(spec.n_modes, spec.radius)
    return np.stack(GLYPHS[:spec.n_modes])


def target_centers(src: SyntheticSourceSpec, tgt: SyntheticTargetSpec) -> tuple[np.ndarray, np.ndarray]:
    """(shared centers, novel centers)."""
    centers = source_centers(src)
    shared = centers[list(tgt.shared)]
    if src.testbed == "point":
        novel = np.array([centers[i] * (src.radius + tgt.shift) / src.radius for i in tgt.novel_from])
    else:
        # novel glyph: the source glyph mirrored left-right
        novel = np.array([centers[i].reshape(8, 8)[:, ::-1].ravel() for i in tgt.novel_from])
    return shared, novel.reshape(-1, centers.shape[1])


def _sample_modes(centers: np.ndarray, per_mode: int, std: float, rng: np.random.Generator,
                  clip: bool) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(len(centers)), per_mode)
    x = centers[labels] + std * rng.standard_normal((len(labels), centers.shape[1]))
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x, labels


def gen_source(spec: SyntheticSourceSpec, rng: np.random.Generator) -> Domain:
    centers = source_centers(spec)
    x, y = _sample_modes(centers, spec.per_mode, spec.std, rng, spec.testbed == "icon")
    return Domain(x, y, centers)


def gen_target(src: SyntheticSourceSpec, tgt: SyntheticTargetSpec, rng: np.random.Generator) -> Domain:
    """Full target set; ``extra['shots']`` holds the k-shot subset."""
    tgt.validate(src)
    shared, novel = target_centers(src, tgt)
    centers = np.concatenate([shared, novel])
    x, y = _sample_modes(centers, tgt.per_mode, src.std, rng, src.testbed == "icon")
    return Domain(x, y, centers)


def draw_shots(domain: Domain, k: int, rng: np.random.Generator) -> np.ndarray:
    k = min(k, len(domain.samples))
    idx = rng.choice(len(domain.samples), size=k, replace=False)
    return domain.samples[np.sort(idx)]


def mode_spec(src: SyntheticSourceSpec, tgt: SyntheticTargetSpec) -> ModeSpec:
    centers = source_centers(src)
    shared, novel = target_centers(src, tgt)
    labels = [SHARED if i in tgt.shared else SOURCE_ONLY for i in range(len(centers))]
    return ModeSpec(np.concatenate([centers, novel]), labels + [TARGET_ONLY] * len(novel))


# CSV I/O ---------------------------------------------------------------------

def write_samples(path: str | Path, x: np.ndarray, labels: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(x.shape[1])])
        for i, row in enumerate(x):
            w.writerow([int(labels[i]) if labels is not None else -1] + [repr(float(v)) for v in row])


def read_samples(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return x, labels


def write_modes(path: str | Path, modes: ModeSpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"c{i}" for i in range(modes.centers.shape[1])])
        for lab, c in zip(modes.labels, modes.centers):
            w.writerow([lab] + [repr(float(v)) for v in c])


def read_modes(path: str | Path) -> ModeSpec:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return ModeSpec(np.array([[float(v) for v in r[1:]] for r in rows]), [r[0] for r in rows])
