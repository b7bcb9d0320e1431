"""Seeded synthetic two-class "atrophy" volumes.

Each volume is a smooth low-frequency base field plus a few blobs, plus
white noise. A blob is flat (intensity ``amplitude``) inside its radius and
falls off as a Gaussian of width ``edge_width`` outside. Class 1 has every
blob amplitude reduced by ``delta``. The ground-truth mask marks the flat
cores, so the class difference inside the mask is exactly ``delta`` before
noise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from volnet.data.manifest import DEFAULT_FRACTIONS, Manifest, make_manifest
from volnet.data.volumes import VolumeSample
from volnet.errors import BlobOutOfBoundsError, DataError


@dataclass(frozen=True)
class SynthSpec:
    size: tuple[int, int, int] = (32, 32, 32)
    samples_per_class: int = 100
    centers: tuple[tuple[float, float, float], ...] = ((10.0, 10.0, 11.0), (21.0, 22.0, 21.0))
    radii: tuple[float, ...] = (6.0, 6.0)
    delta: float = 0.9
    noise: float = 0.05
    jitter: int = 2
    amplitude: float = 1.0
    base_amplitude: float = 0.1
    edge_width: float = 1.5
    seed: int = 0
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        object.__setattr__(self, "centers", tuple(tuple(float(c) for c in cen) for cen in self.centers))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        self.validate()

    def validate(self) -> None:
        if len(self.size) != 3 or min(self.size) < 1:
            raise DataError(f"size must be three positive ints, got {self.size}")
        if self.samples_per_class < 1:
            raise DataError("samples_per_class must be >= 1")
        if len(self.centers) != len(self.radii) or not self.centers:
            raise DataError("need one radius per blob centre and at least one blob")
        if min(self.delta, self.noise, self.jitter, self.base_amplitude) < 0:
            raise DataError("delta, noise, jitter and base_amplitude must be >= 0")
        if self.edge_width <= 0:
            raise DataError("edge_width must be > 0")
        for c, r in zip(self.centers, self.radii):
            if len(c) != 3 or r <= 0:
                raise DataError(f"bad blob centre {c} / radius {r}")
            reach = r + self.jitter
            for axis, (ci, n) in enumerate(zip(c, self.size)):
                if ci - reach < 0 or ci + reach > n - 1:
                    raise BlobOutOfBoundsError(
                        f"blob at {c} with radius {r} and jitter {self.jitter} leaves the volume on axis {axis}"
                    )


def _base_field(rng: np.random.Generator, grid: tuple[np.ndarray, ...], amplitude: float, modes: int = 3) -> np.ndarray:
    field = np.full(grid[0].shape, 0.5)
    for _ in range(modes):
        k = rng.integers(0, 3, size=3)
        if not k.any():
            k[rng.integers(0, 3)] = 1
        phase = rng.uniform(0, 2 * np.pi)
        a = rng.standard_normal() / np.sqrt(modes)
        field += amplitude * a * np.cos(2 * np.pi * sum(ki * g for ki, g in zip(k, grid)) + phase)
    return field


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed % 2**64, stream], dtype=np.uint64)))


def _grid(size):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in size), indexing="ij")


def generate_sample(spec: SynthSpec, index: int, label: int) -> tuple[np.ndarray, np.ndarray]:
    """One ``(volume, mask)`` pair; sample ``index`` draws from PRNG key ``(seed, index)``."""
    rng = _rng(spec.seed, index)
    zz, yy, xx = _grid(spec.size)
    unit = tuple(g / n for g, n in zip((zz, yy, xx), spec.size))
    vol = _base_field(rng, unit, spec.base_amplitude)
    mask = np.zeros(spec.size, dtype=bool)
    amp = spec.amplitude - (spec.delta if label == 1 else 0.0)
    for centre, radius in zip(spec.centers, spec.radii):
        c = np.asarray(centre) + rng.integers(-spec.jitter, spec.jitter + 1, size=3)
        dist = np.sqrt((zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2)
        outside = np.maximum(dist - radius, 0.0)
        vol += amp * np.exp(-(outside**2) / (2 * spec.edge_width**2))
        mask |= dist <= radius
    if spec.noise:
        vol += spec.noise * rng.standard_normal(spec.size)
    return vol.astype(np.float32), mask


def synth_generate(spec: SynthSpec) -> tuple[list[VolumeSample], Manifest]:
    """Labels alternate 0, 1, 0, ...; each sample is its own subject."""
    spec.validate()
    samples = []
    for i in range(2 * spec.samples_per_class):
        label = i % 2
        vol, mask = generate_sample(spec, i, label)
        sid = f"synth-{i:04d}"
        samples.append(VolumeSample(vol, label, sid, f"{sid}.nii", "synthetic", mask))
    return samples, make_manifest(samples, spec.fractions, spec.seed)
