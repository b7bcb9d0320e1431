"""Subject-level train/val/test manifests.

Splits are assigned per subject, never per scan, so all scans of one subject
land in the same split. CSV form: header ``path,label,subject_id,split``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from volnet.data.volumes import VolumeSample, normalize_volume, read_volume
from volnet.errors import DataError, EmptySplitError, TooFewSubjectsError

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    subject_id: str
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    base_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for r in self.rows:
            if r.split not in SPLITS:
                raise DataError(f"unknown split {r.split!r} for {r.path}")
            if seen.setdefault(r.subject_id, r.split) != r.split:
                raise DataError(f"subject {r.subject_id!r} appears in both {seen[r.subject_id]} and {r.split}")

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def subjects(self, name: str) -> set[str]:
        return {r.subject_id for r in self.rows if r.split == name}

    def swap_val_test(self) -> "Manifest":
        """The crossed sub-dataset: validation and test roles exchanged."""
        swap = {"val": "test", "test": "val", "train": "train"}
        rows = [replace(r, split=swap[r.split]) for r in self.rows]
        f = self.fractions
        return Manifest(rows, (f[0], f[2], f[1]), self.base_dir)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("path", "label", "subject_id", "split"))
            for r in self.rows:
                w.writerow((r.path, r.label, r.subject_id, r.split))

    @classmethod
    def from_csv(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["path", "label", "subject_id", "split"]:
                raise DataError(f"{path}: manifest header must be path,label,subject_id,split")
            rows = []
            for rec in reader:
                try:
                    label = int(rec["label"])
                except ValueError:
                    raise DataError(f"{path}: bad label {rec['label']!r}") from None
                rows.append(ManifestRow(rec["path"], label, rec["subject_id"], rec["split"]))
        counts = [len({r.subject_id for r in rows if r.split == s}) for s in SPLITS]
        total = sum(counts) or 1
        return cls(rows, tuple(c / total for c in counts), path.parent)


def _split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def make_manifest(samples: Sequence[VolumeSample], fractions=DEFAULT_FRACTIONS, seed: int = 0) -> Manifest:
    """Stratified subject-level split.

    Subjects of each class are shuffled, then merged into one sequence by
    their relative position within the class, so every contiguous stretch has
    close to the overall class ratio. The sequence is cut into train, val and
    test by the requested fractions.
    """
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1) > 1e-9:
        raise DataError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    labels: dict[str, int] = {}
    for s in samples:
        if s.label is None:
            raise DataError(f"sample {s.path or s.subject_id!r} has no label")
        if labels.setdefault(s.subject_id, s.label) != s.label:
            raise DataError(f"subject {s.subject_id!r} has scans with different labels")

    rng = np.random.Generator(np.random.Philox(seed))
    keyed = []
    for cls_label in sorted(set(labels.values())):
        subs = sorted(sid for sid, lab in labels.items() if lab == cls_label)
        order = rng.permutation(len(subs))
        for rank, idx in enumerate(order):
            keyed.append(((rank + 0.5) / len(subs), cls_label, subs[idx]))
    keyed.sort()
    n_train, n_val, _ = _split_counts(len(keyed), fractions)
    assign = {}
    for i, (_, _, sid) in enumerate(keyed):
        assign[sid] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")

    for split in SPLITS:
        present = {labels[sid] for sid, sp in assign.items() if sp == split}
        if present != {0, 1}:
            raise TooFewSubjectsError(
                f"split {split!r} would not contain both classes ({len(labels)} subjects, fractions {fractions})"
            )
    rows = [ManifestRow(s.path or s.subject_id, s.label, s.subject_id, assign[s.subject_id]) for s in samples]
    return Manifest(rows, tuple(fractions))


@dataclass
class SplitArrays:
    """Stacked model inputs for one split."""

    x: np.ndarray  # (N, 1, D, H, W) float32
    y: np.ndarray  # (N,) int64
    subject_ids: list[str]
    masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)


def stack_samples(samples: Sequence[VolumeSample], normalize: bool = True) -> SplitArrays:
    if not samples:
        raise EmptySplitError("no samples to stack")
    shapes = {s.volume.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"volumes have differing shapes: {sorted(shapes)}")
    vols = [normalize_volume(s.volume) if normalize else s.volume for s in samples]
    x = np.stack(vols).astype(np.float32)[:, None]
    y = np.array([s.label for s in samples], dtype=np.int64)
    masks = None
    if all(s.mask is not None for s in samples):
        masks = np.stack([s.mask for s in samples])
    return SplitArrays(x, y, [s.subject_id for s in samples], masks)


def split_samples(samples: Sequence[VolumeSample], manifest: Manifest, normalize: bool = True) -> dict[str, SplitArrays]:
    """In-memory samples grouped by the manifest's split column (matched on path)."""
    by_path = {s.path or s.subject_id: s for s in samples}
    out = {}
    for split in SPLITS:
        rows = manifest.split(split)
        if rows:
            out[split] = stack_samples([by_path[r.path] for r in rows], normalize)
    return out


def load_split(manifest: Manifest, split: str, normalize: bool = True) -> SplitArrays:
    rows = manifest.split(split)
    if not rows:
        raise EmptySplitError(f"split {split!r} is empty")
    samples = [
        VolumeSample(read_volume(manifest.resolve(r)), r.label, r.subject_id, r.path, "smri")
        for r in rows
    ]
    return stack_samples(samples, normalize)
