"""Volume ingestion, normalisation, split manifests and synthetic data."""
from volnet.data.manifest import (
    DEFAULT_FRACTIONS,
    SPLITS,
    Manifest,
    ManifestRow,
    SplitArrays,
    load_split,
    make_manifest,
    split_samples,
    stack_samples,
)
from volnet.data.nifti import read_nifti_array, read_nifti_header, write_nifti
from volnet.data.raw import read_raw, write_raw
from volnet.data.synth import SynthSpec, generate_sample, synth_generate
from volnet.data.volumes import VolumeSample, normalize_volume, read_nifti, read_volume, write_volume

__all__ = [
    "DEFAULT_FRACTIONS",
    "SPLITS",
    "Manifest",
    "ManifestRow",
    "SplitArrays",
    "SynthSpec",
    "VolumeSample",
    "generate_sample",
    "load_split",
    "make_manifest",
    "normalize_volume",
    "read_nifti",
    "read_nifti_array",
    "read_nifti_header",
    "read_raw",
    "read_volume",
    "split_samples",
    "stack_samples",
    "synth_generate",
    "write_nifti",
    "write_raw",
    "write_volume",
]
