import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volnet.data.manifest import Manifest, make_manifest, split_samples
from volnet.data.nifti import read_nifti_array, write_nifti
from volnet.data.raw import read_raw, write_raw
from volnet.data.synth import SynthSpec, generate_sample, synth_generate
from volnet.data.volumes import VolumeSample, normalize_volume, read_nifti, read_volume
from volnet.errors import (
    BadMagicError,
    BlobOutOfBoundsError,
    ConstantVolumeError,
    DataError,
    PairedFileUnsupportedError,
    TooFewSubjectsError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    VersionMismatchError,
)

from oracles import NIFTI_LAYOUT, decode_nifti_header

OFFSETS = {name: (off, fmt) for name, off, fmt in NIFTI_LAYOUT}


def hand_nifti(voxels_xyz, datatype, bitpix, slope=0.0, inter=0.0, magic=b"n+1\x00", order="<"):
    """Build a .nii byte string field by field from the standard's table, without the package writer."""
    nx, ny, nz = voxels_xyz.shape[::-1]
    buf = bytearray(352)
    for name, value in [
        ("sizeof_hdr", 348), ("dim", (3, nx, ny, nz, 1, 1, 1, 1)), ("datatype", datatype), ("bitpix", bitpix),
        ("pixdim", (1.0,) * 8), ("vox_offset", 352.0), ("scl_slope", slope), ("scl_inter", inter), ("magic", magic),
    ]:
        off, fmt = OFFSETS[name]
        vals = value if isinstance(value, tuple) else (value,)
        struct.pack_into(order + fmt, buf, off, *vals)
    return bytes(buf) + voxels_xyz.astype(voxels_xyz.dtype.newbyteorder(order)).tobytes()


@pytest.mark.parametrize("order", ["<", ">"])
def test_nifti_round_trip(tmp_path, order):
    vol = np.random.default_rng(0).standard_normal((5, 6, 7)).astype(np.float32)
    path = tmp_path / "v.nii"
    write_nifti(vol, path, byteorder=order)
    back = read_nifti_array(path)
    assert back.dtype == np.float32 and back.tobytes() == vol.tobytes()
    raw = path.read_bytes()
    if order == ">":
        assert struct.unpack("<i", raw[:4])[0] == 1543569408
    assert struct.unpack(order + "i", raw[:4])[0] == 348


def test_nifti_header_matches_independent_decoder(tmp_path):
    vol = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "v.nii"
    write_nifti(vol, path)
    hdr = decode_nifti_header(path.read_bytes())
    assert hdr["byteorder"] == "<" and hdr["sizeof_hdr"] == 348
    assert hdr["dim"][:4] == (3, 4, 3, 2)
    assert hdr["datatype"] == 16 and hdr["bitpix"] == 32
    assert hdr["vox_offset"] == 352.0 and hdr["magic"] == b"n+1\x00"
    assert hdr["pixdim"][1:4] == (1.0, 1.0, 1.0)
    assert hdr["scl_slope"] == 1.0 and hdr["scl_inter"] == 0.0
    # voxels follow x fastest: the (D, H, W) array is stored in plain row-major order
    assert np.frombuffer(path.read_bytes()[352:], "<f4").tolist() == vol.ravel().tolist()


@pytest.mark.parametrize("order", ["<", ">"])
def test_reader_decodes_hand_built_files(tmp_path, order):
    ints = np.arange(-12, 12, dtype=np.int16).reshape(2, 3, 4)
    path = tmp_path / "i.nii"
    path.write_bytes(hand_nifti(ints, 4, 16, slope=2.0, inter=1.0, order=order))
    assert np.array_equal(read_nifti_array(path), 2.0 * ints + 1.0)
    u8 = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path.write_bytes(hand_nifti(u8, 2, 8, order=order))
    assert np.array_equal(read_nifti_array(path), u8)
    f64 = np.random.default_rng(1).standard_normal((2, 3, 4))
    path.write_bytes(hand_nifti(f64, 64, 64, order=order))
    out = read_nifti_array(path)
    assert out.dtype == np.float64 and np.array_equal(out, f64)


def test_nifti_errors_are_distinct(tmp_path):
    good = hand_nifti(np.zeros((2, 2, 2), np.float32), 16, 32)
    cases = {
        BadMagicError: hand_nifti(np.zeros((2, 2, 2), np.float32), 16, 32, magic=b"xyz\x00"),
        UnsupportedDatatypeError: hand_nifti(np.zeros((2, 2, 2), np.uint16), 512, 16),
        TruncatedFileError: good[:-3],
        PairedFileUnsupportedError: hand_nifti(np.zeros((2, 2, 2), np.float32), 16, 32, magic=b"ni1\x00"),
    }
    for err, blob in cases.items():
        path = tmp_path / f"{err.__name__}.nii"
        path.write_bytes(blob)
        with pytest.raises(err, match=path.name):
            read_nifti_array(path)
        others = [e for e in cases if e is not err]
        assert not issubclass(err, tuple(others))
    (tmp_path / "junk.nii").write_bytes(b"\x00" * 400)
    with pytest.raises(BadMagicError):
        read_nifti_array(tmp_path / "junk.nii")


def test_raw_container(tmp_path):
    vol = np.random.default_rng(2).standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "v.vol"
    write_raw(vol, path)
    raw = path.read_bytes()
    assert raw[:4] == b"VNRV" and struct.unpack("<4I", raw[4:20]) == (1, 3, 3, 4)
    assert read_raw(path).tobytes() == vol.tobytes()
    (tmp_path / "m.vol").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "v2.vol").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    (tmp_path / "t.vol").write_bytes(raw[:-1])
    with pytest.raises(BadMagicError):
        read_raw(tmp_path / "m.vol")
    with pytest.raises(VersionMismatchError):
        read_raw(tmp_path / "v2.vol")
    with pytest.raises(TruncatedFileError):
        read_raw(tmp_path / "t.vol")


def test_read_volume_dispatch(tmp_path):
    vol = np.ones((2, 2, 2), np.float32)
    write_nifti(vol, tmp_path / "a.nii")
    write_raw(vol, tmp_path / "a.vol")
    assert np.array_equal(read_volume(tmp_path / "a.nii"), read_volume(tmp_path / "a.vol"))
    sample = read_nifti(tmp_path / "a.nii")
    assert sample.label is None and sample.subject_id == "a"
    for name in ("a.nii.gz", "a.png", "missing.nii"):
        if name != "missing.nii":
            (tmp_path / name).write_bytes(b"")
        with pytest.raises(DataError):
            read_volume(tmp_path / name)


def test_normalize_definition_and_oracle():
    v = np.random.default_rng(3).uniform(2, 9, (6, 5, 4))
    out = normalize_volume(v)
    assert abs(out.mean()) <= 1e-6 and abs(out.std() - 1) <= 1e-6
    flat = v.ravel().tolist()
    mean = sum(flat) / len(flat)
    std = (sum((x - mean) ** 2 for x in flat) / len(flat)) ** 0.5
    assert np.allclose(out, (v - mean) / std, rtol=1e-12, atol=1e-12)
    with pytest.raises(ConstantVolumeError):
        normalize_volume(np.full((2, 2, 2), 3.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50), st.floats(-100, 100))
def test_normalize_affine_invariant_and_idempotent(seed, a, b):
    v = np.random.default_rng(seed).standard_normal((4, 3, 5))
    base = normalize_volume(v)
    assert np.allclose(normalize_volume(a * v + b), base, atol=1e-6)
    assert np.allclose(normalize_volume(base), base, atol=1e-6)


def samples_for(subject_scans, seed=0):
    out = []
    for i, n in enumerate(subject_scans):
        for j in range(n):
            out.append(VolumeSample(np.zeros((1, 1, 2)) + [0, 1], i % 2, f"s{i:03d}", f"s{i:03d}_{j}.nii"))
    return out


def test_manifest_stratified_counts():
    m = make_manifest(samples_for([1] * 100))
    for split, n in zip(("train", "val", "test"), (70, 15, 15)):
        labels = [r.label for r in m.split(split)]
        assert len(labels) == n
        assert abs(labels.count(0) - labels.count(1)) <= 1


def test_manifest_keeps_subject_scans_together():
    m = make_manifest(samples_for([3] + [1] * 39), seed=4)
    splits = {r.split for r in m.rows if r.subject_id == "s000"}
    assert len(splits) == 1 and sum(r.subject_id == "s000" for r in m.rows) == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 3), min_size=20, max_size=60))
def test_manifest_never_leaks_subjects(seed, scans):
    m = make_manifest(samples_for(scans), seed=seed)
    sets = [m.subjects(s) for s in ("train", "val", "test")]
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert sum(len(s) for s in sets) == len(scans)


def test_manifest_swap_csv_and_errors(tmp_path):
    m = make_manifest(samples_for([1] * 40), seed=1)
    assert m.swap_val_test().swap_val_test() == m
    assert m.swap_val_test().subjects("val") == m.subjects("test")
    m.to_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "path,label,subject_id,split"
    assert Manifest.from_csv(tmp_path / "m.csv").rows == m.rows
    with pytest.raises(TooFewSubjectsError):
        make_manifest(samples_for([1] * 6))
    with pytest.raises(DataError):
        Manifest.from_csv(tmp_path / "none.csv")


def test_synth_is_seeded_and_masked():
    spec = SynthSpec(samples_per_class=10)
    a, ma = synth_generate(spec)
    b, mb = synth_generate(spec)
    assert ma == mb
    assert all(x.volume.tobytes() == y.volume.tobytes() and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    c, _ = synth_generate(SynthSpec(samples_per_class=10, seed=1))
    assert a[0].volume.tobytes() != c[0].volume.tobytes()
    assert [s.label for s in a] == [0, 1] * 10
    assert all(s.mask.shape == (32, 32, 32) and s.mask.any() for s in a)


def test_synth_class_contrast_inside_mask():
    spec = SynthSpec(samples_per_class=40)
    samples, _ = synth_generate(spec)
    inside = {0: [], 1: []}
    for s in samples:
        inside[s.label].append(float(s.volume[s.mask].mean()))
    n = len(inside[0])
    diff = np.mean(inside[0]) - np.mean(inside[1])
    base_spread = np.std(inside[0] + inside[1])
    # blob cores are flat, so only the base field and noise separate diff from delta
    assert abs(diff - spec.delta) <= 3 * max(spec.noise, base_spread) / np.sqrt(n)


def test_synth_null_classes_share_distribution():
    spec = SynthSpec(samples_per_class=40, delta=0.0)
    samples, _ = synth_generate(spec)
    means = {0: [], 1: []}
    for s in samples:
        means[s.label].append(float(s.volume[s.mask].mean()))
    diff = np.mean(means[0]) - np.mean(means[1])
    assert abs(diff) <= 3 * np.std(means[0] + means[1]) / np.sqrt(40)


def test_synth_validation():
    with pytest.raises(BlobOutOfBoundsError):
        SynthSpec(centers=((2.0, 16.0, 16.0), (20.0, 20.0, 20.0)))
    with pytest.raises(DataError):
        SynthSpec(noise=-1)
    with pytest.raises(DataError):
        SynthSpec(radii=(3.0,))
    vol, mask = generate_sample(SynthSpec(noise=0.0), 0, 0)
    assert vol.dtype == np.float32 and mask.dtype == bool


def test_split_samples_stacking():
    samples, manifest = synth_generate(SynthSpec(samples_per_class=10))
    splits = split_samples(samples, manifest)
    assert sum(len(s) for s in splits.values()) == 20
    tr = splits["train"]
    assert tr.x.shape[1:] == (1, 32, 32, 32) and tr.x.dtype == np.float32
    assert tr.masks.shape == (len(tr), 32, 32, 32)
    assert np.all(np.abs(tr.x.mean(axis=(1, 2, 3, 4))) <= 1e-5)
