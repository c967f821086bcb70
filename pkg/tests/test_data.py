import math
from dataclasses import replace

import numpy as np
import pytest

from lidarcodec.data import (
    DISTANCE_ONLY, SYNTH_SENSOR, SyntheticSpec, generate_corpus, generate_frames, load_corpus,
    oracle_entropies, read_ascii_points, read_frame, read_kitti_bin, read_manifest,
    write_ascii_points, write_kitti_bin, write_synthetic_corpus,
)
from lidarcodec.errors import FormatError, ValidationError
from lidarcodec.geom import PointCloudFrame, serialize

SMALL = SyntheticSpec(frames=2, seed=5)


def test_generation_is_deterministic():
    a, b = generate_frames(SMALL), generate_frames(SMALL)
    for fa, fb in zip(a, b):
        assert fa.positions.tobytes() == fb.positions.tobytes()
        assert fa.reflectance.tobytes() == fb.reflectance.tobytes()
    c = generate_frames(replace(SMALL, seed=6))
    assert c[0].reflectance.tobytes() != a[0].reflectance.tobytes()


def test_frames_are_valid_and_land_on_their_cells():
    corpus = generate_corpus(SMALL)
    for f, bits in zip(corpus.frames, corpus.surprisal):
        f.validate(SYNTH_SENSOR)
        assert len(bits) == f.n and np.all(bits >= 0)
        sf = serialize(f, SYNTH_SENSOR)
        counts = sf.counts()
        assert all(c > 0 for c in counts)
        # jitter stays inside the cell, so no two points share (v, u)
        for s in sf.sequences:
            assert np.all(np.diff(s.u) > 0)


def test_reflectance_follows_attenuation():
    f = generate_frames(replace(DISTANCE_ONLY, frames=1))[0]
    rho = np.linalg.norm(f.positions, axis=1)
    near = f.reflectance[rho < 10].mean()
    far = f.reflectance[rho > 50].mean()
    assert near > far + 50


def test_noise_free_distance_profile_has_zero_entropy():
    spec = replace(DISTANCE_ONLY, sigma_distance=0.0, frames=1)
    corpus = generate_corpus(spec)
    f = corpus.frames[0]
    rho = np.linalg.norm(f.positions, axis=1)
    assert np.array_equal(f.reflectance, np.clip(np.floor(spec.attenuation(rho) + 0.5), 0, 255))
    assert oracle_entropies(spec, n_symbols=20_000).h_cond == 0.0


def test_default_profile_entropy_ordering():
    o = oracle_entropies(SyntheticSpec(), n_symbols=200_000)
    assert o.n >= 200_000
    assert o.h_cond + 3 * o.h_cond_se < o.h_marg < math.log2(SYNTH_SENSOR.A)


def test_oracle_is_deterministic():
    a = oracle_entropies(SMALL, n_symbols=30_000)
    b = oracle_entropies(SMALL, n_symbols=30_000)
    assert a == b


def test_generator_settings_validate_and_round_trip():
    with pytest.raises(ValidationError):
        SyntheticSpec(profile="nope")
    with pytest.raises(ValidationError):
        SyntheticSpec(keep_prob=0.0)
    with pytest.raises(ValidationError):
        SyntheticSpec(sigma_smooth=-1.0)
    assert SyntheticSpec.from_dict(SMALL.to_dict()) == SMALL


def test_kitti_records(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 1.0]], dtype="<f4").tobytes())
    f = read_kitti_bin(p)
    assert f.positions.tolist() == [[1, 0, 0], [0, 2, 0]]
    assert f.reflectance.tolist() == [0, 99]


def test_kitti_errors(tmp_path):
    p = tmp_path / "short.bin"
    p.write_bytes(b"\x00" * 17)
    with pytest.raises(FormatError):
        read_kitti_bin(p)
    p.write_bytes(np.array([[np.nan, 0, 0, 0]], dtype="<f4").tobytes())
    with pytest.raises(FormatError):
        read_kitti_bin(p)


def test_kitti_round_trip(tmp_path):
    f = PointCloudFrame(np.array([[1.5, -2.25, 0.125]]), [42])
    write_kitti_bin(tmp_path / "f.bin", f)
    g = read_frame(tmp_path / "f.bin")
    assert g.reflectance.tolist() == [42] and np.array_equal(g.positions, f.positions)


def test_ascii_reader(tmp_path):
    p = tmp_path / "one.txt"
    p.write_text("1 0 0 5\n")
    f = read_ascii_points(p, A=100)
    assert f.n == 1 and f.reflectance.tolist() == [5] and f.positions.tolist() == [[1, 0, 0]]
    p.write_text("")
    assert read_ascii_points(p, A=100).n == 0
    p.write_text("1 0 0 999\n")
    with pytest.raises(ValidationError, match=":1:"):
        read_ascii_points(p, A=100)
    p.write_text("# header\n1 0 0 1\n1 0 x 1\n")
    with pytest.raises(FormatError, match=":3:"):
        read_ascii_points(p, A=100)
    p.write_text("1 0 0\n")
    with pytest.raises(FormatError):
        read_ascii_points(p)


def test_ascii_canonical_form(tmp_path):
    p = tmp_path / "messy.txt"
    p.write_text("  1.50   -0  2e1  7 # note\n\n0.1 0.2 0.3 0\n")
    f = read_ascii_points(p)
    write_ascii_points(tmp_path / "a.txt", f)
    write_ascii_points(tmp_path / "b.txt", read_ascii_points(tmp_path / "a.txt"))
    text = (tmp_path / "a.txt").read_text()
    assert text == "1.5 -0.0 20.0 7\n0.1 0.2 0.3 0\n"
    assert (tmp_path / "b.txt").read_text() == text


@pytest.mark.parametrize("fmt", ["ascii", "bin"])
def test_corpus_on_disk(tmp_path, fmt):
    spec = replace(SMALL, frames=2, keep_prob=0.05)
    manifest = write_synthetic_corpus(tmp_path / "c", spec, fmt)
    paths, sensor, got_fmt, got_spec = read_manifest(manifest)
    assert len(paths) == 2 and sensor == SYNTH_SENSOR and got_fmt == fmt and got_spec == spec
    frames, _, _ = load_corpus(manifest)
    for a, b in zip(frames, generate_frames(spec)):
        assert np.array_equal(a.reflectance, b.reflectance)
        if fmt == "ascii":
            assert np.array_equal(a.positions, b.positions)
        else:
            assert np.array_equal(a.positions, b.positions.astype(np.float32))


def test_bad_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{")
    with pytest.raises(FormatError):
        read_manifest(p)
