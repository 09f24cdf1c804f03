"""Recording container format, windowing laws, normalization, synthetic corpus."""

import numpy as np
import pytest

from megdecode import dataio
from megdecode.errors import (ConfigError, DataFormatError, DomainError,
                              InsufficientDataError, ShapeError)


def make_recording(seed=0, steps=50, subject="S01", label=1, rate=256.0):
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((248, steps)).astype(np.float32)
    return dataio.Recording(subject_id=subject, label=label, sampling_rate=rate, samples=samples)


def test_recording_validation():
    with pytest.raises(ShapeError):
        make_recording(steps=50).__class__(subject_id="S01", label=0, sampling_rate=256.0,
                                           samples=np.zeros((100, 5), dtype=np.float32))
    with pytest.raises(ConfigError):
        dataio.Recording(subject_id="S01", label=9, sampling_rate=256.0,
                         samples=np.zeros((248, 5), dtype=np.float32))
    rec = dataio.Recording(subject_id="S01", label=0, sampling_rate=256.0,
                           samples=np.zeros((248, 5), dtype=np.float64))
    assert rec.samples.dtype == np.float32   # coerced on construction


def test_roundtrip_is_bit_exact(tmp_path):
    rec = make_recording(seed=3, steps=77, subject="Sub_АБ", label=3, rate=508.63)
    path = tmp_path / "rec.megr"
    dataio.write_recording(rec, path)
    got = dataio.read_recording(path)
    assert got.subject_id == rec.subject_id
    assert got.label == rec.label
    assert got.sampling_rate == rec.sampling_rate
    assert np.array_equal(got.samples, rec.samples)
    assert got.samples.dtype == np.float32


def test_corrupt_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "rec.megr"
    dataio.write_recording(make_recording(), path)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError) as err:
        dataio.read_recording(path)
    assert err.value.offset == 0


def test_bad_version_reports_offset(tmp_path):
    path = tmp_path / "rec.megr"
    dataio.write_recording(make_recording(), path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError) as err:
        dataio.read_recording(path)
    assert err.value.offset == 4


def test_truncation_reports_where_reading_stopped(tmp_path):
    path = tmp_path / "rec.megr"
    dataio.write_recording(make_recording(steps=10), path)
    blob = path.read_bytes()
    path.write_bytes(blob[:30])   # cut inside the payload
    with pytest.raises(DataFormatError) as err:
        dataio.read_recording(path)
    assert err.value.offset is not None and "truncated" in str(err.value)


def test_payload_corruption_fails_checksum(tmp_path):
    path = tmp_path / "rec.megr"
    dataio.write_recording(make_recording(steps=10), path)
    blob = bytearray(path.read_bytes())
    blob[-20] ^= 0xFF   # flip a payload byte, keep the stored crc
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError) as err:
        dataio.read_recording(path)
    assert "checksum" in str(err.value)


def test_trailing_garbage_is_rejected(tmp_path):
    path = tmp_path / "rec.megr"
    dataio.write_recording(make_recording(steps=10), path)
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(DataFormatError) as err:
        dataio.read_recording(path)
    assert "trailing" in str(err.value)


def test_dataset_roundtrip_sorted(tmp_path):
    recs = [make_recording(seed=s, subject=f"S{s:02d}", label=s % 4) for s in (3, 1, 2)]
    paths = dataio.write_dataset(recs, tmp_path / "data")
    assert all(p.suffix == ".megr" for p in paths)
    got = dataio.read_dataset(tmp_path / "data")
    assert [r.subject_id for r in got] == ["S01", "S02", "S03"]
    with pytest.raises(DataFormatError):
        dataio.read_dataset(tmp_path / "missing")


def test_import_csv_orientation(tmp_path):
    rng = np.random.default_rng(5)
    table = rng.standard_normal((30, 248))   # rows are time steps
    path = tmp_path / "rec.csv"
    np.savetxt(path, table, delimiter=",")
    rec = dataio.import_csv(path, "S09", 2, 256.0)
    assert rec.samples.shape == (248, 30)
    assert np.allclose(rec.samples, table.T.astype(np.float32))
    np.savetxt(path, table[:, :200], delimiter=",")
    with pytest.raises(DataFormatError):
        dataio.import_csv(path, "S09", 2, 256.0)


def test_window_stride_law():
    assert dataio.window_stride(1425, 0.33) == 955
    assert dataio.window_stride(100, 0.5) == 50
    assert dataio.window_stride(10, 0.95) == 1   # round would hit 0.5 -> floor of 1 enforced
    assert dataio.window_stride(4, 0.0) == 4
    with pytest.raises(ConfigError):
        dataio.window_stride(0, 0.5)
    with pytest.raises(ConfigError):
        dataio.window_stride(10, 1.0)


def test_segment_sliding_count_and_content():
    rng = np.random.default_rng(6)
    samples = rng.standard_normal((248, 3000)).astype(np.float32)
    segs = dataio.segment_sliding(samples, 1425, 0.33)
    # starts 0 and 955; start 1910 would need 3335 steps
    assert len(segs) == 2
    assert np.array_equal(segs[0], samples[:, :1425])
    assert np.array_equal(segs[1], samples[:, 955:955 + 1425])
    with pytest.raises(InsufficientDataError):
        dataio.segment_sliding(samples[:, :1000], 1425, 0.33)
    with pytest.raises(ShapeError):
        dataio.segment_sliding(samples.T, 100, 0.5)


def test_scale_matches_plain_multiplication():
    rng = np.random.default_rng(7)
    seg = rng.standard_normal((248, 16)).astype(np.float32) * 1e-7
    out = dataio.scale(seg)
    assert out.dtype == np.float32
    assert np.array_equal(out, seg * np.float32(1e5))
    assert np.array_equal(dataio.scale(seg, 2.0), seg * np.float32(2.0))
    with pytest.raises(ConfigError):
        dataio.scale(seg, 0.0)


def test_norm_stats_zero_the_fitted_pool():
    recs = [make_recording(seed=s, subject=f"S{s:02d}") for s in range(1, 4)]
    stats = dataio.compute_norm_stats(recs)
    assert set(stats.subject_ids) == {"S01", "S02", "S03"}
    pooled = np.concatenate([r.samples for r in recs], axis=1).astype(np.float64)
    z = dataio.normalize(pooled, stats)
    assert np.allclose(z.mean(axis=1), 0.0, atol=1e-7)
    assert np.allclose(z.std(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ConfigError):
        dataio.compute_norm_stats([])


def test_normalize_handles_flat_channels():
    rec = make_recording(seed=8)
    rec.samples[5, :] = 3.25   # zero spread channel
    stats = dataio.compute_norm_stats([rec])
    z = dataio.normalize(rec.samples, stats)
    assert np.all(z[5] == 0.0)
    assert np.isfinite(z).all()


def test_make_split_is_sorted_and_disjoint():
    ids = [f"S{k:02d}" for k in range(18, 0, -1)]   # reversed on purpose
    s1 = dataio.make_split(ids, setup=1)
    s2 = dataio.make_split(ids, setup=2)
    assert s1.train_subjects == ("S01", "S02", "S03")
    assert s2.train_subjects == tuple(f"S{k:02d}" for k in range(1, 13))
    assert s1.test_subjects == s2.test_subjects == tuple(f"S{k:02d}" for k in range(13, 19))
    assert not set(s2.train_subjects) & set(s2.test_subjects)
    with pytest.raises(ConfigError):
        dataio.make_split(ids, setup=3)
    with pytest.raises(ConfigError):
        dataio.make_split(ids[:8], setup=1)   # needs 9+ subjects
    with pytest.raises(ConfigError):
        dataio.SplitSpec(train_subjects=("S01",), test_subjects=("S01", "S02"))


def test_synth_corpus_shape_and_determinism():
    recs = dataio.synth_generate(subjects=3, duration=0.5, sampling_rate=64.0, seed=9)
    assert len(recs) == 12
    assert {r.subject_id for r in recs} == {"S01", "S02", "S03"}
    assert sorted({r.label for r in recs}) == [0, 1, 2, 3]
    assert all(r.samples.shape == (248, 32) for r in recs)
    again = dataio.synth_generate(subjects=3, duration=0.5, sampling_rate=64.0, seed=9)
    for a, b in zip(recs, again):
        assert a.subject_id == b.subject_id and a.label == b.label
        assert np.array_equal(a.samples, b.samples)
    other = dataio.synth_generate(subjects=3, duration=0.5, sampling_rate=64.0, seed=10)
    assert not np.array_equal(recs[0].samples, other[0].samples)


def test_synth_classes_activate_distinct_regions():
    recs = dataio.synth_generate(subjects=1, duration=0.5, sampling_rate=64.0,
                                 seed=11, snr=100.0)
    from megdecode.meshing import sensor_position
    rows = np.array([sensor_position(s)[0] for s in range(1, 249)])
    by_label = {r.label: r.samples for r in recs}
    anterior = by_label[0][rows <= 6].mean()
    elsewhere = by_label[0][rows > 6].mean()
    assert anterior > 4 * abs(elsewhere)
    posterior = by_label[1][rows >= 12].mean()
    assert posterior > 4 * abs(by_label[1][rows < 12].mean())


def test_synth_validation():
    with pytest.raises(ConfigError):
        dataio.synth_generate(subjects=0)
    with pytest.raises(ConfigError):
        dataio.synth_generate(subjects=1, snr=0.0)
    with pytest.raises(ConfigError):
        dataio.synth_generate(subjects=1, duration=0.001, sampling_rate=64.0)


def test_centroid_oracle_separates_the_corpus():
    recs = dataio.synth_generate(subjects=9, duration=1.0, sampling_rate=64.0, seed=12)
    split = dataio.make_split(sorted({r.subject_id for r in recs}), setup=1)
    train = [r for r in recs if r.subject_id in split.train_subjects]
    test = [r for r in recs if r.subject_id in split.test_subjects]
    acc = dataio.centroid_classifier_accuracy(train, test, window=32, overlap=0.5)
    assert acc >= 0.99
