"""Sensor grid placement, mesh scatter/gather, and stream assembly."""

import numpy as np
import pytest

from placement_reference import expected_placement

from megdecode import meshing
from megdecode.errors import DomainError, InsufficientDataError, ShapeError


def test_every_sensor_matches_reference_cell():
    for sensor, cell in enumerate(expected_placement(), start=1):
        assert meshing.sensor_position(sensor) == cell, sensor


def test_cell_lookup_is_the_inverse():
    seen = set()
    for sensor, (r, c) in enumerate(expected_placement(), start=1):
        assert meshing.cell_sensor(r, c) == sensor
        seen.add((r, c))
    assert len(seen) == 248   # placement is injective
    zeros = sum(meshing.cell_sensor(r, c) == 0
                for r in range(20) for c in range(21))
    assert zeros == 20 * 21 - 248 == 172
    assert meshing.STRUCTURAL_ZERO_MASK.sum() == 172


def test_grid_constants():
    assert meshing.GRID_ROWS == 20
    assert meshing.GRID_COLS == 21
    assert meshing.NUM_SENSORS == 248


def test_domain_errors():
    with pytest.raises(DomainError):
        meshing.sensor_position(0)
    with pytest.raises(DomainError):
        meshing.sensor_position(249)
    with pytest.raises(DomainError):
        meshing.cell_sensor(20, 0)
    with pytest.raises(DomainError):
        meshing.cell_sensor(0, -1)


def test_mesh_roundtrip_is_exact():
    rng = np.random.default_rng(0)
    sample = rng.standard_normal(248).astype(np.float32)
    mesh = meshing.build_mesh(sample)
    assert mesh.shape == (20, 21) and mesh.dtype == np.float32
    assert np.array_equal(meshing.mesh_to_sample(mesh), sample)
    assert np.all(mesh[meshing.STRUCTURAL_ZERO_MASK] == 0.0)


def test_mesh_scatter_is_linear():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal(248), rng.standard_normal(248)
    lhs = meshing.build_mesh(a + b)
    rhs = meshing.build_mesh(a) + meshing.build_mesh(b)
    assert np.array_equal(lhs, rhs)


def test_mesh_places_each_channel_at_its_cell():
    for sensor in (1, 125, 248):
        one_hot = np.zeros(248)
        one_hot[sensor - 1] = 1.0
        mesh = meshing.build_mesh(one_hot)
        r, c = meshing.sensor_position(sensor)
        assert mesh[r, c] == 1.0 and mesh.sum() == 1.0


def test_mesh_tensor_roundtrip():
    rng = np.random.default_rng(2)
    window = rng.standard_normal((248, 10)).astype(np.float32)
    tensor = meshing.build_mesh_tensor(window)
    assert tensor.shape == (20, 21, 10)
    assert np.array_equal(meshing.mesh_to_sample(tensor), window)
    assert np.all(tensor[meshing.STRUCTURAL_ZERO_MASK] == 0.0)
    with pytest.raises(ShapeError):
        meshing.build_mesh_tensor(window.T)
    with pytest.raises(InsufficientDataError):
        meshing.build_mesh_tensor(window[:, :0])


def test_stream_advance_law():
    assert meshing.stream_advance(6, 0.5) == 3
    assert meshing.stream_advance(10, 0.5) == 5
    assert meshing.stream_advance(10, 0.95) == 1   # floor would hit 0; clamp to 1
    assert meshing.stream_advance(4, 0.0) == 4
    with pytest.raises(DomainError):
        meshing.stream_advance(6, 1.0)


def test_assemble_streams_shapes_and_offsets():
    rng = np.random.default_rng(3)
    rec = rng.standard_normal((248, 100)).astype(np.float32)
    batches = meshing.assemble_streams(rec, streams=6, depth=10, stream_overlap=0.5,
                                       label=2, subject_id="S01")
    # coverage 60, advance 30: starts 0 and 30, third would need 120
    assert [b.start for b in batches] == [0, 30]
    for b in batches:
        assert len(b.spatial) == 6 and len(b.temporal) == 6
        assert all(m.shape == (20, 21, 10) for m in b.spatial)
        assert all(w.shape == (248, 10) for w in b.temporal)
        assert b.label == 2 and b.subject_id == "S01"
    # stream content is the raw slice scattered onto the grid
    got = batches[1].spatial[0]
    assert np.array_equal(got, meshing.build_mesh_tensor(rec[:, 30:40]))
    assert np.array_equal(batches[1].temporal[0], rec[:, 30:40])


def test_adjacent_batches_share_half_their_streams():
    rng = np.random.default_rng(4)
    rec = rng.standard_normal((248, 120)).astype(np.float32)
    batches = meshing.assemble_streams(rec, streams=6, depth=10, stream_overlap=0.5)
    first, second = batches[0], batches[1]
    for k in range(3):
        assert np.array_equal(first.spatial[k + 3], second.spatial[k])
        assert np.array_equal(first.temporal[k + 3], second.temporal[k])


def test_assemble_streams_needs_enough_samples():
    rec = np.zeros((248, 59), dtype=np.float32)
    with pytest.raises(InsufficientDataError):
        meshing.assemble_streams(rec, streams=6, depth=10)
