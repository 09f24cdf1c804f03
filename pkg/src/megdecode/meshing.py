"""Scalp-grid encoding of 248-channel windows into meshes and stream batches.

Each sensor owns exactly one cell of a 20x21 grid, loaded from the packaged
sensor_layout.csv (columns: sensor 1..248, row, col). Cells without a sensor
are structural zeros. A window of D consecutive samples becomes a (20,21,D)
mesh tensor; a recording becomes overlapping groups of W such tensors
(streams), where consecutive groups share half their streams by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DomainError, InsufficientDataError, ShapeError

GRID_ROWS = 20
GRID_COLS = 21
NUM_SENSORS = 248


def _load_placement():
    text = resources.files("megdecode").joinpath("sensor_layout.csv").read_text()
    placement = np.full((NUM_SENSORS, 2), -1, dtype=np.int64)
    for line in text.strip().splitlines():
        s, r, c = (int(v) for v in line.split(","))
        placement[s - 1] = (r, c)
    if (placement < 0).any():
        raise ValueError("sensor_layout.csv does not cover all 248 sensors")
    return placement


_PLACEMENT = _load_placement()
_ROWS = _PLACEMENT[:, 0]
_COLS = _PLACEMENT[:, 1]

_CELL_TO_SENSOR = np.zeros((GRID_ROWS, GRID_COLS), dtype=np.int64)
_CELL_TO_SENSOR[_ROWS, _COLS] = np.arange(1, NUM_SENSORS + 1)
if int((_CELL_TO_SENSOR > 0).sum()) != NUM_SENSORS:
    raise ValueError("sensor placement is not injective")

STRUCTURAL_ZERO_MASK = _CELL_TO_SENSOR == 0


def sensor_position(sensor):
    """Grid cell (row, col) of a 1-based sensor index."""
    if not 1 <= sensor <= NUM_SENSORS:
        raise DomainError(f"sensor index {sensor} outside [1, {NUM_SENSORS}]")
    r, c = _PLACEMENT[sensor - 1]
    return int(r), int(c)


def cell_sensor(row, col):
    """1-based sensor at a grid cell, or 0 for a structural zero."""
    if not (0 <= row < GRID_ROWS and 0 <= col < GRID_COLS):
        raise DomainError(f"cell ({row}, {col}) outside the {GRID_ROWS}x{GRID_COLS} grid")
    return int(_CELL_TO_SENSOR[row, col])


def build_mesh(sample):
    """Scatter one 248-channel sample onto the grid -> (20, 21) array."""
    sample = np.asarray(sample)
    if sample.shape != (NUM_SENSORS,):
        raise ShapeError(f"expected ({NUM_SENSORS},) sample, got {sample.shape}")
    mesh = np.zeros((GRID_ROWS, GRID_COLS), dtype=sample.dtype)
    mesh[_ROWS, _COLS] = sample
    return mesh


def build_mesh_tensor(window):
    """Scatter a (248, D) window onto the grid -> (20, 21, D) array."""
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[0] != NUM_SENSORS:
        raise ShapeError(f"expected ({NUM_SENSORS}, D) window, got {window.shape}")
    if window.shape[1] < 1:
        raise InsufficientDataError("mesh tensor needs depth >= 1")
    mesh = np.zeros((GRID_ROWS, GRID_COLS, window.shape[1]), dtype=window.dtype)
    mesh[_ROWS, _COLS, :] = window
    return mesh


def mesh_to_sample(mesh):
    """Gather a (20, 21) mesh (or (20, 21, D)) back to channel order."""
    mesh = np.asarray(mesh)
    if mesh.shape[:2] != (GRID_ROWS, GRID_COLS):
        raise ShapeError(f"expected ({GRID_ROWS}, {GRID_COLS}, ...) mesh, got {mesh.shape}")
    return mesh[_ROWS, _COLS]


@dataclass
class StreamBatch:
    """One training sample for the mesh architectures.

    spatial: W mesh tensors of shape (20, 21, D), one per stream.
    temporal: W raw windows of shape (248, D), same slices in channel order.
    start: index of the first time step covered.
    """

    spatial: list
    temporal: list
    start: int
    label: int | None = None
    subject_id: str | None = None


def stream_advance(streams, stream_overlap):
    """How many streams consecutive batches advance by."""
    if not 0.0 <= stream_overlap < 1.0:
        raise DomainError(f"stream overlap must be in [0, 1), got {stream_overlap}")
    return max(1, int(np.floor(streams * (1.0 - stream_overlap))))


def assemble_streams(samples, streams, depth, stream_overlap=0.5, label=None, subject_id=None):
    """Cut a (248, T) recording into overlapping stream batches.

    Each batch covers streams*depth consecutive samples split into `streams`
    windows of `depth` steps; consecutive batches advance by
    floor(streams*(1-overlap)) whole streams, so at the default 0.5 overlap
    each batch shares half its streams (the exact same mesh content) with its
    neighbor. Raises InsufficientDataError when T < streams*depth.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != NUM_SENSORS:
        raise ShapeError(f"expected ({NUM_SENSORS}, T) samples, got {samples.shape}")
    if streams < 1 or depth < 1:
        raise DomainError(f"streams and depth must be >= 1, got {streams}, {depth}")
    total = samples.shape[1]
    span = streams * depth
    if total < span:
        raise InsufficientDataError(f"recording has {total} steps, a batch needs {span}")
    advance = stream_advance(streams, stream_overlap) * depth
    batches = []
    for start in range(0, total - span + 1, advance):
        spatial, temporal = [], []
        for w in range(streams):
            lo = start + w * depth
            window = samples[:, lo:lo + depth]
            temporal.append(window)
            spatial.append(build_mesh_tensor(window))
        batches.append(StreamBatch(spatial=spatial, temporal=temporal, start=start,
                                   label=label, subject_id=subject_id))
    return batches
