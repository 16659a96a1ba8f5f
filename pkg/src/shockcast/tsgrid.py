"""Time-space grids: occupancy matrices, averaging, density, and datasets.

A trajectory log is discretized per lane into binary occupancy matrices
with 10 ft x 0.1 s bins (rows = space, columns = time).  A 100 ft x 1 s
(10 x 10) sliding mean turns these into real-valued grids in [0, 1]; those
grids scale by a constant 528 into vehicles-per-mile density fields, which
is exactly Edie's generalized density of the corresponding block: one
occupied bin contributes 0.1 veh s over an area of (100/5280 mi x 1 s),
i.e. 5.28 vpm, and a full window of 100 bins gives 528 vpm.

Supervised samples pair consecutive 20 s windows of a 2000 ft segment.
Datasets persist in a flat binary format ("TSDS") with a JSON sidecar.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .boxfilter import box_mean_2d
from .microsim import TrajectoryLog

SPACE_BIN_FT = 10.0
TIME_BIN_S = 0.1
GRID_SIZE = 200                 # rows and columns of one window matrix
SEGMENT_LENGTH_FT = SPACE_BIN_FT * GRID_SIZE    # 2000 ft
WINDOW_LENGTH_S = TIME_BIN_S * GRID_SIZE        # 20 s
AVERAGING_WINDOW = 10
DENSITY_SCALE_VPM = 528.0
FT_PER_MILE = 5280.0

DATASET_MAGIC = b"TSDS"
DATASET_VERSION = 1


class GridIntegrityError(ValueError):
    """Two vehicles mapped to one occupancy cell (implies a collision)."""


class TruncatedRunError(ValueError):
    """The trajectory log does not cover the full segmentation extent."""


class DatasetFormatError(ValueError):
    """Dataset file is malformed, truncated, or of an unsupported version."""


@dataclass
class TimeSpaceMatrix:
    """Binary occupancy grid of one lane window; rows = space, cols = time."""

    cells: np.ndarray          # (GRID, GRID) uint8 in {0, 1}
    segment_origin_ft: float
    window_start_s: float
    lane: int


@dataclass
class AveragedTimeSpaceMatrix:
    """Real-valued grid in [0, 1]: the 10x10 sliding mean of a binary matrix."""

    cells: np.ndarray          # (GRID, GRID) float
    segment_origin_ft: float
    window_start_s: float
    lane: int


@dataclass
class DensityMatrix:
    """Traffic density grid in vehicles per mile (0 to 528)."""

    cells: np.ndarray
    segment_origin_ft: float
    window_start_s: float
    lane: int


@dataclass
class SamplePair:
    """One supervised sample: input window (t-20, t), target window (t, t+20)."""

    input: AveragedTimeSpaceMatrix
    target: AveragedTimeSpaceMatrix
    run_id: int

    def __post_init__(self):
        dt = self.target.window_start_s - self.input.window_start_s
        if abs(dt - WINDOW_LENGTH_S) > 1e-9:
            raise ValueError(f"target window must start {WINDOW_LENGTH_S}s after input, got {dt}")


def _lane_samples(log: TrajectoryLog, lane: int):
    sel = log.lane == lane
    return log.time_index[sel], log.position_ft[sel]


def build_time_space_matrix(log: TrajectoryLog, lane: int, segment_origin_ft: float,
                            window_start_s: float) -> TimeSpaceMatrix:
    """Binary occupancy of one (segment, window) for one lane.

    A cell is 1 iff some vehicle's front bumper lies in that 10 ft bin at
    that 0.1 s sample instant.  Two vehicles on one cell is rejected: the
    simulator guarantees bumper spacing above one bin.
    """
    tix, pos = _lane_samples(log, lane)
    col0 = int(round(window_start_s / TIME_BIN_S))
    cols = tix - col0
    rows_f = (pos - segment_origin_ft) / SPACE_BIN_FT
    keep = (cols >= 0) & (cols < GRID_SIZE) & (rows_f >= 0) & (rows_f < GRID_SIZE)
    rows = np.floor(rows_f[keep]).astype(np.int64)
    cols = cols[keep].astype(np.int64)

    counts = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int16)
    np.add.at(counts, (rows, cols), 1)
    if (counts > 1).any():
        r, c = np.argwhere(counts > 1)[0]
        raise GridIntegrityError(
            f"two vehicles share cell (row={r}, col={c}) of lane {lane} "
            f"at origin {segment_origin_ft}, window {window_start_s}"
        )
    return TimeSpaceMatrix(
        cells=counts.astype(np.uint8),
        segment_origin_ft=segment_origin_ft,
        window_start_s=window_start_s,
        lane=lane,
    )


def average_matrix(m: TimeSpaceMatrix) -> AveragedTimeSpaceMatrix:
    """10x10 sliding mean with the [-5, +4] offset convention.

    Out-of-bounds neighbors contribute zero and the divisor stays 100, so
    the density identity K = 528 * mean holds at every cell.
    """
    cells = box_mean_2d(m.cells.astype(np.float64), AVERAGING_WINDOW)
    return AveragedTimeSpaceMatrix(
        cells=cells,
        segment_origin_ft=m.segment_origin_ft,
        window_start_s=m.window_start_s,
        lane=m.lane,
    )


def to_density(a: AveragedTimeSpaceMatrix) -> DensityMatrix:
    """Scale an averaged grid to vehicles per mile (constant factor 528)."""
    return DensityMatrix(
        cells=a.cells * DENSITY_SCALE_VPM,
        segment_origin_ft=a.segment_origin_ft,
        window_start_s=a.window_start_s,
        lane=a.lane,
    )


def edie_density_oracle(log: TrajectoryLog, lane: int, space_lo_ft: float,
                        space_hi_ft: float, time_lo_s: float, time_hi_s: float) -> float:
    """Generalized density of a block directly from raw samples, in vpm.

    k(A) = t(A) / |A| with t(A) = 0.1 s per occupied bin and |A| measured
    in mile-seconds.  Block edges must align with the bin grid.
    """
    for extent, bin_size in ((space_hi_ft - space_lo_ft, SPACE_BIN_FT),
                             (time_hi_s - time_lo_s, TIME_BIN_S)):
        ratio = extent / bin_size
        if abs(ratio - round(ratio)) > 1e-9 or extent <= 0:
            raise ValueError("block dimensions must be positive multiples of the bin sizes")
    tix, pos = _lane_samples(log, lane)
    c_lo = int(round(time_lo_s / TIME_BIN_S))
    c_hi = int(round(time_hi_s / TIME_BIN_S))
    r_lo = space_lo_ft / SPACE_BIN_FT
    r_hi = space_hi_ft / SPACE_BIN_FT
    bins = np.floor(pos / SPACE_BIN_FT)
    inside = ((tix >= c_lo) & (tix < c_hi) & (bins >= round(r_lo)) & (bins < round(r_hi)))
    occupied = int(inside.sum())
    total_time_veh_s = TIME_BIN_S * occupied
    area_mile_s = ((space_hi_ft - space_lo_ft) / FT_PER_MILE) * (time_hi_s - time_lo_s)
    return total_time_veh_s / area_mile_s


# ---------------------------------------------------------------------------
# run segmentation into supervised pairs
# ---------------------------------------------------------------------------

def _check_full_run(log: TrajectoryLog, road_length_ft: float, duration_s: float):
    n_windows = int(round(duration_s / WINDOW_LENGTH_S))
    last_needed = int(round(duration_s / TIME_BIN_S)) - 1
    max_seen = int(log.time_index.max()) if len(log) else -1
    if max_seen < last_needed:
        first_missing = (max_seen + 1) * TIME_BIN_S
        w0 = int(first_missing // WINDOW_LENGTH_S)
        raise TruncatedRunError(
            f"run {log.run_id} is truncated: windows {w0}..{n_windows - 1} "
            f"(t in [{w0 * WINDOW_LENGTH_S:.0f}, {duration_s:.0f}) s) have no samples"
        )


def iter_window_matrices(log: TrajectoryLog, lane: int,
                         road_length_ft: float = 40000.0,
                         duration_s: float = 900.0):
    """Yield (segment_index, window_index, AveragedTimeSpaceMatrix) over the run.

    The full extent splits into road_length/2000 segments and duration/20
    windows; each (segment, window) block is binarized and averaged
    independently (window edges see zero padding, not the neighbor window).
    """
    _check_full_run(log, road_length_ft, duration_s)
    n_segments = int(round(road_length_ft / SEGMENT_LENGTH_FT))
    n_windows = int(round(duration_s / WINDOW_LENGTH_S))

    tix, pos = _lane_samples(log, lane)
    n_rows = n_segments * GRID_SIZE
    n_cols = n_windows * GRID_SIZE
    occupancy = np.zeros((n_rows, n_cols), dtype=np.int16)
    rows = np.floor(pos / SPACE_BIN_FT).astype(np.int64)
    keep = (rows >= 0) & (rows < n_rows) & (tix >= 0) & (tix < n_cols)
    np.add.at(occupancy, (rows[keep], tix[keep].astype(np.int64)), 1)
    if (occupancy > 1).any():
        r, c = np.argwhere(occupancy > 1)[0]
        raise GridIntegrityError(
            f"two vehicles share bin (row={r}, col={c}) in lane {lane} of run {log.run_id}"
        )

    for seg in range(n_segments):
        block_rows = occupancy[seg * GRID_SIZE:(seg + 1) * GRID_SIZE]
        for win in range(n_windows):
            block = block_rows[:, win * GRID_SIZE:(win + 1) * GRID_SIZE]
            cells = box_mean_2d(block.astype(np.float64), AVERAGING_WINDOW)
            yield seg, win, AveragedTimeSpaceMatrix(
                cells=cells,
                segment_origin_ft=seg * SEGMENT_LENGTH_FT,
                window_start_s=win * WINDOW_LENGTH_S,
                lane=lane,
            )


def extract_sample_pairs(log: TrajectoryLog, lanes=None,
                         road_length_ft: float = 40000.0,
                         duration_s: float = 900.0) -> list[SamplePair]:
    """All (even window, odd window) pairs of every segment and lane.

    Disturbance onsets are confined to even windows, so pairing windows
    (2k, 2k+1) keeps every onset inside the inputs; with 45 windows per
    segment the final odd window is discarded, giving 22 pairs per segment
    and 440 per lane on the standard extent.
    """
    if lanes is None:
        lanes = range(log.lanes)
    n_windows = int(round(duration_s / WINDOW_LENGTH_S))
    pairs = []
    for lane in lanes:
        by_window: dict[tuple[int, int], AveragedTimeSpaceMatrix] = {}
        for seg, win, mat in iter_window_matrices(log, lane, road_length_ft, duration_s):
            by_window[(seg, win)] = mat
        n_segments = int(round(road_length_ft / SEGMENT_LENGTH_FT))
        for seg in range(n_segments):
            for k in range(n_windows // 2):
                pairs.append(SamplePair(
                    input=by_window[(seg, 2 * k)],
                    target=by_window[(seg, 2 * k + 1)],
                    run_id=log.run_id,
                ))
    return pairs


# ---------------------------------------------------------------------------
# heatmap rendering (binary PPM)
# ---------------------------------------------------------------------------

# linear ramp from light yellow at zero to red at full scale
_COLOR_ZERO = np.array([255.0, 255.0, 224.0])
_COLOR_FULL = np.array([255.0, 0.0, 0.0])


def render_heatmap(m, path, vmax: float | None = None):
    """Write a P6 PPM, one pixel per cell.

    Space increases upward (matrix row 0 is the bottom image row), time
    increases rightward.  vmax defaults to 1.0 for averaged grids and 528
    for density grids.
    """
    if isinstance(m, DensityMatrix):
        cells, default_vmax = m.cells, DENSITY_SCALE_VPM
    elif isinstance(m, (AveragedTimeSpaceMatrix, TimeSpaceMatrix)):
        cells, default_vmax = m.cells, 1.0
    else:
        cells, default_vmax = np.asarray(m), 1.0
    if not np.isfinite(cells).all():
        raise ValueError("heatmap input contains non-finite cells")
    scale = float(vmax) if vmax is not None else default_vmax
    t = np.clip(cells.astype(np.float64) / scale, 0.0, 1.0)
    rgb = _COLOR_ZERO[None, None, :] + t[..., None] * (_COLOR_FULL - _COLOR_ZERO)[None, None, :]
    img = np.rint(rgb[::-1]).astype(np.uint8)  # flip so space grows upward
    h, w = t.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_ppm(path):
    """Read back a binary P6 image as an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        data = fh.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# dataset file ("TSDS") and JSON sidecar
# ---------------------------------------------------------------------------

_HEADER_STRUCT = struct.Struct("<4sIIII")  # magic, version, pair_count, H, W


def sidecar_path(dataset_path) -> str:
    return str(dataset_path) + ".json"


class DatasetWriter:
    """Streams sample pairs to a TSDS file; finalize() patches the count."""

    def __init__(self, path, height: int = GRID_SIZE, width: int = GRID_SIZE):
        self.path = str(path)
        self.height = height
        self.width = width
        self._tmp = self.path + ".partial"
        self._fh = open(self._tmp, "wb")
        self._fh.write(_HEADER_STRUCT.pack(DATASET_MAGIC, DATASET_VERSION, 0,
                                           height, width))
        self._meta = []

    def add_pair(self, pair: SamplePair) -> None:
        for grid in (pair.input.cells, pair.target.cells):
            if grid.shape != (self.height, self.width):
                raise DatasetFormatError(
                    f"grid shape {grid.shape} != declared {(self.height, self.width)}"
                )
            self._fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
        self._meta.append({
            "run_id": int(pair.run_id),
            "lane": int(pair.input.lane),
            "segment_origin_ft": float(pair.input.segment_origin_ft),
            "input_window_start_s": float(pair.input.window_start_s),
        })

    def finalize(self, split: dict[str, list[int]] | None = None) -> None:
        """Close the file, write the sidecar, and move both into place."""
        count = len(self._meta)
        self._fh.seek(8)
        self._fh.write(struct.pack("<I", count))
        self._fh.close()
        sidecar = {
            "version": DATASET_VERSION,
            "pair_count": count,
            "height": self.height,
            "width": self.width,
            "runs": sorted({m["run_id"] for m in self._meta}),
            "pairs": self._meta,
            "split": split or {},
        }
        tmp_side = sidecar_path(self.path) + ".partial"
        with open(tmp_side, "w") as fh:
            json.dump(sidecar, fh)
        os.replace(self._tmp, self.path)
        os.replace(tmp_side, sidecar_path(self.path))

    def abort(self) -> None:
        self._fh.close()
        if os.path.exists(self._tmp):
            os.remove(self._tmp)


class TsdsDataset:
    """Read access to a TSDS file plus its sidecar metadata."""

    def __init__(self, path):
        self.path = str(path)
        with open(self.path, "rb") as fh:
            header = fh.read(_HEADER_STRUCT.size)
        if len(header) < _HEADER_STRUCT.size:
            raise DatasetFormatError(f"{path}: truncated header")
        magic, version, count, height, width = _HEADER_STRUCT.unpack(header)
        if magic != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        expected = _HEADER_STRUCT.size + count * 2 * height * width * 4
        actual = os.path.getsize(self.path)
        if actual != expected:
            raise DatasetFormatError(
                f"{path}: size {actual} != expected {expected} for {count} pairs"
            )
        self.pair_count = count
        self.height = height
        self.width = width
        self._grids = np.memmap(self.path, dtype="<f4", mode="r",
                                offset=_HEADER_STRUCT.size,
                                shape=(count, 2, height, width))
        side = sidecar_path(self.path)
        if os.path.exists(side):
            with open(side) as fh:
                self.sidecar = json.load(fh)
        else:
            self.sidecar = {}

    @property
    def inputs(self):
        return self._grids[:, 0]

    @property
    def targets(self):
        return self._grids[:, 1]

    def load_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Materialize (inputs, targets) as (B, 1, H, W) float32 arrays."""
        idx = np.asarray(indices)
        x = np.array(self._grids[idx, 0], dtype=np.float32)[:, None]
        y = np.array(self._grids[idx, 1], dtype=np.float32)[:, None]
        return x, y

    def run_ids(self) -> np.ndarray:
        """Per-pair run id from the sidecar."""
        pairs = self.sidecar.get("pairs", [])
        if len(pairs) != self.pair_count:
            raise DatasetFormatError(
                f"{self.path}: sidecar lists {len(pairs)} pairs, file holds {self.pair_count}"
            )
        return np.asarray([p["run_id"] for p in pairs], dtype=np.int64)

    def split_indices(self, name: str) -> np.ndarray:
        """Pair indices whose run belongs to the named sidecar split."""
        split = self.sidecar.get("split") or {}
        if name not in split:
            raise KeyError(f"{self.path}: sidecar has no split {name!r}")
        members = set(split[name])
        rids = self.run_ids()
        return np.nonzero([int(r) in members for r in rids])[0]
