"""Dataset persistence ("CSIT" binary format), train/test splitting, and
position scaling for conditional-model inputs.

CSIT file layout (all integers little-endian):

    magic         4 bytes  b"CSIT"
    version       u16      currently 1
    B, M_r, M_c,
    N_tap, L      5 x u32  geometry and datapoint count
    carrier_hz    f64
    bandwidth_hz  f64
    records       L x [position: 2 x f32][csi: B*M_r*M_c*N_tap x (re f32, im f32)]

CSI payload order is tap-fastest, then column, row, array (C order of the
(B, M_r, M_c, N_tap) tensor) with real/imag interleaved per entry.  A JSON
sidecar ``<path>.meta.json`` carries the power reference and free-form
provenance strings; a missing sidecar loads with defaults.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from csigen.core import ArrayGeometry, CsiDataset, freq_to_time

FORMAT_MAGIC = b"CSIT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<5I2d")


class DatasetFormatError(Exception):
    """Base class for CSIT file format violations."""


class BadMagicError(DatasetFormatError):
    """File does not start with the CSIT magic bytes."""


class VersionMismatchError(DatasetFormatError):
    """File declares an unsupported format version."""


class TruncatedPayloadError(DatasetFormatError):
    """File ends before the header-declared records are complete."""


class LengthMismatchError(DatasetFormatError):
    """File holds more payload bytes than the header declares."""


class EmptySplitError(ValueError):
    """Split parameters cannot produce a non-empty train/test pair."""


def save_dataset(dataset: CsiDataset, path: str | Path, provenance: dict | None = None) -> None:
    """Write a dataset to ``path`` in CSIT format plus a JSON sidecar.

    The payload is float32; loading back reproduces values exactly at that
    precision.
    """
    path = Path(path)
    geo = dataset.geometry
    header = FORMAT_MAGIC + struct.pack("<H", FORMAT_VERSION) + _HEADER.pack(
        geo.num_arrays,
        geo.rows_per_array,
        geo.cols_per_array,
        geo.num_taps,
        len(dataset),
        geo.carrier_frequency,
        geo.bandwidth,
    )
    entries = geo.num_arrays * geo.rows_per_array * geo.cols_per_array * geo.num_taps
    records = np.empty((len(dataset), 2 + 2 * entries), dtype="<f4")
    records[:, 0:2] = dataset.positions
    flat = dataset.csi.reshape(len(dataset), entries)
    records[:, 2::2] = flat.real
    records[:, 3::2] = flat.imag
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(records.tobytes())
    meta = {
        "format": "CSIT",
        "version": FORMAT_VERSION,
        "power_reference": dataset.power_reference,
        "provenance": dict(provenance or {}),
    }
    with open(str(path) + ".meta.json", "w") as handle:
        json.dump(meta, handle, indent=2)
        handle.write("\n")


def load_dataset(path: str | Path) -> CsiDataset:
    """Read a CSIT dataset.  Raises a distinct :class:`DatasetFormatError`
    subclass for each corruption mode (bad magic, version mismatch,
    truncation, length disagreement)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != FORMAT_MAGIC:
        raise BadMagicError(f"{path}: not a CSIT file (magic {blob[:4]!r})")
    if len(blob) < 6 + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    b, m_r, m_c, n_tap, count = _HEADER.unpack_from(blob, 6)[:5]
    carrier, bandwidth = _HEADER.unpack_from(blob, 6)[5:]
    try:
        geometry = ArrayGeometry(
            num_arrays=int(b),
            rows_per_array=int(m_r),
            cols_per_array=int(m_c),
            num_taps=int(n_tap),
            carrier_frequency=carrier,
            bandwidth=bandwidth,
        )
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: invalid header field ({exc})") from exc
    entries = geometry.num_antennas * geometry.num_taps
    record_floats = 2 + 2 * entries
    payload = blob[6 + _HEADER.size :]
    expected = count * record_floats * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: header declares {count} records ({expected} payload bytes), "
            f"file holds {len(payload)}"
        )
    if len(payload) > expected:
        raise LengthMismatchError(
            f"{path}: {len(payload) - expected} unexpected trailing bytes "
            f"after {count} declared records"
        )
    records = np.frombuffer(payload, dtype="<f4").reshape(count, record_floats)
    positions = records[:, 0:2].astype(np.float64)
    csi = (records[:, 2::2].astype(np.float64) + 1j * records[:, 3::2].astype(np.float64))
    csi = csi.reshape((count,) + geometry.csi_shape)

    power_reference = 1.0
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        power_reference = float(meta.get("power_reference", 1.0))
    return CsiDataset(geometry, csi, positions, power_reference)


@dataclass(frozen=True)
class SplitSpec:
    """Decimation split: test set takes indices == test_offset (mod stride),
    train set takes indices == train_offset (mod stride) minus a disc-shaped
    hole cut around ``hole_center``."""

    hole_center: np.ndarray  # (2,) meters
    stride: int = 4
    test_offset: int = 0
    train_offset: int = 2
    hole_diameter: float = 4.0

    def __post_init__(self) -> None:
        center = np.asarray(self.hole_center, dtype=np.float64)
        if center.shape != (2,):
            raise ValueError("hole_center must be a 2-vector")
        object.__setattr__(self, "hole_center", center)
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not (0 <= self.test_offset < self.stride):
            raise ValueError("test_offset must lie in [0, stride)")
        if not (0 <= self.train_offset < self.stride):
            raise ValueError("train_offset must lie in [0, stride)")
        if self.test_offset == self.train_offset:
            raise ValueError("test_offset and train_offset must differ")
        if self.hole_diameter < 0:
            raise ValueError("hole_diameter must be >= 0")


def split_train_test(dataset: CsiDataset, spec: SplitSpec) -> tuple[CsiDataset, CsiDataset]:
    """Partition a trajectory-ordered dataset into (train, test).

    Test: every ``stride``-th datapoint starting at ``test_offset``.
    Train: every ``stride``-th datapoint starting at ``train_offset``, with
    points inside the hole disc removed.  The two residue classes are
    disjoint by construction.
    """
    count = len(dataset)
    if spec.stride > count:
        raise EmptySplitError(
            f"stride {spec.stride} exceeds dataset size {count}; split undefined"
        )
    indices = np.arange(count)
    test_idx = indices[indices % spec.stride == spec.test_offset]
    train_idx = indices[indices % spec.stride == spec.train_offset]
    distances = np.linalg.norm(
        dataset.positions[train_idx] - spec.hole_center[None, :], axis=1
    )
    train_idx = train_idx[distances > spec.hole_diameter / 2.0]
    return dataset.subset(train_idx), dataset.subset(test_idx)


@dataclass(frozen=True)
class ConditionScaler:
    """Affine map of 2-D positions from a fitted bounding box onto [-1, 1]^2.

    Positions outside the fitted box map outside [-1, 1] without clamping.
    """

    minimum: np.ndarray  # (2,)
    maximum: np.ndarray  # (2,)

    def __post_init__(self) -> None:
        minimum = np.asarray(self.minimum, dtype=np.float64)
        maximum = np.asarray(self.maximum, dtype=np.float64)
        if minimum.shape != (2,) or maximum.shape != (2,):
            raise ValueError("scaler bounds must be 2-vectors")
        if not np.all(minimum < maximum):
            raise ValueError(
                f"degenerate extent: min {minimum} must be strictly below max {maximum}"
            )
        object.__setattr__(self, "minimum", minimum)
        object.__setattr__(self, "maximum", maximum)

    def scale(self, position: np.ndarray) -> np.ndarray:
        position = np.asarray(position, dtype=np.float64)
        return 2.0 * (position - self.minimum) / (self.maximum - self.minimum) - 1.0

    def unscale(self, scaled: np.ndarray) -> np.ndarray:
        scaled = np.asarray(scaled, dtype=np.float64)
        return (scaled + 1.0) / 2.0 * (self.maximum - self.minimum) + self.minimum


def fit_condition_scaler(train: CsiDataset) -> ConditionScaler:
    """Fit the position scaler on the training positions' bounding box."""
    if len(train) == 0:
        raise ValueError("cannot fit a condition scaler on an empty dataset")
    return ConditionScaler(train.positions.min(axis=0), train.positions.max(axis=0))


def import_hdf5(
    h5_path: str | Path,
    out_path: str | Path,
    n_tap: int,
    csi_key: str = "csi_freq",
    position_key: str = "positions",
) -> CsiDataset:
    """Convert an HDF5 channel-sounder export into a CSIT dataset (optional
    converter; requires h5py).

    Expected HDF5 layout: dataset ``csi_key`` of shape
    (L, B, M_r, M_c, N_sub, 2) float (last axis real/imag, frequency
    domain), dataset ``position_key`` of shape (L, 2) or (L, 3) (first two
    coordinates used), root attributes ``carrier_hz`` and ``bandwidth_hz``.
    Subcarriers are converted to ``n_tap`` time-domain taps.
    """
    try:
        import h5py
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise RuntimeError(
            "the HDF5 converter requires h5py (install csigen[hdf5])"
        ) from exc
    with h5py.File(h5_path, "r") as handle:
        raw = np.asarray(handle[csi_key])
        positions = np.asarray(handle[position_key], dtype=np.float64)[:, :2]
        carrier = float(handle.attrs["carrier_hz"])
        bandwidth = float(handle.attrs["bandwidth_hz"])
    if raw.ndim != 6 or raw.shape[-1] != 2:
        raise ValueError(
            f"expected frequency CSI of shape (L, B, M_r, M_c, N_sub, 2), got {raw.shape}"
        )
    freq = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
    time = freq_to_time(freq, n_tap)
    geometry = ArrayGeometry(
        num_arrays=raw.shape[1],
        rows_per_array=raw.shape[2],
        cols_per_array=raw.shape[3],
        num_taps=n_tap,
        carrier_frequency=carrier,
        bandwidth=bandwidth,
    )
    dataset = CsiDataset(geometry, time, positions)
    save_dataset(dataset, out_path, provenance={"source": str(h5_path)})
    return dataset
