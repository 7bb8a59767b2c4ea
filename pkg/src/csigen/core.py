"""Core CSI container types and shared numeric conventions.

Channel state information (CSI) is stored as a complex tensor of time-domain
tap coefficients indexed [array b][row m_r][col m_c][tap t].  All array
indices in this package are 0-based.  Internal computation is float64 /
complex128 throughout; file payloads are float32 (see :mod:`csigen.dataio`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna setup: ``num_arrays`` uniform planar arrays (UPAs) with
    half-wavelength element spacing, each ``rows_per_array`` x
    ``cols_per_array`` antennas, observing ``num_taps`` time-domain taps.
    """

    num_arrays: int
    rows_per_array: int
    cols_per_array: int
    num_taps: int
    carrier_frequency: float
    bandwidth: float
    element_spacing: float = 0.5  # in wavelengths; half-wavelength UPA only

    def __post_init__(self) -> None:
        for name in ("num_arrays", "rows_per_array", "cols_per_array", "num_taps"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.element_spacing != 0.5:
            raise ValueError("only half-wavelength element spacing is supported")
        if not (self.bandwidth > 0.0 and np.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth!r}")
        if not (self.carrier_frequency > 0.0 and np.isfinite(self.carrier_frequency)):
            raise ValueError(f"carrier_frequency must be positive, got {self.carrier_frequency!r}")

    @property
    def tap_duration(self) -> float:
        """Duration of one tap-delay-line tap in seconds."""
        return 1.0 / self.bandwidth

    @property
    def csi_shape(self) -> tuple[int, int, int, int]:
        return (self.num_arrays, self.rows_per_array, self.cols_per_array, self.num_taps)

    @property
    def num_antennas(self) -> int:
        """Total antenna count over all arrays."""
        return self.num_arrays * self.rows_per_array * self.cols_per_array


@dataclass(frozen=True)
class CsiTensor:
    """Complex tap coefficients of one channel measurement, shape
    (num_arrays, rows, cols, num_taps)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 4:
            raise ValueError(f"CSI tensor must be 4-dimensional, got shape {values.shape}")
        if not np.all(np.isfinite(values.view(np.float64))):
            raise ValueError("CSI tensor contains non-finite entries")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def matches(self, geometry: ArrayGeometry) -> bool:
        return self.values.shape == geometry.csi_shape


@dataclass(frozen=True)
class Datapoint:
    """One (CSI tensor, 2-D transmitter position) measurement pair."""

    csi: CsiTensor
    position: np.ndarray  # (2,) meters

    def __post_init__(self) -> None:
        position = np.asarray(self.position, dtype=np.float64)
        if position.shape != (2,):
            raise ValueError(f"position must be a 2-vector, got shape {position.shape}")
        if not np.all(np.isfinite(position)):
            raise ValueError("position components must be finite")
        position = position.copy()
        position.flags.writeable = False
        object.__setattr__(self, "position", position)


class CsiDataset:
    """Ordered collection of position-labelled CSI tensors sharing one geometry.

    Backed by stacked arrays: ``csi`` with shape (L, B, M_r, M_c, N_tap)
    complex128 and ``positions`` with shape (L, 2) float64.  Index order is
    the measurement-trajectory order.  ``power_reference`` is the linear
    power used as the 0 dB reference for reports (1.0 until
    :func:`normalize_dataset_power` sets it).
    """

    def __init__(
        self,
        geometry: ArrayGeometry,
        csi: np.ndarray,
        positions: np.ndarray,
        power_reference: float = 1.0,
    ) -> None:
        csi = np.asarray(csi, dtype=np.complex128)
        positions = np.asarray(positions, dtype=np.float64)
        if csi.ndim != 5 or csi.shape[1:] != geometry.csi_shape:
            raise ValueError(
                f"csi must have shape (L,) + {geometry.csi_shape}, got {csi.shape}"
            )
        if positions.shape != (csi.shape[0], 2):
            raise ValueError(
                f"positions must have shape ({csi.shape[0]}, 2), got {positions.shape}"
            )
        if not np.all(np.isfinite(csi.view(np.float64))):
            raise ValueError("dataset CSI contains non-finite entries")
        if not np.all(np.isfinite(positions)):
            raise ValueError("dataset positions contain non-finite entries")
        if not (power_reference > 0.0 and np.isfinite(power_reference)):
            raise ValueError(f"power_reference must be positive, got {power_reference!r}")
        self.geometry = geometry
        self.csi = csi.copy()
        self.positions = positions.copy()
        self.csi.flags.writeable = False
        self.positions.flags.writeable = False
        self.power_reference = float(power_reference)

    @classmethod
    def from_datapoints(
        cls,
        geometry: ArrayGeometry,
        points: list[Datapoint],
        power_reference: float = 1.0,
    ) -> "CsiDataset":
        if points:
            csi = np.stack([p.csi.values for p in points])
            positions = np.stack([p.position for p in points])
        else:
            csi = np.zeros((0,) + geometry.csi_shape, dtype=np.complex128)
            positions = np.zeros((0, 2))
        return cls(geometry, csi, positions, power_reference)

    def __len__(self) -> int:
        return self.csi.shape[0]

    def __getitem__(self, index: int) -> Datapoint:
        return Datapoint(CsiTensor(self.csi[index]), self.positions[index])

    def datapoints(self):
        for index in range(len(self)):
            yield self[index]

    def subset(self, indices: np.ndarray) -> "CsiDataset":
        """New dataset containing the given indices, in the given order."""
        indices = np.asarray(indices, dtype=np.intp)
        return CsiDataset(
            self.geometry, self.csi[indices], self.positions[indices], self.power_reference
        )

    def with_power_reference(self, power_reference: float) -> "CsiDataset":
        return CsiDataset(self.geometry, self.csi, self.positions, power_reference)


def freq_to_time(freq_csi: np.ndarray, n_tap: int) -> np.ndarray:
    """Convert per-subcarrier channel coefficients to time-domain taps.

    ``freq_csi`` has subcarriers on the last axis (N_sub of them).  Returns
    the inverse DFT along that axis truncated to the first ``n_tap`` taps.
    The inverse DFT carries the 1/N_sub scaling, so a flat unit spectrum
    maps to a unit tap at delay zero.  No cyclic delay alignment is applied;
    input data is assumed time-aligned already.
    """
    freq_csi = np.asarray(freq_csi, dtype=np.complex128)
    n_sub = freq_csi.shape[-1]
    if n_sub < 1:
        raise ValueError("need at least one subcarrier")
    if not (1 <= n_tap <= n_sub):
        raise ValueError(f"n_tap must be in [1, {n_sub}], got {n_tap}")
    time = np.fft.ifft(freq_csi, axis=-1)
    return np.ascontiguousarray(time[..., :n_tap])


def total_rx_power(csi: CsiTensor | np.ndarray, b: int) -> float:
    """Total received power over all antennas and taps of array ``b``
    (squared Frobenius norm of the array's slice)."""
    values = csi.values if isinstance(csi, CsiTensor) else np.asarray(csi)
    if not (0 <= b < values.shape[0]):
        raise IndexError(f"array index {b} out of range [0, {values.shape[0]})")
    slice_b = values[b]
    return float(np.sum(slice_b.real**2 + slice_b.imag**2))


def tensor_power(csi: CsiTensor | np.ndarray) -> float:
    """Squared Frobenius norm over the whole tensor (all arrays)."""
    values = csi.values if isinstance(csi, CsiTensor) else np.asarray(csi)
    return float(np.sum(values.real**2 + values.imag**2))


def dataset_powers(dataset: CsiDataset, basis: str = "tensor") -> np.ndarray:
    """Linear received powers per datapoint.

    basis="tensor" gives one value per datapoint (whole-tensor norm);
    basis="array" gives shape (L, B) with per-array norms.
    """
    mags = dataset.csi.real**2 + dataset.csi.imag**2
    if basis == "tensor":
        return mags.sum(axis=(1, 2, 3, 4))
    if basis == "array":
        return mags.sum(axis=(2, 3, 4))
    raise ValueError(f"unknown power basis {basis!r} (expected 'tensor' or 'array')")


def normalize_dataset_power(dataset: CsiDataset, basis: str = "tensor") -> CsiDataset:
    """Set the dataset's 0 dB reference to its maximum received power.

    CSI values are left untouched; only ``power_reference`` is set, so that
    downstream dB values 10*log10(power / reference) peak at exactly 0 dB.
    ``basis`` selects whether the maximum is taken over whole-tensor powers
    (default) or over per-array powers.
    """
    if len(dataset) == 0:
        raise ValueError("cannot normalize an empty dataset")
    powers = dataset_powers(dataset, basis=basis)
    reference = float(powers.max())
    if reference <= 0.0:
        raise ValueError("cannot normalize an all-zero dataset")
    return dataset.with_power_reference(reference)


def power_db(power, reference: float = 1.0) -> np.ndarray:
    """Linear power to dB relative to ``reference``. Zero power maps to -inf."""
    power = np.asarray(power, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power / reference)
