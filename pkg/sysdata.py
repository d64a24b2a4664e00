"""
Plant simulation, training-data generation, Hankel regressors and dataset files.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from errors import DatasetParseError, DivergenceError, InvalidInputError

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12


def derive_seed(base_seed: int, *keys: int) -> int:
    """
    Independent child seed for a (base, keys...) path.

    Uses SeedSequence spawn keys, so realization r of experiment e can be
    regenerated alone without replaying any other stream.
    """
    seq = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True, eq=False)
class ArxPlant:
    """
    y_t = sum_i A_i y_{t-i} + sum_j B_j u_{t-j},  i, j >= 1

    A has shape (p, n_y, n_y), B has shape (q, n_y, n_u).
    """

    output_coeffs: np.ndarray
    input_coeffs: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.output_coeffs, dtype=np.float64)
        B = np.asarray(self.input_coeffs, dtype=np.float64)
        if A.ndim != 3 or B.ndim != 3:
            raise InvalidInputError("coefficients must be stacks of matrices; use ArxPlant.siso for scalars")
        if A.shape[0] < 1 or B.shape[0] < 1:
            raise InvalidInputError("lag orders must be at least 1")
        if A.shape[1] != A.shape[2] or B.shape[1] != A.shape[1]:
            raise InvalidInputError(f"inconsistent coefficient shapes {A.shape} / {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise InvalidInputError("plant coefficients must be finite")
        object.__setattr__(self, "output_coeffs", A)
        object.__setattr__(self, "input_coeffs", B)

    @classmethod
    def siso(cls, a: Sequence[float], b: Sequence[float]) -> "ArxPlant":
        return cls(np.asarray(a, dtype=np.float64).reshape(-1, 1, 1), np.asarray(b, dtype=np.float64).reshape(-1, 1, 1))

    @property
    def n_u(self) -> int:
        return self.input_coeffs.shape[2]

    @property
    def n_y(self) -> int:
        return self.output_coeffs.shape[1]

    @property
    def lag(self) -> int:
        return max(self.output_coeffs.shape[0], self.input_coeffs.shape[0])

    @property
    def is_siso(self) -> bool:
        return self.n_u == 1 and self.n_y == 1

    def steady_state_gain(self) -> np.ndarray:
        """(I - sum A_i)^{-1} sum B_j"""
        eye = np.eye(self.n_y)
        return np.linalg.solve(eye - self.output_coeffs.sum(axis=0), self.input_coeffs.sum(axis=0))

    def to_json(self) -> str:
        return json.dumps(
            {"a": self.output_coeffs.tolist(), "b": self.input_coeffs.tolist()}, separators=(",", ":")
        )

    @classmethod
    def from_json(cls, text: str) -> "ArxPlant":
        data = json.loads(text)
        return cls(np.asarray(data["a"], dtype=np.float64), np.asarray(data["b"], dtype=np.float64))


def benchmark_plant() -> ArxPlant:
    """Third-order SISO benchmark with unit DC gain"""
    return ArxPlant.siso([1.2, -0.3, -0.1], [0.5, -0.4, 0.1])


@dataclass(frozen=True)
class Dimensions:
    """Shape contract: past horizon rho, future horizon T, channel counts and column count N"""

    past_horizon: int
    future_horizon: int
    n_u: int
    n_y: int
    columns: int

    def __post_init__(self):
        if min(self.past_horizon, self.future_horizon, self.n_u, self.n_y, self.columns) < 1:
            raise InvalidInputError(f"all dimensions must be positive: {self}")

    @classmethod
    def from_total_samples(cls, rho: int, T: int, n_u: int, n_y: int, total_samples: int) -> "Dimensions":
        return cls(rho, T, n_u, n_y, total_samples - rho - T + 1)

    @property
    def n_z(self) -> int:
        return self.past_horizon * (self.n_u + self.n_y)

    @property
    def n_future_u(self) -> int:
        return self.future_horizon * self.n_u

    @property
    def n_future_y(self) -> int:
        return self.future_horizon * self.n_y

    @property
    def n_phi(self) -> int:
        return self.n_z + self.n_future_u

    @property
    def total_samples(self) -> int:
        return self.past_horizon + self.future_horizon + self.columns - 1


@dataclass(eq=False)
class TrainingRecord:
    """One input/output experiment; arrays are (samples, channels)"""

    inputs: np.ndarray
    measured_outputs: np.ndarray
    clean_outputs: np.ndarray
    seed: int
    dims: Optional[Dimensions] = None
    plant: Optional[ArxPlant] = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64).T).T
        self.measured_outputs = np.atleast_2d(np.asarray(self.measured_outputs, dtype=np.float64).T).T
        self.clean_outputs = np.atleast_2d(np.asarray(self.clean_outputs, dtype=np.float64).T).T
        n = self.inputs.shape[0]
        if self.measured_outputs.shape[0] != n or self.clean_outputs.shape[0] != n:
            raise InvalidInputError("inputs and outputs must have equal lengths")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def equals(self, other: "TrainingRecord") -> bool:
        return (
            self.seed == other.seed
            and self.dims == other.dims
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.measured_outputs, other.measured_outputs)
            and np.array_equal(self.clean_outputs, other.clean_outputs)
        )


@dataclass(eq=False)
class RegressorBundle:
    """Hankel data matrices Z, U, Y and Phi = [Z; U]"""

    Z: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    dims: Dimensions
    phi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.phi = np.vstack([self.Z, self.U])

    @property
    def N(self) -> int:
        return self.dims.columns


def _initial_window(plant: ArxPlant, initial_window) -> Tuple[np.ndarray, np.ndarray]:
    lag = plant.lag
    if initial_window is None:
        return np.zeros((lag, plant.n_u)), np.zeros((lag, plant.n_y))
    past_u, past_y = initial_window
    past_u = np.asarray(past_u, dtype=np.float64).reshape(-1, plant.n_u)
    past_y = np.asarray(past_y, dtype=np.float64).reshape(-1, plant.n_y)
    if past_u.shape[0] < lag or past_y.shape[0] < lag:
        raise InvalidInputError(f"initial window must cover the plant lag ({lag} samples)")
    return past_u[-lag:], past_y[-lag:]


def simulate(
    plant: ArxPlant,
    inputs,
    initial_window: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    noise_std: float = 0.0,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run the difference equation over `inputs`; returns (clean, measured).

    initial_window holds (past_u, past_y), oldest first, and must cover the
    plant lag. Noise is measurement-only and never fed back.
    """
    u = np.asarray(inputs, dtype=np.float64).reshape(-1, plant.n_u)
    past_u, past_y = _initial_window(plant, initial_window)
    steps = u.shape[0]

    if plant.is_siso:
        a = np.concatenate([[1.0], -plant.output_coeffs[:, 0, 0]])
        b = np.concatenate([[0.0], plant.input_coeffs[:, 0, 0]])
        # lfiltic wants the most recent sample first
        zi = scipy.signal.lfiltic(b, a, past_y[::-1, 0], past_u[::-1, 0])
        with np.errstate(over="ignore", invalid="ignore"):
            clean = scipy.signal.lfilter(b, a, u[:, 0], zi=zi)[0].reshape(-1, 1)
    else:
        lag = plant.lag
        A, B = plant.output_coeffs, plant.input_coeffs
        u_hist = np.vstack([past_u, u])
        y_hist = np.vstack([past_y, np.zeros((steps, plant.n_y))])
        for t in range(lag, lag + steps):
            acc = np.zeros(plant.n_y)
            for i in range(A.shape[0]):
                acc += A[i] @ y_hist[t - 1 - i]
            for j in range(B.shape[0]):
                acc += B[j] @ u_hist[t - 1 - j]
            y_hist[t] = acc
            if not np.all(np.abs(acc) <= DIVERGENCE_LIMIT):
                break
        clean = y_hist[lag:]

    if not np.all(np.abs(clean) <= DIVERGENCE_LIMIT):
        raise DivergenceError(f"plant output exceeded {DIVERGENCE_LIMIT:g}; the plant is unstable for this input")

    measured = clean.copy()
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        measured = clean + rng.normal(0.0, noise_std, size=clean.shape)
    return clean, measured


def generate_training(
    plant: ArxPlant,
    dims: Dimensions,
    input_std: float,
    input_bounds: Tuple[float, float] = (-1.0, 1.0),
    noise_std: float = 0.1,
    seed: int = 0,
) -> TrainingRecord:
    """
    Saturated white Gaussian excitation with white measurement noise.

    Starts from rest and discards a burn-in of rho + plant lag samples so the
    record does not depend on the arbitrary initial window.
    """
    if input_std <= 0:
        raise InvalidInputError("input_std must be positive")
    if dims.n_u != plant.n_u or dims.n_y != plant.n_y:
        raise InvalidInputError("dimensions do not match the plant channels")

    burn_in = dims.past_horizon + plant.lag
    total = dims.total_samples
    input_seed = derive_seed(seed, 0)
    noise_seed = derive_seed(seed, 1)

    rng = np.random.default_rng(input_seed)
    lo, hi = input_bounds
    u = np.clip(rng.normal(0.0, input_std, size=(burn_in + total, plant.n_u)), lo, hi)
    clean, measured = simulate(plant, u, noise_std=noise_std, seed=noise_seed)

    return TrainingRecord(
        inputs=u[burn_in:],
        measured_outputs=measured[burn_in:],
        clean_outputs=clean[burn_in:],
        seed=seed,
        dims=dims,
        plant=plant,
    )


def _windows(signal: np.ndarray, length: int, start: int, count: int) -> np.ndarray:
    """Rows stack signal[s .. s+length-1] (time-major), one column per s = start .. start+count-1"""
    view = sliding_window_view(signal, window_shape=length, axis=0)[start : start + count]
    # view: (count, channels, length) -> (length*channels, count)
    return np.ascontiguousarray(view.transpose(0, 2, 1).reshape(count, -1).T)


def build_bundle(record: TrainingRecord, dims: Dimensions, use_clean: bool = False) -> RegressorBundle:
    """
    Hankel matrices for column t = 0..N-1 with current time s = rho + t:
    Z stacks (u_{s-rho..s-1}, y_{s-rho..s-1}), U stacks u_{s..s+T-1}, Y stacks y_{s..s+T-1}.
    """
    if len(record) != dims.total_samples:
        raise InvalidInputError(f"record has {len(record)} samples, dimensions need {dims.total_samples}")
    if record.inputs.shape[1] != dims.n_u or record.measured_outputs.shape[1] != dims.n_y:
        raise InvalidInputError("record channel counts do not match the dimensions")

    rho, T, N = dims.past_horizon, dims.future_horizon, dims.columns
    y = record.clean_outputs if use_clean else record.measured_outputs
    Z = np.vstack([_windows(record.inputs, rho, 0, N), _windows(y, rho, 0, N)])
    U = _windows(record.inputs, T, rho, N)
    Y = _windows(y, T, rho, N)
    return RegressorBundle(Z=Z, U=U, Y=Y, dims=dims)


def build_regressor(z, u) -> np.ndarray:
    return np.concatenate([np.asarray(z, dtype=np.float64).reshape(-1), np.asarray(u, dtype=np.float64).reshape(-1)])


def past_window(inputs: np.ndarray, outputs: np.ndarray) -> np.ndarray:
    """z = (u_{t-rho..t-1}, y_{t-rho..t-1}) from (rho, channels) arrays"""
    return build_regressor(np.asarray(inputs).reshape(-1), np.asarray(outputs).reshape(-1))


def impulse_response_matrix(plant: ArxPlant, horizon: int) -> np.ndarray:
    """
    Block lower-triangular map from (u_t..u_{t+T-1}) to (y_t..y_{t+T-1}) at rest.
    The first block row is zero since the plant has no direct feedthrough.
    """
    ny, nu = plant.n_y, plant.n_u
    markov = np.zeros((horizon, ny, nu))
    for j in range(nu):
        impulse = np.zeros((horizon, nu))
        impulse[0, j] = 1.0
        clean, _ = simulate(plant, impulse)
        markov[:, :, j] = clean
    G = np.zeros((horizon * ny, horizon * nu))
    for k in range(horizon):
        for l in range(k + 1):
            G[k * ny : (k + 1) * ny, l * nu : (l + 1) * nu] = markov[k - l]
    return G


def free_response(plant: ArxPlant, past_u: np.ndarray, past_y: np.ndarray, horizon: int) -> np.ndarray:
    """Output over the horizon when future inputs are zero"""
    clean, _ = simulate(plant, np.zeros((horizon, plant.n_u)), initial_window=(past_u, past_y))
    return clean.reshape(-1)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def save_dataset(record: TrainingRecord, path: Union[str, Path]) -> Path:
    """
    CSV with one header comment line and one row per sample:
    `t,u...,y_measured...,y_clean...`
    """
    if record.dims is None or record.plant is None:
        raise InvalidInputError("only records with dimensions and plant can be saved")
    d = record.dims
    path = Path(path)
    header = (
        f"# rho={d.past_horizon} T={d.future_horizon} N={d.columns} seed={record.seed} "
        f"nu={d.n_u} ny={d.n_y} coeffs={record.plant.to_json()}"
    )
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for t in range(len(record)):
            row = [str(t)]
            row += [_fmt(v) for v in record.inputs[t]]
            row += [_fmt(v) for v in record.measured_outputs[t]]
            row += [_fmt(v) for v in record.clean_outputs[t]]
            writer.writerow(row)
    logger.debug("💾 Saved dataset with %d samples to %s", len(record), path)
    return path


def _parse_header(line: str) -> dict:
    if not line.startswith("#"):
        raise DatasetParseError("missing header comment", line=1)
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise DatasetParseError(f"malformed header token {token!r}", line=1)
        fields[key] = value
    missing = {"rho", "T", "N", "seed", "nu", "ny", "coeffs"} - fields.keys()
    if missing:
        raise DatasetParseError(f"header is missing {sorted(missing)}", line=1)
    return fields


def load_dataset(path: Union[str, Path]) -> TrainingRecord:
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("empty file", line=1)

    fields = _parse_header(lines[0])
    try:
        dims = Dimensions(int(fields["rho"]), int(fields["T"]), int(fields["nu"]), int(fields["ny"]), int(fields["N"]))
        seed = int(fields["seed"])
        plant = ArxPlant.from_json(fields["coeffs"])
    except (ValueError, KeyError, InvalidInputError) as e:
        raise DatasetParseError(f"invalid header: {e}", line=1) from e

    width = 1 + dims.n_u + 2 * dims.n_y
    rows = []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != width:
            raise DatasetParseError(f"expected {width} fields, found {len(row)}", line=lineno)
        try:
            t = int(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError as e:
            raise DatasetParseError(str(e), line=lineno) from e
        if t != lineno - 2:
            raise DatasetParseError(f"expected sample index {lineno - 2}, found {t}", line=lineno)
        rows.append(values)

    if len(rows) != dims.total_samples:
        raise DatasetParseError(
            f"header announces {dims.total_samples} samples, file has {len(rows)}", line=len(lines) + 1
        )

    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), width - 1)
    nu, ny = dims.n_u, dims.n_y
    return TrainingRecord(
        inputs=data[:, :nu],
        measured_outputs=data[:, nu : nu + ny],
        clean_outputs=data[:, nu + ny :],
        seed=seed,
        dims=dims,
        plant=plant,
    )
