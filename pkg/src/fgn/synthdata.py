"""Stochastic Lorenz-96 ground truth and the dataset container."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import _kernels
from . import io as fio
from . import rng as frng
from .model import Normalization, norm_hash

DATASET_MAGIC = b"FGNDAT1\n"
SPLITS = ("train", "valid", "test")


class IntegrationDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"integration diverged at integrator step {step}")
        self.step = step


@dataclass(frozen=True)
class SystemConfig:
    K: int = 40
    F: float = 8.0
    dt_integrator: float = 0.01
    dt_frame: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.K < 4:
            raise ValueError("Lorenz-96 needs K >= 4")
        ratio = self.dt_frame / self.dt_integrator
        if self.dt_integrator <= 0 or ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_frame / dt_integrator must be a positive integer")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_frame / self.dt_integrator))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemConfig":
        return cls(**dict(d))


def tendency(x: np.ndarray, F: float) -> np.ndarray:
    """dX_k/dt = (X_{k+1} - X_{k-2}) X_{k-1} - X_k + F on the ring."""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + F


def rk4_step(x: np.ndarray, dt: float, F: float) -> np.ndarray:
    k1 = tendency(x, F)
    k2 = tendency(x + 0.5 * dt * k1, F)
    k3 = tendency(x + 0.5 * dt * k2, F)
    k4 = tendency(x + dt * k3, F)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(config: SystemConfig, x0: np.ndarray, n_frames: int,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Integrate and return ``n_frames`` frames; frame 0 is ``x0`` itself.

    With ``noise_std > 0`` Gaussian noise of std ``noise_std*sqrt(dt)`` is
    added to every site after each RK4 step.  ``x0`` may be ``[K]`` or a batch
    ``[n, K]`` of independent trajectories.
    """
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    if x.shape[-1] != config.K:
        raise ValueError(f"x0 has {x.shape[-1]} sites, config has K={config.K}")
    if rng is None:
        rng = frng.stream(config.seed, "forcing")
    amp = config.noise_std * np.sqrt(config.dt_integrator)
    batch = x.reshape(-1, config.K)
    out = np.empty((n_frames,) + batch.shape)
    out[0] = batch
    S = config.substeps
    zeros = np.zeros((S,) + batch.shape)
    for f in range(1, n_frames):
        noise = rng.standard_normal((S,) + batch.shape) if amp > 0 else zeros
        batch, bad = _kernels.l96_advance(batch, noise, config.dt_integrator, config.F, amp)
        if bad >= 0:
            raise IntegrationDiverged((f - 1) * S + bad + 1)
        out[f] = batch
    return out.reshape((n_frames,) + x.shape)


def initial_state(config: SystemConfig) -> np.ndarray:
    g = frng.stream(config.seed, "init-state")
    return config.F + 0.01 * g.standard_normal(config.K)


# ----------------------------------------------------------------------------


@dataclass
class Dataset:
    frames: np.ndarray  # [T, K], physical units
    config: SystemConfig
    stats: Normalization
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)
    burn_in: int = 0

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def K(self) -> int:
        return self.frames.shape[1]

    @property
    def times(self) -> np.ndarray:
        return (self.burn_in + np.arange(self.T)) * self.config.dt_frame

    def split(self, name: str) -> np.ndarray:
        lo, hi = self.splits[name]
        return self.frames[lo:hi]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.stats.mean) / self.stats.std

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config == other.config and self.stats == other.stats
                and self.splits == other.splits and self.burn_in == other.burn_in
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes())


def compute_stats(train: np.ndarray) -> Normalization:
    """Scalar mean/std over all train values and std of one-frame increments."""
    inc = np.diff(train, axis=0)
    return Normalization(float(train.mean()), float(train.std()), float(inc.std()))


def split_bounds(n_frames: int, fractions) -> dict[str, tuple[int, int]]:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split_fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * n_frames))
    n_valid = int(round(fractions[1] * n_frames))
    n_test = n_frames - n_train - n_valid
    sizes = (n_train, n_valid, n_test)
    if min(sizes) < 3:
        raise ValueError(f"n_frames={n_frames} too small: split sizes {sizes} (each needs >= 3 frames)")
    bounds, lo = {}, 0
    for name, n in zip(SPLITS, sizes):
        bounds[name] = (lo, lo + n)
        lo += n
    return bounds


def make_dataset(config: SystemConfig, n_frames: int, split_fractions=(0.8, 0.1, 0.1),
                 burn_in: int = 1000) -> Dataset:
    """Integrate a trajectory, drop the spin-up, split chronologically."""
    if burn_in < 1000:
        raise ValueError("burn_in must be at least 1000 frames")
    bounds = split_bounds(n_frames, split_fractions)
    traj = integrate(config, initial_state(config), burn_in + n_frames)
    frames = np.ascontiguousarray(traj[burn_in:])
    lo, hi = bounds["train"]
    return Dataset(frames, config, compute_stats(frames[lo:hi]), bounds, burn_in)


def _header(ds: Dataset) -> dict:
    return {
        "kind": "fgn-dataset",
        "system": ds.config.to_dict(),
        "T": ds.T,
        "K": ds.K,
        "burn_in": ds.burn_in,
        "splits": {k: list(v) for k, v in ds.splits.items()},
        "stats": ds.stats.to_dict(),
        "stats_hash": norm_hash(ds.stats),
    }


def save(ds: Dataset, path, extra_header: Mapping | None = None) -> None:
    header = _header(ds)
    if extra_header:
        header.update(extra_header)
    fio.write(path, DATASET_MAGIC, header, {"frames": ds.frames})


def _from_header(header: dict, path) -> tuple[SystemConfig, Normalization, dict]:
    stats = Normalization(**header["stats"])
    if norm_hash(stats) != header.get("stats_hash"):
        raise fio.CorruptFileError(f"{path}: stats hash mismatch")
    splits = {k: (int(v[0]), int(v[1])) for k, v in header["splits"].items()}
    return SystemConfig.from_dict(header["system"]), stats, splits


def read_header(path) -> dict:
    """Header only (config, sizes, splits, stats); frames are not read."""
    header = fio.read_header(path, DATASET_MAGIC)
    _from_header(header, path)
    return header


def load(path) -> Dataset:
    header, arrays = fio.read(path, DATASET_MAGIC)
    config, stats, splits = _from_header(header, path)
    frames = arrays.get("frames")
    if frames is None or frames.shape != (header["T"], header["K"]):
        raise fio.CorruptFileError(f"{path}: frame blob has wrong shape")
    return Dataset(frames, config, stats, splits, int(header["burn_in"]))


def climatology_run(config: SystemConfig, n_frames: int, burn_in: int = 1000) -> np.ndarray:
    """A long truth run independent of ``make_dataset``'s trajectory.

    Uses its own initial state and forcing streams, so its frames share no
    randomness with any dataset split.
    """
    x0 = config.F + 0.01 * frng.stream(config.seed, "climatology", "init").standard_normal(config.K)
    traj = integrate(config, x0, burn_in + n_frames, frng.stream(config.seed, "climatology", "forcing"))
    return np.ascontiguousarray(traj[burn_in:])


def decorrelation_frames(config: SystemConfig, x0: np.ndarray, seeds=(1, 2),
                         max_frames: int = 500, threshold: float = 0.5) -> int | None:
    """First frame at which two stochastic runs from ``x0`` have spatial
    correlation below ``threshold``; None if it never happens."""
    runs = [integrate(config, x0, max_frames, frng.stream(s, "forcing")) for s in seeds]
    for f in range(max_frames):
        a, b = runs[0][f], runs[1][f]
        if a.std() == 0 or b.std() == 0:
            continue
        if np.corrcoef(a, b)[0, 1] < threshold:
            return f
    return None
