"""Autoregressive ensemble generation across model seeds."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import io as fio
from . import model as fm
from . import rng as frng
from ._runtime import tune_allocator

FORECAST_MAGIC = b"FGNFCST1\n"
DERIVED_KINDS = ("local_speed", "long_range_diff")


class RolloutDiverged(RuntimeError):
    def __init__(self, step: int, members=()):
        super().__init__(f"non-finite state at lead step {step}" + (f" (members {list(members)})" if members else ""))
        self.step = step
        self.members = list(members)


class EnsembleConfigError(ValueError):
    pass


def rollout(params: fm.ModelParams, init: fm.TrajectoryWindow, T: int,
            rng: np.random.Generator) -> np.ndarray:
    """One member trajectory ``[T, K]``; fresh noise from ``rng`` every step."""
    if T < 1:
        raise ValueError("T must be >= 1")
    x2 = np.asarray(init.x_prev2, dtype=np.float64)
    x1 = np.asarray(init.x_prev1, dtype=np.float64)
    out = np.empty((T, x1.shape[-1]))
    with dc.checked(False):
        for t in range(T):
            x, _ = fm.sample_member_step(params, fm.TrajectoryWindow(x2, x1), rng)
            if not np.all(np.isfinite(x)):
                raise RolloutDiverged(t + 1)
            out[t] = x
            x2, x1 = x1, x
    return out


@dataclass(frozen=True)
class EnsembleConfig:
    members: int
    checkpoints: tuple[str, ...]  # paths (or labels) of the J model seeds
    lead_steps: int = 15
    seed: int = 0

    def __post_init__(self):
        J = len(self.checkpoints)
        if J < 1:
            raise EnsembleConfigError("need at least one checkpoint")
        if self.members < 1 or self.members % J:
            raise EnsembleConfigError(
                f"members={self.members} must be a positive multiple of the {J} checkpoints "
                "(each model seed generates an equal number of members)")
        if self.lead_steps < 1:
            raise EnsembleConfigError("lead_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = list(self.checkpoints)
        return d


@dataclass
class EnsembleForecast:
    values: np.ndarray  # [M, T, K]
    member_seed: np.ndarray  # [M] index into the checkpoint list
    seed_ids: list[int]  # seed_id of each checkpoint
    init_index: int
    config: EnsembleConfig
    checkpoint_hashes: list[str] = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    def noise_stream_id(self, member: int, step: int) -> str:
        return f"{self.config.seed}/init{self.init_index}/member{member}/step{step}"


def member_allocation(M: int, J: int) -> np.ndarray:
    """Round-robin: member m uses checkpoint m mod J."""
    return np.arange(M) % J


def member_rng(seed: int, init_index: int, member: int) -> np.random.Generator:
    return frng.stream(seed, "forecast", init_index, member)


def generate_ensembles(models: Sequence[fm.ModelParams], cfg: EnsembleConfig,
                       inits: Sequence[tuple[int, fm.TrajectoryWindow]],
                       hashes: Sequence[str] = ()) -> list[EnsembleForecast]:
    """Ensembles for several init windows at once.

    All members of all inits that share a model seed are advanced as one
    batch.  Every member draws its noise from its own stream
    ``(seed, init, member)`` so results do not depend on batching order
    across members; member ``m`` uses model ``m mod J``.
    """
    tune_allocator()
    J = len(models)
    if J != len(cfg.checkpoints):
        raise EnsembleConfigError("number of models does not match the checkpoint list")
    K = models[0].config.K
    for p in models:
        if p.config.K != K:
            raise EnsembleConfigError("checkpoints disagree on K")
    for _, w in inits:
        if np.shape(w.x_prev1)[-1] != K:
            raise EnsembleConfigError(f"init window has K={np.shape(w.x_prev1)[-1]}, models have K={K}")
    M, T = cfg.members, cfg.lead_steps
    alloc = member_allocation(M, J)
    n_init = len(inits)
    values = np.empty((n_init, M, T, K))
    rngs = [[member_rng(cfg.seed, idx, m) for m in range(M)] for idx, _ in inits]
    for j, params in enumerate(models):
        mem = np.flatnonzero(alloc == j)
        rows = [(i, m) for i in range(n_init) for m in mem]
        x2 = np.stack([np.asarray(inits[i][1].x_prev2, dtype=np.float64) for i, _ in rows])
        x1 = np.stack([np.asarray(inits[i][1].x_prev1, dtype=np.float64) for i, _ in rows])
        P = {k: dc.Tensor(v) for k, v in params.arrays.items()}
        with dc.checked(False):
            for t in range(T):
                z = np.stack([fm.draw_noise(params.config, rngs[i][m]) for i, m in rows])
                x = fm.apply(params.config, params.norm, P, dc.Tensor(x2), dc.Tensor(x1), dc.Tensor(z)).numpy()
                bad = ~np.all(np.isfinite(x), axis=-1)
                if bad.any():
                    raise RolloutDiverged(t + 1, [rows[r] for r in np.flatnonzero(bad)])
                for r, (i, m) in enumerate(rows):
                    values[i, m, t] = x[r]
                x2, x1 = x1, x
    seed_ids = [p.seed_id for p in models]
    return [EnsembleForecast(values[n], alloc.copy(), seed_ids, idx, cfg, list(hashes))
            for n, (idx, _) in enumerate(inits)]


def generate_ensemble(models: Sequence[fm.ModelParams], cfg: EnsembleConfig, init_index: int,
                      init: fm.TrajectoryWindow, hashes: Sequence[str] = ()) -> EnsembleForecast:
    return generate_ensembles(models, cfg, [(init_index, init)], hashes)[0]


def windows_from_frames(frames: np.ndarray, init_indices: Sequence[int]):
    """Init window for index ``i`` is ``(frames[i-1], frames[i])``; truth is ``frames[i+1:]``."""
    out = []
    for i in init_indices:
        if i < 1:
            raise ValueError("init index must be >= 1 (needs a previous frame)")
        out.append((int(i), fm.TrajectoryWindow(frames[i - 1], frames[i])))
    return out


def derived_quantity(values: np.ndarray, kind: str) -> np.ndarray:
    """Per-member derived field on the last (site) axis.

    ``local_speed``: ``sqrt(x_k^2 + x_{k+1}^2)`` (speed from two components);
    ``long_range_diff``: ``x_k - x_{k+K/4}`` (a thickness-like difference).
    """
    x = np.asarray(values, dtype=np.float64)
    K = x.shape[-1]
    if kind == "local_speed":
        return np.sqrt(x * x + np.roll(x, -1, axis=-1) ** 2)
    if kind == "long_range_diff":
        return x - np.roll(x, -(K // 4), axis=-1)
    raise ValueError(f"unknown derived quantity {kind!r}; expected one of {DERIVED_KINDS}")


# ----------------------------------------------------------------------------
# files


def save(fc: EnsembleForecast, path, extra_header: dict | None = None) -> None:
    header = {
        "kind": "fgn-forecast",
        "ensemble_config": fc.config.to_dict(),
        "init_index": fc.init_index,
        "member_seed": [int(v) for v in fc.member_seed],
        "seed_ids": list(fc.seed_ids),
        "checkpoint_hashes": list(fc.checkpoint_hashes),
        "noise_streams": f"{fc.config.seed}/forecast/{fc.init_index}/<member>",
    }
    if extra_header:
        header.update(extra_header)
    fio.write(path, FORECAST_MAGIC, header, {"values": fc.values})


def load(path) -> EnsembleForecast:
    header, arrays = fio.read(path, FORECAST_MAGIC)
    ec = header["ensemble_config"]
    cfg = EnsembleConfig(ec["members"], tuple(ec["checkpoints"]), ec["lead_steps"], ec["seed"])
    values = arrays["values"]
    if values.shape[0] != cfg.members or values.shape[1] != cfg.lead_steps:
        raise fio.CorruptFileError(f"{path}: values shape {values.shape} inconsistent with header")
    return EnsembleForecast(values, np.asarray(header["member_seed"], dtype=np.int64),
                            list(header["seed_ids"]), int(header["init_index"]), cfg,
                            list(header["checkpoint_hashes"]))
