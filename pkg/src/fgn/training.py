"""CRPS objective, AdamW, schedules and the staged training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import model as fm
from . import rng as frng
from ._runtime import tune_allocator
from .synthdata import Dataset

log = logging.getLogger(__name__)

CLIP_NORM = 32.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: str | None):
        super().__init__(f"loss became non-finite at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


# ----------------------------------------------------------------------------
# CRPS estimators (differentiable)


def _pair_indices(N: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(N, k=1)
    return i, j


def _crps(samples: dc.Tensor, y, pair_coef: float) -> dc.Tensor:
    N = samples.shape[0]
    yd = y.data if isinstance(y, dc.Tensor) else np.asarray(y, dtype=np.float64)
    target = dc.Tensor(np.broadcast_to(yd, samples.shape))
    skill = dc.reduce_mean(dc.abs_diff(samples, target), axis=0)
    if N == 1:
        return skill
    i, j = _pair_indices(N)
    pairs = dc.abs_diff(dc.take(samples, i, axis=0), dc.take(samples, j, axis=0))
    # sum over ordered pairs = 2 * sum over unordered pairs
    spread = dc.scale(dc.reduce_sum(pairs, axis=0), 2.0 * pair_coef)
    return dc.sub(skill, spread)


def fair_crps(samples, y) -> dc.Tensor:
    """Fair (unbiased) CRPS of ``N >= 2`` samples along axis 0.

    ``(1/N) sum|x_n - y| - 1/(2N(N-1)) sum_{n,n'} |x_n - x_n'|``, evaluated
    elementwise over any trailing axes.
    """
    samples = samples if isinstance(samples, dc.Tensor) else dc.Tensor(samples)
    N = samples.shape[0]
    if N < 2:
        raise dc.ContractError("fair CRPS needs at least two samples")
    return _crps(samples, y, 1.0 / (2 * N * (N - 1)))


def biased_crps(samples, y) -> dc.Tensor:
    """CRPS of the empirical distribution of the samples (``1/(2N^2)`` form)."""
    samples = samples if isinstance(samples, dc.Tensor) else dc.Tensor(samples)
    N = samples.shape[0]
    if N < 1:
        raise dc.ContractError("CRPS needs at least one sample")
    return _crps(samples, y, 1.0 / (2 * N * N))


@dataclass(frozen=True)
class LossConfig:
    n_samples: int = 2
    site_weights: tuple[float, ...] | None = None  # None -> uniform

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2 for the fair estimator")
        if self.site_weights is not None:
            w = np.asarray(self.site_weights)
            if np.any(w < 0) or not np.any(w > 0):
                raise ValueError("site weights must be >= 0 and not all zero")

    def weights(self, K: int) -> np.ndarray:
        if self.site_weights is None:
            return np.ones(K)
        w = np.asarray(self.site_weights, dtype=np.float64)
        if w.shape != (K,):
            raise dc.ContractError(f"{w.size} site weights for {K} sites")
        return w


def loss(predicted, targets, cfg: LossConfig = LossConfig()) -> dc.Tensor:
    """Site-weighted mean fair CRPS.

    ``predicted`` is ``[N, K]`` or ``[N, B, K]``; ``targets`` ``[K]`` or
    ``[B, K]``.  The batch axis, when present, is averaged.
    """
    predicted = predicted if isinstance(predicted, dc.Tensor) else dc.Tensor(predicted)
    tshape = targets.shape if isinstance(targets, dc.Tensor) else np.shape(targets)
    if predicted.shape[1:] != tuple(tshape):
        raise dc.ContractError(f"predictions {predicted.shape} do not match targets {tuple(tshape)}")
    K = predicted.shape[-1]
    per_site = fair_crps(predicted, targets)
    w = np.broadcast_to(cfg.weights(K), per_site.shape)
    return dc.reduce_mean(dc.mul(per_site, dc.Tensor(w)))


# ----------------------------------------------------------------------------
# optimiser and schedule


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warm-up to ``peak`` at ``warmup`` then cosine decay to 0 at ``total``.

    ``step`` counts updates from 1.
    """
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    frac = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: fm.ModelParams) -> "OptState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)

    def copy(self) -> "OptState":
        return OptState({k: a.copy() for k, a in self.m.items()},
                        {k: a.copy() for k, a in self.v.items()}, self.step)


@dataclass(frozen=True)
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1

    def update(self, params: fm.ModelParams, grads: Mapping[str, np.ndarray],
               opt: OptState, lr: float) -> None:
        """In-place update of ``params.arrays`` and ``opt``."""
        opt.step += 1
        t = opt.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.arrays.items():
            g = grads[name]
            m = opt.m[name]
            v = opt.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and fm.is_weight_matrix(name):
                p -= lr * self.weight_decay * p
            p -= lr * step


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * f
    return norm


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Stage:
    name: str
    rollout_len: int
    steps: int
    peak_lr: float
    warmup: int

    def __post_init__(self):
        if self.rollout_len < 1:
            raise ValueError("rollout_len must be >= 1")
        if self.warmup > self.steps:
            raise ValueError(f"stage {self.name}: warmup exceeds total steps")


def default_stages(single_steps: int = 20000, ar: bool = True) -> list[Stage]:
    # short smoke schedules keep warm-up to a tenth of the stage
    stages = [Stage("single", 1, single_steps, 1e-3, min(500, single_steps // 10))]
    if ar:
        stages += [Stage("ar1", 1, 2000, 1e-4, 200), Stage("ar2", 2, 1000, 1e-4, 100)]
        stages += [Stage(f"ar{r}", r, 250, 1e-5, 25) for r in range(3, 9)]
    return stages


@dataclass(frozen=True)
class TrainConfig:
    model: fm.ModelConfig = field(default_factory=fm.ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stages: tuple[Stage, ...] = field(default_factory=lambda: tuple(default_stages()))
    batch_size: int = 16
    weight_decay: float = 0.1
    clip_norm: float = CLIP_NORM
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 50
    # stages after which a plain parameter snapshot is written
    snapshot_stages: tuple[str, ...] = ("single",)

    def __post_init__(self):
        lens = [s.rollout_len for s in self.stages]
        if any(b < a for a, b in zip(lens, lens[1:])):
            raise ValueError("rollout lengths must be non-decreasing across stages")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        kw = {}
        if "model" in d:
            kw["model"] = fm.ModelConfig.from_dict(d.pop("model"))
        if "loss" in d:
            lc = dict(d.pop("loss"))
            if lc.get("site_weights") is not None:
                lc["site_weights"] = tuple(lc["site_weights"])
            kw["loss"] = LossConfig(**lc)
        if "stages" in d:
            kw["stages"] = tuple(Stage(**s) for s in d.pop("stages"))
        if "snapshot_stages" in d:
            kw["snapshot_stages"] = tuple(d.pop("snapshot_stages"))
        kw.update(d)
        return cls(**kw)


# ----------------------------------------------------------------------------
# training loop


def _batch_windows(train: np.ndarray, starts: np.ndarray, R: int):
    x2 = train[starts]
    x1 = train[starts + 1]
    targets = np.stack([train[starts + 2 + r] for r in range(R)])
    return x2, x1, targets


def rollout_loss(params: fm.ModelParams, x2: np.ndarray, x1: np.ndarray, targets: np.ndarray,
                 noise: np.ndarray, loss_cfg: LossConfig, tape: dc.Tape | None = None):
    """Mean over ``R`` autoregressive steps of the fair-CRPS loss.

    ``x2, x1``: ``[B, K]``; ``targets``: ``[R, B, K]``; ``noise``:
    ``[R, N*B, ...]`` (sample-major rows).  Each of the ``N`` samples feeds
    its own predictions back.  Returns ``(loss tensor, param tensors)``.
    """
    cfg = params.config
    R, B, K = targets.shape
    N = loss_cfg.n_samples
    if tape is None:
        P = {k: dc.Tensor(v) for k, v in params.arrays.items()}
    else:
        P = {k: tape.leaf(v) for k, v in params.arrays.items()}
    prev2 = dc.Tensor(np.tile(x2, (N, 1)))
    prev1 = dc.Tensor(np.tile(x1, (N, 1)))
    total = None
    for r in range(R):
        out = fm.apply(cfg, params.norm, P, prev2, prev1, dc.Tensor(noise[r]))
        step_loss = loss(dc.reshape(out, (N, B, K)), targets[r], loss_cfg)
        total = step_loss if total is None else dc.add(total, step_loss)
        prev2, prev1 = prev1, out
    return dc.scale(total, 1.0 / R), P


def loss_and_grads(params: fm.ModelParams, x2, x1, targets, noise, loss_cfg: LossConfig):
    tape = dc.Tape()
    L, P = rollout_loss(params, x2, x1, targets, noise, loss_cfg, tape)
    names = list(P)
    grads = tape.gradient(L, [P[n] for n in names])
    return float(L.data), dict(zip(names, grads))


@dataclass
class RunState:
    """Everything needed to resume a run bit-exactly."""

    params: fm.ModelParams
    opt: OptState
    stage_index: int = 0
    stage_step: int = 0
    batch_rng: np.random.Generator | None = None
    noise_rng: np.random.Generator | None = None


def init_run(dataset: Dataset, cfg: TrainConfig, seed_id: int) -> RunState:
    init_rng = frng.stream(cfg.seed, seed_id, "init")
    params = fm.init_params(cfg.model, init_rng, dataset.stats, seed_id)
    return RunState(params, OptState.zeros_like(params), 0, 0,
                    frng.stream(cfg.seed, seed_id, "batch"), frng.stream(cfg.seed, seed_id, "noise"))


def save_run(path, state: RunState, cfg: TrainConfig) -> None:
    extras = {}
    for k in state.params.arrays:
        extras[f"opt/m/{k}"] = state.opt.m[k]
        extras[f"opt/v/{k}"] = state.opt.v[k]
    header = {
        "train_config": cfg.to_dict(),
        "run": {
            "opt_step": state.opt.step,
            "stage_index": state.stage_index,
            "stage_step": state.stage_step,
            "batch_rng": frng.get_state(state.batch_rng),
            "noise_rng": frng.get_state(state.noise_rng),
        },
    }
    fm.save_checkpoint(path, state.params, extras, header)


def load_run(path) -> tuple[RunState, TrainConfig]:
    params, header, extras = fm.load_checkpoint(path, with_extras=True)
    if "run" not in header:
        raise ValueError(f"{path} has no optimizer/run state")
    run = header["run"]
    opt = OptState({k: extras[f"opt/m/{k}"] for k in params.arrays},
                   {k: extras[f"opt/v/{k}"] for k in params.arrays}, int(run["opt_step"]))
    batch_rng = frng.set_state(np.random.Generator(np.random.PCG64()), run["batch_rng"])
    noise_rng = frng.set_state(np.random.Generator(np.random.PCG64()), run["noise_rng"])
    state = RunState(params, opt, int(run["stage_index"]), int(run["stage_step"]), batch_rng, noise_rng)
    return state, TrainConfig.from_dict(header["train_config"])


def train_stage(state: RunState, dataset: Dataset, cfg: TrainConfig, stage: Stage,
                log_path=None, checkpoint_path=None, stop_after: int | None = None) -> list[dict]:
    """Run (the remainder of) one stage in place on ``state``.

    Each step draws ``batch_size`` windows, rolls out ``stage.rollout_len``
    steps with ``n_samples`` fresh noise draws per window per step, and
    applies one clipped AdamW update.  ``stop_after`` interrupts after that
    many steps of this call (used to exercise resume).
    """
    tune_allocator()
    train = dataset.split("train")
    R, B = stage.rollout_len, cfg.batch_size
    N = cfg.loss.n_samples
    hi = train.shape[0] - 1 - R  # last valid window start is hi - 1
    if hi < 1:
        raise ValueError(f"train split too short for rollout length {R}")
    opt_rule = AdamW(weight_decay=cfg.weight_decay)
    records = []
    last_good = str(checkpoint_path) if checkpoint_path and os.path.exists(checkpoint_path) else None
    t0 = time.perf_counter()
    done_here = 0
    with dc.checked(False):
        while state.stage_step < stage.steps:
            if stop_after is not None and done_here >= stop_after:
                break
            s = state.stage_step + 1
            starts = state.batch_rng.integers(0, hi, size=B)
            noise = state.noise_rng.standard_normal((R,) + fm.noise_shape(cfg.model, N * B))
            x2, x1, targets = _batch_windows(train, starts, R)
            value, grads = loss_and_grads(state.params, x2, x1, targets, noise, cfg.loss)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(s, last_good)
            gnorm = clip_by_global_norm(grads, cfg.clip_norm)
            lr = lr_at(s, stage.peak_lr, stage.warmup, stage.steps)
            opt_rule.update(state.params, grads, state.opt, lr)
            state.stage_step = s
            done_here += 1
            if s % cfg.log_every == 0 or s == stage.steps:
                # no wall time here: logs are reproducible artifacts
                rec = {"stage": stage.name, "step": s, "loss": value, "lr": lr, "grad_norm": gnorm}
                records.append(rec)
                log.info("%s step %d loss %.5f (%.1f s)", stage.name, s, value, time.perf_counter() - t0)
                if log_path is not None:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
            if checkpoint_path is not None and (s % cfg.checkpoint_every == 0 or s == stage.steps):
                save_run(checkpoint_path, state, cfg)
                last_good = str(checkpoint_path)
    return records


def _provenance(cfg: TrainConfig, n_done: int) -> dict:
    return {"stages": [s.name for s in cfg.stages[:n_done]], "train_seed": cfg.seed}


def snapshot_path(checkpoint_path, stage_name: str) -> Path:
    p = Path(checkpoint_path)
    return p.with_name(f"{p.stem}.{stage_name}.ckpt")


def run_stages(state: RunState, dataset: Dataset, cfg: TrainConfig, log_path=None,
               checkpoint_path=None, stop_after: int | None = None) -> RunState:
    """Run all remaining stages of ``cfg`` starting from ``state``'s position."""
    budget = stop_after
    while state.stage_index < len(cfg.stages):
        stage = cfg.stages[state.stage_index]
        before = state.stage_step
        train_stage(state, dataset, cfg, stage, log_path, checkpoint_path, budget)
        if budget is not None:
            budget -= state.stage_step - before
        if state.stage_step < stage.steps:
            break
        state.stage_index += 1
        state.stage_step = 0
        state.params.provenance = _provenance(cfg, state.stage_index)
        if checkpoint_path is not None:
            if stage.name in cfg.snapshot_stages:
                fm.save_checkpoint(snapshot_path(checkpoint_path, stage.name), state.params)
            save_run(checkpoint_path, state, cfg)
    state.params.provenance = _provenance(cfg, state.stage_index)
    return state


def _truncate_log(log_path: Path, cfg: TrainConfig, state: RunState) -> None:
    """Drop records written after the checkpoint we resume from."""
    if not log_path.exists():
        return
    order = {st.name: i for i, st in enumerate(cfg.stages)}
    pos = (state.stage_index, state.stage_step)
    keep = [line for line in log_path.read_text().splitlines(keepends=True)
            if (order[(r := json.loads(line))["stage"]], r["step"]) <= pos]
    log_path.write_text("".join(keep))


def train_single(dataset: Dataset, cfg: TrainConfig, seed_id: int = 0, out_dir=None,
                 resume: bool = False) -> fm.ModelParams:
    """Train one model seed through every stage; optionally checkpointed to ``out_dir``."""
    ckpt = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / f"seed{seed_id}.run"
        log_path = out_dir / f"seed{seed_id}.log.jsonl"
    if resume and ckpt is not None and ckpt.exists():
        state, saved_cfg = load_run(ckpt)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ValueError(f"{ckpt} was produced with a different training config")
        log.info("resuming seed %d at stage %d step %d", seed_id, state.stage_index, state.stage_step)
        if log_path is not None:
            _truncate_log(log_path, cfg, state)
    else:
        state = init_run(dataset, cfg, seed_id)
        if log_path is not None and log_path.exists():
            log_path.unlink()
    run_stages(state, dataset, cfg, log_path, ckpt)
    if out_dir is not None:
        fm.save_checkpoint(out_dir / f"seed{seed_id}.ckpt", state.params)
    return state.params


def train_ensemble(dataset: Dataset, cfg: TrainConfig, J: int, out_dir=None,
                   seed_ids: Sequence[int] | None = None, resume: bool = False):
    """Train ``J`` independently initialised seeds.

    Returns ``(params_list, failures)`` where ``failures`` maps seed id to the
    exception that stopped it; the other seeds still complete.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    seed_ids = list(range(J)) if seed_ids is None else list(seed_ids)
    if len(seed_ids) != J:
        raise ValueError("need exactly J seed ids")
    results, failures = [], {}
    for sid in seed_ids:
        try:
            results.append(train_single(dataset, cfg, sid, out_dir, resume))
        except (TrainingDiverged, FloatingPointError) as exc:
            log.error("seed %d failed: %s", sid, exc)
            failures[sid] = exc
    return results, failures


def with_stages(cfg: TrainConfig, stages: Sequence[Stage]) -> TrainConfig:
    return replace(cfg, stages=tuple(stages))
