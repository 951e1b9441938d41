"""Ensemble verification: marginal and pooled CRPS, calibration, decision
value, spectra and paired significance over many init times."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io as fio
from .forecast import DERIVED_KINDS, EnsembleForecast, derived_quantity

CLIMATOLOGY_MAGIC = b"FGNCLIM1\n"
POOL_KINDS = ("avg", "max")


class VerificationError(ValueError):
    """Inputs cannot be verified together (shapes, non-finite members, missing inputs)."""


class UndefinedRatio(ArithmeticError):
    pass


# ----------------------------------------------------------------------------
# scores on plain arrays; the member axis is always axis 0


def _pair_sum(members: np.ndarray) -> np.ndarray:
    """sum_{i,j} |x_i - x_j| over axis 0 via the sorted-order identity."""
    M = members.shape[0]
    xs = np.sort(members, axis=0)
    coef = (2.0 * np.arange(M) - M + 1).reshape((M,) + (1,) * (members.ndim - 1))
    return 2.0 * np.sum(coef * xs, axis=0)


def crps(members, truth, fair: bool = False) -> np.ndarray:
    """Pointwise ensemble CRPS.

    Biased: ``mean|x-y| - sum|x_i-x_j| / (2M^2)``.  Fair replaces the pair
    normalisation with ``2M(M-1)`` and needs ``M >= 2``.
    """
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    M = x.shape[0]
    skill = np.mean(np.abs(x - y), axis=0)
    if M == 1:
        if fair:
            raise VerificationError("fair CRPS needs at least 2 members")
        return skill
    denom = 2.0 * M * (M - 1) if fair else 2.0 * M * M
    return skill - _pair_sum(x) / denom


def pool(field_: np.ndarray, width: int, kind: str = "avg") -> np.ndarray:
    """Circular stride-1 pooling over the last axis: ``out[k]`` covers sites ``k..k+w-1``."""
    x = np.asarray(field_, dtype=np.float64)
    K = x.shape[-1]
    if width < 1:
        raise VerificationError("pool width must be >= 1")
    if width > K:
        raise VerificationError(f"pool width {width} exceeds K={K}")
    if kind not in POOL_KINDS:
        raise VerificationError(f"unknown pooling {kind!r}")
    if width == 1:
        return x.copy()
    stack = np.stack([np.roll(x, -o, axis=-1) for o in range(width)])
    return stack.mean(axis=0) if kind == "avg" else stack.max(axis=0)


def power_spectrum(field_: np.ndarray) -> np.ndarray:
    """One-sided power per wavenumber ``0..K//2`` on the last axis.

    Uses ``X = fft(x)/K`` and doubles the interior wavenumbers so that the
    powers sum to ``mean(x**2)``; a cosine of amplitude ``a`` has power
    ``a**2/2`` at its wavenumber.
    """
    x = np.asarray(field_, dtype=np.float64)
    K = x.shape[-1]
    if K < 2:
        raise VerificationError("spectrum needs K >= 2")
    p = np.abs(np.fft.rfft(x, axis=-1) / K) ** 2
    p[..., 1:] *= 2.0
    if K % 2 == 0:
        p[..., -1] /= 2.0
    return p


def relative_economic_value(prob: np.ndarray, event: np.ndarray, M: int,
                            cost_loss: Sequence[float]) -> np.ndarray:
    """REV envelope over decision thresholds ``p in {0, 1/M, ..., 1}``.

    ``prob`` and ``event`` are flat arrays of forecast probabilities and
    binary outcomes.  Returns one value per cost/loss ratio, NaN when the
    base rate is 0 or 1.
    """
    prob = np.asarray(prob, dtype=np.float64).ravel()
    event = np.asarray(event, dtype=bool).ravel()
    n = event.size
    s = event.mean() if n else float("nan")
    out = np.full(len(cost_loss), np.nan)
    if not n or s <= 0.0 or s >= 1.0:
        return out
    # round to member counts so p comparisons are exact
    counts = np.rint(prob * M).astype(np.int64)
    hits = np.array([np.sum(event & (counts >= c)) for c in range(M + 1)])
    alarms = np.array([np.sum(counts >= c) for c in range(M + 1)])
    misses = event.sum() - hits
    for i, r in enumerate(cost_loss):
        if not 0.0 < r < 1.0:
            raise VerificationError("cost/loss ratios must lie in (0, 1)")
        # expenses scaled by n, so perfect and climatological forecasts give exactly 1 and 0
        n_event = int(event.sum())
        e_fc = r * alarms + misses
        e_clim = min(r * n, n_event)
        e_perf = r * n_event
        out[i] = np.max((e_clim - e_fc) / (e_clim - e_perf))
    return out


def paired_significance(a, b, n_boot: int = 1000, level: float = 0.95,
                        seed: int = 0) -> tuple[float, tuple[float, float]]:
    """Mean of ``a - b`` and a moving-block bootstrap percentile interval.

    ``a`` and ``b`` are per-init values in init-time order.  Block length is
    ``ceil(n ** (1/3))``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise VerificationError("paired values must be 1-D with matching init sets")
    d = a - b
    n = d.size
    if n < 2:
        raise VerificationError("need at least two inits for a bootstrap")
    L = math.ceil(n ** (1.0 / 3.0) - 1e-12)
    n_blocks = math.ceil(n / L)
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, n - L + 1, size=(n_boot, n_blocks))
    idx = (starts[..., None] + np.arange(L)).reshape(n_boot, -1)[:, :n]
    means = d[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(d.mean()), (float(lo), float(hi))


# ----------------------------------------------------------------------------
# climatology


@dataclass
class Climatology:
    levels: np.ndarray  # [Q] quantile levels
    thresholds: np.ndarray  # [Q, K] per-site quantiles
    n_frames: int
    source: dict = field(default_factory=dict)

    def threshold(self, q: float) -> np.ndarray:
        hit = np.flatnonzero(np.isclose(self.levels, q, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise VerificationError(f"climatology has no {q} quantile (levels {self.levels.tolist()})")
        return self.thresholds[hit[0]]


DEFAULT_LEVELS = (0.001, 0.01, 0.1, 0.9, 0.99, 0.999)


def climatology_from_frames(frames: np.ndarray, levels=DEFAULT_LEVELS, source: Mapping | None = None) -> Climatology:
    frames = np.asarray(frames, dtype=np.float64)
    lv = np.asarray(sorted(levels), dtype=np.float64)
    return Climatology(lv, np.quantile(frames, lv, axis=0), frames.shape[0], dict(source or {}))


def save_climatology(clim: Climatology, path) -> None:
    header = {"kind": "fgn-climatology", "levels": clim.levels.tolist(), "n_frames": clim.n_frames,
              "source": clim.source}
    fio.write(path, CLIMATOLOGY_MAGIC, header, {"thresholds": clim.thresholds})


def load_climatology(path) -> Climatology:
    header, arrays = fio.read(path, CLIMATOLOGY_MAGIC)
    return Climatology(np.asarray(header["levels"], dtype=np.float64), arrays["thresholds"],
                       int(header["n_frames"]), header.get("source", {}))


# ----------------------------------------------------------------------------
# evaluation over many inits


@dataclass(frozen=True)
class VerifyConfig:
    pool_widths: tuple[int, ...] = (1, 2, 4, 8, 16)
    pool_kinds: tuple[str, ...] = POOL_KINDS
    fair: bool = False
    derived: tuple[str, ...] = DERIVED_KINDS
    rev: bool = True
    rev_levels: tuple[float, ...] = DEFAULT_LEVELS  # < 0.5 means the lower tail
    cost_loss: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
    spectra: bool = True
    n_boot: int = 1000
    bootstrap_seed: int = 0

    def __post_init__(self):
        for w in self.pool_widths:
            if w < 1:
                raise VerificationError("pool widths must be >= 1")
        for k in self.pool_kinds:
            if k not in POOL_KINDS:
                raise VerificationError(f"unknown pooling {k!r}")
        for k in self.derived:
            if k not in DERIVED_KINDS:
                raise VerificationError(f"unknown derived quantity {k!r}")
        for r in self.cost_loss:
            if not 0.0 < r < 1.0:
                raise VerificationError("cost/loss ratios must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "VerifyConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class EvalRun:
    forecasts: np.ndarray  # [n_init, M, T, K]
    truth: np.ndarray  # [n_init, T, K]
    init_indices: list[int]
    climatology: Climatology | None = None

    def __post_init__(self):
        f = np.asarray(self.forecasts, dtype=np.float64)
        t = np.asarray(self.truth, dtype=np.float64)
        if f.ndim != 4 or t.ndim != 3:
            raise VerificationError("forecasts must be [init, member, lead, site] and truth [init, lead, site]")
        if f.shape[0] != t.shape[0] or f.shape[2:] != t.shape[1:]:
            raise VerificationError(f"forecast shape {f.shape} does not match truth shape {t.shape}")
        if len(self.init_indices) != f.shape[0]:
            raise VerificationError("one init index per forecast is required")
        if not np.all(np.isfinite(f)):
            raise VerificationError("ensemble contains non-finite members")
        if self.climatology is not None and self.climatology.thresholds.shape[-1] != f.shape[-1]:
            raise VerificationError("climatology K does not match forecasts")
        self.forecasts, self.truth = f, t

    @property
    def M(self) -> int:
        return self.forecasts.shape[1]

    @property
    def T(self) -> int:
        return self.forecasts.shape[2]

    @property
    def K(self) -> int:
        return self.forecasts.shape[3]

    @classmethod
    def from_forecasts(cls, forecasts: Sequence[EnsembleForecast], frames: np.ndarray,
                       climatology: Climatology | None = None) -> "EvalRun":
        """Truth for a forecast from init ``i`` is ``frames[i+1 : i+1+T]``."""
        if not forecasts:
            raise VerificationError("no forecasts given")
        shapes = {fc.values.shape for fc in forecasts}
        if len(shapes) != 1:
            raise VerificationError(f"forecasts disagree on (M, T, K): {sorted(shapes)}")
        M, T, K = shapes.pop()
        if frames.shape[-1] != K:
            raise VerificationError(f"forecasts have K={K}, truth has K={frames.shape[-1]}")
        truth = []
        for fc in forecasts:
            lo = fc.init_index + 1
            if lo + T > frames.shape[0]:
                raise VerificationError(f"init {fc.init_index} + lead {T} runs past the end of the truth")
            truth.append(frames[lo:lo + T])
        return cls(np.stack([fc.values for fc in forecasts]), np.stack(truth),
                   [fc.init_index for fc in forecasts], climatology)


def ensemble_crps(run: EvalRun, pooling: str = "none", width: int = 1, fair: bool = False,
                  derived: str | None = None) -> np.ndarray:
    """Per-init, per-lead CRPS averaged over sites: ``[n_init, T]``."""
    f, t = run.forecasts, run.truth
    if derived is not None:
        f, t = derived_quantity(f, derived), derived_quantity(t, derived)
    if pooling != "none":
        f, t = pool(f, width, pooling), pool(t, width, pooling)
    # members on axis 0 for crps()
    scores = crps(np.moveaxis(f, 1, 0), t, fair=fair)
    return scores.mean(axis=-1)


def ensemble_mean_mse(run: EvalRun) -> np.ndarray:
    err = run.forecasts.mean(axis=1) - run.truth
    return np.mean(err * err, axis=-1)


def ensemble_mean_rmse(run: EvalRun) -> np.ndarray:
    """Per-lead RMSE of the member mean over all inits and sites: ``[T]``."""
    return np.sqrt(ensemble_mean_mse(run).mean(axis=0))


def ensemble_variance(run: EvalRun) -> np.ndarray:
    """Per-init, per-lead unbiased member variance averaged over sites."""
    if run.M < 2:
        raise VerificationError("spread needs at least 2 members")
    return run.forecasts.var(axis=1, ddof=1).mean(axis=-1)


def spread_skill(run: EvalRun) -> np.ndarray:
    """``sqrt((M+1)/M * mean variance) / ensemble-mean RMSE`` per lead."""
    spread = np.sqrt((run.M + 1) / run.M * ensemble_variance(run).mean(axis=0))
    rmse = ensemble_mean_rmse(run)
    if np.any(rmse == 0):
        raise UndefinedRatio("ensemble-mean RMSE is zero at some lead; spread-skill ratio undefined")
    return spread / rmse


def rev_curves(run: EvalRun, level: float, cost_loss: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """REV per lead and cost/loss ratio ``[T, R]`` and the per-lead base rates.

    Levels below 0.5 define lower-tail events (truth below the quantile).
    """
    if run.climatology is None:
        raise VerificationError("REV needs a climatology record")
    thr = run.climatology.threshold(level)
    upper = level >= 0.5
    f, t = run.forecasts, run.truth
    exceed = (f > thr) if upper else (f < thr)
    event = (t > thr) if upper else (t < thr)
    prob = exceed.mean(axis=1)  # [n_init, T, K]
    out = np.empty((run.T, len(cost_loss)))
    base = np.empty(run.T)
    for lead in range(run.T):
        out[lead] = relative_economic_value(prob[:, lead], event[:, lead], run.M, cost_loss)
        base[lead] = event[:, lead].mean()
    return out, base


def spectra(run: EvalRun) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-init mean forecast spectrum ``[n_init, T, K//2+1]`` plus the truth's."""
    fs = power_spectrum(run.forecasts).mean(axis=1)
    ts = power_spectrum(run.truth)
    return fs, ts, np.arange(run.K // 2 + 1)


def _entry(per_init: np.ndarray) -> dict:
    return {"value": per_init.mean(axis=0), "per_init": per_init}


def evaluate(run: EvalRun, cfg: VerifyConfig = VerifyConfig(), provenance: Mapping | None = None) -> dict:
    """Every enabled metric as a report dict (arrays; see ``report_to_json``)."""
    if cfg.rev and run.climatology is None:
        raise VerificationError("REV is enabled but no climatology record was given")
    for w in cfg.pool_widths:
        if w > run.K:
            raise VerificationError(f"pool width {w} exceeds K={run.K}")
    metrics: dict[str, dict] = {}
    metrics["crps"] = _entry(ensemble_crps(run, fair=cfg.fair))
    for kind in cfg.pool_kinds:
        for w in cfg.pool_widths:
            metrics[f"crps_{kind}_w{w}"] = _entry(ensemble_crps(run, kind, w, cfg.fair))
    for kind in cfg.derived:
        metrics[f"crps_{kind}"] = _entry(ensemble_crps(run, fair=cfg.fair, derived=kind))
    mse = ensemble_mean_mse(run)
    metrics["rmse"] = {"value": np.sqrt(mse.mean(axis=0)), "per_init": np.sqrt(mse)}
    if run.M >= 2:
        var = ensemble_variance(run)
        spread = np.sqrt((run.M + 1) / run.M * var)
        metrics["spread"] = {"value": np.sqrt((run.M + 1) / run.M * var.mean(axis=0)), "per_init": spread}
        with np.errstate(divide="ignore", invalid="ignore"):
            per_init = np.where(mse > 0, spread / np.sqrt(mse), np.nan)
        rmse = metrics["rmse"]["value"]
        value = np.where(rmse > 0, metrics["spread"]["value"] / np.where(rmse > 0, rmse, 1.0), np.nan)
        metrics["spread_skill"] = {"value": value, "per_init": per_init}
    report = {
        "kind": "fgn-metrics",
        "config": cfg.to_dict(),
        "provenance": dict(provenance or {}),
        "init_indices": list(run.init_indices),
        "members": run.M,
        "leads": list(range(1, run.T + 1)),
        "metrics": metrics,
    }
    if cfg.rev:
        rev = {}
        for q in cfg.rev_levels:
            curve, base = rev_curves(run, q, cfg.cost_loss)
            rev[f"q{q:g}"] = {"tail": "upper" if q >= 0.5 else "lower", "cost_loss": list(cfg.cost_loss),
                              "value": curve, "base_rate": base}
        report["rev"] = rev
    if cfg.spectra:
        fs, ts, kappa = spectra(run)
        report["spectrum"] = {"wavenumber": kappa, "forecast": fs.mean(axis=0), "truth": ts.mean(axis=0),
                              "per_init_forecast": fs, "per_init_truth": ts}
    return report


def compare(a: Mapping, b: Mapping, cfg: VerifyConfig = VerifyConfig()) -> dict:
    """Paired per-lead differences ``a - b`` for every metric both reports carry."""
    if list(a["init_indices"]) != list(b["init_indices"]):
        raise VerificationError("paired comparison needs identical init sets")
    out = {}
    for name, ea in a["metrics"].items():
        eb = b["metrics"].get(name)
        if eb is None:
            continue
        pa, pb = np.asarray(ea["per_init"], dtype=float), np.asarray(eb["per_init"], dtype=float)
        rows = {"mean_diff": [], "ci_low": [], "ci_high": []}
        for lead in range(pa.shape[1]):
            x, y = pa[:, lead], pb[:, lead]
            ok = np.isfinite(x) & np.isfinite(y)
            if ok.sum() < 2:
                d, (lo, hi) = float("nan"), (float("nan"), float("nan"))
            else:
                d, (lo, hi) = paired_significance(x[ok], y[ok], cfg.n_boot, seed=cfg.bootstrap_seed)
            rows["mean_diff"].append(d)
            rows["ci_low"].append(lo)
            rows["ci_high"].append(hi)
        out[name] = rows
    return out


# ----------------------------------------------------------------------------
# serialisation


def plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def report_to_json(report: Mapping) -> str:
    """Canonical JSON (sorted keys); NaN becomes null."""
    return fio.canonical_json(plain(report)) + "\n"


def num(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return format(v, ".17g") if math.isfinite(v) else ""


def write_report(report: Mapping, out_dir) -> list[Path]:
    """``metrics.json`` plus one CSV per metric family; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "metrics.json"]
    paths[0].write_text(report_to_json(report))
    leads = report["leads"]

    def _write(name, header, rows):
        p = out_dir / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(p)

    names = list(report["metrics"])
    _write("metrics.csv", ["lead"] + names,
           [[lead] + [num(report["metrics"][n]["value"][i]) for n in names] for i, lead in enumerate(leads)])
    if "rev" in report:
        rows = []
        for key, e in report["rev"].items():
            for i, lead in enumerate(leads):
                for j, r in enumerate(e["cost_loss"]):
                    rows.append([key, e["tail"], lead, num(r), num(e["value"][i][j]), num(e["base_rate"][i])])
        _write("rev.csv", ["threshold", "tail", "lead", "cost_loss", "rev", "base_rate"], rows)
    if "spectrum" in report:
        s = report["spectrum"]
        rows = [[lead, int(k), num(s["forecast"][i][j]), num(s["truth"][i][j])]
                for i, lead in enumerate(leads) for j, k in enumerate(s["wavenumber"])]
        _write("spectrum.csv", ["lead", "wavenumber", "forecast", "truth"], rows)
    if "comparison" in report:
        rows = []
        for name, e in report["comparison"].items():
            for i, lead in enumerate(leads):
                rows.append([name, lead, num(e["mean_diff"][i]), num(e["ci_low"][i]), num(e["ci_high"][i])])
        _write("comparison.csv", ["metric", "lead", "mean_diff", "ci_low", "ci_high"], rows)
    return paths
