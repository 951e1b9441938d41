"""Command-line entry point: gen-data, train, forecast, verify, ablate.

Every command writes a ``manifest-<command>.json`` next to its outputs with
the merged config, input and output hashes and the master seed.  Wall time
goes to a separate ``timing-<command>.json`` so reruns with identical
inputs produce byte-identical artifacts, manifest included.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from . import forecast as ff
from . import io as fio
from . import model as fm
from . import synthdata as sd
from . import training as tr
from . import verify as fv
from .diffcore import ConfigurationError, ContractError

log = logging.getLogger("fgn")

ENV_OUTPUT_ROOT = "FGN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "fgn-runs"

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CORRUPT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def output_root(args) -> Path:
    return Path(args.output_root or os.environ.get(ENV_OUTPUT_ROOT) or DEFAULT_OUTPUT_ROOT)


# ----------------------------------------------------------------------------
# configs and manifests


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    return cfg


def merge(base: Mapping, overrides: Mapping) -> dict:
    """Recursive dict merge; ``None`` override values are ignored (flag not given)."""
    out = dict(base)
    for k, v in overrides.items():
        if v is None:
            continue
        if isinstance(v, Mapping):
            base_v = out.get(k)
            out[k] = merge(base_v if isinstance(base_v, Mapping) else {}, v)
        else:
            out[k] = v
    return out


def require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def run_id(command: str, config: Mapping, inputs: Mapping[str, str], seed) -> str:
    ident = {"command": command, "config": config, "inputs": inputs, "seed": seed, "version": __version__}
    return fio.sha256_hex(fio.canonical_json(ident).encode())[:16]


class Manifest:
    """Collects one command's provenance and writes it beside the outputs."""

    def __init__(self, command: str, config: Mapping, inputs: Sequence[Path], seed, out_dir: Path):
        self.command = command
        self.config = json.loads(fio.canonical_json(config))
        self.inputs = {Path(p).name: fio.file_sha256(p) for p in inputs}
        self.seed = seed
        self.out_dir = Path(out_dir)
        self.outputs: list[Path] = []
        self.id = run_id(command, self.config, self.inputs, seed)
        self._t0 = time.perf_counter()

    def add(self, *paths) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def write(self) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        outputs = {}
        for p in self.outputs:
            try:
                key = str(p.resolve().relative_to(self.out_dir.resolve()))
            except ValueError:
                key = str(p)
            outputs[key] = fio.file_sha256(p)
        body = {
            "command": self.command,
            "run_id": self.id,
            "tool_version": __version__,
            "master_seed": self.seed,
            "config": self.config,
            "config_hash": fio.sha256_hex(fio.canonical_json(self.config).encode()),
            "inputs": self.inputs,
            "outputs": dict(sorted(outputs.items())),
            "timing_file": f"timing-{self.command}.json",
        }
        path = self.out_dir / f"manifest-{self.command}.json"
        path.write_text(fio.canonical_json(body) + "\n")
        timing = {"run_id": self.id, "wall_time_s": time.perf_counter() - self._t0}
        (self.out_dir / f"timing-{self.command}.json").write_text(json.dumps(timing) + "\n")
        return path


def emit(msg: str) -> None:
    print(msg, flush=True)


def num(v) -> str:
    return fv.num(v)


# ----------------------------------------------------------------------------
# gen-data


def _system_config(cfg: Mapping) -> sd.SystemConfig:
    try:
        return sd.SystemConfig.from_dict(cfg.get("system", {}))
    except TypeError as exc:
        raise UsageError(f"system: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"system: {exc}") from None


def cmd_gen_data(args) -> int:
    flags = {
        "system": {"K": args.K, "F": args.F, "noise_std": args.noise_std, "seed": args.seed,
                   "dt_integrator": args.dt_integrator, "dt_frame": args.dt_frame},
        "n_frames": args.n_frames,
        "split_fractions": args.split_fractions,
        "burn_in": args.burn_in,
        "climatology_frames": args.climatology_frames,
    }
    defaults = {"n_frames": 20000, "split_fractions": [0.8, 0.1, 0.1], "burn_in": 1000,
                "climatology_frames": 20000}
    cfg = merge(merge(defaults, load_config(args.config)), flags)
    system = _system_config(cfg)
    try:
        sd.split_bounds(int(cfg["n_frames"]), cfg["split_fractions"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if int(cfg["burn_in"]) < 1000:
        raise UsageError("burn_in must be at least 1000 frames")
    cfg["system"] = system.to_dict()
    out = Path(args.out) if args.out else output_root(args) / "data" / "dataset.fgn"
    out.parent.mkdir(parents=True, exist_ok=True)
    man = Manifest("gen-data", cfg, [], system.seed, out.parent)
    ds = sd.make_dataset(system, int(cfg["n_frames"]), cfg["split_fractions"], int(cfg["burn_in"]))
    sd.save(ds, out, {"run_id": man.id})
    man.add(out)
    emit(f"dataset {out}: T={ds.T} K={ds.K} splits={ds.splits}")
    emit(f"mean={num(ds.stats.mean)} std={num(ds.stats.std)} residual_std={num(ds.stats.residual_std)}")
    n_clim = int(cfg["climatology_frames"])
    if n_clim > 0:
        frames = sd.climatology_run(system, n_clim)
        clim = fv.climatology_from_frames(frames, source={"run_id": man.id, "system": system.to_dict()})
        cpath = out.with_name(out.stem + ".climatology.fgn")
        fv.save_climatology(clim, cpath)
        man.add(cpath)
        emit(f"climatology {cpath}: {n_clim} frames, levels {clim.levels.tolist()}")
    man.write()
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def train_config(cfg: Mapping) -> tr.TrainConfig:
    """Build a TrainConfig from a (possibly partial) JSON mapping.

    Besides the full ``TrainConfig.to_dict`` layout this accepts
    ``single_steps`` and ``ar`` as shorthand for the default schedule.
    """
    cfg = dict(cfg)
    single_steps = cfg.pop("single_steps", None)
    ar = cfg.pop("ar", None)
    try:
        base = tr.TrainConfig.from_dict(cfg) if cfg else tr.TrainConfig()
        if single_steps is not None or ar is not None:
            if "stages" in cfg:
                raise UsageError("give either 'stages' or 'single_steps'/'ar', not both")
            stages = tr.default_stages(20000 if single_steps is None else int(single_steps),
                                       True if ar is None else bool(ar))
            base = tr.with_stages(base, stages)
        return base
    except (TypeError, KeyError) as exc:
        raise UsageError(f"bad training config: {exc}") from None


def _train_flags(args) -> dict:
    model = {"d_latent": args.d_latent, "n_layers": args.n_layers, "processor_kind": args.processor,
             "noise_mode": args.noise_mode}
    return {"model": {k: v for k, v in model.items() if v is not None}, "batch_size": args.batch_size,
            "seed": args.train_seed, "single_steps": args.single_steps,
            "ar": False if args.no_ar else None}


def _merged_train_config(args, dataset_K: int, raw: Mapping | None = None) -> tr.TrainConfig:
    """Config file, then flags; the model's K follows the dataset unless set explicitly."""
    raw = merge(load_config(args.config) if raw is None else raw, _train_flags(args))
    model = dict(raw.get("model") or {})
    if model.get("K", dataset_K) != dataset_K:
        raise UsageError(f"model K={model['K']} does not match dataset K={dataset_K}")
    model["K"] = dataset_K
    raw["model"] = merge(fm.ModelConfig().to_dict(), model)
    return train_config(raw)


def train_models(dataset_path: Path, cfg: tr.TrainConfig, seed_ids: Sequence[int], out_dir: Path,
                 resume: bool, man: Manifest) -> dict:
    ds = sd.load(dataset_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = {}
    for sid in seed_ids:
        ckpt = out_dir / f"seed{sid}.ckpt"
        try:
            tr.train_single(ds, cfg, sid, out_dir, resume)
        except tr.TrainingDiverged as exc:
            failures[sid] = {"step": exc.step, "last_good_checkpoint": exc.last_good, "error": str(exc)}
            emit(f"seed {sid}: diverged at step {exc.step}")
            continue
        man.add(ckpt, out_dir / f"seed{sid}.log.jsonl", out_dir / f"seed{sid}.run")
        for st in cfg.snapshot_stages:
            snap = tr.snapshot_path(out_dir / f"seed{sid}.run", st)
            if snap.exists():
                man.add(snap)
        emit(f"seed {sid}: {ckpt}")
    return failures


def cmd_train(args) -> int:
    dataset = require_file(args.dataset, "dataset")
    cfg = _merged_train_config(args, int(sd.read_header(dataset)["K"]))
    seed_ids = list(args.seed_ids) if args.seed_ids else list(range(args.seeds))
    if len(seed_ids) != args.seeds and args.seed_ids:
        raise UsageError("--seed-ids must list exactly --seeds ids")
    out = Path(args.out) if args.out else output_root(args) / "models"
    man = Manifest("train", {"train": cfg.to_dict(), "seed_ids": seed_ids}, [dataset], cfg.seed, out)
    failures = train_models(dataset, cfg, seed_ids, out, args.resume, man)
    if failures:
        p = out / "failures.json"
        p.write_text(fio.canonical_json({str(k): v for k, v in failures.items()}) + "\n")
        man.add(p)
    man.write()
    return EXIT_NUMERIC if failures else EXIT_OK


# ----------------------------------------------------------------------------
# forecast


def default_inits(ds_header: Mapping, split: str, n: int, lead: int) -> list[int]:
    lo, hi = ds_header["splits"][split]
    first, last = lo + 1, hi - 1 - lead
    if last < first:
        raise UsageError(f"{split} split too short for lead {lead}")
    n = min(n, last - first + 1)
    return sorted({int(v) for v in np.round(np.linspace(first, last, n))})


def parse_inits(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--inits must be a comma-separated list of frame indices, got {text!r}") from None


def run_forecasts(ckpts: Sequence[Path], dataset_path: Path, inits: Sequence[int] | None, split: str,
                  n_inits: int, members: int, lead: int, seed: int, out_dir: Path,
                  man: Manifest | None = None) -> list[Path]:
    ds = sd.load(dataset_path)
    if inits is None:
        header = {"splits": {k: list(v) for k, v in ds.splits.items()}}
        inits = default_inits(header, split, n_inits, lead)
    for i in inits:
        if i < 1 or i >= ds.T:
            raise UsageError(f"init index {i} outside the dataset (1..{ds.T - 1})")
    try:
        cfg = ff.EnsembleConfig(members, tuple(p.name for p in ckpts), lead, seed)
    except ff.EnsembleConfigError as exc:
        raise UsageError(str(exc)) from None
    models = [fm.load_checkpoint(p) for p in ckpts]
    for m in models:
        if m.config.K != ds.K:
            raise UsageError(f"checkpoint K={m.config.K} does not match dataset K={ds.K}")
    hashes = [fio.file_sha256(p) for p in ckpts]
    try:
        fcs = ff.generate_ensembles(models, cfg, ff.windows_from_frames(ds.frames, inits), hashes)
    except ff.EnsembleConfigError as exc:
        raise UsageError(str(exc)) from None
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fc in fcs:
        p = out_dir / f"init{fc.init_index:06d}.fcst"
        ff.save(fc, p, {"run_id": man.id} if man else None)
        paths.append(p)
    if man:
        man.add(*paths)
    return paths


def cmd_forecast(args) -> int:
    ckpts = [require_file(p, "checkpoint") for p in args.checkpoints]
    dataset = require_file(args.dataset, "dataset")
    inits = parse_inits(args.inits) if args.inits else None
    out = Path(args.out) if args.out else output_root(args) / "forecasts"
    config = {"members": args.members, "lead": args.lead, "seed": args.seed, "inits": inits,
              "split": args.split, "n_inits": args.n_inits}
    man = Manifest("forecast", config, [dataset, *ckpts], args.seed, out)
    paths = run_forecasts(ckpts, dataset, inits, args.split, args.n_inits, args.members, args.lead,
                          args.seed, out, man)
    man.write()
    emit(f"{len(paths)} forecasts of {args.members} members x {args.lead} steps in {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# verify


def forecast_files(items: Sequence[str]) -> list[Path]:
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.fcst")))
        elif p.is_file():
            out.append(p)
        else:
            raise UsageError(f"forecast file or directory not found: {p}")
    if not out:
        raise UsageError("no forecast files found")
    return out


def verify_config(args, raw: Mapping | None = None) -> fv.VerifyConfig:
    raw = load_config(args.config) if raw is None else raw
    flags = {"fair": True if args.fair else None, "rev": False if args.no_rev else None,
             "pool_widths": args.pool_widths}
    try:
        return fv.VerifyConfig.from_dict(merge(fv.VerifyConfig().to_dict(), merge(raw, flags)))
    except TypeError as exc:
        raise UsageError(f"bad verify config: {exc}") from None


def evaluate_files(paths: Sequence[Path], frames: np.ndarray, clim, cfg: fv.VerifyConfig, provenance) -> dict:
    fcs = [ff.load(p) for p in paths]
    fcs.sort(key=lambda fc: fc.init_index)
    run = fv.EvalRun.from_forecasts(fcs, frames, clim)
    return fv.evaluate(run, cfg, provenance)


def run_verify(paths: Sequence[Path], dataset_path: Path, clim_path: Path | None, cfg: fv.VerifyConfig,
               out_dir: Path, man: Manifest, baseline: Sequence[Path] = (), figures: bool = True) -> dict:
    if cfg.rev and clim_path is None:
        raise UsageError("REV is enabled and needs a climatology record: pass --climatology "
                         "(written by gen-data) or disable REV with --no-rev")
    ds = sd.load(dataset_path)
    clim = fv.load_climatology(clim_path) if clim_path else None
    provenance = {"run_id": man.id, "dataset": fio.file_sha256(dataset_path)}
    report = evaluate_files(paths, ds.frames, clim, cfg, provenance)
    if baseline:
        other = evaluate_files(baseline, ds.frames, clim, cfg, provenance)
        report["comparison"] = fv.compare(report, other, cfg)
    written = fv.write_report(report, out_dir)
    if figures:
        from . import plots

        written += plots.write_figures(fv.plain(report), out_dir)
    man.add(*written)
    return report


def cmd_verify(args) -> int:
    paths = forecast_files(args.forecasts)
    dataset = require_file(args.dataset, "dataset")
    clim = require_file(args.climatology, "climatology") if args.climatology else None
    baseline = forecast_files(args.baseline) if args.baseline else []
    cfg = verify_config(args)
    out = Path(args.out) if args.out else output_root(args) / "verify"
    inputs = [dataset, *paths, *baseline] + ([clim] if clim else [])
    man = Manifest("verify", {"verify": cfg.to_dict(), "figures": not args.no_figures}, inputs, None, out)
    report = run_verify(paths, dataset, clim, cfg, out, man, baseline, not args.no_figures)
    man.write()
    m = report["metrics"]
    for i, lead in enumerate(report["leads"]):
        line = f"lead {lead}: crps={num(m['crps']['value'][i])} rmse={num(m['rmse']['value'][i])}"
        if "spread_skill" in m:
            line += f" spread_skill={num(m['spread_skill']['value'][i])}"
        emit(line)
    return EXIT_OK


# ----------------------------------------------------------------------------
# ablate

ABLATION_CONFIGS = ("single", "ar", "ensemble_ar")
CONTROL = "control"


def ablation_layout(out: Path) -> dict:
    fgn, ctrl = out / "fgn", out / "control"
    return {
        "single": [fgn / "seed0.single.ckpt"],
        "ar": [fgn / "seed0.ckpt"],
        "ensemble_ar": [fgn / f"seed{i}.ckpt" for i in range(4)],
        CONTROL: [ctrl / "seed0.ckpt"],
    }


def control_config(cfg: tr.TrainConfig) -> tr.TrainConfig:
    """Same model and schedule, but an independent noise vector per site and no AR stages."""
    single = [s for s in cfg.stages if s.rollout_len == 1][:1]
    return replace(cfg, model=replace(cfg.model, noise_mode="per_site"), stages=tuple(single))


ABLATION_PAIRS = (("single", "ar"), ("ar", "ensemble_ar"), ("single", "ensemble_ar"))


def cmd_ablate(args) -> int:
    dataset = require_file(args.dataset, "dataset")
    clim = require_file(args.climatology, "climatology") if args.climatology else None
    out = Path(args.out) if args.out else output_root(args) / "ablate"
    # one config file: training keys plus an optional "verify" section
    raw = load_config(args.config)
    raw_verify = raw.pop("verify", {})
    cfg = _merged_train_config(args, int(sd.read_header(dataset)["K"]), raw)
    if not any(s.rollout_len > 1 for s in cfg.stages):
        raise UsageError("ablation needs autoregressive stages (drop --no-ar)")
    if not any(s.name == "single" for s in cfg.stages) or "single" not in cfg.snapshot_stages:
        raise UsageError("ablation needs a 'single' stage with a snapshot")
    vcfg = replace(verify_config(args, raw_verify), rev=clim is not None)
    config = {"train": cfg.to_dict(), "members": args.members, "lead": args.lead, "n_inits": args.n_inits,
              "seed": args.seed, "control": args.control, "verify": vcfg.to_dict()}
    man = Manifest("ablate", config, [dataset] + ([clim] if clim else []), cfg.seed, out)

    failures = train_models(dataset, cfg, range(4), out / "fgn", args.resume, man)
    if args.control:
        failures.update({f"control{k}": v for k, v in
                         train_models(dataset, control_config(cfg), [0], out / "control", args.resume,
                                      man).items()})
    if failures:
        p = out / "failures.json"
        p.write_text(fio.canonical_json({str(k): v for k, v in failures.items()}) + "\n")
        man.add(p)
        man.write()
        return EXIT_NUMERIC

    layout = ablation_layout(out)
    names = list(ABLATION_CONFIGS) + ([CONTROL] if args.control else [])
    reports = {}
    for name in names:
        fdir = out / "forecasts" / name
        paths = run_forecasts(layout[name], dataset, None, "test", args.n_inits, args.members, args.lead,
                              args.seed, fdir, man)
        reports[name] = run_verify(paths, dataset, clim, vcfg, out / "verify" / name, man,
                                   figures=not args.no_figures)
        crps = reports[name]["metrics"]["crps"]["value"]
        i = min(5, len(crps)) - 1
        emit(f"{name}: crps lead {i + 1} = {num(crps[i])}")
    pairs = list(ABLATION_PAIRS) + ([(CONTROL, "single")] if args.control else [])
    comparisons = {f"{a}-{b}": fv.compare(reports[a], reports[b], vcfg) for a, b in pairs}
    summary = {
        "kind": "fgn-ablation",
        "run_id": man.id,
        "leads": reports["single"]["leads"],
        "init_indices": reports["single"]["init_indices"],
        "configs": {n: {"checkpoints": [str(p.relative_to(out)) for p in layout[n]],
                        "metrics": reports[n]["metrics"]} for n in names},
        "comparisons": comparisons,
    }
    p = out / "ablation.json"
    p.write_text(fv.report_to_json(summary))
    man.add(p)
    rows = []
    for key, comp in comparisons.items():
        for metric in ("crps", "rmse"):
            e = comp[metric]
            for i, lead in enumerate(summary["leads"]):
                rows.append(f"{key},{metric},{lead},{num(e['mean_diff'][i])},{num(e['ci_low'][i])},"
                            f"{num(e['ci_high'][i])}")
    c = out / "ablation.csv"
    c.write_text("pair,metric,lead,mean_diff,ci_low,ci_high\n" + "\n".join(rows) + "\n")
    man.add(c)
    if not args.no_figures:
        from . import plots

        for key, comp in comparisons.items():
            man.add(plots.comparison_figure(comp, summary["leads"], out / f"ablation_{key}.png"))
    man.write()
    i = min(5, len(summary["leads"])) - 1
    for key, comp in comparisons.items():
        e = comp["crps"]
        emit(f"{key} crps lead {i + 1}: {num(e['mean_diff'][i])} [{num(e['ci_low'][i])}, {num(e['ci_high'][i])}]")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config (flags override it)")
    p.add_argument("--single-steps", type=int, help="steps of the single-step stage")
    p.add_argument("--no-ar", action="store_true", help="skip the autoregressive stages")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--d-latent", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--processor", choices=fm.PROCESSOR_KINDS)
    p.add_argument("--noise-mode", choices=fm.NOISE_MODES)
    p.add_argument("--train-seed", type=int, help="master seed for initialisation and batches")
    p.add_argument("--resume", action="store_true", help="continue from run checkpoints in --out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgn", description=__doc__.splitlines()[0])
    parser.add_argument("--output-root", help=f"default output root (env {ENV_OUTPUT_ROOT})")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="integrate the stochastic system and write a dataset")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--K", type=int)
    p.add_argument("--F", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--dt-integrator", type=float)
    p.add_argument("--dt-frame", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-frames", type=int)
    p.add_argument("--split-fractions", type=_floats)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--climatology-frames", type=int, help="length of the separate climatology run (0: none)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one or more model seeds")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, default=1, help="number of model seeds J")
    p.add_argument("--seed-ids", type=_ints)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="generate ensembles from checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--dataset", required=True)
    p.add_argument("--inits", help="comma-separated init frame indices (default: spread over --split)")
    p.add_argument("--split", default="test", choices=sd.SPLITS)
    p.add_argument("--n-inits", type=int, default=64)
    p.add_argument("--members", type=int, default=16)
    p.add_argument("--lead", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("verify", help="score forecasts against the dataset truth")
    p.add_argument("forecasts", nargs="+", help="forecast files or directories")
    p.add_argument("--dataset", required=True)
    p.add_argument("--climatology")
    p.add_argument("--baseline", nargs="+", help="second forecast set for paired comparison")
    p.add_argument("--config")
    p.add_argument("--fair", action="store_true")
    p.add_argument("--no-rev", action="store_true")
    p.add_argument("--pool-widths", type=_ints)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate", help="single-step vs AR vs 4-seed AR experiment")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--climatology")
    p.add_argument("--control", action="store_true", help="also train the per-site-noise control")
    p.add_argument("--members", type=int, default=16)
    p.add_argument("--lead", type=int, default=15)
    p.add_argument("--n-inits", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fair", action="store_true")
    p.add_argument("--no-rev", action="store_true")
    p.add_argument("--pool-widths", type=_ints)
    p.add_argument("--no-figures", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except fio.CorruptFileError as exc:
        print(f"fgn {args.command}: corrupt input: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (tr.TrainingDiverged, ff.RolloutDiverged, sd.IntegrationDiverged, fv.UndefinedRatio,
            FloatingPointError) as exc:
        print(f"fgn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigurationError, ContractError, ValueError, FileNotFoundError) as exc:
        # configuration and validation errors all derive from ValueError
        print(f"fgn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
