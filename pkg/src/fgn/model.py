"""Functional generative network on a periodic ring lattice.

One forward pass maps a two-frame window ``(x[t-2], x[t-1])`` and a noise
vector ``z`` to a sample of ``x[t]``.  The noise is encoded by a single
matrix into a conditioning vector ``c`` which drives the scale and shift of
every conditional layer norm in the network.  Because those scale/shift
vectors are shared across all sites, each ``z`` effectively selects a
different set of network weights, and the output for fixed inputs moves on a
manifold of dimension at most ``d_noise``.

Layout of the network (all parameters shared across sites)::

    inputs  [x2, x1] per site (optionally sin/cos of the site angle)
    encoder gather(+-2) -> affine -> gelu -> affine
    layers  h += attn(cLN(h)) ; h += mlp(cLN(h))          (n_layers times)
    decoder cLN(h) -> affine -> gelu -> affine -> 1
    output  x1 + residual_std * decoder
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc
from . import io as fio

CHECKPOINT_MAGIC = b"FGNCKPT1\n"
ENCODER_OFFSETS = (-2, -1, 0, 1, 2)
MLP_EXPANSION = 2

PROCESSOR_KINDS = ("attention", "mlp-message-passing")
NOISE_MODES = ("global", "per_site")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 40
    d_latent: int = 32
    n_layers: int = 4
    d_noise: int = 32
    d_cond: int = 32
    window: int = 2
    processor_kind: str = "attention"
    heads: int = 4
    # "per_site" draws an independent noise vector for every site; only used
    # for the spatially-independent control model.
    noise_mode: str = "global"
    # sin/cos site-angle inputs; off by default because they break rotation
    # equivariance on a translation-invariant system.
    site_features: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise dc.ConfigurationError("K must be >= 1")
        if self.d_noise < 1 or self.d_cond < 1:
            raise dc.ConfigurationError("d_noise and d_cond must be >= 1")
        if self.n_layers < 1:
            raise dc.ConfigurationError("n_layers must be >= 1")
        if self.window < 1:
            raise dc.ConfigurationError("window must be >= 1")
        if self.heads < 1 or self.d_latent % self.heads:
            raise dc.ConfigurationError(
                f"d_latent={self.d_latent} not divisible by heads={self.heads}")
        if self.processor_kind not in PROCESSOR_KINDS:
            raise dc.ConfigurationError(f"unknown processor_kind {self.processor_kind!r}")
        if self.noise_mode not in NOISE_MODES:
            raise dc.ConfigurationError(f"unknown noise_mode {self.noise_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass(frozen=True)
class Normalization:
    """Scalar statistics of the training split (physical units)."""

    mean: float
    std: float
    residual_std: float

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "residual_std": self.residual_std}


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    norm: Normalization
    seed_id: int = 0
    provenance: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                           self.norm, self.seed_id, dict(self.provenance))


@dataclass(frozen=True)
class NoiseVector:
    values: np.ndarray
    rng_stream_id: str = ""


@dataclass(frozen=True)
class TrajectoryWindow:
    """Two consecutive states in physical units; ``[K]`` or batched ``[B, K]``."""

    x_prev2: np.ndarray
    x_prev1: np.ndarray

    def __post_init__(self):
        if np.shape(self.x_prev2) != np.shape(self.x_prev1):
            raise dc.ContractError("window frames have different shapes")
        if not (np.all(np.isfinite(self.x_prev2)) and np.all(np.isfinite(self.x_prev1))):
            raise dc.ContractError("window contains non-finite values")

    def rotated(self, r: int) -> "TrajectoryWindow":
        return TrajectoryWindow(np.roll(self.x_prev2, r, axis=-1), np.roll(self.x_prev1, r, axis=-1))


# ----------------------------------------------------------------------------
# parameter layout


def _cond_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.gamma_w": (cfg.d_cond, cfg.d_latent),
        f"{prefix}.gamma_b": (cfg.d_latent,),
        f"{prefix}.beta_w": (cfg.d_cond, cfg.d_latent),
        f"{prefix}.beta_b": (cfg.d_latent,),
    }


def _layer_shapes(i: int, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_latent, MLP_EXPANSION * cfg.d_latent
    p = f"layer{i}"
    shapes = dict(_cond_shapes(f"{p}.norm1", cfg))
    if cfg.processor_kind == "attention":
        shapes.update({
            f"{p}.attn.wq": (d, d), f"{p}.attn.wk": (d, d), f"{p}.attn.wv": (d, d),
            f"{p}.attn.wo": (d, d), f"{p}.attn.bo": (d,),
        })
    else:
        n_off = 2 * cfg.window + 1
        shapes.update({f"{p}.msg.w": (n_off * d, d), f"{p}.msg.b": (d,)})
    shapes.update(_cond_shapes(f"{p}.norm2", cfg))
    shapes.update({
        f"{p}.mlp.w1": (d, h), f"{p}.mlp.b1": (h,),
        f"{p}.mlp.w2": (h, d), f"{p}.mlp.b2": (d,),
    })
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learned array, in canonical order."""
    d = cfg.d_latent
    n_in = len(ENCODER_OFFSETS) * (4 if cfg.site_features else 2)
    shapes: dict[str, tuple[int, ...]] = {
        "noise_encoder": (cfg.d_noise, cfg.d_cond),
        "enc.w1": (n_in, d), "enc.b1": (d,),
        "enc.w2": (d, d), "enc.b2": (d,),
    }
    for i in range(cfg.n_layers):
        shapes.update(_layer_shapes(i, cfg))
    shapes.update(_cond_shapes("dec.norm", cfg))
    shapes.update({"dec.w1": (d, d), "dec.b1": (d,), "dec.w2": (d, 1), "dec.b2": (1,)})
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(cfg).values()))


def is_conditioning(name: str) -> bool:
    """True for the maps that turn the conditioning vector into scale/shift."""
    return ".gamma_" in name or ".beta_" in name


def is_weight_matrix(name: str) -> bool:
    """Weight-decay targets: dense matrices outside the noise/conditioning path."""
    return name.endswith(("w", "w1", "w2", "wq", "wk", "wv", "wo")) and not is_conditioning(name) \
        and name != "noise_encoder"


def init_params(cfg: ModelConfig, rng: np.random.Generator, norm: Normalization,
                seed_id: int = 0) -> ModelParams:
    """Lecun-normal weights, zero biases, zero conditioning maps.

    Conditioning maps start at zero so the untrained model ignores the noise.
    """
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 or is_conditioning(name):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return ModelParams(cfg, arrays, norm, seed_id)


# ----------------------------------------------------------------------------
# forward pass


def site_features(K: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(K) / K
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def _cond_ln(h: dc.Tensor, c: dc.Tensor, P: Mapping[str, dc.Tensor], prefix: str) -> dc.Tensor:
    hn, _, _ = dc.layer_norm(h)
    gamma = dc.affine(c, P[f"{prefix}.gamma_w"], P[f"{prefix}.gamma_b"])
    beta = dc.affine(c, P[f"{prefix}.beta_w"], P[f"{prefix}.beta_b"])
    return dc.cond_scale_shift(hn, gamma, beta)


def apply(cfg: ModelConfig, norm: Normalization, P: Mapping[str, dc.Tensor],
          x_prev2: dc.Tensor, x_prev1: dc.Tensor, z: dc.Tensor) -> dc.Tensor:
    """Differentiable forward pass.

    ``x_prev2``/``x_prev1`` are ``[B, K]`` in physical units.  ``z`` is
    ``[B, d_noise]`` (global mode) or ``[B, K, d_noise]`` (per-site mode).
    Returns the ``[B, K]`` prediction in physical units.
    """
    B, K = x_prev1.shape
    if K != cfg.K:
        raise dc.ContractError(f"window has K={K}, model expects K={cfg.K}")
    want_z = (B, cfg.d_noise) if cfg.noise_mode == "global" else (B, K, cfg.d_noise)
    if z.shape != want_z:
        raise dc.ContractError(f"noise shape {z.shape} != expected {want_z}")

    inv_std = 1.0 / norm.std
    shift = np.full((B, K), -norm.mean * inv_std)
    x2n = dc.add(dc.scale(x_prev2, inv_std), dc.constant(shift))
    x1n = dc.add(dc.scale(x_prev1, inv_std), dc.constant(shift))
    cols = [dc.reshape(x2n, (B, K, 1)), dc.reshape(x1n, (B, K, 1))]
    if cfg.site_features:
        cols.append(dc.constant(np.broadcast_to(site_features(K), (B, K, 2))))
    inp = dc.concat(cols, axis=-1)

    h = dc.gather_ring(inp, ENCODER_OFFSETS)
    h = dc.gelu(dc.affine(h, P["enc.w1"], P["enc.b1"]))
    h = dc.affine(h, P["enc.w2"], P["enc.b2"])

    # single conditioning vector, reused by every conditional norm
    c = dc.affine(z, P["noise_encoder"], dc.constant(np.zeros(cfg.d_cond)))

    offsets = list(range(-cfg.window, cfg.window + 1))
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        u = _cond_ln(h, c, P, f"{p}.norm1")
        if cfg.processor_kind == "attention":
            u = dc.local_attention(u, cfg.window, cfg.heads, P[f"{p}.attn.wq"], P[f"{p}.attn.wk"],
                                   P[f"{p}.attn.wv"], P[f"{p}.attn.wo"], P[f"{p}.attn.bo"])
        else:
            u = dc.gelu(dc.affine(dc.gather_ring(u, offsets), P[f"{p}.msg.w"], P[f"{p}.msg.b"]))
        h = dc.add(h, u)
        u = _cond_ln(h, c, P, f"{p}.norm2")
        u = dc.gelu(dc.affine(u, P[f"{p}.mlp.w1"], P[f"{p}.mlp.b1"]))
        u = dc.affine(u, P[f"{p}.mlp.w2"], P[f"{p}.mlp.b2"])
        h = dc.add(h, u)

    u = _cond_ln(h, c, P, "dec.norm")
    u = dc.gelu(dc.affine(u, P["dec.w1"], P["dec.b1"]))
    u = dc.reshape(dc.affine(u, P["dec.w2"], P["dec.b2"]), (B, K))
    return dc.add(x_prev1, dc.scale(u, norm.residual_std))


def _batched(a) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    return (a[None], True) if a.ndim == 1 else (a, False)


def forward(params: ModelParams, window: TrajectoryWindow, z) -> np.ndarray:
    """Predict the next state (physical units) for one window and noise draw.

    Accepts a single ``[K]`` window with a single noise vector, or a batch
    ``[B, K]`` with ``B`` noise vectors.  Pure and deterministic.
    """
    cfg = params.config
    zv = z.values if isinstance(z, NoiseVector) else np.asarray(z, dtype=np.float64)
    x2, single = _batched(window.x_prev2)
    x1, _ = _batched(window.x_prev1)
    if single:
        zv = zv[None]
    P = {k: dc.Tensor(v) for k, v in params.arrays.items()}
    out = apply(cfg, params.norm, P, dc.Tensor(x2), dc.Tensor(x1), dc.Tensor(zv)).numpy()
    return out[0] if single else out


def noise_shape(cfg: ModelConfig, batch: int | None = None) -> tuple[int, ...]:
    base = (cfg.d_noise,) if cfg.noise_mode == "global" else (cfg.K, cfg.d_noise)
    return base if batch is None else (batch,) + base


def draw_noise(cfg: ModelConfig, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    return rng.standard_normal(noise_shape(cfg, batch))


def sample_member_step(params: ModelParams, window: TrajectoryWindow,
                       rng: np.random.Generator, stream_id: str = "") -> tuple[np.ndarray, NoiseVector]:
    """Draw fresh noise from ``rng`` and return ``(next_state, noise_used)``."""
    z = NoiseVector(draw_noise(params.config, rng), stream_id)
    return forward(params, window, z), z


# ----------------------------------------------------------------------------
# checkpoints


def norm_hash(norm: Normalization) -> str:
    return fio.sha256_hex(fio.canonical_json(norm.to_dict()).encode())


def checkpoint_header(params: ModelParams, extra: Mapping | None = None) -> dict:
    header = {
        "kind": "fgn-checkpoint",
        "config": params.config.to_dict(),
        "seed_id": params.seed_id,
        "normalization": params.norm.to_dict(),
        "normalization_hash": norm_hash(params.norm),
        "provenance": params.provenance,
    }
    if extra:
        header.update(extra)
    return header


def save_checkpoint(path, params: ModelParams, extra_arrays: Mapping[str, np.ndarray] | None = None,
                    extra_header: Mapping | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in params.arrays.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    fio.write(path, CHECKPOINT_MAGIC, checkpoint_header(params, extra_header), arrays)


def load_checkpoint(path, with_extras: bool = False):
    header, arrays = fio.read(path, CHECKPOINT_MAGIC)
    cfg = ModelConfig.from_dict(header["config"])
    norm = Normalization(**header["normalization"])
    if norm_hash(norm) != header["normalization_hash"]:
        raise fio.CorruptFileError(f"{path}: normalization hash mismatch")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    expected = param_shapes(cfg)
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise fio.CorruptFileError(f"{path}: parameter set does not match its config")
    ordered = {k: params[k] for k in expected}
    mp = ModelParams(cfg, ordered, norm, int(header["seed_id"]), header.get("provenance", {}))
    if not with_extras:
        return mp
    extras = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return mp, header, extras


def checkpoint_hash(path) -> str:
    return fio.file_sha256(path)


__all__ = [
    "ModelConfig", "ModelParams", "Normalization", "NoiseVector", "TrajectoryWindow",
    "param_shapes", "param_count", "init_params", "apply", "forward", "sample_member_step",
    "draw_noise", "noise_shape", "save_checkpoint", "load_checkpoint", "checkpoint_hash",
]
