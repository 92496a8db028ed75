"""Self-vector-regression pretraining loop, checkpoints and metric emission."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from . import io as cio
from .backbone import DEFAULT_CHANNEL_PLAN, BackboneParams, forward, init_backbone
from .errors import ConfigurationError, ContainerError, DataDomainError
from .geometry import AffineRanges, AppearanceConfig, make_view_pair
from .losses import LossReport, cover_loss, dense_infonce_loss
from .pyramid import HeadConfig, vpa
from .vectorhead import tau_default

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
# fields that do not change the optimisation trajectory
_UNHASHED = ("iterations", "metric_every", "checkpoint_every")


@dataclasses.dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 2000
    learning_rate: float = 1e-4
    batch_size: int = 8
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    crop_size: int = 64
    channel_plan: Tuple[int, ...] = DEFAULT_CHANNEL_PLAN
    appearance: AppearanceConfig = AppearanceConfig()
    affine: AffineRanges = AffineRanges()
    head: HeadConfig = HeadConfig()
    metric_every: int = 10
    checkpoint_every: int = 0  # 0: only the final checkpoint
    max_resample: int = 8
    dtype: str = "float64"
    objective: str = "cover"  # or "infonce" for the binary dense baseline
    infonce_samples: int = 256
    infonce_tau: Optional[float] = None

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.crop_size < 16 or self.crop_size % 16:
            raise ConfigurationError(f"crop size {self.crop_size} must be a positive multiple of 16")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.objective not in ("cover", "infonce"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.head.levels != len(self.channel_plan):
            raise ConfigurationError("head config and channel plan cover different level counts")
        self.appearance.validate()
        self.affine.validate()

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"appearance": AppearanceConfig, "affine": AffineRanges, "head": HeadConfig}
        for key, kind in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = kind(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
        for key in ("betas", "channel_plan"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def full_scale_preset(cls) -> "TrainConfig":
        """Full-scale schedule: 384 crops, batch 24, 2e5 iterations."""
        return cls(iterations=200_000, batch_size=24, crop_size=384)


@dataclasses.dataclass
class Checkpoint:
    params: BackboneParams
    optimizer_state: Dict[str, Dict[str, torch.Tensor]]
    iteration: int
    config_hash: str
    rng_state: dict
    config: dict


@dataclasses.dataclass
class TrainState:
    params: BackboneParams
    optimizer: torch.optim.Optimizer
    iteration: int
    rng: np.random.Generator


def make_optimizer(params: BackboneParams, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params.requires_grad_(True).parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.adam_eps,
        foreach=False,
    )


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    params = init_backbone(config.channel_plan, config.seed, config.head.J, config.torch_dtype)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EB2]))
    return TrainState(params, make_optimizer(params, config), 0, rng)


def _random_crop(img: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    H, W = img.shape
    if H < crop or W < crop:
        raise DataDomainError(f"image {H}x{W} is smaller than the {crop} crop")
    r = int(rng.integers(0, H - crop + 1))
    c = int(rng.integers(0, W - crop + 1))
    return img[r : r + crop, c : c + crop]


def sample_batch(images: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """Draw ``batch_size`` view pairs; returns stacked ``x_a, x_b, psi, mask``."""
    out = []
    for _ in range(config.batch_size):
        img = _random_crop(images[int(rng.integers(len(images)))], config.crop_size, rng)
        pair = make_view_pair(img, rng, config.appearance, config.affine, config.max_resample, config.torch_dtype)
        if pair is None:
            raise DataDomainError(
                f"{config.max_resample + 1} consecutive affine draws left no valid pixel; check the affine ranges"
            )
        out.append(pair)
    return tuple(torch.stack(t) for t in zip(*out))


def compute_losses(params: BackboneParams, batch, config: TrainConfig, rng: np.random.Generator):
    x_a, x_b, psi, mask = batch
    B = x_a.shape[0]
    feats = forward(params, torch.cat([x_a, x_b]))
    F_a = [f[:B] for f in feats]
    F_b = [f[B:] for f in feats]
    if config.objective == "infonce":
        tau = config.infonce_tau or tau_default(config.channel_plan[-1])
        loss = dense_infonce_loss(F_a[-1], F_b[-1], psi, mask, rng, tau, config.infonce_samples)
        nan = torch.tensor(float("nan"), dtype=loss.dtype)
        return LossReport(nan, nan, loss, int(mask.sum().item()))
    pred, _ = vpa(F_a, F_b, config.head)
    return cover_loss(psi, pred, F_a[-1], F_b[-1], mask)


def sevr_step(state: TrainState, images: np.ndarray, config: TrainConfig) -> Tuple[TrainState, LossReport, float]:
    """One optimizer update; returns the state, the loss report and the valid-pixel fraction."""
    batch = sample_batch(images, config, state.rng)
    report = compute_losses(state.params, batch, config, state.rng)
    state.optimizer.zero_grad(set_to_none=True)
    report.l_total.backward()
    state.optimizer.step()
    state.iteration += 1
    mask = batch[3]
    return state, report, float(mask.mean())


def _images_of(dataset) -> np.ndarray:
    images = dataset.images if hasattr(dataset, "images") else dataset
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) == 0:
        raise DataDomainError(f"dataset must be a nonempty (n, H, W) stack, got shape {images.shape}")
    return images


def _record(iteration: int, report: LossReport, valid_frac: float, wall_ms: float) -> dict:
    def val(t):
        v = float(t.detach())
        return None if np.isnan(v) else v

    return {
        "iter": iteration,
        "l_vec": val(report.l_vec),
        "l_con": val(report.l_con),
        "l_total": val(report.l_total),
        "valid_frac": valid_frac,
        "wall_ms": round(wall_ms, 3),
    }


def snapshot(state: TrainState, config: TrainConfig) -> Checkpoint:
    opt_state = OrderedDict()
    for name, p in state.params.tensors.items():
        s = state.optimizer.state.get(p, {})
        if s:
            opt_state[name] = {
                "exp_avg": s["exp_avg"].detach().clone(),
                "exp_avg_sq": s["exp_avg_sq"].detach().clone(),
                "step": torch.as_tensor(float(s["step"]), dtype=torch.float64),
            }
    return Checkpoint(
        state.params.clone(),
        opt_state,
        state.iteration,
        config.config_hash(),
        state.rng.bit_generator.state,
        config.to_dict(),
    )


def restore_state(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    config.validate()
    if ckpt.config_hash != config.config_hash():
        raise ConfigurationError(
            f"checkpoint config hash {ckpt.config_hash} does not match run config {config.config_hash()}"
        )
    params = ckpt.params.clone()
    opt = make_optimizer(params, config)
    for name, p in params.tensors.items():
        s = ckpt.optimizer_state.get(name)
        if s:
            opt.state[p] = {
                "step": torch.tensor(float(s["step"])),
                "exp_avg": s["exp_avg"].clone(),
                "exp_avg_sq": s["exp_avg_sq"].clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(params, opt, ckpt.iteration, rng)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = OrderedDict()
    for name, t in ckpt.params.tensors.items():
        tensors[f"param/{name}"] = t.detach()
    for name, s in ckpt.optimizer_state.items():
        for key in ("exp_avg", "exp_avg_sq", "step"):
            tensors[f"adam/{name}/{key}"] = s[key]
    meta = {
        "iteration": str(ckpt.iteration),
        "config_hash": ckpt.config_hash,
        "rng_state": json.dumps(ckpt.rng_state, sort_keys=True),
        "config": json.dumps(ckpt.config, sort_keys=True),
        "channel_plan": ",".join(map(str, ckpt.params.channel_plan)),
        "seed": str(ckpt.params.seed),
    }
    cio.write_checkpoint(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = cio.read_checkpoint(path)
    for key in ("iteration", "config_hash", "rng_state", "config", "channel_plan", "seed"):
        if key not in meta:
            raise ContainerError(f"{path}: checkpoint metadata lacks {key!r}")
    params = OrderedDict()
    opt: Dict[str, Dict[str, torch.Tensor]] = OrderedDict()
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "param":
            params[rest] = torch.from_numpy(arr)
        elif kind == "adam":
            pname, _, key = rest.rpartition("/")
            opt.setdefault(pname, {})[key] = torch.from_numpy(arr)
        else:
            raise ContainerError(f"{path}: unexpected entry {name!r}")
    if not params:
        raise ContainerError(f"{path}: checkpoint holds no parameters")
    for name, t in params.items():
        if not torch.isfinite(t).all():
            raise ContainerError(f"{path}: parameter {name!r} is not finite")
    plan = tuple(int(c) for c in meta["channel_plan"].split(","))
    return Checkpoint(
        BackboneParams(params, plan, int(meta["seed"])),
        opt,
        int(meta["iteration"]),
        meta["config_hash"],
        json.loads(meta["rng_state"]),
        json.loads(meta["config"]),
    )


def pretrain(
    config: TrainConfig,
    dataset,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    history: Optional[List[dict]] = None,
    on_record: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Run ``sevr_step`` until ``config.iterations``; optionally stream metrics/checkpoints to ``out_dir``.

    Only ``dataset.images`` (or a bare image stack) is read. ``history``, if
    given, receives one record per step regardless of the metric cadence.
    """
    config.validate()
    images = _images_of(dataset)
    state = restore_state(resume, config) if resume is not None else init_state(config)
    metrics_fh = None
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8")
        ckpt_path = out_dir / "checkpoint.covc"
    try:
        while state.iteration < config.iterations:
            t0 = time.perf_counter()
            state, report, valid_frac = sevr_step(state, images, config)
            rec = _record(state.iteration, report, valid_frac, 1000 * (time.perf_counter() - t0))
            if history is not None:
                history.append(rec)
            if config.objective == "cover" and not all(report.finite.values()):
                raise DataDomainError(f"non-finite loss at iteration {state.iteration}: {rec}")
            if state.iteration % config.metric_every == 0 or state.iteration == config.iterations:
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(rec) + "\n")
                    metrics_fh.flush()
                if on_record is not None:
                    on_record(rec)
            if ckpt_path is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(ckpt_path, snapshot(state, config))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    ckpt = snapshot(state, config)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, ckpt)
    return ckpt
