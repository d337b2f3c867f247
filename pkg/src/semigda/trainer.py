"""Two-stage SemiGDA training, inference and evaluation.

Stage 1 trains only the latent mapper and the trainable encoder against the
latent alignment losses. Stage 2 adds the skip adapters and the Dice
segmentation terms, with the unsupervised weight warming up over the
stage-2 iterations.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .acr import soft_foreground
from .adapters import AdapterBank, decode_branch
from .config import TrainConfig
from .dataset import Batch, BatchIterator, ImageSample, SemiSplit
from .encoder import TrainableEncoder
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import (LossReport, lambda_schedule, prior_sup_loss, prior_unsup_loss, seg_sup_loss,
                     seg_unsup_loss, total_loss)
from .mapping import LatentMapper
from .metrics import MetricsReport, aggregate, dice_score, hd95, iou_score
from .vae import VAE, images_to_tensor, masks_to_tensor, sample_latent, vae_from_state

log = logging.getLogger(__name__)

GROUPS = ("vae", "encoder", "mapping", "image_adapter", "mask_adapter")
TRAINABLE = ("encoder", "mapping", "image_adapter", "mask_adapter")
STAGE_GROUPS = {1: ("encoder", "mapping"), 2: TRAINABLE}


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


class SemiGDA(nn.Module):
    """Frozen VAE plus the four trainable parameter groups."""

    def __init__(self, vae: VAE, config: TrainConfig):
        super().__init__()
        if not vae.frozen:
            raise ConfigError("SemiGDA needs a frozen VAE; call vae.freeze() first")
        if vae.downsample != config.downsample or vae.latent_channels != config.latent_channels:
            raise ConfigError("VAE latent geometry does not match the training config")
        self.vae = vae
        self.K = config.K
        grid = (config.image_size // config.downsample,) * 2
        self.encoder = TrainableEncoder(vae.num_levels, config.latent_channels,
                                        channels=config.encoder_channels[:vae.num_levels])
        self.mapping = LatentMapper(config.latent_channels, grid, config.mapper_width,
                                    config.mapper_depth, config.mapper_heads)
        self.image_adapter = AdapterBank(vae.encoder_channels, vae.decoder_channels, "image")
        self.mask_adapter = AdapterBank(self.encoder.channels, vae.decoder_channels, "mask")
        self.use_image_adapter = not config.ablate.no_image_adapter
        self.use_mask_adapter = not config.ablate.no_mask_adapter

    def group(self, name: str) -> nn.Module:
        return getattr(self, name)

    def group_hashes(self) -> dict[str, str]:
        return {g: checkpoint.module_hash(self.group(g)) for g in GROUPS}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for g in TRAINABLE for p in self.group(g).parameters()]

    def train(self, mode: bool = True):
        super().train(mode)
        self.vae.eval()
        return self

    def encode(self, x: torch.Tensor):
        """Both image branches: returns (z_v, S_v, ztilde_v, z_r, S_r)."""
        with torch.no_grad():
            z_v, s_v = self.vae.encode(x)
        zt_v = self.mapping(z_v)
        z_r, s_r = self.encoder(x)
        return z_v, s_v, zt_v, z_r, s_r

    def decode_image_branch(self, zt_mean, s_v):
        return decode_branch(self.vae, zt_mean, s_v, self.image_adapter if self.use_image_adapter else None,
                             role="image")

    def decode_mask_branch(self, zr_mean, s_r):
        return decode_branch(self.vae, zr_mean, s_r, self.mask_adapter if self.use_mask_adapter else None,
                             role="mask")

    def predict(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """ACR-space outputs (y_v, y_r) of both branches from latent means."""
        _, s_v, zt_v, z_r, s_r = self.encode(x)
        return self.decode_image_branch(zt_v.mean, s_v), self.decode_mask_branch(z_r.mean, s_r)


def build_model(vae: VAE, config: TrainConfig) -> SemiGDA:
    torch.manual_seed(config.seed)
    return SemiGDA(vae, config)


@dataclass
class TrainState:
    model: SemiGDA
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    steps_per_epoch: int
    t: int = 0
    history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_val_dice: float = -1.0
    best_params: Optional[dict] = None
    generator: torch.Generator = field(default_factory=torch.Generator)

    @property
    def stage1_steps(self) -> int:
        return self.config.stage1_epochs * self.steps_per_epoch

    @property
    def stage2_steps(self) -> int:
        return self.config.stage2_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps

    @property
    def stage(self) -> int:
        return 1 if self.t < self.stage1_steps else 2

    @property
    def stage_step(self) -> int:
        return self.t if self.stage == 1 else self.t - self.stage1_steps


def new_state(model: SemiGDA, config: TrainConfig, steps_per_epoch: int) -> TrainState:
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(config.seed + 1)
    return TrainState(model, opt, config, steps_per_epoch, generator=gen)


def _latent(dist, cfg: TrainConfig, gen: torch.Generator):
    return sample_latent(dist, deterministic=not cfg.sample_latents, seed=gen)


def train_step(batch: Batch, state: TrainState, config: Optional[TrainConfig] = None):
    """One optimisation step; mutates and returns ``state`` with its LossReport."""
    cfg = config or state.config
    model = state.model
    if any(s.mask is not None for s in batch.unlabeled):
        raise TrainingError("unlabeled sample carries a mask; splits must strip them")
    if any(s.mask is None for s in batch.labeled):
        raise TrainingError("labeled sample without a mask")
    abl = cfg.ablate
    unlabeled = [] if abl.supervised_only else batch.unlabeled
    n_l = len(batch.labeled)
    stage = state.stage
    model.train()

    x = images_to_tensor([s.image for s in batch.labeled] + [s.image for s in unlabeled])
    _, s_v, zt_v, z_r, s_r = model.encode(x)
    with torch.no_grad():
        z_g, _ = model.vae.encode(masks_to_tensor([s.mask for s in batch.labeled], cfg.K))
    gen = state.generator
    zt, zr, zg = _latent(zt_v, cfg, gen), _latent(z_r, cfg, gen), _latent(z_g, cfg, gen)

    terms = {"sup_prior": prior_sup_loss(zt[:n_l], zr[:n_l], zg)}
    if unlabeled and not abl.no_unsup_prior:
        terms["unsup_prior"] = prior_unsup_loss(zt[n_l:], zr[n_l:])
    if stage == 2:
        y_v = model.decode_image_branch(zt_v.mean, s_v)
        y_r = model.decode_mask_branch(z_r.mean, s_r)
        y = torch.from_numpy(np.stack([s.mask for s in batch.labeled]))
        terms["sup_seg"] = seg_sup_loss(y_v[:n_l], y_r[:n_l], y, cfg.K, cfg.smooth)
        if unlabeled and not abl.no_unsup_seg:
            terms["unsup_seg"] = seg_unsup_loss(y_v[n_l:], y_r[n_l:], cfg.K, cfg.smooth,
                                                stop_gradient=cfg.stop_gradient_consistency)
        report = total_loss(**terms, t=state.stage_step, t_max=state.stage2_steps, beta=cfg.beta)
    else:
        # the warm-up clock only runs in stage 2
        report = total_loss(**terms, t=0, t_max=1, lambda_u=cfg.stage1_lambda)

    state.optimizer.zero_grad(set_to_none=True)
    report.loss.backward()
    state.optimizer.step()
    record = {"t": state.t, "stage": stage, **report.as_dict()}
    state.history.append(record)
    state.t += 1
    return state, report


def _snapshot(model: SemiGDA) -> dict:
    return {g: copy.deepcopy(model.group(g).state_dict()) for g in TRAINABLE}


def restore_best(state: TrainState) -> SemiGDA:
    """Copy of the model carrying the best-validation parameters."""
    model = copy.deepcopy(state.model)
    if state.best_params is not None:
        for g, sd in state.best_params.items():
            model.group(g).load_state_dict(sd)
    return model


@dataclass
class TrainResult:
    state: TrainState
    best_model: SemiGDA

    @property
    def final_model(self) -> SemiGDA:
        return self.state.model


def run_training(split: SemiSplit, config: TrainConfig, vae: Optional[VAE] = None,
                 state: Optional[TrainState] = None, run_dir=None, max_steps: Optional[int] = None,
                 on_step: Optional[Callable] = None) -> TrainResult:
    """Run (or resume) both stages; validates every ``val_every`` epochs.

    ``max_steps`` stops early after that global step count, leaving a state
    that can be checkpointed and resumed.
    """
    if config.deterministic:
        set_deterministic(True)
    b_unl = config.batch_unlabeled if split.unlabeled else 0
    iterator = BatchIterator(split, config.batch_labeled, b_unl, config.seed)
    if state is None:
        if vae is None:
            raise ConfigError("run_training needs a frozen VAE or an existing state")
        state = new_state(build_model(vae, config), config, iterator.steps_per_epoch)
    elif state.steps_per_epoch != iterator.steps_per_epoch:
        raise ConfigError("resumed state was trained on a differently sized split")
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(run_dir / "loss_log.jsonl", "a") if run_dir is not None else None
    stop = state.total_steps if max_steps is None else min(max_steps, state.total_steps)
    spe = state.steps_per_epoch
    try:
        while state.t < stop:
            _, report = train_step(iterator.batch_at(state.t), state, config)
            if log_fh is not None:
                log_fh.write(json.dumps(state.history[-1]) + "\n")
            if on_step is not None:
                on_step(state, report)
            epoch_done = state.t % spe == 0
            if epoch_done and split.val and (state.t // spe) % config.val_every == 0:
                _validate(state, split.val, run_dir)
            elif state.t == state.total_steps and split.val:
                _validate(state, split.val, run_dir)
    finally:
        if log_fh is not None:
            log_fh.close()
    if run_dir is not None and state.t == state.total_steps:
        save_checkpoint(state, run_dir / "final.ckpt")
    return TrainResult(state, restore_best(state))


def _validate(state: TrainState, val: Sequence[ImageSample], run_dir) -> None:
    rep = evaluate(val, state.model, with_hd95=False)
    entry = {"t": state.t, "epoch": state.t // state.steps_per_epoch, "val_dice": rep.dice_pct}
    state.val_history.append(entry)
    log.info("epoch %d val dice %.2f", entry["epoch"], rep.dice_pct)
    if rep.dice_pct > state.best_val_dice:
        state.best_val_dice = rep.dice_pct
        state.best_params = _snapshot(state.model)
        if run_dir is not None:
            save_checkpoint(state, Path(run_dir) / "best.ckpt", params="best")


@torch.no_grad()
def infer(x, model) -> tuple[torch.Tensor, torch.Tensor]:
    """Average the two branch foreground maps; hard mask is ``soft >= 0.5``.

    ``x`` is an (N, 3, H, W) tensor in [-1, 1] or a list of H x W x 3 images
    in [0, 1]; ``model`` a SemiGDA or a checkpoint path.
    """
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model).model
    if not isinstance(x, torch.Tensor):
        x = images_to_tensor(x)
    model.eval()
    y_v, y_r = model.predict(x)
    soft = (soft_foreground(y_v, model.K) + soft_foreground(y_r, model.K)) / 2
    return soft >= 0.5, soft


def evaluate(samples: Sequence[ImageSample], model, batch_size: int = 16, with_hd95: bool = True) -> MetricsReport:
    """Per-sample Dice/IoU/HD95 and their means.

    ``model`` may be a SemiGDA, a checkpoint path, or any callable mapping a
    list of samples to hard masks (useful for oracle predictors).
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model).model
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        if isinstance(model, SemiGDA):
            hard = infer([s.image for s in chunk], model)[0].numpy()
        else:
            hard = np.asarray(model(chunk))
        for s, pred in zip(chunk, hard):
            gt = s.mask == model_k(model) - 1
            hd = hd95(pred, gt) if with_hd95 else float("nan")
            rows.append((s.id, dice_score(pred, gt), iou_score(pred, gt), hd))
    return aggregate(rows)


def model_k(model) -> int:
    return getattr(model, "K", 2)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(state: TrainState, path, params: str = "current") -> None:
    """Write everything needed to resume: parameters, optimizer, RNG, logs.

    ``params="best"`` stores the best-validation weights as the model groups
    (the optimizer state still belongs to the current weights).
    """
    model = state.model if params == "current" else restore_best(state)
    tensors = {}
    hashes = {}
    for g in GROUPS:
        sd = model.group(g).state_dict()
        hashes[g] = checkpoint.tensor_hash(sd)
        tensors.update({f"model.{g}.{k}": v for k, v in sd.items()})
    opt_sd = state.optimizer.state_dict()
    for idx, pstate in opt_sd["state"].items():
        for key, val in pstate.items():
            tensors[f"optim.{idx}.{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    tensors["rng.latent"] = state.generator.get_state()
    if state.best_params is not None:
        for g, sd in state.best_params.items():
            tensors.update({f"best.{g}.{k}": v for k, v in sd.items()})
    manifest = {
        "kind": "semigda",
        "params": params,
        "config": state.config.to_dict(),
        "vae_config": state.model.vae.config,
        "steps_per_epoch": state.steps_per_epoch,
        "stage": state.stage,
        "t": state.t,
        "group_hashes": hashes,
        "optimizer_groups": [{k: v for k, v in grp.items()} for grp in opt_sd["param_groups"]],
        "history": state.history,
        "val_history": state.val_history,
        "best_val_dice": state.best_val_dice,
        "has_best": state.best_params is not None,
    }
    checkpoint.write(path, tensors, manifest)


def load_checkpoint(path) -> TrainState:
    tensors, manifest = checkpoint.read(path)
    if manifest.get("kind") != "semigda":
        raise CheckpointError(f"{path}: not a SemiGDA checkpoint")
    states = {g: checkpoint.split_groups(tensors, f"model.{g}") for g in GROUPS}
    for g in GROUPS:
        checkpoint.verify_hash(states[g], manifest["group_hashes"][g], g)
    cfg = TrainConfig.from_dict(manifest["config"])
    vae = vae_from_state(manifest["vae_config"], states["vae"], frozen=True)
    model = SemiGDA(vae, cfg)
    for g in TRAINABLE:
        model.group(g).load_state_dict(states[g])
    state = new_state(model, cfg, manifest["steps_per_epoch"])
    opt_state = {}
    for name, val in checkpoint.split_groups(tensors, "optim").items():
        idx, key = name.split(".", 1)
        opt_state.setdefault(int(idx), {})[key] = val
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": manifest["optimizer_groups"]})
    state.generator.set_state(tensors["rng.latent"])
    state.t = manifest["t"]
    state.history = manifest["history"]
    state.val_history = manifest["val_history"]
    state.best_val_dice = manifest["best_val_dice"]
    if manifest["has_best"]:
        state.best_params = {g: checkpoint.split_groups(tensors, f"best.{g}") for g in TRAINABLE}
    return state
