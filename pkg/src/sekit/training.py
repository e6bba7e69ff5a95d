"""Two-stage training: supervised pretraining under random routing, then
joint supervised + policy-gradient training of the routing filter.

Stage 1 trains the backbone with uniformly random region routing and an
MSE loss plus a weighted mean of per-block auxiliary-prediction MSEs.
Stage 2 keeps the supervised update and adds a REINFORCE update for the
filter: each routed forward earns per-block rewards combining a cost
penalty for non-local routing with a terminal, difficulty-scaled
performance term measured against a random-routing baseline forward.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, save_checkpoint
from .config import Config
from .network import Enhancer, NetworkConfig, make_mask_provider
from .policy import FeatureFilter
from .synth import DatasetManifest, load_pair


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; aborted with diagnostics."""


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


def difficulty(l_d, l_t: float):
    """Piecewise difficulty: l_d / l_t below the threshold, else 1."""
    if l_t <= 0:
        raise ValueError("difficulty threshold must be > 0")
    if isinstance(l_d, torch.Tensor):
        if (l_d < 0).any():
            raise ValueError("loss must be >= 0")
        return torch.where(l_d < l_t, l_d / l_t, torch.ones_like(l_d))
    if l_d < 0:
        raise ValueError("loss must be >= 0")
    return l_d / l_t if l_d < l_t else 1.0


def routing_cost(action) -> torch.Tensor:
    """Scalarized action cost: fraction of units routed non-local."""
    return action.nonlocal_fraction.double()


def step_reward(action, index: int, n_blocks: int, d, delta_l2, gamma: float) -> torch.Tensor:
    """Reward for block `index` (1-based); terminal block adds d * (-delta_l2)."""
    if not 1 <= index <= n_blocks:
        raise ValueError(f"block index {index} outside 1..{n_blocks}")
    r = -gamma * routing_cost(action)
    if index == n_blocks:
        d_t = d if isinstance(d, torch.Tensor) else torch.as_tensor(d, dtype=torch.float64)
        dl_t = (
            delta_l2
            if isinstance(delta_l2, torch.Tensor)
            else torch.as_tensor(delta_l2, dtype=torch.float64)
        )
        r = r + d_t.double() * (-dl_t.double())
    return r


def returns_to_go(rewards):
    """Suffix sums R_i = sum_{j >= i} r_j along the last axis."""
    if isinstance(rewards, torch.Tensor):
        return torch.flip(torch.cumsum(torch.flip(rewards, [-1]), dim=-1), [-1])
    arr = np.asarray(rewards, dtype=np.float64)
    return np.flip(np.cumsum(np.flip(arr, -1), axis=-1), -1).copy()


@dataclass
class Trajectory:
    """Batched rollout over the N dynamic blocks.

    log_probs keep their autograd graph into the filter; rewards and the
    terminal diagnostics are detached float64 tensors.
    """

    log_probs: list  # N tensors of shape (B,)
    rewards: torch.Tensor  # (B, N)
    actions: list  # N Actions
    l_d: torch.Tensor  # (B,) per-sample final MSE of the routed forward
    delta_l2: torch.Tensor  # (B,) routed minus random-baseline MSE
    d: torch.Tensor  # (B,) difficulty

    @property
    def returns(self) -> torch.Tensor:
        return returns_to_go(self.rewards)


def trajectory_from_rollout(actions, log_probs, l_d, l2_baseline, cfg: Config) -> Trajectory:
    """Assemble rewards from a routed forward and its baseline loss."""
    n = len(actions)
    l_d = l_d.detach().double()
    delta_l2 = l_d - l2_baseline.detach().double()
    d = difficulty(l_d, cfg.difficulty_threshold)
    rewards = torch.stack(
        [
            step_reward(actions[i], i + 1, n, d, delta_l2, cfg.gamma).detach()
            for i in range(n)
        ],
        dim=1,
    )
    return Trajectory(
        log_probs=list(log_probs), rewards=rewards, actions=list(actions),
        l_d=l_d, delta_l2=delta_l2, d=d,
    )


def reinforce_objective(trajectories) -> torch.Tensor:
    """(1/K) sum_k sum_i log pi(a_i | s_i) * R_i  (to be ascended)."""
    if not trajectories:
        raise ValueError("empty trajectory batch")
    total = None
    count = 0
    for traj in trajectories:
        rtg = traj.returns
        for i, lp in enumerate(traj.log_probs):
            term = (lp * rtg[:, i]).sum()
            total = term if total is None else total + term
        count += traj.rewards.shape[0]
    return total / count


def reinforce_gradient(trajectories, filt: FeatureFilter):
    """Ascent-direction gradient of the REINFORCE objective w.r.t. filter params."""
    obj = reinforce_objective(trajectories)
    params = [p for p in filt.parameters() if p.requires_grad]
    grads = torch.autograd.grad(obj, params, allow_unused=True)
    return [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]


# ---------------------------------------------------------------------------
# Losses / data
# ---------------------------------------------------------------------------


def supervised_loss(trace, clean, beta: float):
    """MSE on the final prediction + beta * mean per-block auxiliary MSE."""
    main = F.mse_loss(trace.s_pred, clean)
    if beta > 0 and trace.intermediates:
        aux = torch.stack([F.mse_loss(p, clean) for p in trace.intermediates]).mean()
        return main + beta * aux
    return main


def per_sample_mse(pred, target) -> torch.Tensor:
    return ((pred - target) ** 2).mean(dim=(1, 2, 3))


@contextmanager
def frozen_bn_stats(model: nn.Module):
    """Forward passes inside this context leave BN running stats untouched."""
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, (mom, nbt) in zip(bns, saved):
            m.momentum = mom
            m.num_batches_tracked.copy_(nbt)


class PairDataset:
    """In-memory (noisy, clean) spectrogram pairs for one manifest split."""

    def __init__(self, manifest: DatasetManifest, split: str, cfg: Config):
        self.cfg = cfg
        self.entries = manifest.split(split)
        if not self.entries:
            raise ValueError(f"manifest has no entries for split {split!r}")
        self.pairs = []
        for entry in self.entries:
            noisy, clean = load_pair(entry, manifest.root, cfg)
            # (T, F, 2) -> (2, T, F)
            self.pairs.append(
                (
                    torch.from_numpy(noisy).permute(2, 0, 1).contiguous(),
                    torch.from_numpy(clean).permute(2, 0, 1).contiguous(),
                )
            )

    def __len__(self):
        return len(self.pairs)

    def full_batch(self, indices=None):
        idx = range(len(self.pairs)) if indices is None else indices
        noisy = torch.stack([self.pairs[i][0] for i in idx])
        clean = torch.stack([self.pairs[i][1] for i in idx])
        return noisy, clean

    def batches(self, batch_size: int, rng: np.random.Generator, crop: int | None = None):
        """Shuffled minibatches; random time crops when crop is given."""
        order = rng.permutation(len(self.pairs))
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            noisy_l, clean_l = [], []
            for i in chunk:
                noisy, clean = self.pairs[i]
                t = noisy.shape[1]
                if crop is not None and t > crop:
                    s = int(rng.integers(0, t - crop + 1))
                    noisy, clean = noisy[:, s : s + crop], clean[:, s : s + crop]
                noisy_l.append(noisy)
                clean_l.append(clean)
            yield torch.stack(noisy_l), torch.stack(clean_l)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


def build_models(cfg: Config, seed: int):
    torch.manual_seed(seed)
    net = NetworkConfig.from_config(cfg)
    model = Enhancer(net)
    filt = FeatureFilter(
        cfg.channels, cfg.filter_channels, cfg.filter_hidden, cfg.mask_downsample
    )
    opt_b = torch.optim.Adam(model.parameters(), lr=cfg.lr_backbone)
    opt_f = torch.optim.Adam(filt.parameters(), lr=cfg.lr_filter)
    return model, filt, opt_b, opt_f


def restore_models(ckpt: Checkpoint):
    cfg = Config.from_dict(ckpt.config)
    model, filt, opt_b, opt_f = build_models(cfg, seed=cfg.seed)
    model.load_state_dict(ckpt.backbone)
    filt.load_state_dict(ckpt.filter)
    if ckpt.opt_backbone.get("state"):
        opt_b.load_state_dict(ckpt.opt_backbone)
    if ckpt.opt_filter.get("state"):
        opt_f.load_state_dict(ckpt.opt_filter)
    return model, filt, opt_b, opt_f, cfg


def _checkpoint_of(model, filt, opt_b, opt_f, cfg, stage, step) -> Checkpoint:
    return Checkpoint(
        backbone=model.state_dict(),
        filter=filt.state_dict(),
        opt_backbone=opt_b.state_dict(),
        opt_filter=opt_f.state_dict(),
        config=cfg.to_dict(),
        stage=stage,
        step=step,
    )


def _check_finite(loss, step, context):
    if not math.isfinite(float(loss)):
        raise TrainingDivergedError(
            f"{context}: non-finite loss {float(loss)} at step {step}; "
            "lower the learning rate or check the input scaling"
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_history: list = field(default_factory=list)
    routed_fraction_history: list = field(default_factory=list)


def stage1_train(
    cfg: Config,
    manifest: DatasetManifest,
    out_dir=None,
    seed: int | None = None,
    epochs: int | None = None,
    dataset: PairDataset | None = None,
    log=None,
) -> TrainResult:
    """Backbone pretraining under uniformly random routing."""
    seed = cfg.seed if seed is None else seed
    epochs = cfg.stage1_epochs if epochs is None else epochs
    model, filt, opt_b, opt_f = build_models(cfg, seed)
    data = dataset or PairDataset(manifest, "train", cfg)
    rng = np.random.default_rng(seed)
    mask_gen = torch.Generator().manual_seed(seed + 1)

    model.train()
    history = []
    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        for noisy, clean in data.batches(cfg.batch_size, rng, crop=cfg.crop_frames):
            provider = make_mask_provider("random", model, generator=mask_gen)
            trace = model(noisy, mask_provider=provider)
            loss = supervised_loss(trace, clean, cfg.beta)
            _check_finite(loss, step, "stage 1")
            opt_b.zero_grad()
            loss.backward()
            opt_b.step()
            epoch_losses.append(float(loss))
            step += 1
        history.append(sum(epoch_losses) / len(epoch_losses))
        if log and (epoch % 20 == 0 or epoch == epochs - 1):
            log(f"stage1 epoch {epoch + 1}/{epochs} loss {history[-1]:.5f}")

    ckpt = _checkpoint_of(model, filt, opt_b, opt_f, cfg, "stage1", step)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir)
    return TrainResult(checkpoint=ckpt, loss_history=history)


def stage2_step(model, filt, opt_b, opt_f, noisy, clean, cfg, sample_gen, baseline_gen):
    """One joint update; returns (supervised loss, Trajectory)."""
    provider = make_mask_provider(
        "policy", model, policy=filt, mode="sampled", generator=sample_gen, routing=cfg.routing
    )
    trace = model(noisy, mask_provider=provider)
    sup = supervised_loss(trace, clean, cfg.beta)
    opt_b.zero_grad()
    sup.backward()
    opt_b.step()

    l_d = per_sample_mse(trace.s_pred.detach(), clean)
    with torch.no_grad(), frozen_bn_stats(model):
        base_provider = make_mask_provider("random", model, generator=baseline_gen)
        base_trace = model(noisy, mask_provider=base_provider, need_intermediates=False)
        l2_base = per_sample_mse(base_trace.s_pred, clean)

    traj = trajectory_from_rollout(
        [a for a in trace.actions],
        [a.log_prob for a in trace.actions],
        l_d,
        l2_base,
        cfg,
    )
    filter_loss = -reinforce_objective([traj])
    opt_f.zero_grad()
    filter_loss.backward()
    opt_f.step()
    return sup, traj


def stage2_train(
    ckpt: Checkpoint,
    cfg: Config | None = None,
    manifest: DatasetManifest | None = None,
    out_dir=None,
    seed: int | None = None,
    epochs: int | None = None,
    dataset: PairDataset | None = None,
    log=None,
) -> TrainResult:
    """Joint supervised + REINFORCE training from a stage-1 checkpoint."""
    model, filt, opt_b, opt_f, ckpt_cfg = restore_models(ckpt)
    cfg = cfg or ckpt_cfg
    seed = cfg.seed if seed is None else seed
    epochs = cfg.stage2_epochs if epochs is None else epochs
    data = dataset or PairDataset(manifest, "train", cfg)
    rng = np.random.default_rng(seed + 17)
    sample_gen = torch.Generator().manual_seed(seed + 33)
    baseline_gen = torch.Generator().manual_seed(seed + 71)

    model.train()
    filt.train()
    history = []
    routed = []
    step = ckpt.step
    for epoch in range(epochs):
        epoch_losses, epoch_routed = [], []
        for noisy, clean in data.batches(cfg.batch_size, rng, crop=cfg.crop_frames):
            sup, traj = stage2_step(
                model, filt, opt_b, opt_f, noisy, clean, cfg, sample_gen, baseline_gen
            )
            _check_finite(sup, step, "stage 2")
            epoch_losses.append(float(sup))
            epoch_routed.append(
                float(torch.stack([a.nonlocal_fraction for a in traj.actions]).mean())
            )
            step += 1
        history.append(sum(epoch_losses) / len(epoch_losses))
        routed.append(sum(epoch_routed) / len(epoch_routed))
        if log and (epoch % 20 == 0 or epoch == epochs - 1):
            log(
                f"stage2 epoch {epoch + 1}/{epochs} loss {history[-1]:.5f} "
                f"nonlocal {routed[-1]:.3f}"
            )

    out = _checkpoint_of(model, filt, opt_b, opt_f, cfg, "stage2", step)
    if out_dir is not None:
        save_checkpoint(out, out_dir)
    return TrainResult(checkpoint=out, loss_history=history, routed_fraction_history=routed)
