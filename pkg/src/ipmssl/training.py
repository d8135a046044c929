"""Critic/generator objectives and the alternating training loop."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ConstraintKind, ExperimentConfig, IpmKind
from .constraints import (ConstraintState, alm_update, constraint_objective, mixture_batch,
                          omega_fisher, omega_gp, omega_sobolev, sample_gp_interpolates)
from .critic import Critic, log_probs
from .data import (Dataset, IndexStream, LabeledSplit, load_cifar10_binary, noise_sampler,
                   stratified_label_split, synthetic_mixture, to_tensor)
from .evaluate import MetricsRecord, misclassification_rate
from .nn import DTYPE, Generator, NonFiniteError, input_gradients

log = logging.getLogger(__name__)


def cross_entropy(logits, labels) -> torch.Tensor:
    """Mean of -log p(label | x) over rows, from log-softmax of the logits."""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    k = logits.shape[-1]
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    lp = log_probs(logits.reshape(-1, k))
    return -lp[torch.arange(len(labels)), labels].mean()


@dataclass
class Batch:
    x_lab: torch.Tensor | None
    y_lab: torch.Tensor | None
    x_unl: torch.Tensor
    z: torch.Tensor


@dataclass
class TrainState:
    critic: Critic
    generator: Generator
    opt_critic: torch.optim.Optimizer
    opt_gen: torch.optim.Optimizer
    constraints: ConstraintState
    torch_rng: torch.Generator
    np_rng: np.random.Generator
    step: int = 0
    critic_steps: int = 0
    epoch: int = 0


def make_optimizers(critic: Critic, generator: Generator, cfg: ExperimentConfig):
    """Adam for both nets; L2 decay (added to the gradient) per critic param group."""
    hp = cfg.hyper
    groups = critic.param_groups()
    betas = (hp.adam_beta1, hp.adam_beta2)
    opt_c = torch.optim.Adam([
        {"params": groups["backbone"], "weight_decay": hp.wd_backbone},
        {"params": groups["v"], "weight_decay": hp.wd_v},
    ], lr=hp.lr_critic, betas=betas)
    opt_g = torch.optim.Adam(generator.parameters(), lr=hp.lr_gen, betas=betas)
    return opt_c, opt_g


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if ds.kind == "cifar10":
        return load_cifar10_binary(ds.path)
    return synthetic_mixture(ds.n_classes, ds.n_per_class, ds.input_dim, ds.seed, ds.radius, ds.std)


def init_state(cfg: ExperimentConfig, sample_shape: tuple[int, ...], n_classes: int | None = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    n_classes = cfg.n_classes if n_classes is None else n_classes
    critic = Critic(cfg.arch, cfg.norm, sample_shape, n_classes, cfg.formulation)
    out_act = "tanh" if cfg.dataset.kind == "cifar10" else "identity"
    generator = Generator(cfg.arch.noise_dim, cfg.arch.gen_hidden, sample_shape, out_act)
    opt_c, opt_g = make_optimizers(critic, generator, cfg)
    torch_rng = torch.Generator().manual_seed(cfg.seed)
    return TrainState(critic, generator, opt_c, opt_g, ConstraintState.from_config(cfg),
                      torch_rng, np.random.default_rng(cfg.seed))


def _grad_sq_norms(h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return (input_gradients(h, x) ** 2).sum(dim=1)


def critic_objective(critic: Critic, x_fake: torch.Tensor, batch: Batch, cfg: ExperimentConfig,
                     constraints: ConstraintState, torch_rng: torch.Generator | None = None):
    """L_D (to be maximized) and a dict of detached diagnostics.

    mean f(real) - mean f(fake) + L^C - lambda_CE * mean CE(labeled).  The
    real and fake halves go through one forward pass as the mixture batch,
    which also serves the Fisher and Sobolev estimates.
    """
    n = batch.x_unl.shape[0]
    if n == 0 or x_fake.shape[0] == 0:
        raise ValueError("critic objective needs nonempty unlabeled and fake batches")
    mu = mixture_batch(batch.x_unl, x_fake)
    sob = cfg.placement(ConstraintKind.SOBOLEV)
    if sob is not None:
        mu = mu.detach().requires_grad_(True)
    out = critic(mu)
    ipm = out.f[:n].mean() - out.f[n:].mean()

    omegas = {}
    fis = cfg.placement(ConstraintKind.FISHER)
    if fis is not None:
        omegas["omega_f"] = omega_fisher(out.component(fis.target))
    if sob is not None:
        omegas["omega_s"] = omega_sobolev(_grad_sq_norms(out.component(sob.target), mu))
    gp = cfg.placement(ConstraintKind.GP)
    if gp is not None:
        interp = sample_gp_interpolates(batch.x_unl, x_fake.detach(), torch_rng)
        interp = interp.detach().requires_grad_(True)
        h = critic(interp).component(gp.target)
        omegas["omega_gp"] = omega_gp(torch.sqrt(_grad_sq_norms(h, interp)))
    lc = constraint_objective(constraints, **omegas)

    lam_ce = cfg.lambda_ce
    ce = None
    if batch.x_lab is not None and len(batch.x_lab):
        ce = cross_entropy(critic(batch.x_lab).logits, batch.y_lab)
    elif lam_ce > 0:
        raise ValueError("lambda_ce > 0 but the labeled batch is empty")
    loss = ipm + lc
    if ce is not None and lam_ce > 0:
        loss = loss - lam_ce * ce
    stats = {"ipm": float(ipm.detach()), "ce": None if ce is None else float(ce.detach())}
    stats.update({k: float(v.detach()) for k, v in omegas.items()})
    return loss, stats


def generator_objective(critic: Critic, generator: Generator, z: torch.Tensor) -> torch.Tensor:
    """L_G = -mean f(g(z)), minimized by the generator."""
    if z.shape[0] == 0:
        raise ValueError("generator objective needs a nonempty noise batch")
    return -critic(generator(z)).f.mean()


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def critic_step(state: TrainState, batch: Batch, cfg: ExperimentConfig) -> dict:
    """One Adam ascent step on L_D, then multiplier updates, then clipping (WGAN clip only)."""
    critic = state.critic
    _set_requires_grad(critic, True)
    with torch.no_grad():
        x_fake = state.generator(batch.z)
    state.opt_critic.zero_grad(set_to_none=True)
    loss, stats = critic_objective(critic, x_fake, batch, cfg, state.constraints, state.torch_rng)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"critic objective is {float(loss)} at critic step {state.critic_steps}: {stats}")
    (-loss).backward()
    state.opt_critic.step()
    if "omega_f" in stats:
        state.constraints = alm_update(state.constraints, stats["omega_f"], ConstraintKind.FISHER)
    if "omega_s" in stats:
        state.constraints = alm_update(state.constraints, stats["omega_s"], ConstraintKind.SOBOLEV)
    if cfg.ipm == IpmKind.WGAN_CLIP:
        with torch.no_grad():
            for p in critic.parameters():
                p.clamp_(-cfg.hyper.clip_c, cfg.hyper.clip_c)
    state.critic_steps += 1
    stats["critic_objective"] = float(loss.detach())
    return stats


def generator_step(state: TrainState, z: torch.Tensor) -> float:
    _set_requires_grad(state.critic, False)
    state.opt_gen.zero_grad(set_to_none=True)
    loss = generator_objective(state.critic, state.generator, z)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"generator objective is {float(loss)} at step {state.step}")
    loss.backward()
    state.opt_gen.step()
    _set_requires_grad(state.critic, True)
    state.step += 1
    return float(loss.detach())


@torch.no_grad()
def predict_probs(critic: Critic, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    was_training = critic.training
    critic.eval()
    try:
        parts = [critic(to_tensor(x[i:i + chunk])).probs.numpy() for i in range(0, len(x), chunk)]
    finally:
        critic.train(was_training)
    return np.concatenate(parts) if parts else np.zeros((0, critic.n_classes))


def split_error(critic: Critic, dataset: Dataset, idx: np.ndarray) -> float | None:
    if len(idx) == 0:
        return None
    return misclassification_rate(predict_probs(critic, dataset.x[idx]), dataset.y[idx])


@torch.no_grad()
def labeled_ce(critic: Critic, dataset: Dataset, idx: np.ndarray) -> float:
    critic.eval()
    try:
        return float(cross_entropy(critic(to_tensor(dataset.x[idx])).logits, dataset.y[idx]))
    finally:
        critic.train()


@torch.no_grad()
def component_moments(critic: Critic, x_real: torch.Tensor, x_fake: torch.Tensor) -> dict[str, float]:
    """Second moments E_mu h^2 of f, f_plus, f_minus over a real/fake mixture batch."""
    out = critic(mixture_batch(x_real, x_fake))
    moments = {"f": float(omega_fisher(out.f))}
    if out.f_plus is not None:
        moments["f_plus"] = float(omega_fisher(out.f_plus))
        moments["f_minus"] = float(omega_fisher(out.f_minus))
    return moments


@dataclass
class TrainResult:
    state: TrainState | None
    metrics: list[MetricsRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_error: float | None = None
    test_error: float | None = None
    final_test_error: float | None = None
    final_lab_ce: float | None = None
    final_moments: dict[str, float] = field(default_factory=dict)
    best_critic: dict | None = None
    best_generator: dict | None = None
    lambda_f_trace: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_error": self.best_val_error,
            "test_error": self.test_error,
            "final_test_error": self.final_test_error,
            "final_lab_ce": self.final_lab_ce,
            "final_moments": self.final_moments,
            "generator_steps": len(self.metrics) if self.state is None else self.state.step,
        }


def _epoch_eval(critic, dataset, split, result: TrainResult, epoch: int, row: MetricsRecord | None,
                generator=None):
    val = split_error(critic, dataset, dataset.val)
    test = split_error(critic, dataset, dataset.test)
    lab = split_error(critic, dataset, split.labeled)
    if row is not None:
        row.train_lab_error, row.val_error, row.test_error = lab, val, test
    score = val if val is not None else test
    if score is not None and (result.best_val_error is None or score < result.best_val_error):
        result.best_epoch, result.best_val_error, result.test_error = epoch, score, test
        result.best_critic = copy.deepcopy(critic.state_dict())
        if generator is not None:
            result.best_generator = copy.deepcopy(generator.state_dict())
    result.final_test_error = test


def _finish(result: TrainResult, critic, dataset, split, mix_real=None, mix_fake=None):
    result.final_lab_ce = labeled_ce(critic, dataset, split.labeled)
    if mix_real is not None:
        critic.eval()
        result.final_moments = component_moments(critic, mix_real, mix_fake)
        critic.train()


def train(cfg: ExperimentConfig, dataset: Dataset | None = None, on_row=None,
          split: LabeledSplit | None = None) -> TrainResult:
    """Alternate ``n_critic`` critic steps with one generator step over the unlabeled data.

    Each critic step consumes one unlabeled batch (short tail batches are
    dropped), a fresh labeled batch and fresh noise.  One metrics row is
    emitted per generator step; the last row of each epoch carries the
    train-labeled/val/test errors.  ``split`` overrides the seeded labeled split.
    """
    dataset = dataset if dataset is not None else build_dataset(cfg)
    split = split if split is not None else stratified_label_split(dataset, cfg.n_labeled, cfg.seed)
    state = init_state(cfg, dataset.sample_shape, dataset.n_classes)
    result = TrainResult(state)
    hp = cfg.hyper
    if hp.epochs == 0:
        return result
    if len(split.unlabeled) == 0:
        raise ValueError("no unlabeled training samples left after the labeled split")
    unl = IndexStream(split.unlabeled, hp.batch_size, state.np_rng, drop_last=True)
    lab = IndexStream(split.labeled, hp.batch_size, state.np_rng)
    noise_dim = cfg.arch.noise_dim

    def draw_batch(idx: np.ndarray) -> Batch:
        li = lab.next()
        return Batch(to_tensor(dataset.x[li]), torch.as_tensor(dataset.y[li]),
                     to_tensor(dataset.x[idx]),
                     noise_sampler(noise_dim, len(idx), state.torch_rng))

    stats: dict = {}
    for epoch in range(hp.epochs):
        state.epoch = epoch
        last_row = None
        for idx in unl.epoch_batches():
            stats = critic_step(state, draw_batch(idx), cfg)
            result.lambda_f_trace.append(state.constraints.lambda_f)
            if state.critic_steps % hp.n_critic:
                continue
            z = noise_sampler(noise_dim, len(idx), state.torch_rng)
            g_loss = generator_step(state, z)
            c = state.constraints
            last_row = MetricsRecord(
                step=state.step, epoch=epoch, critic_loss=-stats["critic_objective"], gen_loss=g_loss,
                omega_f_hat=stats.get("omega_f"), omega_s_hat=stats.get("omega_s"),
                omega_gp_hat=stats.get("omega_gp"),
                lambda_f=c.lambda_f if ConstraintKind.FISHER in c.active else None,
                lambda_s=c.lambda_s if ConstraintKind.SOBOLEV in c.active else None,
                ce_loss=stats.get("ce"))
            result.metrics.append(last_row)
            if on_row is not None:
                on_row(last_row)
        _epoch_eval(state.critic, dataset, split, result, epoch, last_row, state.generator)
        log.info("epoch %d: step %d val %.4f test %.4f", epoch, state.step,
                 result.best_val_error or float("nan"), result.final_test_error or float("nan"))

    with torch.no_grad():
        n = min(len(split.unlabeled), 256)
        real = to_tensor(dataset.x[state.np_rng.choice(split.unlabeled, n, replace=False)])
        fake = state.generator.eval()(noise_sampler(noise_dim, n, state.torch_rng))
        state.generator.train()
    _finish(result, state.critic, dataset, split, real, fake)
    return result


def supervised_baseline(cfg: ExperimentConfig, dataset: Dataset | None = None,
                        split: LabeledSplit | None = None) -> TrainResult:
    """Same critic backbone and S head, CE loss only, same Adam settings.

    Runs as many optimizer steps per epoch as the SSL loop runs critic steps
    (unlabeled batches per epoch), each on a freshly drawn labeled batch.
    One metrics row per epoch.
    """
    dataset = dataset if dataset is not None else build_dataset(cfg)
    split = split if split is not None else stratified_label_split(dataset, cfg.n_labeled, cfg.seed)
    state = init_state(cfg, dataset.sample_shape, dataset.n_classes)
    result = TrainResult(state)
    hp = cfg.hyper
    lab = IndexStream(split.labeled, hp.batch_size, state.np_rng)
    steps_per_epoch = max(len(split.unlabeled) // hp.batch_size,
                          -(-len(split.labeled) // hp.batch_size), 1)
    critic = state.critic
    for epoch in range(hp.epochs):
        state.epoch = epoch
        for _ in range(steps_per_epoch):
            li = lab.next()
            state.opt_critic.zero_grad(set_to_none=True)
            ce = cross_entropy(critic(to_tensor(dataset.x[li])).logits, dataset.y[li])
            if not torch.isfinite(ce):
                raise NonFiniteError(f"cross entropy is {float(ce)} at step {state.critic_steps}")
            ce.backward()
            state.opt_critic.step()
            state.critic_steps += 1
        state.step += 1
        row = MetricsRecord(step=state.step, epoch=epoch, critic_loss=float(ce.detach()), ce_loss=float(ce.detach()))
        result.metrics.append(row)
        _epoch_eval(critic, dataset, split, result, epoch, row)
    if hp.epochs:
        _finish(result, critic, dataset, split)
    return result
