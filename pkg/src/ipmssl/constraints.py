"""Constraint estimators (Fisher, Sobolev, gradient penalty) and augmented-Lagrangian state.

Estimators take per-point values and return a scalar tensor so the same code
serves training (autograd flows through) and plain arithmetic checks.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch

from .config import ConstraintKind, ExperimentConfig
from .nn import DTYPE


def _values(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.numel() == 0:
        raise ValueError("constraint estimate over an empty batch")
    return t.reshape(-1)


def omega_fisher(h) -> torch.Tensor:
    """Mean of h^2 over the mixture batch."""
    return (_values(h) ** 2).mean()


def omega_sobolev(grad_norms_sq) -> torch.Tensor:
    """Mean squared input-gradient norm over the mixture batch."""
    return _values(grad_norms_sq).mean()


def omega_gp(grad_norms) -> torch.Tensor:
    """Mean of (1 - ||grad h||)^2 over the interpolates."""
    return ((1.0 - _values(grad_norms)) ** 2).mean()


def mixture_batch(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """mu = (P + Q) / 2 realized as the union of equal-size real and fake halves."""
    if real.shape != fake.shape:
        raise ValueError(f"mixture halves differ in shape: {tuple(real.shape)} vs {tuple(fake.shape)}")
    return torch.cat([real, fake], dim=0)


def sample_gp_interpolates(real: torch.Tensor, fake: torch.Tensor,
                           generator: torch.Generator | None = None,
                           eps: torch.Tensor | None = None) -> torch.Tensor:
    """eps_i * real_i + (1 - eps_i) * fake_i, eps_i ~ U[0, 1] per pair unless given."""
    real = torch.as_tensor(real, dtype=DTYPE)
    fake = torch.as_tensor(fake, dtype=DTYPE)
    if real.shape != fake.shape:
        raise ValueError(f"real/fake batch mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    n = real.shape[0]
    if eps is None:
        eps = torch.rand(n, dtype=DTYPE, generator=generator)
    eps = torch.as_tensor(eps, dtype=DTYPE).reshape(n, *([1] * (real.dim() - 1)))
    return eps * real + (1.0 - eps) * fake


@dataclass(frozen=True)
class ConstraintState:
    """Lagrange multipliers for Fisher/Sobolev (ALM) and the fixed GP weight.

    ``active`` lists the configured constraint kinds.
    """

    active: tuple[ConstraintKind, ...] = ()
    lambda_f: float = 0.0
    lambda_s: float = 0.0
    rho_f: float = 0.0
    rho_s: float = 0.0
    lambda_gp: float = 0.0

    def __post_init__(self):
        if self.rho_f < 0 or self.rho_s < 0 or self.lambda_gp < 0:
            raise ValueError("rho_f, rho_s and lambda_gp must be nonnegative")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ConstraintState":
        hp = cfg.hyper
        return cls(active=tuple(p.constraint for p in cfg.placements),
                   rho_f=hp.rho_f, rho_s=hp.rho_s, lambda_gp=hp.lambda_gp)


def constraint_objective(state: ConstraintState, omega_f=None, omega_s=None, omega_gp=None):
    """L^C, the constraint part of the maximized critic objective.

    lambda_F (1 - Om_F) - rho_F/2 (1 - Om_F)^2
      + lambda_S (1 - Om_S) - rho_S/2 (1 - Om_S)^2
      - lambda_GP Om_GP
    Terms for unconfigured constraints are absent.  Returns a tensor when
    any estimate is a tensor, which keeps the graph for backprop.
    """
    given = {ConstraintKind.FISHER: omega_f, ConstraintKind.SOBOLEV: omega_s, ConstraintKind.GP: omega_gp}
    for kind, value in given.items():
        if (value is not None) != (kind in state.active):
            what = "provided for unconfigured" if value is not None else "missing for configured"
            raise ValueError(f"estimate {what} constraint {kind.value}")
    total = 0.0
    if omega_f is not None:
        gap = 1.0 - omega_f
        total = total + state.lambda_f * gap - 0.5 * state.rho_f * gap ** 2
    if omega_s is not None:
        gap = 1.0 - omega_s
        total = total + state.lambda_s * gap - 0.5 * state.rho_s * gap ** 2
    if omega_gp is not None:
        total = total - state.lambda_gp * omega_gp
    return total


def alm_update(state: ConstraintState, omega_hat: float, which: ConstraintKind) -> ConstraintState:
    """lambda <- lambda + rho * (Om - 1) for the chosen ALM constraint."""
    which = ConstraintKind(which)
    omega_hat = float(omega_hat)
    if which == ConstraintKind.FISHER:
        return dataclasses.replace(state, lambda_f=state.lambda_f + state.rho_f * (omega_hat - 1.0))
    if which == ConstraintKind.SOBOLEV:
        return dataclasses.replace(state, lambda_s=state.lambda_s + state.rho_s * (omega_hat - 1.0))
    raise ValueError("the gradient penalty uses a fixed weight; it has no multiplier to update")
