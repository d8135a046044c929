"""Critic heads on top of the feature extractor: plain, K+1, and entropy-normalized K+1."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ArchSpec, ConstraintTarget, CriticFormulation, NormSpec
from .nn import DTYPE, FeatureExtractor, check_finite


def classifier_probs(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    check_finite(logits, "logits")
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_probs(logits: torch.Tensor) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=DTYPE)
    check_finite(logits, "logits")
    m = logits.max(dim=-1, keepdim=True).values.detach()
    z = logits - m
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


def entropy_real_critic(logits: torch.Tensor) -> torch.Tensor:
    """Negative entropy sum_y p log p of the classifier, i.e. f_plus - log Z.

    Invariant to adding a constant to all logits.  Lies in [-log K, 0].
    """
    lp = log_probs(logits)
    return (torch.exp(lp) * lp).sum(dim=-1)


@dataclass
class CriticOutputs:
    logits: torch.Tensor
    probs: torch.Tensor
    f: torch.Tensor
    f_plus: torch.Tensor | None = None
    f_minus: torch.Tensor | None = None

    def component(self, target: ConstraintTarget) -> torch.Tensor:
        if target == ConstraintTarget.FULL:
            return self.f
        out = self.f_plus if target == ConstraintTarget.REAL else self.f_minus
        if out is None:
            raise ValueError(f"{target.value} is not defined for the plain critic")
        return out


class Critic(nn.Module):
    """f built from Phi(x), K class directions S (rows) and a fake direction v.

    K+1:          f = sum_y p(y|x) <S_y, Phi> - <v, Phi>
    K+1 entropy:  f = sum_y p(y|x) log p(y|x) - <v, Phi>
    plain:        f = <v, Phi>   (S only feeds the classifier)
    """

    def __init__(self, arch: ArchSpec, norm: NormSpec, input_shape, n_classes: int,
                 formulation: CriticFormulation = CriticFormulation.K_PLUS_ONE):
        super().__init__()
        if n_classes < 1:
            raise ValueError("critic needs at least one class")
        self.formulation = CriticFormulation(formulation)
        self.phi = FeatureExtractor(arch, norm, input_shape)
        m = arch.feature_dim
        self.S = nn.Parameter(torch.randn(n_classes, m, dtype=DTYPE) * 0.02)
        self.v = nn.Parameter(torch.randn(m, dtype=DTYPE) * 0.02)

    @property
    def n_classes(self) -> int:
        return self.S.shape[0]

    def forward(self, x: torch.Tensor) -> CriticOutputs:
        return critic_forward(self.phi(x), self.S, self.v, self.formulation)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """{"backbone": omega and S, "v": [v]}; weight decay is assigned per group."""
        return {"backbone": [*self.phi.parameters(), self.S], "v": [self.v]}


def critic_forward(features: torch.Tensor, S: torch.Tensor, v: torch.Tensor,
                   formulation: CriticFormulation) -> CriticOutputs:
    features = torch.as_tensor(features, dtype=DTYPE)
    S = torch.as_tensor(S, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    if features.dim() != 2 or S.dim() != 2 or v.dim() != 1:
        raise ValueError("expected features (N, m), S (K, m), v (m,)")
    if S.shape[1] != features.shape[1] or v.shape[0] != features.shape[1]:
        raise ValueError(f"dimension mismatch: Phi has {features.shape[1]} features, "
                         f"S rows {S.shape[1]}, v {v.shape[0]}")
    logits = features @ S.T
    probs = classifier_probs(logits)
    fake = features @ v
    formulation = CriticFormulation(formulation)
    if formulation == CriticFormulation.PLAIN:
        out = CriticOutputs(logits, probs, f=fake)
    else:
        if formulation == CriticFormulation.K_PLUS_ONE:
            real = (probs * logits).sum(dim=-1)
        else:
            real = entropy_real_critic(logits)
        out = CriticOutputs(logits, probs, f=real - fake, f_plus=real, f_minus=fake)
    check_finite(out.f, "critic output")
    return out

