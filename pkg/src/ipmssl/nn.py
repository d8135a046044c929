"""Network building blocks: normalization variants, feature extractor, generator, checkpoints.

Everything runs in float64 on CPU.  Reverse-mode gradients (including the
double backward through input-gradient norms) come from torch autograd; the
normalization layers below are written with plain tensor ops so autograd
differentiates exactly the formulas stated here.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn

from .config import ArchSpec, NormSpec

DTYPE = torch.float64
NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "ipmssl-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or loss contains NaN or Inf."""


class DoubleBackwardError(RuntimeError):
    pass


def check_finite(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return t


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[:, :, None, None]
    if x.dim() != 4:
        raise ValueError(f"expected (N, D) or (N, C, H, W) activations, got shape {tuple(x.shape)}")
    return x


def layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor, stats: str,
               eps: float = NORM_EPS) -> torch.Tensor:
    """g * (x - mu) / sqrt(var + eps) + b with per-sample statistics.

    ``stats="singleton"`` pools mu/var over all C*H*W positions of a sample;
    ``stats="channel"`` pools over H*W separately for each channel.  Variance
    is the biased (population) estimate.  g and b broadcast against (C, H, W).
    Dense (N, D) input is treated as (N, D, 1, 1).
    """
    x4 = _as_4d(x)
    c, h, w = x4.shape[1:]
    for name, p in (("g", g), ("b", b)):
        if p.dim() != 3 or any(ps not in (1, xs) for ps, xs in zip(p.shape, (c, h, w))):
            raise ValueError(f"layer norm {name} shape {tuple(p.shape)} does not broadcast to {(c, h, w)}")
    dims = (1, 2, 3) if stats == "singleton" else (2, 3)
    if stats not in ("singleton", "channel"):
        raise ValueError(f"unknown stats scope {stats!r}")
    mu = x4.mean(dim=dims, keepdim=True)
    var = ((x4 - mu) ** 2).mean(dim=dims, keepdim=True)
    y = g * (x4 - mu) / torch.sqrt(var + eps) + b
    return y.reshape(x.shape)


def batch_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor,
               running_mean: torch.Tensor | None = None, running_var: torch.Tensor | None = None,
               training: bool = True, momentum: float = 0.1, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-channel statistics pooled over (N, H, W); g, b have shape (C,)."""
    x4 = _as_4d(x)
    if training:
        if x4.shape[0] < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2 samples")
        mu = x4.mean(dim=(0, 2, 3))
        var = ((x4 - mu[None, :, None, None]) ** 2).mean(dim=(0, 2, 3))
        if running_mean is not None:
            with torch.no_grad():
                running_mean.mul_(1 - momentum).add_(momentum * mu.detach())
                running_var.mul_(1 - momentum).add_(momentum * var.detach())
    else:
        mu, var = running_mean, running_var
    shape = (1, -1, 1, 1)
    y = g.view(shape) * (x4 - mu.view(shape)) / torch.sqrt(var.view(shape) + eps) + b.view(shape)
    return y.reshape(x.shape)


class LayerNorm(nn.Module):
    def __init__(self, channels: int, height: int = 1, width: int = 1,
                 stats: str = "singleton", params: str = "channel", eps: float = NORM_EPS):
        super().__init__()
        shape = (channels, 1, 1) if params == "channel" else (1, height, width)
        if params not in ("channel", "pixel"):
            raise ValueError(f"unknown param scope {params!r}")
        self.stats = stats
        self.eps = eps
        self.g = nn.Parameter(torch.ones(shape, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(shape, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.g, self.b, self.stats, self.eps)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, eps: float = NORM_EPS, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.g = nn.Parameter(torch.ones(channels, dtype=DTYPE))
        self.b = nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=DTYPE))

    def forward(self, x):
        return batch_norm(x, self.g, self.b, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


def make_norm(spec: NormSpec, channels: int, height: int = 1, width: int = 1) -> nn.Module:
    """Norm layer for a (channels, height, width) activation.

    Per-channel statistics over a 1x1 map are a single value (zero variance),
    so dense layers fall back to singleton statistics.
    """
    if spec.kind == "batch":
        return BatchNorm(channels)
    if spec.kind == "layer":
        stats = "singleton" if height * width == 1 else spec.stats
        return LayerNorm(channels, height, width, stats, spec.params)
    return nn.Identity()


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class FeatureExtractor(nn.Module):
    """Phi: stacked (affine -> norm -> leaky ReLU) blocks ending in ``feature_dim`` units.

    The MLP maps ``input_dim -> hidden... -> feature_dim``.  The conv variant
    runs 3x3 convolutions (stride 1 for the first, 2 afterwards) over
    ``input_shape`` and finishes with a dense block to ``feature_dim``.
    """

    def __init__(self, arch: ArchSpec, norm: NormSpec, input_shape: tuple[int, ...]):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.feature_dim = arch.feature_dim
        act = lambda: nn.LeakyReLU(arch.leaky_slope)  # noqa: E731
        layers: list[nn.Module] = []
        if arch.kind == "mlp":
            width = 1
            for s in self.input_shape:
                width *= s
            if len(self.input_shape) > 1:
                layers.append(nn.Flatten())
            for out in (*arch.hidden, arch.feature_dim):
                layers += [nn.Linear(width, out, dtype=DTYPE), make_norm(norm, out), act()]
                width = out
        else:
            c, h, w = self.input_shape
            for i, out in enumerate(arch.channels):
                stride = 1 if i == 0 else 2
                conv = nn.Conv2d(c, out, 3, stride=stride, padding=1, dtype=DTYPE)
                h, w = (h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1
                layers += [conv, make_norm(norm, out, h, w), act()]
                c = out
            layers += [nn.Flatten(), nn.Linear(c * h * w, arch.feature_dim, dtype=DTYPE),
                       make_norm(norm, arch.feature_dim), act()]
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return check_finite(self.net(x), "feature extractor output")


class Generator(nn.Module):
    """g_theta: noise -> (Linear -> BN -> ReLU)* -> Linear -> output activation.

    Batch norm is always on, independent of the critic's normalization.
    """

    def __init__(self, noise_dim: int, hidden: tuple[int, ...], output_shape: tuple[int, ...],
                 output_activation: str = "identity"):
        super().__init__()
        self.noise_dim = noise_dim
        self.output_shape = tuple(output_shape)
        out_dim = 1
        for s in self.output_shape:
            out_dim *= s
        layers: list[nn.Module] = []
        width = noise_dim
        for hdim in hidden:
            layers += [nn.Linear(width, hdim, dtype=DTYPE), BatchNorm(hdim), nn.ReLU()]
            width = hdim
        layers.append(nn.Linear(width, out_dim, dtype=DTYPE))
        if output_activation == "tanh":
            layers.append(nn.Tanh())
        elif output_activation != "identity":
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.net = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, z):
        out = self.net(z).reshape(z.shape[0], *self.output_shape)
        return check_finite(out, "generator output")


def input_gradients(h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-sample gradient of ``h`` (shape (N,)) w.r.t. ``x``, kept differentiable.

    Rows of ``h`` must depend only on their own sample (no batch norm), so the
    gradient of ``h.sum()`` holds each sample's own input gradient.
    """
    if not h.requires_grad:
        return torch.zeros_like(x).reshape(x.shape[0], -1)
    try:
        (grad,) = torch.autograd.grad(h.sum(), x, create_graph=True, allow_unused=True)
    except RuntimeError as exc:
        raise DoubleBackwardError(f"cannot differentiate through input gradients: {exc}") from exc
    if grad is None:
        grad = torch.zeros_like(x)
    return grad.reshape(grad.shape[0], -1)


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write a JSON checkpoint: {format, version, meta, params: {name: {shape, values}}}.

    Values are flattened row-major and written with Python's shortest
    round-tripping float repr, so load(save(p)) is exact.
    """
    params = {}
    for name, t in tensors.items():
        t = t.detach().to(DTYPE).contiguous()
        params[name] = {"shape": list(t.shape), "values": t.reshape(-1).tolist()}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}, "params": params}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {name: torch.tensor(p["values"], dtype=DTYPE).reshape(p["shape"])
               for name, p in doc["params"].items()}
    return tensors, doc.get("meta", {})
