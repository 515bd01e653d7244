"""
Reconstruction losses (MSE, MSLE, Log-Cosh, SSIM), the L1 sparsity penalty and
the CVAE KL term.

Every loss has a batched torch form (`per_sample`, differentiable, used by
training and scoring) and a whole-array form returning a LossResult with the
gradient with respect to the prediction.
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from sdd.exceptions import DomainError, InvalidArgumentError, ShapeError

ArrayLike = Union[np.ndarray, torch.Tensor, float, list]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LOG2 = math.log(2.0)


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray  # d value / d prediction, shaped like the prediction


def _pair(y: ArrayLike, y_hat: ArrayLike) -> Tuple[torch.Tensor, torch.Tensor]:
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float64) if not isinstance(y, torch.Tensor) else y)
    p_t = torch.as_tensor(np.asarray(y_hat, dtype=np.float64) if not isinstance(y_hat, torch.Tensor) else y_hat)
    if y_t.shape != p_t.shape:
        raise ShapeError(f"target shape {tuple(y_t.shape)} != prediction shape {tuple(p_t.shape)}")
    return y_t, p_t


def _per_sample_mean(values: torch.Tensor) -> torch.Tensor:
    return values.reshape(values.shape[0], -1).mean(dim=1)


def _per_sample_sum(values: torch.Tensor) -> torch.Tensor:
    return values.reshape(values.shape[0], -1).sum(dim=1)


# =============================================================================
# ELEMENTWISE LOSSES
# =============================================================================

def mse_per_sample(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    return _per_sample_mean((y - y_hat) ** 2)


def msle_per_sample(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    if (y < 0).any() or (y_hat < 0).any():
        raise DomainError("MSLE needs non-negative targets and predictions")
    return _per_sample_mean((torch.log1p(y) - torch.log1p(y_hat)) ** 2)


def log_cosh(z: torch.Tensor) -> torch.Tensor:
    """log(cosh z) as |z| + log((1 + exp(-2|z|)) / 2); never overflows."""
    a = z.abs()
    return a + torch.log1p(torch.exp(-2.0 * a)) - LOG2


def logcosh_per_sample(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    return _per_sample_sum(log_cosh(y_hat - y))


# =============================================================================
# SSIM
# =============================================================================

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """SSIM over valid 11x11 Gaussian windows, per channel. Inputs (N, C, H, W) with dynamic range 1."""
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"Image {tuple(x.shape[-2:])} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    channels = x.shape[1]
    window = gaussian_window(dtype=x.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return numerator / denominator


def _as_images(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:
        return t[None, None]
    if t.dim() == 3:
        return t[None]
    if t.dim() == 4:
        return t
    raise InvalidArgumentError(f"SSIM needs 2-D images, got shape {tuple(t.shape)}")


def ssim(x: ArrayLike, y: ArrayLike) -> float:
    """Mean SSIM (channels averaged)."""
    x_t, y_t = _pair(x, y)
    return float(ssim_map(_as_images(x_t), _as_images(y_t)).mean())


def ssim_per_sample(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    # per-channel SSIM maps, averaged over channels and positions
    return 1.0 - _per_sample_mean(ssim_map(y_hat, y))


# =============================================================================
# REGISTRY
# =============================================================================

PerSampleLoss = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

LOSSES: Dict[str, PerSampleLoss] = {
    "mse": mse_per_sample,
    "msle": msle_per_sample,
    "ssim": ssim_per_sample,
    "logcosh": logcosh_per_sample,
}


def get_loss(loss_id: str) -> PerSampleLoss:
    try:
        return LOSSES[loss_id]
    except KeyError:
        raise InvalidArgumentError(f"Unknown loss '{loss_id}'; expected one of {sorted(LOSSES)}") from None


def reconstruction_loss(loss_id: str, y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Per-sample loss of a (N, C, H, W) reconstruction; SSIM averages its channels."""
    if y.shape != y_hat.shape:
        raise ShapeError(f"target shape {tuple(y.shape)} != reconstruction shape {tuple(y_hat.shape)}")
    return get_loss(loss_id)(y, y_hat)


def _evaluate(loss_id: str, y: ArrayLike, y_hat: ArrayLike) -> LossResult:
    y_t, p_t = _pair(y, y_hat)
    p_t = p_t.detach().clone().requires_grad_(True)
    batched_y, batched_p = y_t.reshape(1, -1), p_t.reshape(1, -1)
    if loss_id == "ssim":
        batched_y, batched_p = _as_images(y_t), _as_images(p_t)
    with torch.enable_grad():
        value = get_loss(loss_id)(batched_y, batched_p).sum()
        (grad,) = torch.autograd.grad(value, p_t)
    return LossResult(value=float(value.detach()), grad=grad.numpy())


def mse(y: ArrayLike, y_hat: ArrayLike) -> LossResult:
    """(1/n) sum (y - y_hat)^2; grad (2/n)(y_hat - y)."""
    return _evaluate("mse", y, y_hat)


def msle(y: ArrayLike, y_hat: ArrayLike) -> LossResult:
    return _evaluate("msle", y, y_hat)


def logcosh(y: ArrayLike, y_hat: ArrayLike) -> LossResult:
    """sum log cosh(y_hat - y); grad tanh(y_hat - y)."""
    return _evaluate("logcosh", y, y_hat)


def ssim_loss(y: ArrayLike, y_hat: ArrayLike) -> LossResult:
    """1 - mean SSIM map; 2-D images or stacks of channels."""
    return _evaluate("ssim", y, y_hat)


# =============================================================================
# REGULARIZERS
# =============================================================================

def sparsity_term(latent: torch.Tensor, weight: float) -> torch.Tensor:
    return weight * latent.abs().mean()


def sparsity_penalty(latent: ArrayLike, weight: float) -> LossResult:
    """weight * mean |z| (L1); grad weight / n * sign(z)."""
    if weight < 0:
        raise InvalidArgumentError("sparsity weight must be non-negative")
    z = torch.as_tensor(np.asarray(latent, dtype=np.float64)).requires_grad_(True)
    with torch.enable_grad():
        value = sparsity_term(z, weight)
        (grad,) = torch.autograd.grad(value, z)
    return LossResult(value=float(value.detach()), grad=grad.numpy())


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample -1/2 sum(1 + logvar - mu^2 - exp(logvar)) against N(0, I)."""
    return -0.5 * _per_sample_sum(1.0 + logvar - mu * mu - torch.exp(logvar))
