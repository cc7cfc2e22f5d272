"""Single reverse-diffusion steps shared by inversion, sampling and PC extraction."""

from __future__ import annotations

import numpy as np

from .denoiser import Condition, EpsPrediction, GaussianMixturePrior, guided_eps, x0_from_eps
from .schedule import Schedule


def reverse_mean(x_t: np.ndarray, eps: np.ndarray, t: int, s: Schedule) -> np.ndarray:
    """mu_t = sqrt(abar_{t-1}) P(eps) + sqrt(1 - abar_{t-1} - sigma_t^2) eps."""
    x0 = x0_from_eps(x_t, eps, float(s.alpha_bar[t]))
    return np.sqrt(s.alpha_bar[t - 1]) * x0 + s.direction_coefficient(t) * eps


def mean_step(prior: GaussianMixturePrior, cond: Condition, w: float, x_t: np.ndarray, t: int,
              s: Schedule) -> tuple[np.ndarray, EpsPrediction, int]:
    """Guided prediction at (x_t, t) and the reverse mean it implies."""
    pred, nfe = guided_eps(prior, cond, w, x_t, t, s)
    return reverse_mean(x_t, pred.eps_hat, t, s), pred, nfe
