"""Linear-beta diffusion schedule and the per-timestep coefficients derived from it.

Arrays are indexed by timestep directly: ``alpha_bar[0] == 1`` and
``sigma[0] == 0`` are padding entries, so ``alpha_bar[t]`` is the coefficient
of step ``t`` for ``t = 1..T``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, NumericalError

# Radicands of 1 - abar_{t-1} - sigma_t^2 this close to zero are rounding noise.
_RADICAND_SLACK = 1e-14


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    beta_min: float
    beta_max: float
    eta: float
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.beta, self.alpha_bar, self.sigma):
            arr.setflags(write=False)

    @property
    def params(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max, "eta": self.eta}

    @property
    def schedule_id(self) -> str:
        """Hash of the construction parameters; two equal schedules share it."""
        return schedule_hash(self.T, self.beta_min, self.beta_max, self.eta)

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.T):
            raise InvalidParameterError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def equivalent_noise_std(self, t: int) -> float:
        return equivalent_noise_std(self, t)

    def drift_coefficient(self, t: int) -> float:
        return drift_coefficient(self, t)

    def direction_coefficient(self, t: int) -> float:
        """sqrt(1 - abar_{t-1} - sigma_t^2), the weight of eps in the reverse mean."""
        self.check_t(t)
        return _direction_coefficient(self.alpha_bar[t - 1], self.sigma[t])

    def __eq__(self, other):
        if not isinstance(other, Schedule):
            return NotImplemented
        return self.params == other.params

    def __hash__(self):
        return hash(self.schedule_id)


def schedule_hash(T: int, beta_min: float, beta_max: float, eta: float) -> str:
    payload = json.dumps(
        {"T": int(T), "beta_min": float(beta_min), "beta_max": float(beta_max), "eta": float(eta)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def build_schedule(T: int = 200, beta_min: float = 1e-4, beta_max: float = 0.02, eta: float = 1.0) -> Schedule:
    """Linear beta schedule with DDPM (eta=1) to DDIM (eta=0) reverse noise levels."""
    if int(T) != T or T < 2:
        raise InvalidParameterError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidParameterError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if not (0.0 <= eta <= 1.0):
        raise InvalidParameterError(f"eta must lie in [0, 1], got {eta}")
    T = int(T)

    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    if not np.all(np.diff(alpha_bar) < 0) or alpha_bar[-1] <= 0.0:
        raise InvalidParameterError("alpha_bar is not strictly decreasing inside (0, 1)")

    sigma = np.zeros(T + 1)
    prev, cur = alpha_bar[:-1], alpha_bar[1:]
    sigma[1:] = eta * np.sqrt((1.0 - prev) / (1.0 - cur)) * np.sqrt(1.0 - cur / prev)

    s = Schedule(T=T, beta_min=float(beta_min), beta_max=float(beta_max), eta=float(eta),
                 beta=beta, alpha_bar=alpha_bar, sigma=sigma)
    radicand = 1.0 - prev - sigma[1:] ** 2
    if np.any(radicand < -_RADICAND_SLACK):
        raise InvalidParameterError("1 - abar_{t-1} - sigma_t^2 < 0 for some t")
    return s


def schedule_from_params(params: dict) -> Schedule:
    return build_schedule(params["T"], params["beta_min"], params["beta_max"], params["eta"])


def noise_std_from_alpha_bar(alpha_bar: float) -> float:
    return math.sqrt((1.0 - alpha_bar) / alpha_bar)


def equivalent_noise_std(s: Schedule, t: int) -> float:
    """Noise std of x_t / sqrt(abar_t) viewed as a Gaussian denoising observation of x_0."""
    s.check_t(t)
    return noise_std_from_alpha_bar(float(s.alpha_bar[t]))


def _direction_coefficient(alpha_bar_prev: float, sigma_t: float) -> float:
    radicand = 1.0 - alpha_bar_prev - sigma_t**2
    if radicand < 0.0:
        if radicand < -_RADICAND_SLACK:
            raise NumericalError(f"negative radicand 1 - abar_prev - sigma^2 = {radicand:.3e}")
        radicand = 0.0
    return math.sqrt(radicand)


def drift_coefficient_from(alpha_bar_prev: float, alpha_bar_t: float, sigma_t: float) -> float:
    """c_t for raw coefficients; converts an x0-space shift into a reverse-mean shift."""
    return math.sqrt(alpha_bar_prev) - math.sqrt(alpha_bar_t) * _direction_coefficient(
        alpha_bar_prev, sigma_t
    ) / math.sqrt(1.0 - alpha_bar_t)


def drift_coefficient(s: Schedule, t: int) -> float:
    s.check_t(t)
    return drift_coefficient_from(float(s.alpha_bar[t - 1]), float(s.alpha_bar[t]), float(s.sigma[t]))
