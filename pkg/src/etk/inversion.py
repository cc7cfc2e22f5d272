"""Noise-space inversion of a clean signal.

``ddpm_invert`` produces the edit-friendly representation: independently
noised states x_1..x_{T_start}, then the noise vectors that make the DDPM
reverse process pass exactly through them. ``ddim_invert`` and
``sdedit_noise`` are the deterministic and noise-and-denoise baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container, rng
from .denoiser import Condition, GaussianMixturePrior, guided_eps, x0_from_eps
from .errors import FormatError, InvalidParameterError, NumericalError, ScheduleMismatchError
from .schedule import Schedule
from .steps import mean_step


@dataclass(frozen=True, eq=False)
class NoiseTrajectory:
    """Everything needed to regenerate a signal with the DDPM reverse process.

    ``z`` holds z_{T_start}, ..., z_2 in that order (row ``T_start - t``). On
    steps listed in ``raw_steps`` (sigma_t == 0) the row stores the raw
    difference x_{t-1} - mu_t instead of a normalized noise. ``residual`` is the
    final-step difference x_0 - mu_1(x_1), since sigma_1 = 0.

    ``states`` and ``x0_hats`` cache the auxiliary x_t and the source
    predictions computed during inversion (row index = timestep). They are
    in-memory only and are not written to disk.
    """

    T_start: int
    x_start: np.ndarray
    z: np.ndarray
    residual: np.ndarray
    cond_src: Condition
    guidance_src: float
    schedule_id: str
    seed: int
    raw_steps: tuple[int, ...] = ()
    nfe: int = 0
    states: np.ndarray | None = field(default=None, repr=False)
    x0_hats: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.z.shape != (max(self.T_start - 1, 0), self.x_start.shape[0]):
            raise InvalidParameterError(
                f"z has shape {self.z.shape}, expected ({self.T_start - 1}, {self.x_start.shape[0]})"
            )
        for arr in (self.x_start, self.z, self.residual):
            if not np.all(np.isfinite(arr)):
                raise NumericalError("trajectory contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.x_start.shape[0]

    def noise(self, t: int) -> np.ndarray:
        if not (2 <= t <= self.T_start):
            raise InvalidParameterError(f"no stored noise for t={t} (T_start={self.T_start})")
        return self.z[self.T_start - t]

    def check_schedule(self, s: Schedule) -> None:
        if s.schedule_id != self.schedule_id:
            raise ScheduleMismatchError(
                f"trajectory was built under schedule {self.schedule_id}, got {s.schedule_id}"
            )

    def without_cache(self) -> "NoiseTrajectory":
        return NoiseTrajectory(self.T_start, self.x_start, self.z, self.residual, self.cond_src,
                               self.guidance_src, self.schedule_id, self.seed, self.raw_steps, self.nfe)

    def truncated(self, T_new: int) -> "NoiseTrajectory":
        """The trajectory of the same inversion started at T_new <= T_start.

        Needs the in-memory state cache, since x_{T_new} is an auxiliary state.
        """
        if not (1 <= T_new <= self.T_start):
            raise InvalidParameterError(f"cannot truncate a trajectory from {self.T_start} to {T_new}")
        if T_new == self.T_start:
            return self
        if self.states is None:
            raise InvalidParameterError("truncation needs the inversion state cache")
        return NoiseTrajectory(
            T_start=T_new,
            x_start=self.states[T_new].copy(),
            z=self.z[self.T_start - T_new:],
            residual=self.residual,
            cond_src=self.cond_src,
            guidance_src=self.guidance_src,
            schedule_id=self.schedule_id,
            seed=self.seed,
            raw_steps=tuple(t for t in self.raw_steps if t <= T_new),
            nfe=self.nfe,
            states=self.states[:T_new + 1],
            x0_hats=None if self.x0_hats is None else self.x0_hats[:T_new + 1],
        )

    def to_container(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "trajectory",
            "T_start": self.T_start,
            "dim": self.dim,
            "seed": self.seed,
            "schedule_id": self.schedule_id,
            "condition": self.cond_src.to_dict(),
            "guidance_src": self.guidance_src,
            "raw_steps": list(self.raw_steps),
            "nfe": self.nfe,
        }
        return meta, {"x_start": self.x_start, "z": self.z, "residual": self.residual}

    @classmethod
    def from_container(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "NoiseTrajectory":
        if meta.get("kind") != "trajectory":
            raise FormatError(f"expected a trajectory container, found {meta.get('kind')!r}")
        try:
            return cls(
                T_start=int(meta["T_start"]),
                x_start=arrays["x_start"],
                z=arrays["z"].reshape(max(int(meta["T_start"]) - 1, 0), int(meta["dim"])),
                residual=arrays["residual"],
                cond_src=Condition.from_dict(meta["condition"]),
                guidance_src=float(meta["guidance_src"]),
                schedule_id=str(meta["schedule_id"]),
                seed=int(meta["seed"]),
                raw_steps=tuple(int(t) for t in meta["raw_steps"]),
                nfe=int(meta["nfe"]),
            )
        except KeyError as exc:
            raise FormatError(f"trajectory container missing {exc.args[0]!r}") from exc

    def save(self, path) -> None:
        container.write(path, *self.to_container())

    @classmethod
    def load(cls, path) -> "NoiseTrajectory":
        return cls.from_container(*container.read(path, "trajectory"))


def _check_signal(x0, prior: GaussianMixturePrior) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1 or x0.shape[0] != prior.dim:
        raise InvalidParameterError(f"signal of shape {x0.shape} does not match prior dimension {prior.dim}")
    if not np.all(np.isfinite(x0)):
        raise NumericalError("non-finite source signal")
    return x0


def auxiliary_states(x0: np.ndarray, s: Schedule, T_start: int, seed: int) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps_t with eps_t drawn per t; row t, row 0 = x0."""
    states = np.empty((T_start + 1, x0.shape[0]))
    states[0] = x0
    for t in range(1, T_start + 1):
        eps = rng.normal(seed, rng.INVERSION, t, size=x0.shape[0])
        ab = s.alpha_bar[t]
        states[t] = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return states


def ddpm_invert(x0, prior: GaussianMixturePrior, cond_src: Condition, w_src: float, s: Schedule,
                T_start: int, seed: int) -> NoiseTrajectory:
    """Edit-friendly DDPM inversion of ``x0`` up to ``T_start``.

    Runs in two phases: all noised states are drawn first, then each noise
    vector is isolated from its own pair (x_t, x_{t-1}); the second phase has
    no cross-step dependence.
    """
    x0 = _check_signal(x0, prior)
    T_start = s.check_t(T_start)

    states = auxiliary_states(x0, s, T_start, seed)

    n = x0.shape[0]
    z = np.empty((T_start - 1, n))
    x0_hats = np.full((T_start + 1, n), np.nan)
    raw_steps = []
    residual = None
    nfe = 0
    for t in range(T_start, 0, -1):
        mu, pred, cost = mean_step(prior, cond_src, w_src, states[t], t, s)
        nfe += cost
        x0_hats[t] = pred.x0_hat
        diff = states[t - 1] - mu
        if t == 1:
            residual = diff
        elif s.sigma[t] > 0.0:
            z[T_start - t] = diff / s.sigma[t]
        else:
            z[T_start - t] = diff
            raw_steps.append(t)
        if not np.all(np.isfinite(diff)):
            raise NumericalError(f"non-finite noise vector at t={t}")

    return NoiseTrajectory(
        T_start=T_start,
        x_start=states[T_start].copy(),
        z=z,
        residual=residual,
        cond_src=cond_src,
        guidance_src=float(w_src),
        schedule_id=s.schedule_id,
        seed=int(seed),
        raw_steps=tuple(sorted(raw_steps, reverse=True)),
        nfe=nfe,
        states=states,
        x0_hats=x0_hats,
    )


def ddim_invert(x0, prior: GaussianMixturePrior, cond: Condition, w: float, s: Schedule, T_stop: int,
                refine: int = 0) -> tuple[np.ndarray, int]:
    """Deterministic DDIM inversion of ``x0`` up to ``T_stop``; returns (x_{T_stop}, nfe).

    Step t -> t+1 evaluates the denoiser at (x_t, t+1), the usual explicit
    approximation of the implicit inverse. ``refine`` > 0 adds that many
    fixed-point corrections per step, re-evaluating at the current estimate of
    x_{t+1}, which makes the inversion consistent with ``ddim_reverse``.
    """
    x = _check_signal(x0, prior)
    T_stop = s.check_t(T_stop)
    if refine < 0:
        raise InvalidParameterError("refine must be non-negative")
    nfe = 0
    for t in range(0, T_stop):
        ab_t, ab_next = float(s.alpha_bar[t]), float(s.alpha_bar[t + 1])
        probe = x
        for _ in range(refine + 1):
            pred, cost = guided_eps(prior, cond, w, probe, t + 1, s)
            nfe += cost
            eps = pred.eps_hat
            x0_hat = x0_from_eps(x, eps, ab_t)
            probe = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps
        x = probe
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite DDIM inversion state at t={t + 1}")
    return x, nfe


def sdedit_noise(x0, s: Schedule, T_start: int, seed: int) -> np.ndarray:
    """sqrt(abar) x0 + sqrt(1 - abar) eps at T_start, from the seeded sdedit stream."""
    x0 = np.asarray(x0, dtype=np.float64)
    T_start = s.check_t(T_start)
    ab = s.alpha_bar[T_start]
    eps = rng.normal(seed, rng.SDEDIT, 0, size=x0.shape[0])
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
