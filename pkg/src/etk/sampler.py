"""Reverse-diffusion loops: replay, regeneration under a new condition, SDEdit and DDIM.

Cost is counted in NFEs, one per denoiser branch evaluated: a step guided by
a conditional prompt evaluates both CFG branches and costs 2, an unconditional
step costs 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import rng
from .denoiser import Condition, GaussianMixturePrior, guided_eps, nfe_per_call
from .errors import InvalidParameterError, NumericalError
from .inversion import NoiseTrajectory
from .schedule import Schedule
from .steps import mean_step, reverse_mean

METHODS = ("ddpm-replay", "zeta", "sdedit", "ddim", "ddim-partial", "zeus")
PER_STEP = "per-step"
DEFAULT_DELTA = 0.025


@dataclass(frozen=True)
class EditPlan:
    method: str
    cond_src: Condition = field(default_factory=Condition)
    cond_tgt: Condition = field(default_factory=Condition)
    w_src: float = 3.0
    w_tgt: float = 12.0
    T_start: int = 100
    T_end: int = 1
    t_prime: int | str | None = None
    gamma: float = 0.0
    pc_selector: tuple[tuple[int, float], ...] = ()
    mask: tuple[int, ...] | None = None
    delta: float = DEFAULT_DELTA
    seed: int = 0
    # sdedit denoises with the target condition unless told to use the source one
    sdedit_prompt: str = "target"
    ddim_refine: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameterError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.sdedit_prompt not in ("target", "source"):
            raise InvalidParameterError("sdedit_prompt must be 'target' or 'source'")
        if not (0.0 <= self.delta <= 1.0):
            raise InvalidParameterError(f"delta must lie in [0, 1], got {self.delta}")
        if self.method == "zeus" and not self.pc_selector:
            raise InvalidParameterError("zeus plans need a non-empty pc_selector")
        if self.t_prime is not None and self.t_prime != PER_STEP and not isinstance(self.t_prime, int):
            raise InvalidParameterError(f"t_prime must be an int, {PER_STEP!r} or None")
        object.__setattr__(self, "pc_selector", tuple((int(i), float(c)) for i, c in self.pc_selector))
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(sorted({int(i) for i in self.mask})))

    def validate(self, s: Schedule, dim: int | None = None) -> None:
        """Checks that need the schedule (and optionally the signal dimension)."""
        if not (s.T >= self.T_start >= self.T_end >= 1):
            raise InvalidParameterError(
                f"need T >= T_start >= T_end >= 1, got T={s.T}, T_start={self.T_start}, T_end={self.T_end}"
            )
        if self.method == "ddim" and self.T_start != s.T:
            raise InvalidParameterError("full DDIM inversion runs from T_start = T; use ddim-partial otherwise")
        if self.method == "zeus":
            if self.t_prime is None:
                raise InvalidParameterError("zeus plans need t_prime (a timestep or 'per-step')")
            if self.t_prime != PER_STEP and not (1 <= self.t_prime <= s.T):
                raise InvalidParameterError(f"t_prime {self.t_prime} outside [1, {s.T}]")
        if self.mask is not None and self.method not in ("ddpm-replay", "zeta", "zeus"):
            raise InvalidParameterError(f"masking is not supported for {self.method}")
        if self.mask is not None and dim is not None:
            if any(i < 0 or i >= dim for i in self.mask):
                raise InvalidParameterError(f"mask index out of range for dimension {dim}")

    @property
    def generation_cond(self) -> tuple[Condition, float]:
        if self.method in ("zeus", "ddpm-replay"):
            return self.cond_src, self.w_src
        if self.method == "sdedit" and self.sdedit_prompt == "source":
            return self.cond_src, self.w_src
        return self.cond_tgt, self.w_tgt


class Perturbation(Protocol):
    def mean_shift(self, t: int) -> np.ndarray | None: ...

    def eps_shift(self, t: int) -> np.ndarray | None: ...


@dataclass
class TraceStep:
    t: int
    x_t: np.ndarray
    x0_hat: np.ndarray
    mu: np.ndarray
    x_prev: np.ndarray
    nfe: int
    x_orig_prev: np.ndarray | None = None


@dataclass
class ReverseResult:
    x0: np.ndarray
    nfe: int
    trace: list[TraceStep] = field(default_factory=list)


def masked_blend(x_next, x_orig_next, mask: Sequence[int], delta: float) -> np.ndarray:
    """Pull coordinates outside ``mask`` a fraction ``delta`` back toward the source state."""
    x_next = np.asarray(x_next, dtype=np.float64)
    x_orig_next = np.asarray(x_orig_next, dtype=np.float64)
    if x_next.shape != x_orig_next.shape:
        raise InvalidParameterError(f"shape mismatch {x_next.shape} vs {x_orig_next.shape}")
    inside = np.zeros(x_next.shape[-1], dtype=bool)
    idx = np.asarray(list(mask), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x_next.shape[-1]):
        raise InvalidParameterError("mask index out of range")
    inside[idx] = True
    return np.where(inside, x_next, delta * x_orig_next + (1.0 - delta) * x_next)


def _noise_term(source, s: Schedule, t: int, dim: int) -> np.ndarray | None:
    if isinstance(source, NoiseTrajectory):
        if t == 1:
            return source.residual
        z = source.noise(t)
        return z if t in source.raw_steps else s.sigma[t] * z
    if s.sigma[t] == 0.0:
        return None
    return s.sigma[t] * rng.normal(source, rng.SDEDIT, t, size=dim)


def ddpm_reverse(start, noise_source, prior: GaussianMixturePrior, plan: EditPlan, s: Schedule,
                 perturbation: Perturbation | None = None, *, perturb_in: str = "mean",
                 record_trace: bool = False, cond: Condition | None = None,
                 guidance: float | None = None) -> ReverseResult:
    """DDPM reverse process from x_{T_start} down to x_0.

    ``noise_source`` is either a NoiseTrajectory (replay / regeneration) or an
    integer seed for fresh noise. The generation condition defaults to the
    plan's; ``perturb_in`` selects whether the perturbation is added to the
    reverse mean ("mean") or subtracted from the noise prediction ("eps").
    With a mask, a source replay runs alongside and every new state is
    blended toward it outside the mask; its NFEs are included in the count.
    """
    if perturb_in not in ("mean", "eps"):
        raise InvalidParameterError("perturb_in must be 'mean' or 'eps'")
    plan.validate(s, prior.dim)
    x = np.asarray(start, dtype=np.float64).copy()
    if x.shape != (prior.dim,):
        raise InvalidParameterError(f"start state of shape {x.shape} does not match dimension {prior.dim}")
    gen_cond, gen_w = plan.generation_cond
    if cond is not None:
        gen_cond = cond
    if guidance is not None:
        gen_w = guidance

    replay = isinstance(noise_source, NoiseTrajectory)
    if replay:
        noise_source.check_schedule(s)
        if noise_source.T_start != plan.T_start:
            raise InvalidParameterError(
                f"trajectory starts at {noise_source.T_start}, plan at {plan.T_start}"
            )
    if plan.mask is not None and not replay:
        raise InvalidParameterError("masked editing needs a source trajectory to blend toward")
    x_orig = noise_source.x_start.copy() if plan.mask is not None else None

    nfe = 0
    trace: list[TraceStep] = []
    for t in range(plan.T_start, 0, -1):
        pred, cost = guided_eps(prior, gen_cond, gen_w, x, t, s)
        nfe += cost
        eps = pred.eps_hat
        shift = None
        if perturbation is not None:
            if perturb_in == "eps":
                shift = perturbation.eps_shift(t)
                if shift is not None:
                    eps = eps - shift
            else:
                shift = perturbation.mean_shift(t)
        mu = reverse_mean(x, eps, t, s)
        if perturb_in == "mean" and shift is not None:
            mu = mu + shift
        noise = _noise_term(noise_source, s, t, prior.dim)
        x_prev = mu if noise is None else mu + noise

        orig_prev = None
        if x_orig is not None:
            mu_orig, _, cost = mean_step(prior, noise_source.cond_src, noise_source.guidance_src, x_orig, t, s)
            nfe += cost
            orig_prev = mu_orig + _noise_term(noise_source, s, t, prior.dim)
            x_prev = masked_blend(x_prev, orig_prev, plan.mask, plan.delta)
            x_orig = orig_prev

        if not np.all(np.isfinite(x_prev)):
            raise NumericalError(f"non-finite state produced at t={t}")
        if record_trace:
            trace.append(TraceStep(t, x, pred.x0_hat, mu, x_prev, nfe, orig_prev))
        x = x_prev
    return ReverseResult(x0=x, nfe=nfe, trace=trace)


def replay(traj: NoiseTrajectory, prior: GaussianMixturePrior, s: Schedule,
           record_trace: bool = False) -> ReverseResult:
    """Regenerate the source signal from its own trajectory and condition."""
    plan = EditPlan("ddpm-replay", cond_src=traj.cond_src, cond_tgt=traj.cond_src,
                    w_src=traj.guidance_src, w_tgt=traj.guidance_src, T_start=traj.T_start)
    return ddpm_reverse(traj.x_start, traj, prior, plan, s, record_trace=record_trace)


def ddim_reverse(start, prior: GaussianMixturePrior, plan: EditPlan, s: Schedule) -> tuple[np.ndarray, int]:
    """Deterministic (eta = 0) reverse process from T_start; the schedule's sigma is ignored."""
    plan.validate(s, prior.dim)
    cond, w = plan.generation_cond
    x = np.asarray(start, dtype=np.float64).copy()
    nfe = 0
    for t in range(plan.T_start, 0, -1):
        pred, cost = guided_eps(prior, cond, w, x, t, s)
        nfe += cost
        ab_prev = float(s.alpha_bar[t - 1])
        x0_hat = (x - np.sqrt(1.0 - s.alpha_bar[t]) * pred.eps_hat) / np.sqrt(s.alpha_bar[t])
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * pred.eps_hat
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite DDIM state at t={t - 1}")
    return x, nfe


def predict_nfe(plan: EditPlan, K: int = 50, N: int = 1) -> int:
    """Closed-form NFE count of running ``plan`` end to end.

    Inversion and generation each cost one (unconditional) or two (guided)
    NFEs per step. PC extraction costs K probes per PC and reuses the source
    predictions computed during inversion:

    * zeus, fixed t' <= T_start:  (1+S)(2 T_start + N K)
    * zeus, fixed t' >  T_start:  (1+S)(t' + T_start + N K)   (inversion extended to t')
    * zeus, per-step t':          (1+S)(2 T_start + (T_start - T_end + 1) N K)

    A mask adds one source replay of T_start guided-by-source steps.
    """
    src = nfe_per_call(plan.cond_src)
    gen_cond, _ = plan.generation_cond
    gen = nfe_per_call(gen_cond)
    T0 = plan.T_start
    if plan.method in ("ddpm-replay", "zeta"):
        total = src * T0 + gen * T0
    elif plan.method == "sdedit":
        total = gen * T0
    elif plan.method in ("ddim", "ddim-partial"):
        total = src * T0 * (1 + plan.ddim_refine) + gen * T0
    else:
        if plan.t_prime == PER_STEP:
            core = 2 * T0 + (T0 - plan.T_end + 1) * N * K
        elif plan.t_prime is not None and plan.t_prime > T0:
            core = plan.t_prime + T0 + N * K
        else:
            core = 2 * T0 + N * K
        total = src * core
    if plan.mask is not None and plan.method in ("ddpm-replay", "zeta", "zeus"):
        total += src * T0
    return total
