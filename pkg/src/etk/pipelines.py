"""End-to-end edits: invert (or noise) the source, then regenerate per the plan's method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import GaussianMixturePrior
from .errors import InvalidParameterError
from .inversion import NoiseTrajectory, ddim_invert, ddpm_invert, sdedit_noise
from .sampler import PER_STEP, EditPlan, TraceStep, ddim_reverse, ddpm_reverse
from .schedule import Schedule
from .zeus import DEFAULT_ITERS, DEFAULT_PROBE_C, DEFAULT_RHO, LambdaProfile, PCBundle, extract_pcs, perturbation_hook


@dataclass
class EditResult:
    x0: np.ndarray
    nfe: int
    trace: list[TraceStep] = field(default_factory=list)
    trajectory: NoiseTrajectory | None = None
    bundle: PCBundle | None = None
    nfe_breakdown: dict[str, int] = field(default_factory=dict)


def zeus_inversion_depth(plan: EditPlan) -> int:
    if plan.t_prime == PER_STEP or plan.t_prime <= plan.T_start:
        return plan.T_start
    return int(plan.t_prime)


def zeus_pc_range(plan: EditPlan) -> tuple[int, int]:
    if plan.t_prime == PER_STEP:
        return plan.T_end, plan.T_start
    return int(plan.t_prime), int(plan.t_prime)


def run_edit(x0, prior: GaussianMixturePrior, plan: EditPlan, s: Schedule, *,
             profile: LambdaProfile | None = None, n_pcs: int = 1, iters: int = DEFAULT_ITERS,
             probe_c: float = DEFAULT_PROBE_C, rho: float = DEFAULT_RHO,
             record_trace: bool = False) -> EditResult:
    x0 = np.asarray(x0, dtype=np.float64)
    plan.validate(s, prior.dim)
    m = plan.method

    if m in ("ddpm-replay", "zeta"):
        traj = ddpm_invert(x0, prior, plan.cond_src, plan.w_src, s, plan.T_start, plan.seed)
        res = ddpm_reverse(traj.x_start, traj, prior, plan, s, record_trace=record_trace)
        return EditResult(res.x0, traj.nfe + res.nfe, res.trace, traj,
                          nfe_breakdown={"inversion": traj.nfe, "generation": res.nfe})

    if m == "sdedit":
        start = sdedit_noise(x0, s, plan.T_start, plan.seed)
        res = ddpm_reverse(start, plan.seed, prior, plan, s, record_trace=record_trace)
        return EditResult(res.x0, res.nfe, res.trace, nfe_breakdown={"generation": res.nfe})

    if m in ("ddim", "ddim-partial"):
        xT, inv_nfe = ddim_invert(x0, prior, plan.cond_src, plan.w_src, s, plan.T_start, plan.ddim_refine)
        out, gen_nfe = ddim_reverse(xT, prior, plan, s)
        return EditResult(out, inv_nfe + gen_nfe, nfe_breakdown={"inversion": inv_nfe, "generation": gen_nfe})

    if m == "zeus":
        full = ddpm_invert(x0, prior, plan.cond_src, plan.w_src, s, zeus_inversion_depth(plan), plan.seed)
        bundle, pc_nfe = extract_pcs(full, prior, s, zeus_pc_range(plan), n_pcs, iters, probe_c, rho,
                                     mask=plan.mask, seed=plan.seed)
        hook = perturbation_hook(bundle, profile, plan, s)
        traj = full.truncated(plan.T_start)
        res = ddpm_reverse(traj.x_start, traj, prior, plan, s, hook, record_trace=record_trace)
        return EditResult(res.x0, full.nfe + pc_nfe + res.nfe, res.trace, traj, bundle,
                          nfe_breakdown={"inversion": full.nfe, "pcs": pc_nfe, "generation": res.nfe})

    raise InvalidParameterError(f"unknown method {m!r}")
