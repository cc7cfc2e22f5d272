"""Posterior principal components of the denoiser and the perturbed reverse process.

The top eigenvectors of Cov[x0 | x_t] are found by subspace iteration where
each matrix-vector product is a finite difference of the denoiser: probing
x_t + C sqrt(abar_t) v and differencing the predicted x0 gives C times the
Jacobian of the posterior mean (w.r.t. the rescaled observation) applied to v,
and that Jacobian is the posterior covariance divided by the noise variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import container, rng
from .denoiser import Condition, GaussianMixturePrior, guided_eps
from .errors import FormatError, InvalidParameterError, NumericalError
from .inversion import NoiseTrajectory
from .sampler import PER_STEP, EditPlan
from .schedule import Schedule, drift_coefficient
from .steps import mean_step

DEFAULT_ITERS = 50
DEFAULT_PROBE_C = 1e-3
DEFAULT_RHO = -0.5


@dataclass(frozen=True, eq=False)
class PCBundle:
    """Per-timestep orthonormal PCs (``vectors[j, i]`` is PC i+1 at ``timesteps[j]``)."""

    timesteps: tuple[int, ...]
    vectors: np.ndarray
    eigenvalues: np.ndarray
    n_pcs: int
    iters: int
    probe_c: float
    rho: float
    mask: tuple[int, ...] | None
    schedule_id: str
    condition: Condition
    seed: int

    def index(self, t: int) -> int:
        try:
            return self.timesteps.index(t)
        except ValueError:
            raise InvalidParameterError(f"bundle has no PCs at t={t}") from None

    def pcs(self, t: int) -> np.ndarray:
        return self.vectors[self.index(t)]

    def lambdas(self, t: int) -> np.ndarray:
        return self.eigenvalues[self.index(t)]

    def to_container(self):
        meta = {
            "kind": "pc-bundle",
            "timesteps": list(self.timesteps),
            "n_pcs": self.n_pcs,
            "iters": self.iters,
            "probe_c": self.probe_c,
            "rho": self.rho,
            "mask": None if self.mask is None else list(self.mask),
            "schedule_id": self.schedule_id,
            "condition": self.condition.to_dict(),
            "seed": self.seed,
        }
        return meta, {"vectors": self.vectors, "eigenvalues": self.eigenvalues}

    @classmethod
    def from_container(cls, meta, arrays) -> "PCBundle":
        if meta.get("kind") != "pc-bundle":
            raise FormatError(f"expected a pc-bundle container, found {meta.get('kind')!r}")
        return cls(
            timesteps=tuple(int(t) for t in meta["timesteps"]),
            vectors=arrays["vectors"],
            eigenvalues=arrays["eigenvalues"],
            n_pcs=int(meta["n_pcs"]),
            iters=int(meta["iters"]),
            probe_c=float(meta["probe_c"]),
            rho=float(meta["rho"]),
            mask=None if meta["mask"] is None else tuple(meta["mask"]),
            schedule_id=meta["schedule_id"],
            condition=Condition.from_dict(meta["condition"]),
            seed=int(meta["seed"]),
        )

    def save(self, path) -> None:
        container.write(path, *self.to_container())

    @classmethod
    def load(cls, path) -> "PCBundle":
        return cls.from_container(*container.read(path, "pc-bundle"))


@dataclass(frozen=True, eq=False)
class LambdaProfile:
    """Dataset-averaged eigenvalues; ``values[j, i]`` is PC i+1 at ``timesteps[j]``."""

    timesteps: tuple[int, ...]
    values: np.ndarray
    n_bundles: int = 1

    def lam(self, i: int, t: int) -> float:
        try:
            j = self.timesteps.index(t)
        except ValueError:
            raise InvalidParameterError(f"lambda profile has no entry at t={t}") from None
        return float(self.values[j, i])

    def save(self, path) -> None:
        container.write(path, {"kind": "lambda-profile", "timesteps": list(self.timesteps),
                               "n_bundles": self.n_bundles}, {"values": self.values})

    @classmethod
    def load(cls, path) -> "LambdaProfile":
        meta, arrays = container.read(path, "lambda-profile")
        return cls(tuple(int(t) for t in meta["timesteps"]), arrays["values"], int(meta["n_bundles"]))


def _masked_qr(D: np.ndarray, inside: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of the columns of D (dim x N) with a non-negative R diagonal.

    With a mask only the rows inside it are factorized, so the rows outside
    stay exactly zero.
    """
    if inside is None:
        Q, R = np.linalg.qr(D)
    else:
        Qs, R = np.linalg.qr(D[inside])
        Q = np.zeros_like(D)
        Q[inside] = Qs
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


def _init_directions(dim: int, n_pcs: int, seed: int, t: int, inside, attempt: int = 0) -> np.ndarray:
    V = np.stack([rng.normal(seed, rng.PC_INIT, t, i, attempt, size=dim) for i in range(n_pcs)], axis=1)
    if inside is not None:
        V[~inside] = 0.0
    return V


def _orthonormalize(D, inside, seed, t, iteration) -> np.ndarray:
    Q, R = _masked_qr(D, inside)
    diag = np.abs(np.diag(R))
    scale = max(float(np.max(np.linalg.norm(D, axis=0))), 1e-300)
    bad = np.flatnonzero(diag <= 1e-12 * scale)
    if bad.size:
        fresh = _init_directions(D.shape[0], D.shape[1], seed, t, inside, attempt=iteration + 2)
        D = D.copy()
        D[:, bad] = fresh[:, bad] * scale
        Q, R = _masked_qr(D, inside)
        diag = np.abs(np.diag(R))
        if np.any(diag <= 1e-12 * scale):
            raise NumericalError(
                f"rank-deficient probe block at t={t}, iteration {iteration}: "
                f"|R_ii| = {diag.tolist()}, columns {bad.tolist()} re-randomized once"
            )
    return Q


def _source_predictions(traj: NoiseTrajectory, prior, s: Schedule, t_lo: int, t_hi: int,
                        cond: Condition, w: float):
    """States x_t and predicted x0 under (cond, w) for t_hi..t_lo, plus the NFEs spent."""
    same_cond = cond == traj.cond_src and w == traj.guidance_src
    states: dict[int, np.ndarray] = {}
    base: dict[int, np.ndarray] = {}
    nfe = 0
    if traj.states is not None:
        for t in range(t_hi, t_lo - 1, -1):
            states[t] = traj.states[t]
            if same_cond and traj.x0_hats is not None:
                base[t] = traj.x0_hats[t]
    else:
        x = traj.x_start
        for t in range(traj.T_start, t_lo - 1, -1):
            mu, pred, cost = mean_step(prior, traj.cond_src, traj.guidance_src, x, t, s)
            nfe += cost
            if t <= t_hi:
                states[t] = x
                if same_cond:
                    base[t] = pred.x0_hat
            if t > 1:
                z = traj.noise(t)
                x = mu + (z if t in traj.raw_steps else s.sigma[t] * z)
    for t in states:
        if t not in base:
            pred, cost = guided_eps(prior, cond, w, states[t], t, s)
            nfe += cost
            base[t] = pred.x0_hat
    return states, base, nfe


def extract_pcs(trajectory: NoiseTrajectory, prior: GaussianMixturePrior, s: Schedule,
                timestep_range: tuple[int, int], n_pcs: int, iters: int = DEFAULT_ITERS,
                probe_c: float = DEFAULT_PROBE_C, rho: float = DEFAULT_RHO,
                mask: Sequence[int] | None = None, cond: Condition | None = None,
                guidance: float | None = None, seed: int | None = None) -> tuple[PCBundle, int]:
    """Top ``n_pcs`` posterior PCs at every t in ``timestep_range = (t_lo, t_hi)``.

    States come from the source trajectory (the inversion cache when present,
    a replay otherwise). Timesteps are processed from t_hi down so that each
    PC's sign can be aligned with the one computed at the step before.
    Eigenvalues are read off the last probe of each direction. Returns the
    bundle and the number of NFEs spent.
    """
    trajectory.check_schedule(s)
    t_lo, t_hi = (int(v) for v in timestep_range)
    if not (1 <= t_lo <= t_hi <= trajectory.T_start):
        raise InvalidParameterError(
            f"timestep range [{t_lo}, {t_hi}] not covered by a trajectory starting at {trajectory.T_start}"
        )
    if n_pcs < 1 or iters < 1:
        raise InvalidParameterError("need n_pcs >= 1 and iters >= 1")
    if not probe_c > 0:
        raise InvalidParameterError("probe constant C must be positive")
    if not rho < 0:
        raise InvalidParameterError("sign-swap threshold rho must be negative")
    dim = prior.dim
    inside = None
    if mask is not None:
        mask = tuple(sorted({int(i) for i in mask}))
        if any(i < 0 or i >= dim for i in mask):
            raise InvalidParameterError("mask index out of range")
        inside = np.zeros(dim, dtype=bool)
        inside[list(mask)] = True
    support = dim if inside is None else int(inside.sum())
    if n_pcs > support:
        raise InvalidParameterError(f"cannot extract {n_pcs} PCs from a {support}-dimensional support")
    cond = trajectory.cond_src if cond is None else cond
    w = trajectory.guidance_src if guidance is None else guidance
    seed = trajectory.seed if seed is None else seed

    states, base, nfe = _source_predictions(trajectory, prior, s, t_lo, t_hi, cond, w)

    timesteps = tuple(range(t_hi, t_lo - 1, -1))
    vectors = np.empty((len(timesteps), n_pcs, dim))
    eigenvalues = np.empty((len(timesteps), n_pcs))
    prev = None
    for j, t in enumerate(timesteps):
        ab = float(s.alpha_bar[t])
        x_t, x0_base = states[t], base[t]
        V = _orthonormalize(_init_directions(dim, n_pcs, seed, t, inside), inside, seed, t, -1)
        norms = None
        for k in range(iters):
            shifted = x_t[None, :] + probe_c * math.sqrt(ab) * V.T
            pred, cost = guided_eps(prior, cond, w, shifted, t, s)
            nfe += cost * n_pcs
            x0_shifted = pred.x0_hat
            if not np.all(np.isfinite(x0_shifted)):
                raise NumericalError(f"non-finite probe output at t={t}, iteration {k}")
            D = ((x0_shifted - x0_base) / probe_c).T
            if inside is not None:
                D[~inside] = 0.0
            norms = np.linalg.norm(D, axis=0)
            V = _orthonormalize(D, inside, seed, t, k)
        lam = (1.0 / ab - 1.0) * norms
        order = np.argsort(-lam, kind="stable")
        V, lam = V[:, order], lam[order]
        if prev is not None:
            flip = np.einsum("di,di->i", V, prev) < rho
            V[:, flip] *= -1.0
        vectors[j] = V.T
        eigenvalues[j] = lam
        prev = V

    bundle = PCBundle(timesteps, vectors, eigenvalues, n_pcs, iters, float(probe_c), float(rho),
                      None if mask is None else tuple(mask), s.schedule_id, cond, int(seed))
    return bundle, nfe


def average_lambda(bundles: Sequence[PCBundle]) -> LambdaProfile:
    if len(bundles) == 0:
        raise InvalidParameterError("need at least one bundle to average")
    ref = bundles[0]
    for b in bundles[1:]:
        if b.timesteps != ref.timesteps or b.eigenvalues.shape != ref.eigenvalues.shape:
            raise InvalidParameterError("bundles differ in PC count or timestep range")
    stacked = np.stack([b.eigenvalues for b in bundles])
    return LambdaProfile(ref.timesteps, stacked.mean(axis=0), len(bundles))


class ZeusPerturbation:
    """Additive drift gamma * c_t * sum_j coeff_j sqrt(lam_{i_j|t}) v_{i_j|t'(t)} on [T_end, T_start]."""

    def __init__(self, directions: dict[int, np.ndarray], gamma: float, s: Schedule, dim: int):
        self.directions = directions
        self.gamma = float(gamma)
        self.schedule = s
        self.dim = dim

    def term(self, t: int) -> np.ndarray:
        out = self.mean_shift(t)
        return np.zeros(self.dim) if out is None else out

    def mean_shift(self, t: int) -> np.ndarray | None:
        d = self.directions.get(t)
        if d is None or self.gamma == 0.0:
            return None
        return self.gamma * drift_coefficient(self.schedule, t) * d

    def eps_shift(self, t: int) -> np.ndarray | None:
        d = self.directions.get(t)
        if d is None or self.gamma == 0.0:
            return None
        ab = float(self.schedule.alpha_bar[t])
        return self.gamma * math.sqrt(ab) / math.sqrt(1.0 - ab) * d


def perturbation_hook(bundle: PCBundle, profile: LambdaProfile | None, plan: EditPlan,
                      s: Schedule) -> ZeusPerturbation:
    """Perturbation for ``plan``; PC indices in ``plan.pc_selector`` are 1-based."""
    if not plan.pc_selector:
        raise InvalidParameterError("plan has an empty pc_selector")
    for i, _ in plan.pc_selector:
        if not (1 <= i <= bundle.n_pcs):
            raise InvalidParameterError(f"PC index {i} outside 1..{bundle.n_pcs}")
    per_step = plan.t_prime == PER_STEP
    if not per_step and plan.t_prime is None:
        raise InvalidParameterError("plan needs t_prime")
    if not per_step and profile is None:
        raise InvalidParameterError("a fixed t' needs a lambda profile covering [T_end, T_start]")
    directions = {}
    for t in range(plan.T_start, plan.T_end - 1, -1):
        V = bundle.pcs(t if per_step else plan.t_prime)
        d = np.zeros(V.shape[1])
        for i, coeff in plan.pc_selector:
            lam = bundle.lambdas(t)[i - 1] if per_step else profile.lam(i - 1, t)
            d += coeff * math.sqrt(max(lam, 0.0)) * V[i - 1]
        directions[t] = d
    return ZeusPerturbation(directions, plan.gamma, s, V.shape[1])


def asymmetric_shift_ratio(s: Schedule, t: int) -> float:
    """Ratio of the reverse-mean shift of the symmetric formulation to the asymmetric one."""
    return drift_coefficient(s, t) / math.sqrt(s.alpha_bar[t - 1])


def edited_means(x_t, eps, t: int, s: Schedule, shift_x0) -> tuple[np.ndarray, np.ndarray]:
    """Reverse means after adding ``shift_x0`` to the predicted x0 only (asymmetric) or
    through the noise prediction in both terms (symmetric)."""
    ab, ab_prev = float(s.alpha_bar[t]), float(s.alpha_bar[t - 1])
    dir_coef = s.direction_coefficient(t)

    def predicted_x0(e):
        return (x_t - math.sqrt(1.0 - ab) * e) / math.sqrt(ab)

    eps_edit = eps - math.sqrt(ab) / math.sqrt(1.0 - ab) * shift_x0
    asym = math.sqrt(ab_prev) * predicted_x0(eps_edit) + dir_coef * eps
    sym = math.sqrt(ab_prev) * predicted_x0(eps_edit) + dir_coef * eps_edit
    return asym, sym


def pc_entropy(v, group_size: int) -> float:
    """Entropy of the energy distribution of ``v`` over contiguous coordinate groups."""
    v = np.asarray(v, dtype=np.float64)
    if group_size < 1 or v.shape[0] % group_size:
        raise InvalidParameterError(f"length {v.shape[0]} not divisible by group size {group_size}")
    energy = np.sum(v.reshape(-1, group_size) ** 2, axis=1)
    total = energy.sum()
    if total == 0.0:
        raise InvalidParameterError("entropy of a zero vector is undefined")
    p = energy[energy > 0] / total
    return float(-np.sum(p * np.log(p)))
