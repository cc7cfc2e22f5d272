"""Reference computations the edit machinery is checked against.

Everything here is deliberately direct: dense eigendecomposition of the
closed-form posterior covariance, central finite differences of the
denoiser, and self-normalized importance sampling from the prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .denoiser import Condition, GaussianMixturePrior, eval_eps, posterior_cov
from .errors import InvalidParameterError, NumericalError
from .schedule import Schedule


@dataclass(frozen=True)
class EigenPairs:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # orthonormal columns


def symmetric_eigs(M: np.ndarray, N: int | None = None) -> EigenPairs:
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise NumericalError("eigendecomposition of a non-finite matrix")
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if N is not None:
        vals, vecs = vals[:N], vecs[:, :N]
    return EigenPairs(vals, vecs)


def analytic_posterior_cov(prior: GaussianMixturePrior, x_t, t: int, s: Schedule,
                           cond: Condition | None = None) -> np.ndarray:
    """Cov[x0 | x_t] from the closed form at the rescaled observation x_t / sqrt(abar_t)."""
    s.check_t(t)
    p = prior if cond is None else prior.conditioned(cond)
    y = np.asarray(x_t, dtype=np.float64) / np.sqrt(s.alpha_bar[t])
    return posterior_cov(p, y, s.equivalent_noise_std(t))


def analytic_posterior_eigs(prior: GaussianMixturePrior, x_t, t: int, s: Schedule, N: int,
                            cond: Condition | None = None) -> EigenPairs:
    return symmetric_eigs(analytic_posterior_cov(prior, x_t, t, s, cond), N)


def jacobian_fd(prior: GaussianMixturePrior, cond: Condition, x_t, t: int, s: Schedule,
                h: float = 1e-5, wrt: str = "x_t") -> np.ndarray:
    """Central-difference Jacobian of the predicted x0 (column j = d x0_hat / d input_j).

    ``wrt="x_t"`` differentiates w.r.t. the noisy state itself; ``wrt="y"``
    w.r.t. the rescaled observation y = x_t / sqrt(abar_t), stepping ``h`` in y
    units. The latter, scaled by (1 - abar_t) / abar_t, equals Cov[x0 | x_t].
    """
    if not h > 0:
        raise InvalidParameterError("finite-difference step must be positive")
    if wrt not in ("x_t", "y"):
        raise InvalidParameterError("wrt must be 'x_t' or 'y'")
    x_t = np.asarray(x_t, dtype=np.float64)
    n = x_t.shape[0]
    scale = np.sqrt(s.alpha_bar[s.check_t(t)]) if wrt == "y" else 1.0
    step = h * scale * np.eye(n)
    probes = np.concatenate([x_t + step, x_t - step])
    x0 = eval_eps(prior, cond, probes, t, s).x0_hat
    return ((x0[:n] - x0[n:]) / (2.0 * h)).T


def relative_error(approx, exact, floor: float = 1e-6) -> float:
    """Largest entrywise |approx - exact| / max(|exact|, floor * max|exact|)."""
    approx, exact = np.asarray(approx), np.asarray(exact)
    denom = np.maximum(np.abs(exact), floor * np.max(np.abs(exact)))
    return float(np.max(np.abs(approx - exact) / denom))


@dataclass(frozen=True)
class MCStats:
    mean: np.ndarray
    cov: np.ndarray
    mean_se: np.ndarray
    cov_se: np.ndarray
    ess: float
    low_ess: bool


def mc_posterior_stats(prior: GaussianMixturePrior, y, s: float, n_samples: int, seed: int,
                       chunk: int = 500_000) -> MCStats:
    """Posterior moments of x given y = x + s n by weighting prior draws with N(y; x, s^2 I).

    Draws are generated chunk by chunk from seeded sub-streams and regenerated
    on each pass (max log-weight, then mean, then centered moments), so memory
    stays bounded by the chunk size. Standard errors use the delta-method
    variance of the self-normalized estimator. ``low_ess`` flags an effective
    sample size below 100.
    """
    if n_samples < 1000:
        raise InvalidParameterError("need at least 1000 samples")
    y = np.asarray(y, dtype=np.float64)
    if not (s > 0 and np.isfinite(s)):
        raise InvalidParameterError(f"noise std must be positive and finite, got {s}")
    n = prior.dim
    sizes = [min(chunk, n_samples - i) for i in range(0, n_samples, chunk)]

    def chunks():
        for j, m in enumerate(sizes):
            x = prior.sample(rng.stream(seed, rng.MC_ORACLE, j), m)
            yield x, -0.5 * np.sum((x - y) ** 2, axis=1) / (s * s)

    top = max(float(lw.max()) for _, lw in chunks())
    total, total_sq, wx = 0.0, 0.0, np.zeros(n)
    for x, lw in chunks():
        w = np.exp(lw - top)
        total += w.sum()
        total_sq += np.sum(w**2)
        wx += w @ x
    mean = wx / total

    cov = np.zeros((n, n))
    mean_var = np.zeros(n)
    for x, lw in chunks():
        w = np.exp(lw - top) / total
        xc = x - mean
        cov += (w[:, None] * xc).T @ xc
        mean_var += (w**2) @ xc**2
    cov_var = np.zeros((n, n))
    for x, lw in chunks():
        w2 = (np.exp(lw - top) / total) ** 2
        xc = x - mean
        for i in range(n):
            cov_var[i] += w2 @ (xc[:, i:i + 1] * xc - cov[i]) ** 2

    ess = total**2 / total_sq
    return MCStats(mean, 0.5 * (cov + cov.T), np.sqrt(mean_var), np.sqrt(cov_var), float(ess), bool(ess < 100))


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    note: str = ""


def principal_angle_deg(u, v) -> float:
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(min(c, 1.0))))


def separated_pcs(eigenvalues, n: int, min_ratio: float = 1.5) -> list[int]:
    """0-based indices i < n whose eigenvalue is at least ``min_ratio`` times its lower
    neighbour and at most 1/``min_ratio`` times its upper one (so the PC is identifiable)."""
    lam = np.asarray(eigenvalues)
    out = []
    for i in range(min(n, lam.shape[0])):
        above = i == 0 or lam[i - 1] >= min_ratio * lam[i]
        below = i + 1 >= lam.shape[0] or lam[i] >= min_ratio * lam[i + 1]
        if above and below:
            out.append(i)
    return out


def identity_suite(prior: GaussianMixturePrior, s: Schedule, seed: int = 0,
                   timesteps=(20, 60, 100, 140, 200), n_signals: int = 4) -> list[CheckResult]:
    """The closed-form identities the edit machinery relies on, checked on ``prior``."""
    from .inversion import ddpm_invert
    from .sampler import EditPlan, predict_nfe, replay
    from .pipelines import run_edit
    from .zeus import asymmetric_shift_ratio, edited_means, extract_pcs
    from .steps import reverse_mean

    results = []
    uncond = Condition()
    gen = rng.stream(seed, rng.MC_ORACLE, 1)
    signals = prior.sample(gen, n_signals)

    worst = 0.0
    for T_start in sorted({1, min(50, s.T), min(100, s.T), s.T}):
        for x0 in signals:
            traj = ddpm_invert(x0, prior, uncond, 1.0, s, T_start, seed)
            worst = max(worst, float(np.max(np.abs(replay(traj, prior, s).x0 - x0))))
    results.append(CheckResult("inversion replay max abs error", worst, 1e-8, worst <= 1e-8))

    traj = ddpm_invert(signals[0], prior, uncond, 1.0, s, s.T, seed)
    worst = 0.0
    for t in timesteps:
        ab = float(s.alpha_bar[t])
        J = jacobian_fd(prior, uncond, traj.states[t], t, s, wrt="y")
        C = analytic_posterior_cov(prior, traj.states[t], t, s)
        worst = max(worst, relative_error((1.0 - ab) / ab * J, C))
    results.append(CheckResult("covariance vs scaled FD Jacobian (rel)", worst, 1e-3, worst <= 1e-3))

    n_pcs = min(3, prior.dim)
    worst_angle, worst_lam, checked = 0.0, 0.0, 0
    bundle, _ = extract_pcs(traj, prior, s, (min(timesteps), max(timesteps)), n_pcs, seed=seed)
    for t in timesteps:
        ref = analytic_posterior_eigs(prior, traj.states[t], t, s, prior.dim)
        for i in separated_pcs(ref.eigenvalues, n_pcs):
            checked += 1
            worst_angle = max(worst_angle, principal_angle_deg(bundle.pcs(t)[i], ref.eigenvectors[:, i]))
            lam = bundle.lambdas(t)[i]
            worst_lam = max(worst_lam, abs(lam - ref.eigenvalues[i]) / ref.eigenvalues[i])
    note = f"{checked} well-separated PCs"
    results.append(CheckResult("PC principal angle (deg)", worst_angle, 2.0, checked > 0 and worst_angle <= 2.0, note))
    results.append(CheckResult("PC eigenvalue (rel)", worst_lam, 0.05, checked > 0 and worst_lam <= 0.05, note))

    worst_eq, worst_ratio = 0.0, 0.0
    d = np.cos(np.arange(prior.dim))
    for t in range(s.T, 0, -1):
        x_t = traj.states[t]
        eps = eval_eps(prior, uncond, x_t, t, s).eps_hat
        asym, sym = edited_means(x_t, eps, t, s, d)
        base = reverse_mean(x_t, eps, t, s)
        added = base + s.drift_coefficient(t) * d
        worst_eq = max(worst_eq, float(np.max(np.abs(added - sym))))
        if t > 1:
            ratio = float(np.linalg.norm(sym - base) / np.linalg.norm(asym - base))
            worst_ratio = max(worst_ratio, abs(ratio - asymmetric_shift_ratio(s, t)))
    results.append(CheckResult("mean-shift vs noise-prediction edit", worst_eq, 1e-10, worst_eq <= 1e-10))
    results.append(CheckResult("symmetric/asymmetric shift ratio", worst_ratio, 1e-12, worst_ratio <= 1e-12))

    T0 = min(100, s.T)
    cond_tgt = Condition.one_hot(prior.K - 1, prior.K) if prior.K > 1 else uncond
    plan = EditPlan("zeta", cond_src=uncond, cond_tgt=cond_tgt, T_start=T0, seed=seed)
    counted = run_edit(signals[0], prior, plan, s).nfe
    expected = predict_nfe(plan)
    results.append(CheckResult("NFE count vs prediction", float(counted - expected), 0.0, counted == expected,
                               f"{counted} counted"))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>12}  {'tolerance':>10}  result"]
    for r in results:
        tail = f"  ({r.note})" if r.note else ""
        lines.append(f"{r.name:<{width}}  {r.value:12.3e}  {r.tolerance:10.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}{tail}")
    return "\n".join(lines)
