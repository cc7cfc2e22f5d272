"""Feature-space metrics for edits: perceptual distance, Frechet distance, condition adherence."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import rng
from .denoiser import Condition, GaussianMixturePrior
from .errors import InvalidParameterError
from .schedule import Schedule

CSV_COLUMNS = (
    "method", "T_start", "t_prime", "gamma", "adherence_mean", "lpaps_mean",
    "fad_source", "fad_reference", "n_signals", "seed",
)

_NORM_EPS = 1e-10
_EIG_CLAMP = -1e-8


class FeatureExtractor:
    """Stack of seeded random affine maps, each followed by tanh.

    Parameters
    ----------
    in_dim : int
        Signal dimension.
    widths : sequence of int
        Output width of each layer; four layers by default.
    seed : int
    """

    def __init__(self, in_dim: int, widths: Sequence[int] = (6, 6, 6, 6), seed: int = 0,
                 gain: float = 1.0):
        self.in_dim = int(in_dim)
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        self.layers = []
        fan_in = self.in_dim
        for l, width in enumerate(self.widths):
            g = rng.stream(self.seed, rng.EVAL_FEATURES, l)
            W = g.standard_normal((width, fan_in)) * (gain / math.sqrt(fan_in))
            b = 0.1 * g.standard_normal(width)
            self.layers.append((W, b))
            fan_in = width

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def features(self, x) -> list[np.ndarray]:
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise InvalidParameterError(f"input dimension {h.shape[-1]} != extractor dimension {self.in_dim}")
        out = []
        for W, b in self.layers:
            h = np.tanh(h @ W.T + b)
            out.append(h)
        return out

    def flat_features(self, x) -> np.ndarray:
        return np.concatenate(self.features(x), axis=-1)


def lpaps(a, b, f: FeatureExtractor) -> float | np.ndarray:
    """Mean over layers of the distance between unit-normalized features (lower = closer)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidParameterError(f"dimension mismatch {a.shape} vs {b.shape}")
    total = 0.0
    for fa, fb in zip(f.features(a), f.features(b)):
        na = fa / (np.linalg.norm(fa, axis=-1, keepdims=True) + _NORM_EPS)
        nb = fb / (np.linalg.norm(fb, axis=-1, keepdims=True) + _NORM_EPS)
        total = total + np.linalg.norm(na - nb, axis=-1)
    return total / f.n_layers


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the matrix square root is taken from the eigenvalues of the
    symmetric matrix S1^{1/2} S2 S1^{1/2}, which shares its spectrum with S1 S2.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    root1 = _psd_sqrt(sigma1)
    M = root1 @ sigma2 @ root1
    vals = np.linalg.eigvalsh(0.5 * (M + M.T))
    if vals.min() < _EIG_CLAMP * max(1.0, abs(vals.max())):
        warnings.warn(f"matrix square root: clamping eigenvalue {vals.min():.3e} to 0", RuntimeWarning)
    tr_covmean = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)


def gaussian_fit(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if feats.shape[0] < 2:
        raise InvalidParameterError("need at least 2 samples to fit a Gaussian")
    if feats.shape[0] < feats.shape[1] + 1:
        warnings.warn(
            f"{feats.shape[0]} samples for {feats.shape[1]} feature dimensions: covariance is rank deficient",
            RuntimeWarning,
        )
    return feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False))


def frechet_distance(set_a, set_b, f: FeatureExtractor) -> float:
    mu_a, cov_a = gaussian_fit(f.flat_features(np.asarray(set_a, dtype=np.float64)))
    mu_b, cov_b = gaussian_fit(f.flat_features(np.asarray(set_b, dtype=np.float64)))
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


def adherence(x, prior: GaussianMixturePrior, cond_tgt: Condition, t0_std: float = 0.1):
    """Log-likelihood ratio of ``x`` under the target-reweighted mixture vs. the prior.

    Both mixtures are smoothed by isotropic noise of std ``t0_std``. The score
    is 0 when the target weights equal the prior's and never exceeds
    log(max_k cond_k / w_k).
    """
    if not cond_tgt.is_conditional:
        raise InvalidParameterError("adherence is undefined for an unconditional target")
    if len(cond_tgt.weights) != prior.K:
        raise InvalidParameterError("condition weights do not match the prior's components")
    if cond_tgt.weights == tuple(float(w) for w in prior.weights):
        return np.zeros(np.asarray(x).shape[:-1]) if np.ndim(x) > 1 else 0.0
    target = prior.reweighted(cond_tgt.weights)
    var = t0_std * t0_std
    score = target.log_density(x, var) - prior.log_density(x, var)
    return float(score) if np.ndim(score) == 0 else score


def adherence_upper_bound(prior: GaussianMixturePrior, cond_tgt: Condition) -> float:
    w = np.asarray(cond_tgt.weights)
    with np.errstate(divide="ignore"):
        return float(np.log(np.max(w / prior.weights)))


@dataclass
class CurveSetup:
    """Everything the trade-off curve needs besides the plans themselves."""

    prior: GaussianMixturePrior
    schedule: Schedule
    features: FeatureExtractor
    reference_set: np.ndarray
    t0_std: float = 0.1
    n_pcs: int = 1
    iters: int = 50
    probe_c: float = 1e-3
    rho: float = -0.5


def curve_row(template, T_start: int, sources: np.ndarray, setup: CurveSetup, seed: int,
              profile=None) -> tuple[dict, np.ndarray]:
    from .pipelines import run_edit

    plan = replace(template, T_start=int(T_start), T_end=min(template.T_end, int(T_start)))
    outputs = np.stack([
        run_edit(x0, setup.prior, replace(plan, seed=seed + i), setup.schedule, profile=profile,
                 n_pcs=setup.n_pcs, iters=setup.iters, probe_c=setup.probe_c, rho=setup.rho).x0
        for i, x0 in enumerate(sources)
    ])
    if plan.cond_tgt.is_conditional:
        adh = float(np.mean(adherence(outputs, setup.prior, plan.cond_tgt, setup.t0_std)))
    else:
        adh = float("nan")
    row = {
        "method": plan.method,
        "T_start": plan.T_start,
        "t_prime": "" if plan.t_prime is None else plan.t_prime,
        "gamma": plan.gamma,
        "adherence_mean": adh,
        "lpaps_mean": float(np.mean(lpaps(outputs, sources, setup.features))),
        "fad_source": frechet_distance(outputs, sources, setup.features),
        "fad_reference": frechet_distance(outputs, setup.reference_set, setup.features),
        "n_signals": len(sources),
        "seed": seed,
    }
    return row, outputs


def tradeoff_curve(sources, templates, grid: Sequence[int], setup: CurveSetup, seed: int = 0,
                   profile=None) -> list[dict]:
    """One row of mean metrics per (plan template, T_start) pair; signal i uses seed + i."""
    sources = np.asarray(sources, dtype=np.float64)
    if sources.shape[0] < 8:
        raise InvalidParameterError("trade-off curves need at least 8 source signals")
    if len(grid) == 0:
        raise InvalidParameterError("empty T_start grid")
    rows = []
    for template in templates:
        for T_start in grid:
            row, _ = curve_row(template, T_start, sources, setup, seed, profile)
            rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
