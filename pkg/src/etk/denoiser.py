"""Closed-form MSE-optimal denoisers over Gaussian-mixture priors.

A condition is modelled as a reweighting of the mixture components, so the
conditional and unconditional branches of classifier-free guidance are two
evaluations of the same prior with different weights.

Each covariance is eigendecomposed once when the prior is built. The
Gaussian-smoothed quantities at any noise level then reduce to diagonal
scalings in the component eigenbases:
``(S_k + s^2 I)^{-1} = U_k diag(1 / (lam_k + s^2)) U_k^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import tomli
from scipy.special import logsumexp

from .errors import FormatError, InvalidParameterError, NumericalError
from .schedule import Schedule

UNCONDITIONAL = "unconditional"
COMPONENT_WEIGHTS = "component-weights"

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Condition:
    kind: str = UNCONDITIONAL
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == UNCONDITIONAL:
            if self.weights is not None:
                raise InvalidParameterError("unconditional condition carries no weights")
        elif self.kind == COMPONENT_WEIGHTS:
            if self.weights is None or len(self.weights) == 0:
                raise InvalidParameterError("component-weights condition needs weights")
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidParameterError("condition weights must be finite and non-negative")
            if abs(w.sum() - 1.0) > _WEIGHT_TOL:
                raise InvalidParameterError(f"condition weights sum to {w.sum()!r}, not 1")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))
        else:
            raise InvalidParameterError(f"unknown condition kind {self.kind!r}")

    @classmethod
    def unconditional(cls) -> "Condition":
        return cls()

    @classmethod
    def component(cls, weights: Sequence[float]) -> "Condition":
        return cls(COMPONENT_WEIGHTS, tuple(weights))

    @classmethod
    def one_hot(cls, k: int, K: int) -> "Condition":
        w = [0.0] * K
        w[k] = 1.0
        return cls.component(w)

    @property
    def is_conditional(self) -> bool:
        return self.kind == COMPONENT_WEIGHTS

    def to_dict(self) -> dict:
        if self.weights is None:
            return {"kind": self.kind}
        return {"kind": self.kind, "weights": list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        w = d.get("weights")
        return cls(d["kind"], None if w is None else tuple(w))

    def __eq__(self, other):
        if not isinstance(other, Condition):
            return NotImplemented
        return self.kind == other.kind and self.weights == other.weights

    def __hash__(self):
        return hash((self.kind, self.weights))


class GaussianMixturePrior:
    """Mixture of full-covariance Gaussians with an exact posterior under Gaussian noise.

    Parameters
    ----------
    weights : (K,) array_like
        Non-negative mixing weights summing to one.
    means : (K, n) array_like
    covariances : (K, n, n) array_like
        Symmetric positive-definite matrices; checked by Cholesky factorization.
    """

    def __init__(self, weights, means, covariances):
        weights = np.array(weights, dtype=np.float64, ndmin=1)
        means = np.array(means, dtype=np.float64, ndmin=2)
        covariances = np.array(covariances, dtype=np.float64)
        if covariances.ndim == 2:
            covariances = covariances[None]
        K, n = means.shape
        if K < 1 or n < 1:
            raise InvalidParameterError("prior needs K >= 1 components of dimension n >= 1")
        if weights.shape != (K,) or covariances.shape != (K, n, n):
            raise InvalidParameterError(
                f"inconsistent shapes: weights {weights.shape}, means {means.shape}, "
                f"covariances {covariances.shape}"
            )
        _check_weights(weights)
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covariances))):
            raise InvalidParameterError("prior parameters must be finite")
        if not np.allclose(covariances, np.swapaxes(covariances, 1, 2), rtol=0, atol=1e-12):
            raise InvalidParameterError("covariances must be symmetric")
        try:
            np.linalg.cholesky(covariances)
        except np.linalg.LinAlgError as exc:
            raise InvalidParameterError("a covariance is not positive definite") from exc

        self.weights = weights
        self.means = means
        self.covariances = covariances
        evals, evecs = np.linalg.eigh(0.5 * (covariances + np.swapaxes(covariances, 1, 2)))
        self._evals = evals
        self._evecs = evecs
        for arr in (self.weights, self.means, self.covariances, self._evals, self._evecs):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def reweighted(self, weights) -> "GaussianMixturePrior":
        """Same components, new mixing weights (shares the eigendecompositions)."""
        weights = np.array(weights, dtype=np.float64, ndmin=1)
        if weights.shape != (self.K,):
            raise InvalidParameterError(f"expected {self.K} weights, got {weights.shape[0]}")
        _check_weights(weights)
        new = object.__new__(GaussianMixturePrior)
        new.weights = weights
        new.weights.setflags(write=False)
        new.means = self.means
        new.covariances = self.covariances
        new._evals = self._evals
        new._evecs = self._evecs
        return new

    def conditioned(self, cond: Condition) -> "GaussianMixturePrior":
        if not cond.is_conditional:
            return self
        return self.reweighted(cond.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        second = np.einsum("k,kij->ij", self.weights, self.covariances)
        second += np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        return second - np.outer(m, m)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        ks = rng.choice(self.K, size=size, p=self.weights)
        z = rng.standard_normal((size, self.dim))
        roots = self._evecs * np.sqrt(self._evals)[:, None, :]
        return self.means[ks] + np.einsum("bij,bj->bi", roots[ks], z)

    def log_density(self, x, extra_var: float = 0.0) -> np.ndarray:
        """log N-mixture density of x (shape (..., n)) with covariances S_k + extra_var I."""
        logc = self._component_logpdf(np.asarray(x, dtype=np.float64), extra_var)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(logc + logw, axis=-1)

    def _component_logpdf(self, y: np.ndarray, var: float) -> np.ndarray:
        diff = y[..., None, :] - self.means
        proj = np.einsum("kji,...kj->...ki", self._evecs, diff)
        den = self._evals + var
        maha = np.sum(proj**2 / den, axis=-1)
        logdet = np.sum(np.log(den), axis=-1)
        return -0.5 * (maha + logdet + self.dim * np.log(2.0 * np.pi))

    def _posterior_parts(self, y: np.ndarray, s: float):
        """Responsibilities, per-component posterior means and shrinkage factors."""
        var = s * s
        diff = y[..., None, :] - self.means
        proj = np.einsum("kji,...kj->...ki", self._evecs, diff)
        den = self._evals + var
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        logits = logw - 0.5 * np.sum(proj**2 / den, axis=-1) - 0.5 * np.sum(np.log(den), axis=-1)
        logits = logits - np.max(logits, axis=-1, keepdims=True)
        resp = np.exp(logits)
        resp /= resp.sum(axis=-1, keepdims=True)
        shrink = self._evals / den
        comp_means = self.means + np.einsum("kij,...kj->...ki", self._evecs, shrink * proj)
        return resp, comp_means, var * shrink

    def __repr__(self):
        return f"GaussianMixturePrior(dim={self.dim}, K={self.K})"


def _check_weights(weights: np.ndarray) -> None:
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidParameterError("mixture weights must be finite and non-negative")
    if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
        raise InvalidParameterError(f"mixture weights sum to {weights.sum()!r}, not 1")


def _check_observation(prior: GaussianMixturePrior, y, s: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != prior.dim:
        raise InvalidParameterError(f"observation has dimension {y.shape[-1]}, prior has {prior.dim}")
    if not (s > 0 and np.isfinite(s)):
        raise InvalidParameterError(f"noise std must be positive and finite, got {s}")
    if not np.all(np.isfinite(y)):
        raise NumericalError("non-finite observation")
    return y


def posterior_mean(prior: GaussianMixturePrior, y, s: float) -> np.ndarray:
    """E[x | x + s n = y] for x ~ prior, n ~ N(0, I). ``y`` may carry leading batch axes."""
    y = _check_observation(prior, y, s)
    resp, comp_means, _ = prior._posterior_parts(y, s)
    return np.einsum("...k,...ki->...i", resp, comp_means)


def posterior_cov(prior: GaussianMixturePrior, y, s: float) -> np.ndarray:
    """Cov[x | x + s n = y]; symmetric PSD by construction."""
    y = _check_observation(prior, y, s)
    if y.ndim != 1:
        raise InvalidParameterError("posterior_cov takes a single observation")
    resp, comp_means, post_evals = prior._posterior_parts(y, s)
    m = resp @ comp_means
    centered = comp_means - m
    cov = np.einsum("k,kij,kj,klj->il", resp, prior._evecs, post_evals, prior._evecs)
    cov += np.einsum("k,ki,kj->ij", resp, centered, centered)
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class EpsPrediction:
    eps_hat: np.ndarray
    x0_hat: np.ndarray


def x0_from_eps(x_t, eps, alpha_bar_t: float) -> np.ndarray:
    return (x_t - np.sqrt(1.0 - alpha_bar_t) * eps) / np.sqrt(alpha_bar_t)


def eps_from_x0(x_t, x0, alpha_bar_t: float) -> np.ndarray:
    return (x_t - np.sqrt(alpha_bar_t) * x0) / np.sqrt(1.0 - alpha_bar_t)


def eval_eps(prior: GaussianMixturePrior, cond: Condition, x_t, t: int, s: Schedule) -> EpsPrediction:
    """One denoiser evaluation (one NFE) at timestep t under condition ``cond``."""
    s.check_t(t)
    if cond.is_conditional and len(cond.weights) != prior.K:
        raise InvalidParameterError(
            f"condition has {len(cond.weights)} weights but the prior has {prior.K} components"
        )
    ab = float(s.alpha_bar[t])
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = posterior_mean(prior.conditioned(cond), x_t / np.sqrt(ab), s.equivalent_noise_std(t))
    return EpsPrediction(eps_hat=eps_from_x0(x_t, x0_hat, ab), x0_hat=x0_hat)


def cfg_combine(eps_uncond, eps_cond, w: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + w (eps_cond - eps_uncond).

    Evaluated as (1 - w) eps_uncond + w eps_cond so that w = 0 and w = 1 return
    the respective branch bit for bit.
    """
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise InvalidParameterError(f"shape mismatch {eps_uncond.shape} vs {eps_cond.shape}")
    return (1.0 - w) * eps_uncond + w * eps_cond


def nfe_per_call(cond: Condition) -> int:
    """Guided evaluations run both branches; unconditional ones run one."""
    return 2 if cond.is_conditional else 1


def guided_eps(prior: GaussianMixturePrior, cond: Condition, w: float, x_t, t: int,
               s: Schedule) -> tuple[EpsPrediction, int]:
    """Noise prediction under CFG with strength ``w``, plus the NFEs it cost."""
    uncond = eval_eps(prior, Condition.unconditional(), x_t, t, s)
    if not cond.is_conditional:
        return uncond, 1
    conditional = eval_eps(prior, cond, x_t, t, s)
    eps = cfg_combine(uncond.eps_hat, conditional.eps_hat, w)
    return EpsPrediction(eps_hat=eps, x0_hat=x0_from_eps(x_t, eps, float(s.alpha_bar[t]))), 2


def empirical_prior(points, bandwidth: float) -> GaussianMixturePrior:
    """Equal-weight mixture of isotropic Gaussians of std ``bandwidth`` at the data points."""
    points = np.array(points, dtype=np.float64, ndmin=2)
    if points.shape[0] == 0:
        raise InvalidParameterError("empirical prior needs at least one point")
    if not (np.isfinite(bandwidth) and bandwidth > 0):
        raise InvalidParameterError(f"bandwidth must be positive and finite, got {bandwidth}")
    K, n = points.shape
    covs = np.broadcast_to(bandwidth**2 * np.eye(n), (K, n, n)).copy()
    return GaussianMixturePrior(np.full(K, 1.0 / K), points, covs)


# Prior files are TOML:
#
#   dim = 2
#   K = 2
#   weights = [0.5, 0.5]
#   means = [[3.0, 0.0], [-3.0, 0.0]]
#   covariances = [[1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 1.0]]   # row-major n*n
#
# Floats are written with repr() so a save/load cycle is exact.

def _fmt_list(values) -> str:
    return "[" + ", ".join(repr(float(v)) for v in values) + "]"


def dumps_prior(prior: GaussianMixturePrior) -> str:
    lines = [f"dim = {prior.dim}", f"K = {prior.K}", f"weights = {_fmt_list(prior.weights)}", "means = ["]
    lines += [f"  {_fmt_list(m)}," for m in prior.means]
    lines += ["]", "covariances = ["]
    lines += [f"  {_fmt_list(c.ravel())}," for c in prior.covariances]
    lines += ["]"]
    return "\n".join(lines) + "\n"


def loads_prior(text: str) -> GaussianMixturePrior:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise FormatError(f"prior file is not valid TOML: {exc}") from exc
    unknown = set(doc) - {"dim", "K", "weights", "means", "covariances"}
    if unknown:
        raise FormatError(f"unknown keys in prior file: {sorted(unknown)}")
    try:
        n = int(doc["dim"])
        weights = np.asarray(doc["weights"], dtype=np.float64)
        if "K" in doc and int(doc["K"]) != len(weights):
            raise FormatError(f"K = {doc['K']} but {len(weights)} weights given")
        means = np.asarray(doc["means"], dtype=np.float64).reshape(len(weights), n)
        covs = np.asarray(doc["covariances"], dtype=np.float64).reshape(len(weights), n, n)
    except KeyError as exc:
        raise FormatError(f"prior file missing key {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise FormatError(f"prior file has inconsistent shapes: {exc}") from exc
    try:
        return GaussianMixturePrior(weights, means, covs)
    except InvalidParameterError as exc:
        raise FormatError(f"invalid prior: {exc}") from exc


def save_prior(prior: GaussianMixturePrior, path) -> None:
    Path(path).write_text(dumps_prior(prior))


def load_prior(path) -> GaussianMixturePrior:
    return loads_prior(Path(path).read_text())
