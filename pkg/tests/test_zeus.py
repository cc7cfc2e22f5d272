import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from etk.denoiser import Condition, GaussianMixturePrior
from etk.errors import InvalidParameterError, NumericalError
from etk.inversion import ddpm_invert
from etk.oracle import analytic_posterior_cov, analytic_posterior_eigs, principal_angle_deg
from etk.pipelines import run_edit
from etk.presets import standard_sources
from etk.sampler import EditPlan, ddpm_reverse, replay
from etk.zeus import (LambdaProfile, PCBundle, _orthonormalize, asymmetric_shift_ratio, average_lambda,
                      extract_pcs, pc_entropy, perturbation_hook)

DIM = 6


@pytest.fixture(scope="module")
def diag_prior():
    return GaussianMixturePrior([1.0], [np.zeros(DIM)], [np.diag([4.0] + [1.0] * (DIM - 1))])


@pytest.fixture(scope="module")
def diag_traj(sched, diag_prior):
    x0 = np.linspace(-1, 1, DIM)
    return ddpm_invert(x0, diag_prior, Condition(), 1.0, sched, 200, seed=3)


@pytest.mark.parametrize("t", [50, 120, 200])
def test_top_pc_of_diagonal_prior(sched, diag_prior, diag_traj, t):
    bundle, nfe = extract_pcs(diag_traj, diag_prior, sched, (t, t), 1)
    assert nfe == 50
    v = bundle.pcs(t)[0]
    assert abs(v[0]) >= 0.99
    ref = analytic_posterior_eigs(diag_prior, diag_traj.states[t], t, sched, 1)
    assert abs(bundle.lambdas(t)[0] / ref.eigenvalues[0] - 1) <= 0.05
    assert pc_entropy(v, 1) < 0.05


def test_small_t_still_orthonormal(sched, diag_prior, diag_traj):
    # at t = 5 the top two posterior eigenvalues differ by 0.05%, so 50 iterations
    # only reach the leading subspace; orthonormality and sorting still hold
    bundle, _ = extract_pcs(diag_traj, diag_prior, sched, (5, 5), 2)
    V = bundle.pcs(5)
    assert np.allclose(V @ V.T, np.eye(2), atol=1e-10)
    assert bundle.lambdas(5)[0] >= bundle.lambdas(5)[1] >= 0


def test_full_spectrum_sums_to_trace(sched, spread):
    x0 = spread.sample(np.random.default_rng(0), 1)[0]
    traj = ddpm_invert(x0, spread, Condition(), 1.0, sched, 100, seed=0)
    bundle, _ = extract_pcs(traj, spread, sched, (100, 100), spread.dim)
    cov = analytic_posterior_cov(spread, traj.states[100], 100, sched)
    assert abs(bundle.lambdas(100).sum() / np.trace(cov) - 1) <= 0.05


def test_rayleigh_quotient_agrees(sched, spread):
    x0 = spread.sample(np.random.default_rng(1), 1)[0]
    traj = ddpm_invert(x0, spread, Condition(), 1.0, sched, 150, seed=1)
    bundle, _ = extract_pcs(traj, spread, sched, (150, 150), 3)
    cov = analytic_posterior_cov(spread, traj.states[150], 150, sched)
    for v, lam in zip(bundle.pcs(150), bundle.lambdas(150)):
        assert abs(lam / (v @ cov @ v) - 1) <= 0.05


@pytest.fixture(scope="module")
def range_bundle(sched, std_prior):
    x0 = standard_sources(1, seed=2)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 60, seed=2)
    return extract_pcs(traj, std_prior, sched, (1, 60), 3, iters=20)[0]


def test_bundle_invariants(range_bundle):
    b = range_bundle
    assert b.timesteps == tuple(range(60, 0, -1))
    for j in range(len(b.timesteps)):
        V = b.vectors[j]
        G = V @ V.T
        assert np.allclose(np.diag(G), 1.0, atol=1e-10)
        assert np.max(np.abs(G - np.diag(np.diag(G)))) <= 1e-8
        lam = b.eigenvalues[j]
        assert np.all(np.diff(lam) <= 0) and np.all(lam >= 0)
    # sign postcondition between consecutive computed steps
    dots = np.einsum("jid,jid->ji", b.vectors[1:], b.vectors[:-1])
    assert np.all(dots >= b.rho)


def test_mask_support(sched, std_prior):
    x0 = standard_sources(1, seed=2)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 40, seed=2)
    mask = (1, 2, 5)
    bundle, _ = extract_pcs(traj, std_prior, sched, (30, 40), 2, iters=10, mask=mask)
    outside = [i for i in range(8) if i not in mask]
    assert np.all(bundle.vectors[:, :, outside] == 0.0)
    with pytest.raises(InvalidParameterError):
        extract_pcs(traj, std_prior, sched, (30, 40), 4, mask=mask)


def test_extract_errors(sched, std_prior):
    traj = ddpm_invert(np.zeros(8), std_prior, Condition(), 1.0, sched, 40, seed=0)
    for kw in (dict(timestep_range=(1, 41), n_pcs=1), dict(timestep_range=(5, 5), n_pcs=0),
               dict(timestep_range=(5, 5), n_pcs=1, probe_c=0.0), dict(timestep_range=(5, 5), n_pcs=1, rho=0.1)):
        with pytest.raises(InvalidParameterError):
            extract_pcs(traj, std_prior, sched, **kw)


def test_extract_without_cache_replays(sched, std_prior):
    x0 = standard_sources(1, seed=2)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 40, seed=2)
    cached, nfe_c = extract_pcs(traj, std_prior, sched, (20, 30), 1, iters=10)
    replayed, nfe_r = extract_pcs(traj.without_cache(), std_prior, sched, (20, 30), 1, iters=10)
    assert nfe_r - nfe_c == 40 - 20 + 1
    assert np.allclose(cached.vectors, replayed.vectors, atol=1e-7)


def test_rank_deficiency(monkeypatch):
    import etk.zeus as zeus
    D = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
    # make the re-randomized columns degenerate as well
    monkeypatch.setattr(zeus, "_init_directions", lambda *a, **k: D.copy())
    with pytest.raises(NumericalError, match="rank-deficient"):
        zeus._orthonormalize(D, None, 0, 5, 0)
    monkeypatch.undo()
    # a duplicated column is re-randomized once and succeeds
    D = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
    Q = _orthonormalize(D, None, 0, 5, 0)
    assert np.allclose(Q.T @ Q, np.eye(2), atol=1e-12)


# -- lambda profiles ------------------------------------------------------------------

def _bundle(eigs, timesteps=(3, 2)):
    eigs = np.asarray(eigs, dtype=float)
    vecs = np.zeros(eigs.shape + (2,))
    vecs[..., 0, 0] = 1.0
    vecs[..., 1, 1] = 1.0
    return PCBundle(timesteps, vecs, eigs, eigs.shape[1], 50, 1e-3, -0.5, None, "x", Condition(), 0)


def test_average_lambda():
    lam = np.array([[3.0, 1.0], [2.0, 0.5]])
    assert np.array_equal(average_lambda([_bundle(lam)]).values, lam)
    assert np.array_equal(average_lambda([_bundle(lam), _bundle(3 * lam)]).values, 2 * lam)
    with pytest.raises(InvalidParameterError):
        average_lambda([])
    with pytest.raises(InvalidParameterError):
        average_lambda([_bundle(lam), _bundle(lam, timesteps=(4, 3))])


@given(st.lists(st.lists(st.floats(0, 100), min_size=3, max_size=3), min_size=1, max_size=16))
def test_average_preserves_order(rows):
    bundles = [_bundle(np.sort(np.array([r, r]), axis=1)[:, ::-1]) for r in rows]
    prof = average_lambda(bundles)
    assert np.all(np.diff(prof.values, axis=1) <= 1e-12)


@given(a=st.lists(st.floats(0, 10), min_size=2, max_size=2), b=st.lists(st.floats(0, 10), min_size=2, max_size=2),
       n=st.integers(1, 5))
def test_average_linearity(a, b, n):
    la, lb = np.array([a, a]), np.array([b, b])
    avg = average_lambda([_bundle(la)] * n + [_bundle(lb)] * n).values
    assert np.allclose(avg, 0.5 * (la + lb), rtol=1e-15, atol=1e-15)


def test_profile_and_bundle_files(tmp_path, range_bundle):
    path = tmp_path / "pcs.etk"
    range_bundle.save(path)
    back = PCBundle.load(path)
    assert back.vectors.tobytes() == range_bundle.vectors.tobytes()
    assert back.eigenvalues.tobytes() == range_bundle.eigenvalues.tobytes()
    assert back.timesteps == range_bundle.timesteps
    prof = average_lambda([range_bundle, back])
    prof.save(tmp_path / "lam.etk")
    again = LambdaProfile.load(tmp_path / "lam.etk")
    assert again.values.tobytes() == prof.values.tobytes() and again.n_bundles == 2


# -- perturbation ----------------------------------------------------------------------

def test_hook_gamma_zero_and_single_step(sched, range_bundle):
    plan = EditPlan("zeus", T_start=40, T_end=40, t_prime="per-step", gamma=0.0, pc_selector=((2, 1.0),))
    hook = perturbation_hook(range_bundle, None, plan, sched)
    assert np.array_equal(hook.term(40), np.zeros(8))
    plan = EditPlan("zeus", T_start=40, T_end=40, t_prime="per-step", gamma=1.7, pc_selector=((2, 1.0),))
    hook = perturbation_hook(range_bundle, None, plan, sched)
    expect = 1.7 * sched.drift_coefficient(40) * math.sqrt(range_bundle.lambdas(40)[1]) * range_bundle.pcs(40)[1]
    assert np.allclose(hook.term(40), expect, rtol=0, atol=1e-15)
    assert np.array_equal(hook.term(39), np.zeros(8))


def test_hook_requirements(sched, range_bundle):
    fixed = EditPlan("zeus", T_start=40, t_prime=30, gamma=1.0, pc_selector=((1, 1.0),))
    with pytest.raises(InvalidParameterError):
        perturbation_hook(range_bundle, None, fixed, sched)
    bad = EditPlan("zeus", T_start=40, t_prime="per-step", gamma=1.0, pc_selector=((4, 1.0),))
    with pytest.raises(InvalidParameterError):
        perturbation_hook(range_bundle, None, bad, sched)
    wide = EditPlan("zeus", T_start=70, t_prime="per-step", gamma=1.0, pc_selector=((1, 1.0),))
    with pytest.raises(InvalidParameterError):
        perturbation_hook(range_bundle, None, wide, sched)


def test_fixed_t_prime_uses_profile(sched, range_bundle):
    prof = average_lambda([range_bundle])
    plan = EditPlan("zeus", T_start=40, T_end=10, t_prime=25, gamma=2.0, pc_selector=((1, 1.0), (3, -0.5)))
    hook = perturbation_hook(range_bundle, prof, plan, sched)
    V = range_bundle.pcs(25)
    for t in (40, 25, 10):
        lam = prof.values[prof.timesteps.index(t)]
        d = math.sqrt(lam[0]) * V[0] - 0.5 * math.sqrt(lam[2]) * V[2]
        assert np.allclose(hook.term(t), 2.0 * sched.drift_coefficient(t) * d, atol=1e-14)
    assert np.array_equal(hook.term(9), np.zeros(8))


def test_gamma_zero_equals_replay(sched, std_prior):
    x0 = standard_sources(1, seed=6)[0]
    plan = EditPlan("zeus", T_start=50, T_end=1, t_prime="per-step", gamma=0.0, pc_selector=((1, 1.0),))
    out = run_edit(x0, std_prior, plan, sched, iters=5).x0
    rep = replay(ddpm_invert(x0, std_prior, Condition(), 3.0, sched, 50, 0), std_prior, sched).x0
    assert out.tobytes() == rep.tobytes()


def test_mean_and_eps_perturbation_agree(sched, std_prior):
    x0 = standard_sources(1, seed=6)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 60, seed=0)
    bundle, _ = extract_pcs(traj, std_prior, sched, (1, 60), 2, iters=10)
    plan = EditPlan("zeus", T_start=60, t_prime="per-step", gamma=3.0, pc_selector=((1, 1.0), (2, 0.5)))
    hook = perturbation_hook(bundle, None, plan, sched)
    a = ddpm_reverse(traj.x_start, traj, std_prior, plan, sched, hook, perturb_in="mean", record_trace=True)
    b = ddpm_reverse(traj.x_start, traj, std_prior, plan, sched, hook, perturb_in="eps", record_trace=True)
    assert max(np.max(np.abs(sa.x_prev - sb.x_prev)) for sa, sb in zip(a.trace, b.trace)) <= 1e-10


def test_asymmetric_ratio(sched):
    assert asymmetric_shift_ratio(sched, 1) == pytest.approx(1.0, abs=1e-15)
    ab, abp, sig = sched.alpha_bar[150], sched.alpha_bar[149], sched.sigma[150]
    c = math.sqrt(abp) - math.sqrt(ab) * math.sqrt(1 - abp - sig**2) / math.sqrt(1 - ab)
    assert abs(asymmetric_shift_ratio(sched, 150) - c / math.sqrt(abp)) <= 1e-12


def test_pc_entropy():
    assert pc_entropy(np.ones(12), 3) == pytest.approx(math.log(4), abs=1e-15)
    assert pc_entropy(np.r_[np.zeros(3), [1.0, -2.0, 0.5], np.zeros(6)], 3) == 0.0
    with pytest.raises(InvalidParameterError):
        pc_entropy(np.zeros(6), 3)
    with pytest.raises(InvalidParameterError):
        pc_entropy(np.ones(7), 3)
