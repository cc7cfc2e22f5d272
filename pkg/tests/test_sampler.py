import numpy as np
import pytest

from etk.denoiser import Condition
from etk.errors import InvalidParameterError, NumericalError
from etk.inversion import ddpm_invert
from etk.pipelines import run_edit
from etk.presets import standard_sources
from etk.sampler import EditPlan, ddpm_reverse, masked_blend, predict_nfe, replay

TGT = Condition.one_hot(1, 2)


def test_plan_validation(sched):
    with pytest.raises(InvalidParameterError):
        EditPlan("bogus")
    with pytest.raises(InvalidParameterError):
        EditPlan("zeus", t_prime=10)
    with pytest.raises(InvalidParameterError):
        EditPlan("zeta", delta=1.5)
    with pytest.raises(InvalidParameterError):
        EditPlan("zeta", T_start=50, T_end=60).validate(sched)
    with pytest.raises(InvalidParameterError):
        EditPlan("zeta", T_start=201).validate(sched)
    with pytest.raises(InvalidParameterError):
        EditPlan("ddim", T_start=100).validate(sched)
    with pytest.raises(InvalidParameterError):
        EditPlan("sdedit", mask=(0,)).validate(sched)
    with pytest.raises(InvalidParameterError):
        EditPlan("zeta", mask=(9,)).validate(sched, 8)
    with pytest.raises(InvalidParameterError):
        EditPlan("zeus", pc_selector=((1, 1.0),)).validate(sched)
    assert EditPlan("zeta").delta == 0.025


def test_replay_with_same_condition(sched, std_prior):
    x0 = standard_sources(1, seed=5)[0]
    plan = EditPlan("zeta", cond_src=TGT, cond_tgt=TGT, w_src=3.0, w_tgt=3.0, T_start=150)
    assert np.max(np.abs(run_edit(x0, std_prior, plan, sched).x0 - x0)) <= 1e-8


def test_zeta_distance_grows_with_t_start(sched, std_prior):
    srcs = standard_sources(8, seed=1)
    dist = {}
    for T0 in (60, 200):
        plan = EditPlan("zeta", cond_tgt=TGT, w_tgt=3.0, T_start=T0)
        dist[T0] = np.mean([np.linalg.norm(run_edit(x, std_prior, plan, sched).x0 - x) for x in srcs])
    assert dist[60] < dist[200]


def test_determinism(sched, std_prior):
    x0 = standard_sources(1, seed=0)[0]
    for method in ("zeta", "sdedit"):
        plan = EditPlan(method, cond_tgt=TGT, w_tgt=3.0, T_start=80, seed=3)
        a = run_edit(x0, std_prior, plan, sched).x0
        b = run_edit(x0, std_prior, plan, sched).x0
        assert a.tobytes() == b.tobytes()


def test_trace_records_every_step(sched, std_prior):
    x0 = standard_sources(1, seed=0)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 30, 0)
    res = replay(traj, std_prior, sched, record_trace=True)
    assert [st.t for st in res.trace] == list(range(30, 0, -1))
    assert res.trace[-1].nfe == res.nfe == 30
    assert np.array_equal(res.trace[-1].x_prev, res.x0)


def test_non_finite_state_reports_timestep(sched, std_prior):
    class Bad:
        def mean_shift(self, t):
            return np.full(8, np.nan) if t == 5 else None

        def eps_shift(self, t):
            return None

    x0 = np.zeros(8)
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 10, 0)
    plan = EditPlan("ddpm-replay", T_start=10, w_src=1.0)
    with pytest.raises(NumericalError, match="t=5"):
        ddpm_reverse(traj.x_start, traj, std_prior, plan, sched, Bad())


def test_trajectory_start_must_match_plan(sched, std_prior):
    traj = ddpm_invert(np.zeros(8), std_prior, Condition(), 1.0, sched, 10, 0)
    with pytest.raises(InvalidParameterError):
        ddpm_reverse(traj.x_start, traj, std_prior, EditPlan("zeta", T_start=12), sched)


# -- masked blending ---------------------------------------------------------------

def test_masked_blend_limits():
    rng = np.random.default_rng(0)
    x, orig = rng.standard_normal((2, 6))
    mask = (1, 4)
    full = masked_blend(x, orig, mask, 1.0)
    assert np.array_equal(full[[0, 2, 3, 5]], orig[[0, 2, 3, 5]])
    assert np.array_equal(full[[1, 4]], x[[1, 4]])
    assert np.array_equal(masked_blend(x, orig, mask, 0.0), x)
    with pytest.raises(InvalidParameterError):
        masked_blend(x, orig, (6,), 0.5)
    with pytest.raises(InvalidParameterError):
        masked_blend(x, orig[:3], mask, 0.5)


def test_masked_blend_geometric_decay():
    orig = np.array([2.0, -1.0, 0.5])
    x = np.array([5.0, 3.0, -4.0])
    dev0 = x - orig
    for k in range(1, 101):
        x = masked_blend(x, orig, (0,), 0.025)
        expect = 0.975**k * dev0[1:]
        assert np.allclose(x[1:] - orig[1:], expect, rtol=1e-12)
    assert x[0] == 5.0


def test_mask_with_full_delta_keeps_outside(sched, std_prior):
    x0 = standard_sources(1, seed=4)[0]
    mask = (0, 1, 2)
    plan = EditPlan("zeta", cond_tgt=TGT, w_tgt=3.0, T_start=100, mask=mask, delta=1.0)
    out = run_edit(x0, std_prior, plan, sched).x0
    rec = replay(ddpm_invert(x0, std_prior, Condition(), 3.0, sched, 100, 0), std_prior, sched).x0
    assert np.array_equal(out[3:], rec[3:])
    assert np.max(np.abs(out[:3] - x0[:3])) > 1e-3


# -- NFE accounting ----------------------------------------------------------------

def test_predict_nfe_examples():
    assert predict_nfe(EditPlan("zeta", cond_tgt=TGT, T_start=100)) == 300
    zeus = EditPlan("zeus", T_start=100, t_prime=80, pc_selector=((1, 1.0),))
    assert predict_nfe(zeus, K=50, N=1) == 250
    assert predict_nfe(EditPlan("zeus", cond_src=TGT, T_start=100, t_prime=80, pc_selector=((1, 1.0),))) == 500
    assert predict_nfe(EditPlan("zeus", T_start=100, t_prime=150, pc_selector=((1, 1.0),))) == 300
    assert predict_nfe(EditPlan("sdedit", cond_tgt=TGT, T_start=0)) == 0
    assert predict_nfe(EditPlan("sdedit", cond_tgt=TGT, T_start=70)) == 140
    assert predict_nfe(EditPlan("zeta", cond_src=TGT, cond_tgt=TGT, T_start=100)) == 400


@pytest.mark.parametrize("method", ["ddpm-replay", "zeta", "sdedit", "ddim-partial"])
@pytest.mark.parametrize("src", [Condition(), Condition.one_hot(0, 2)])
def test_instrumented_nfe(sched, std_prior, method, src):
    x0 = standard_sources(1, seed=0)[0]
    plan = EditPlan(method, cond_src=src, cond_tgt=TGT, w_tgt=3.0, T_start=40, ddim_refine=1)
    assert run_edit(x0, std_prior, plan, sched).nfe == predict_nfe(plan)


def test_perturbation_mean_vs_eps_paths(sched, std_prior):
    class Push:
        def __init__(self):
            self.v = np.linspace(-1, 1, 8)

        def mean_shift(self, t):
            return sched.drift_coefficient(t) * self.v

        def eps_shift(self, t):
            ab = sched.alpha_bar[t]
            return np.sqrt(ab) / np.sqrt(1 - ab) * self.v

    x0 = standard_sources(1, seed=0)[0]
    traj = ddpm_invert(x0, std_prior, Condition(), 1.0, sched, 50, 0)
    plan = EditPlan("ddpm-replay", T_start=50, w_src=1.0)
    a = ddpm_reverse(traj.x_start, traj, std_prior, plan, sched, Push(), perturb_in="mean", record_trace=True)
    b = ddpm_reverse(traj.x_start, traj, std_prior, plan, sched, Push(), perturb_in="eps", record_trace=True)
    for sa, sb in zip(a.trace, b.trace):
        assert np.max(np.abs(sa.x_prev - sb.x_prev)) <= 1e-10
