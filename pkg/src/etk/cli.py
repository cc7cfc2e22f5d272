"""Command-line front end.

Every command reads one TOML run configuration (``--config``). Unknown keys
are rejected. Paths inside a config are resolved relative to the config file;
``prior = "default"`` selects the prior shipped with the package. Outputs go
to ``output_dir`` and depend only on the config and its inputs.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.

Example::

    seed = 0
    prior = "default"
    output_dir = "out"

    [schedule]
    T = 200

    [source]
    component = 0          # or: signal = "x.etk", or signal = [0.1, ...]

    [plan]
    method = "zeta"
    cond_src = "unconditional"
    cond_tgt = [0.0, 1.0]
    w_tgt = 3.0
    T_start = 100
    trace = true
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import container, presets
from .denoiser import Condition, GaussianMixturePrior, load_prior
from .errors import ETKError, FormatError, InvalidParameterError, NumericalError
from .eval import CurveSetup, FeatureExtractor, rows_to_csv, tradeoff_curve
from .inversion import ddpm_invert
from .oracle import format_results, identity_suite
from .pipelines import run_edit, zeus_inversion_depth, zeus_pc_range
from .sampler import PER_STEP, EditPlan, predict_nfe, replay
from .schedule import Schedule, build_schedule
from .zeus import (DEFAULT_ITERS, DEFAULT_PROBE_C, DEFAULT_RHO, LambdaProfile, PCBundle,
                   average_lambda, extract_pcs)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

TRACE_COLUMNS = ("t", "norm_x_t", "dist_x0_hat_src", "nfe")


class ConfigError(InvalidParameterError):
    pass


# section -> key -> accepted python types
_SCHEMA = {
    "": {"seed": (int,), "prior": (str,), "output_dir": (str,)},
    "schedule": {"T": (int,), "beta_min": (float, int), "beta_max": (float, int), "eta": (float, int)},
    "source": {"signal": (str, list), "component": (int,), "index": (int,)},
    "plan": {
        "method": (str,), "cond_src": (str, list), "cond_tgt": (str, list), "w_src": (float, int),
        "w_tgt": (float, int), "T_start": (int,), "T_end": (int,), "t_prime": (int, str),
        "gamma": (float, int), "pcs": (str,), "mask": (list,), "delta": (float, int),
        "sdedit_prompt": (str,), "ddim_refine": (int,), "trace": (bool,),
    },
    "zeus": {"n_pcs": (int,), "iters": (int,), "probe_c": (float,), "rho": (float, int),
             "profile": (str,), "t_range": (list,)},
    "eval": {"feature_seed": (int,), "widths": (list,), "reference_prior": (str,),
             "reference_size": (int,), "t0_std": (float,)},
    "curve": {"methods": (list,), "grid": (list,), "n_signals": (int,), "source_component": (int,),
              "t_prime": (int, str), "gamma": (float, int)},
}


@dataclass
class RunConfig:
    path: Path
    seed: int
    prior: GaussianMixturePrior
    schedule: Schedule
    output_dir: Path
    plan: EditPlan | None
    trace: bool = False
    source: dict = field(default_factory=dict)
    zeus: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    curve: dict = field(default_factory=dict)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.path.parent / p

    def existing(self, rel: str) -> Path:
        p = self.resolve(rel)
        if not p.is_file():
            raise ConfigError(f"referenced file does not exist: {p}")
        return p

    @property
    def n_pcs(self) -> int:
        return int(self.zeus.get("n_pcs", 1))

    @property
    def iters(self) -> int:
        return int(self.zeus.get("iters", DEFAULT_ITERS))

    @property
    def probe_c(self) -> float:
        return float(self.zeus.get("probe_c", DEFAULT_PROBE_C))

    @property
    def rho(self) -> float:
        return float(self.zeus.get("rho", DEFAULT_RHO))

    def require_plan(self) -> EditPlan:
        if self.plan is None:
            raise ConfigError("this command needs a [plan] section")
        return self.plan


def _check_keys(doc: dict) -> None:
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            section, prefix = value, key + "."
            allowed = _SCHEMA[key]
        else:
            section, prefix, allowed = {key: value}, "", _SCHEMA[""]
        for k, v in section.items():
            if k not in allowed:
                raise ConfigError(f"unknown config key {prefix + k!r}")
            types = allowed[k]
            if isinstance(v, bool) and bool not in types:
                raise ConfigError(f"config key {prefix + k!r} has the wrong type")
            if not isinstance(v, types):
                raise ConfigError(f"config key {prefix + k!r} has the wrong type ({type(v).__name__})")


def parse_condition(value, K: int, key: str) -> Condition:
    if value == "unconditional":
        return Condition()
    if isinstance(value, list):
        if len(value) != K:
            raise ConfigError(f"{key}: {len(value)} weights for a {K}-component prior")
        return Condition.component([float(v) for v in value])
    raise ConfigError(f"{key}: expected 'unconditional' or a list of component weights")


def parse_pc_selector(text: str) -> tuple[tuple[int, float], ...]:
    """'1:1.0,3:-0.5' -> ((1, 1.0), (3, -0.5)); indices are 1-based."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            i, c = item.split(":")
            out.append((int(i), float(c)))
        except ValueError:
            raise ConfigError(f"bad PC selector entry {item!r}; expected index:coefficient") from None
    return tuple(out)


def _load_prior_ref(ref: str, cfg_path: Path) -> GaussianMixturePrior:
    if ref == "default":
        return presets.default_prior()
    p = Path(ref)
    p = p if p.is_absolute() else cfg_path.parent / p
    if not p.is_file():
        raise ConfigError(f"referenced file does not exist: {p}")
    return load_prior(p)


def _build_plan(doc: dict, prior: GaussianMixturePrior, seed: int) -> EditPlan:
    kw = {"seed": seed}
    for key in ("method", "sdedit_prompt"):
        if key in doc:
            kw[key] = doc[key]
    for key in ("w_src", "w_tgt", "gamma", "delta"):
        if key in doc:
            kw[key] = float(doc[key])
    for key in ("T_start", "T_end", "ddim_refine"):
        if key in doc:
            kw[key] = int(doc[key])
    for key in ("cond_src", "cond_tgt"):
        if key in doc:
            kw[key] = parse_condition(doc[key], prior.K, "plan." + key)
    if "t_prime" in doc:
        tp = doc["t_prime"]
        if isinstance(tp, str) and tp != PER_STEP:
            raise ConfigError(f"plan.t_prime must be an integer or {PER_STEP!r}")
        kw["t_prime"] = tp
    if "pcs" in doc:
        kw["pc_selector"] = parse_pc_selector(doc["pcs"])
    if "mask" in doc:
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in doc["mask"]):
            raise ConfigError("plan.mask must be a list of integer coordinates")
        kw["mask"] = tuple(doc["mask"])
    if "method" not in kw:
        raise ConfigError("plan.method is required")
    return EditPlan(**kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        doc = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    _check_keys(doc)
    seed = int(doc.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    prior = _load_prior_ref(doc.get("prior", "default"), path)
    sched = doc.get("schedule", {})
    schedule = build_schedule(int(sched.get("T", 200)), float(sched.get("beta_min", 1e-4)),
                              float(sched.get("beta_max", 0.02)), float(sched.get("eta", 1.0)))
    out = Path(doc.get("output_dir", "out"))
    out = out if out.is_absolute() else path.parent / out
    plan = None
    if "plan" in doc:
        plan = _build_plan(doc["plan"], prior, seed)
        plan.validate(schedule, prior.dim)
    return RunConfig(path=path, seed=seed, prior=prior, schedule=schedule, output_dir=out, plan=plan,
                     trace=bool(doc.get("plan", {}).get("trace", False)), source=doc.get("source", {}),
                     zeus=doc.get("zeus", {}), eval=doc.get("eval", {}), curve=doc.get("curve", {}))


def load_source(cfg: RunConfig) -> np.ndarray:
    src = cfg.source
    if "signal" in src:
        if "component" in src:
            raise ConfigError("source: give either signal or component, not both")
        sig = src["signal"]
        if isinstance(sig, list):
            x = np.asarray(sig, dtype=np.float64)
        else:
            x = container.read_signal(cfg.existing(sig))
    else:
        k = int(src.get("component", 0))
        if not (0 <= k < cfg.prior.K):
            raise ConfigError(f"source.component {k} outside 0..{cfg.prior.K - 1}")
        idx = int(src.get("index", 0))
        x = presets.draw_sources(cfg.prior, k, idx + 1, cfg.seed)[idx]
    if x.shape != (cfg.prior.dim,):
        raise ConfigError(f"source signal has shape {x.shape}, prior dimension is {cfg.prior.dim}")
    return x


def _pc_range(cfg: RunConfig, plan: EditPlan) -> tuple[int, int]:
    if "t_range" in cfg.zeus:
        r = cfg.zeus["t_range"]
        if len(r) != 2:
            raise ConfigError("zeus.t_range must be [t_lo, t_hi]")
        return int(r[0]), int(r[1])
    if plan.method == "zeus":
        return zeus_pc_range(plan)
    return plan.T_end, plan.T_start


def _profile(cfg: RunConfig) -> LambdaProfile | None:
    if "profile" in cfg.zeus:
        return LambdaProfile.load(cfg.existing(cfg.zeus["profile"]))
    return None


def _fmt(v: float) -> str:
    return repr(float(v))


def trace_csv(trace, x_src: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for step in trace:
        writer.writerow([step.t, _fmt(np.linalg.norm(step.x_t)),
                         _fmt(np.linalg.norm(step.x0_hat - x_src)), step.nfe])
    return buf.getvalue()


def _emit(line: str) -> None:
    print(line)


def cmd_invert(cfg: RunConfig) -> int:
    plan = cfg.require_plan()
    x0 = load_source(cfg)
    traj = ddpm_invert(x0, cfg.prior, plan.cond_src, plan.w_src, cfg.schedule, plan.T_start, cfg.seed)
    err = float(np.max(np.abs(replay(traj, cfg.prior, cfg.schedule).x0 - x0)))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "trajectory.etk"
    traj.save(out)
    _emit(f"trajectory: {out}")
    _emit(f"reconstruction_error: {err:.3e}")
    _emit(f"nfe: {traj.nfe}")
    return EXIT_OK


def cmd_edit(cfg: RunConfig) -> int:
    plan = cfg.require_plan()
    x0 = load_source(cfg)
    profile = _profile(cfg)
    if plan.method == "zeus" and plan.t_prime != PER_STEP and profile is None:
        raise ConfigError("zeus with a fixed t_prime needs zeus.profile (see the lambda-avg command)")
    res = run_edit(x0, cfg.prior, plan, cfg.schedule, profile=profile, n_pcs=cfg.n_pcs, iters=cfg.iters,
                   probe_c=cfg.probe_c, rho=cfg.rho, record_trace=cfg.trace)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "edited.etk"
    container.write_signal(out, res.x0, method=plan.method, nfe=res.nfe, seed=plan.seed,
                           schedule_id=cfg.schedule.schedule_id)
    _emit(f"edited: {out}")
    if cfg.trace:
        tpath = cfg.output_dir / "trace.csv"
        tpath.write_text(trace_csv(res.trace, x0))
        _emit(f"trace: {tpath}")
    for part, n in res.nfe_breakdown.items():
        _emit(f"nfe_{part}: {n}")
    _emit(f"nfe: {res.nfe}")
    return EXIT_OK


def compute_bundle(cfg: RunConfig) -> tuple[PCBundle, int]:
    plan = cfg.require_plan()
    x0 = load_source(cfg)
    t_lo, t_hi = _pc_range(cfg, plan)
    depth = max(t_hi, zeus_inversion_depth(plan) if plan.method == "zeus" else plan.T_start)
    traj = ddpm_invert(x0, cfg.prior, plan.cond_src, plan.w_src, cfg.schedule, depth, cfg.seed)
    bundle, nfe = extract_pcs(traj, cfg.prior, cfg.schedule, (t_lo, t_hi), cfg.n_pcs, cfg.iters,
                              cfg.probe_c, cfg.rho, mask=plan.mask, seed=cfg.seed)
    return bundle, traj.nfe + nfe


def cmd_pcs(cfg: RunConfig) -> int:
    bundle, nfe = compute_bundle(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "pcs.etk"
    bundle.save(out)
    _emit(f"pcs: {out}")
    _emit(f"timesteps: {bundle.timesteps[-1]}..{bundle.timesteps[0]}")
    _emit(f"nfe: {nfe}")
    return EXIT_OK


def cmd_lambda_avg(inputs: list[str], out: str | None) -> int:
    """Average eigenvalues over PC bundles, given as ETK1 files or configs to compute them from."""
    bundles, first_cfg = [], None
    for item in inputs:
        p = Path(item)
        if not p.is_file():
            raise ConfigError(f"input does not exist: {p}")
        if p.read_bytes()[:4] == container.MAGIC:
            bundles.append(PCBundle.load(p))
        else:
            cfg = load_config(p)
            first_cfg = first_cfg or cfg
            bundles.append(compute_bundle(cfg)[0])
    profile = average_lambda(bundles)
    if out is not None:
        path = Path(out)
    elif first_cfg is not None:
        path = first_cfg.output_dir / "lambda.etk"
    else:
        raise ConfigError("lambda-avg needs --out when only bundle files are given")
    path.parent.mkdir(parents=True, exist_ok=True)
    profile.save(path)
    _emit(f"profile: {path}")
    _emit(f"bundles: {profile.n_bundles}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    results = identity_suite(cfg.prior, cfg.schedule, seed=cfg.seed)
    _emit(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _emit(f"{len(failed)} check(s) failed")
        return EXIT_NUMERIC
    _emit("all checks passed")
    return EXIT_OK


def curve_setup(cfg: RunConfig) -> CurveSetup:
    ev = cfg.eval
    features = FeatureExtractor(cfg.prior.dim, tuple(int(w) for w in ev.get("widths", (6, 6, 6, 6))),
                                seed=int(ev.get("feature_seed", cfg.seed)))
    ref = ev.get("reference_prior", "target")
    if ref == "target":
        plan = cfg.require_plan()
        if not plan.cond_tgt.is_conditional:
            raise ConfigError("eval.reference_prior = 'target' needs a conditional plan.cond_tgt")
        ref_prior = cfg.prior.conditioned(plan.cond_tgt)
    else:
        ref_prior = _load_prior_ref(ref, cfg.path)
    if ref_prior.dim != cfg.prior.dim:
        raise ConfigError("reference prior dimension differs from the prior's")
    reference = presets.reference_set(ref_prior, cfg.seed, int(ev.get("reference_size", presets.REFERENCE_SET_SIZE)))
    return CurveSetup(cfg.prior, cfg.schedule, features, reference, float(ev.get("t0_std", 0.1)),
                      cfg.n_pcs, cfg.iters, cfg.probe_c, cfg.rho)


def cmd_curve(cfg: RunConfig) -> int:
    from dataclasses import replace

    plan = cfg.require_plan()
    cv = cfg.curve
    methods = cv.get("methods", [plan.method])
    grid = [int(v) for v in cv.get("grid", [40, 80, 120, 160, 200])]
    for T0 in grid:
        if not (1 <= T0 <= cfg.schedule.T):
            raise ConfigError(f"curve.grid value {T0} outside [1, {cfg.schedule.T}]")
    templates = []
    for m in methods:
        kw = {"method": m}
        if m == "zeus":
            kw["t_prime"] = cv.get("t_prime", plan.t_prime if plan.t_prime is not None else PER_STEP)
            kw["gamma"] = float(cv.get("gamma", plan.gamma))
            kw["pc_selector"] = plan.pc_selector or ((1, 1.0),)
        try:
            templates.append(replace(plan, **kw))
        except InvalidParameterError as exc:
            raise ConfigError(f"curve method {m!r}: {exc}") from exc
    profile = _profile(cfg)
    for tpl in templates:
        if tpl.method == "zeus" and tpl.t_prime != PER_STEP and profile is None:
            raise ConfigError("zeus curves with a fixed t_prime need zeus.profile")
        if tpl.method == "ddim" and grid != [cfg.schedule.T]:
            raise ConfigError("full DDIM only runs from T_start = T; use ddim-partial in curves")
    n = int(cv.get("n_signals", 32))
    k = int(cv.get("source_component", cfg.source.get("component", 0)))
    if not (0 <= k < cfg.prior.K):
        raise ConfigError(f"curve.source_component {k} outside 0..{cfg.prior.K - 1}")
    sources = presets.draw_sources(cfg.prior, k, n, cfg.seed)
    rows = tradeoff_curve(sources, templates, grid, curve_setup(cfg), seed=cfg.seed, profile=profile)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "curve.csv"
    out.write_text(rows_to_csv(rows))
    _emit(f"curve: {out}")
    _emit(f"rows: {len(rows)}")
    return EXIT_OK


def cmd_nfe(cfg: RunConfig) -> int:
    plan = cfg.require_plan()
    _emit(f"nfe: {predict_nfe(plan, K=cfg.iters, N=cfg.n_pcs)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etk", description="Zero-shot diffusion editing over analytic priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("invert", "extract the noise trajectory of the source signal"),
        ("edit", "run the configured edit end to end"),
        ("pcs", "compute posterior principal components along the source trajectory"),
        ("verify", "check the closed-form identities on the configured prior"),
        ("curve", "write the adherence/fidelity trade-off table as CSV"),
        ("nfe", "print the predicted number of denoiser evaluations"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run configuration")
    p = sub.add_parser("lambda-avg", help="average PC eigenvalues into a lambda profile")
    p.add_argument("inputs", nargs="+", help="PC bundle files (.etk) or run configurations")
    p.add_argument("--out", help="output path (default: <output_dir>/lambda.etk of the first config)")
    return parser


_COMMANDS = {"invert": cmd_invert, "edit": cmd_edit, "pcs": cmd_pcs, "verify": cmd_verify,
             "curve": cmd_curve, "nfe": cmd_nfe}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "lambda-avg":
            return cmd_lambda_avg(args.inputs, args.out)
        return _COMMANDS[args.command](load_config(args.config))
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ETKError, ValueError, FormatError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
