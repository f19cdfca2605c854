"""Experiment configuration, deterministic orchestration and the command line.

Each subcommand reads an :class:`ExperimentConfig` (JSON, optionally
overridden by flags), runs one experiment and writes its outputs to the
output directory:

* ``record.json``  - config echo, results, checks and failure counters;
* ``run.json``     - wall-clock timings and execution settings (worker count,
  output directory), kept apart so that every other file is a pure function
  of the experiment parameters;
* experiment-specific CSV files with 17 significant digits.

Exit codes: 0 pass, 1 acceptance failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import control as ct
from . import duality as du
from . import lqc
from .columnar import save_rough_path, write_columnar
from .errors import InvalidArgumentError, RoughCtlError
from .rde import ControlPath, VectorFieldSet, solve_controlled_rde, wong_zakai_ladder
from .rough_path import brownian_values, lift_piecewise_linear, make_uniform_grid, sample_brownian_lift

logger = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
FIXTURES = ("lqc-additive", "lqc-multiplicative", "translation", "sine-drift")
PENALTIES = ("rogers", "db", "zero")
EXECUTION_KEYS = ("workers", "out")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run bit for bit."""

    fixture: str = "lqc-additive"
    params: dict = field(default_factory=dict)
    grid_n: int = 256
    substeps: int = 4
    mesh_nodes: int = 401
    controls: int = 41
    control_range: list = field(default_factory=lambda: [-4.0, 4.0])
    n_paths: int = 2000
    seed: int = 0
    penalty: str = "rogers"
    x0: float = 1.0
    riccati_steps: int = 4096
    tolerance: float | None = None
    workers: int = 1
    out: str = "out"
    levels: list = field(default_factory=list)
    samples: int = 64
    hjb_half_width: float = 6.0
    hjb_interior: float = 0.25
    spike_time: float = 0.25
    spike_control: float = 2.0
    spike_exponents: list = field(default_factory=lambda: [3, 4, 5, 6, 7, 8])

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.fixture not in FIXTURES:
            raise InvalidArgumentError(f"unknown fixture {self.fixture!r}; expected one of {FIXTURES}")
        if self.penalty not in PENALTIES:
            raise InvalidArgumentError(f"unknown penalty {self.penalty!r}; expected one of {PENALTIES}")
        for name in ("grid_n", "substeps", "mesh_nodes", "controls", "n_paths", "riccati_steps", "workers",
                     "samples"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {value!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgumentError("seed must be a non-negative integer")
        if len(self.control_range) != 2 or not self.control_range[0] < self.control_range[1]:
            raise InvalidArgumentError("control_range must be [lower, upper] with lower < upper")
        if not isinstance(self.params, dict):
            raise InvalidArgumentError("params must be an object")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidArgumentError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def sampler(self, T=1.0) -> du.SamplerSettings:
        return du.SamplerSettings(T, self.grid_n, self.seed, self.substeps)

    def control_points(self):
        return ct.uniform_controls(self.control_range[0], self.control_range[1], self.controls)


@dataclass
class RunRecord:
    command: str
    config: dict
    results: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    failures: int = 0
    version: str = __version__
    timings: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        body = {k: v for k, v in asdict(self).items() if k != "timings"}
        body["config"] = {k: v for k, v in self.config.items() if k not in EXECUTION_KEYS}
        body["passed"] = self.passed
        run = {"timings": self.timings, **{k: self.config.get(k) for k in EXECUTION_KEYS}}
        (out_dir / "record.json").write_text(json.dumps(_plain(body), sort_keys=True, indent=1) + "\n")
        (out_dir / "run.json").write_text(json.dumps(_plain(run), sort_keys=True, indent=1) + "\n")

    @staticmethod
    def config_from_files(out_dir) -> "ExperimentConfig":
        """Rebuild the config from ``record.json`` and ``run.json``."""
        out_dir = Path(out_dir)
        body = json.loads((out_dir / "record.json").read_text())["config"]
        run = json.loads((out_dir / "run.json").read_text())
        return ExperimentConfig.from_dict({**body, **{k: run[k] for k in EXECUTION_KEYS}})


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class _Timer:
    def __init__(self, record: RunRecord, name: str):
        self.record, self.name = record, name

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        self.record.timings[self.name] = time.perf_counter() - self.start


# ---------------------------------------------------------------------------
# fixtures


def additive_spec(config: ExperimentConfig) -> lqc.AdditiveLqcSpec:
    return lqc.AdditiveLqcSpec(**{**lqc.ADDITIVE_FIXTURE, **config.params})


def multiplicative_spec(config: ExperimentConfig) -> lqc.MultiplicativeLqcSpec:
    return lqc.MultiplicativeLqcSpec(**{**lqc.MULTIPLICATIVE_FIXTURE, **config.params})


def translation_problem(controls, T=1.0, weight=0.5) -> ct.ControlProblem:
    """``dX = u dt + d eta`` with gain ``-weight x_T^2`` and no running gain."""
    vf = VectorFieldSet(
        b=lambda x, u: np.broadcast_to(np.asarray(u, float),
                                       np.broadcast_shapes(np.shape(x), np.shape(u))).copy(),
        sigma=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)),
        e=1, d=1, m=1,
        d_sigma=lambda x: np.zeros(np.shape(x)[:-1] + (1, 1, 1)),
    )
    return ct.ControlProblem(
        vf, lambda t, x, u: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])),
        lambda x: -weight * np.asarray(x)[..., 0] ** 2, controls, T)


def translation_value(times, W, x, T=1.0, u_max=1.0, weight=0.5):
    """Closed form ``v(t, x) = -weight * max(|x + W_T - W_t| - u_max (T - t), 0)^2``."""
    y = np.asarray(x)[None, :] + W[-1] - np.asarray(W)[:, None]
    tau = T - np.asarray(times)[:, None]
    return -weight * np.maximum(np.abs(y) - u_max * tau, 0.0) ** 2


def sine_drift_problem(controls, T=1.0) -> ct.ControlProblem:
    """Nonlinear scalar fixture ``dX = (-sin X + u) dt + 1/2 cos X d eta``."""
    vf = VectorFieldSet(
        b=lambda x, u: -np.sin(np.asarray(x)) + np.asarray(u),
        sigma=lambda x: (0.5 * np.cos(np.asarray(x)))[..., None],
        e=1, d=1, m=1,
        d_sigma=lambda x: (-0.5 * np.sin(np.asarray(x)))[..., None, :, None],
    )
    return ct.ControlProblem(
        vf, lambda t, x, u: -0.5 * np.asarray(x)[..., 0] ** 2 - 0.5 * np.asarray(u)[..., 0] ** 2,
        lambda x: -np.asarray(x)[..., 0] ** 2, controls, T)


def wong_zakai_fields() -> VectorFieldSet:
    """``dY = sin(Y) d eta + cos(Y) dt``."""
    return VectorFieldSet(
        b=lambda x, u: np.cos(np.asarray(x)),
        sigma=lambda x: np.sin(np.asarray(x))[..., None],
        e=1, d=1,
        d_sigma=lambda x: np.cos(np.asarray(x))[..., None, :, None],
    )


# ---------------------------------------------------------------------------
# runners


def _lqc_setup(config: ExperimentConfig):
    controls = config.control_points()
    if config.fixture == "lqc-additive":
        spec = additive_spec(config)
        sol = lqc.riccati_solve_additive(spec, config.riccati_steps)
        problem = lqc.additive_problem(spec, controls)
        oracle = lqc.lqc_additive_value(sol, 0.0, np.full(spec.e, config.x0))
        policy = lambda t, x: lqc.lqc_additive_feedback(sol, spec, t, x)  # noqa: E731
        penalties = {"rogers": lambda: lqc.additive_value_penalty(sol),
                     "db": lambda: lqc.additive_db_penalty(sol, spec)}
        tol = 0.02 if config.tolerance is None else config.tolerance
        gap_tol = 0.03 if config.tolerance is None else config.tolerance
        x0 = np.full(spec.e, config.x0)
        T = spec.T
    elif config.fixture == "lqc-multiplicative":
        spec = multiplicative_spec(config)
        sol = lqc.riccati_solve_multiplicative(spec, config.riccati_steps)
        problem = lqc.multiplicative_problem(spec, controls)
        oracle = lqc.multiplicative_value(sol, 0.0, config.x0)
        policy = lambda t, x: lqc.multiplicative_feedback(sol, spec, t, x)  # noqa: E731
        penalties = {"rogers": lambda: lqc.multiplicative_value_penalty(sol),
                     "db": lambda: lqc.multiplicative_db_penalty(sol, spec)}
        tol = gap_tol = 0.05 if config.tolerance is None else config.tolerance
        x0 = np.array([config.x0])
        T = spec.T
    else:
        raise InvalidArgumentError(f"fixture {config.fixture!r} is not a linear-quadratic fixture")
    penalty = du.ZERO_PENALTY if config.penalty == "zero" else penalties[config.penalty]()
    return problem, policy, penalty, oracle, x0, T, tol, gap_tol


def _bound_report(config: ExperimentConfig, record: RunRecord):
    problem, policy, penalty, oracle, x0, T, tol, gap_tol = _lqc_setup(config)
    sampler = config.sampler(T)
    mesh = du.default_mesh(problem, x0, config.mesh_nodes)
    with _Timer(record, "lower"):
        lower = du.mc_lower_bound(problem, policy, sampler, config.n_paths, x0, config.workers)
    with _Timer(record, "upper"):
        upper = du.mc_upper_bound(problem, penalty, sampler, config.n_paths, x0, mesh, config.workers)
    report = du.DualityReport(lower, upper, config.seed, config.grid_n, config.substeps, mesh.nodes,
                              problem.controls.shape[0], penalty.descriptor(), config.fixture)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    cols = ",".join(du.DualityReport.CSV_COLUMNS + ("oracle_value",))
    (out / "report.csv").write_text(cols + "\n" + report.csv_row() + "," + f"{oracle:.17g}" + "\n")
    (out / "report.json").write_text(report.to_json() + "\n")
    record.outputs += ["report.csv", "report.json"]
    record.failures = lower.failures + upper.failures
    record.results.update(oracle_value=oracle, lower=asdict(lower), upper=asdict(upper), gap=report.gap)
    return report, oracle, tol, gap_tol


def run_bound(config: ExperimentConfig) -> RunRecord:
    """Lower and upper Monte Carlo bounds without acceptance checks."""
    record = RunRecord("bound", config.to_dict())
    _bound_report(config, record)
    return record


def run_lqc_verify(config: ExperimentConfig) -> RunRecord:
    """Duality bounds on an LQC fixture checked against the Riccati value."""
    record = RunRecord("lqc-verify", config.to_dict())
    report, oracle, tol, gap_tol = _bound_report(config, record)
    lo, up = report.lower, report.upper
    scale = abs(oracle)
    record.checks["lower_matches_value"] = abs(lo.mean - oracle) <= 3 * lo.se + tol * scale
    if config.penalty == "zero":
        record.checks["upper_dominates_value"] = up.mean + 3 * up.se >= oracle
    else:
        record.checks["upper_matches_value"] = abs(up.mean - oracle) <= 3 * up.se + tol * scale
        record.checks["gap_small"] = abs(report.gap) <= gap_tol * scale + 3 * float(np.hypot(lo.se, up.se))
    record.checks["weak_duality"] = up.mean + 3 * up.se >= lo.mean - 3 * lo.se
    return record


def run_hjb(config: ExperimentConfig) -> RunRecord:
    """HJB along dyadic chord approximations of one Brownian path (translation fixture)."""
    record = RunRecord("hjb", config.to_dict())
    u_max = float(config.params.get("u_max", 1.0))
    T = float(config.params.get("T", 1.0))
    problem = translation_problem(ct.uniform_controls(-u_max, u_max, config.controls), T)
    levels = sorted(config.levels or [4, 16, 64, config.grid_n])
    grid = make_uniform_grid(T, max(levels))
    W = brownian_values(np.random.default_rng([config.seed, 0]), grid)
    if config.params.get("zero_driver"):
        W = np.zeros_like(W)
    etas = []
    for lev in levels:
        if grid.n % lev:
            raise InvalidArgumentError(f"level {lev} does not divide {grid.n}")
        etas.append(lift_piecewise_linear(W[::grid.n // lev], grid.subgrid(grid.n // lev)))
    hw = config.hjb_half_width
    mesh = ct.StateMesh([config.x0 - hw], [config.x0 + hw], (config.mesh_nodes,))
    with _Timer(record, "hjb"):
        grids, conv = ct.rough_hjb_solve(problem, etas, mesh, interior=config.hjb_interior)
    x = mesh.axes[0]
    inner = np.abs(x - config.x0) <= hw * (1 - 2 * config.hjb_interior) + 1e-12
    exact = translation_value(grid.times, W[:, 0], x, T, u_max)
    errs = [float(np.max(np.abs(g.values - exact)[:, inner]) / max(np.max(np.abs(exact[:, inner])), 1e-300))
            for g in grids]
    rows = [[r.level, np.nan if r.sup_diff is None else r.sup_diff,
             np.nan if r.driver_distance is None else r.driver_distance, r.substeps, e]
            for r, e in zip(conv, errs)]
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_columnar(out / "convergence.csv", {"kind": "hjb_convergence", "seed": config.seed},
                   ["level", "sup_diff", "driver_distance", "substeps", "closed_form_rel_error"], rows)
    grids[-1].save(out / "value_grid.csv")
    record.outputs += ["convergence.csv", "value_grid.csv"]
    diffs = [r.sup_diff for r in conv if r.sup_diff is not None]
    record.results.update(levels=levels, closed_form_rel_error=errs, sup_diffs=diffs)
    record.checks["closed_form_2pct"] = errs[-1] <= 0.02
    record.checks["differences_decrease"] = bool(np.all(np.diff(diffs) < 0)) if len(diffs) > 1 else True
    return record


def run_pmp(config: ExperimentConfig) -> RunRecord:
    """Hamiltonian residual and spike ladders on the additive LQC optimal pair."""
    record = RunRecord("pmp", config.to_dict())
    spec = additive_spec(config)
    problem = lqc.additive_problem(spec, config.control_points())
    grid = make_uniform_grid(spec.T, config.grid_n)
    eta = sample_brownian_lift(np.random.default_rng([config.seed, 0]), grid, config.substeps, spec.e)
    x0 = np.full(spec.e, config.x0)
    with _Timer(record, "pmp"):
        opt = lqc.pathwise_additive_optimum(spec, eta, x0)
        res, p = ct.pmp_hamiltonian_residual(problem, opt, eta)
        eps = [2.0 ** -j for j in config.spike_exponents]
        alt = np.full(spec.m, config.spike_control)
        lq_table = ct.spike_variation_check(problem, opt, eta, alt, config.spike_time, eps)
        nl = sine_drift_problem(ct.uniform_controls(-2, 2, 21), spec.T)
        base = ControlPath.constant(grid, 0.3)
        cand = ct.PathwiseResult(0.0, base, solve_controlled_rde(x0[:1], 0.0, nl.vf, base, eta), 0.0)
        nl_table = ct.spike_variation_check(nl, cand, eta, config.spike_control, config.spike_time, eps)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_columnar(out / "residual.csv", {"kind": "pmp_residual", "value": opt.value},
                   ["t", "residual"] + [f"p_{i}" for i in range(spec.e)],
                   np.column_stack([grid.times[:-1], res, p[:-1]]))
    cols = ["eps", "deviation", "linearization_error", "payoff_error"]
    for name, tab in (("spike_lqc.csv", lq_table), ("spike_nonlinear.csv", nl_table)):
        write_columnar(out / name, {"kind": "spike_ladder"}, cols,
                       np.column_stack([tab.eps, tab.deviation, tab.linearization_error, tab.payoff_error]))
    record.outputs += ["residual.csv", "spike_lqc.csv", "spike_nonlinear.csv"]
    scale = abs(opt.value)
    record.results.update(max_residual=float(res.max()), cost_scale=scale,
                          lqc_linearization_error=lq_table.linearization_error.tolist(),
                          lqc_payoff_ratio=lq_table.payoff_ratio.tolist(),
                          nonlinear_linearization_ratio=nl_table.linearization_ratio.tolist())
    record.checks["residual_small"] = float(res.max()) <= 1e-2 * scale
    record.checks["lqc_linearization_exact"] = float(lq_table.linearization_error.max()) <= 1e-10 * max(1.0, scale)
    record.checks["lqc_payoff_ratio_halves"] = lq_table.payoff_ratio[0] >= 2 * lq_table.payoff_ratio[-1]
    nl_ratio = nl_table.linearization_ratio
    record.checks["nonlinear_ratio_halves"] = nl_ratio[0] >= 2 * nl_ratio[-1]
    return record


def run_wong_zakai(config: ExperimentConfig) -> RunRecord:
    """Successive differences of solutions along dyadic chord approximations."""
    record = RunRecord("wong-zakai", config.to_dict())
    levels = sorted(config.levels or [2 ** k for k in range(4, 13)])
    grid = make_uniform_grid(float(config.params.get("T", 1.0)), max(levels))
    W = np.stack([brownian_values(np.random.default_rng([config.seed, b]), grid) for b in range(config.samples)])
    with _Timer(record, "ladder"):
        rep = wong_zakai_ladder([float(config.params.get("y0", 0.5))], wong_zakai_fields(), W, grid, levels)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_columnar(out / "ladder.csv", {"kind": "wong_zakai", "order": rep.order, "samples": config.samples},
                   ["level", "mean_sup_diff"], np.column_stack([levels[1:], rep.differences]))
    record.outputs.append("ladder.csv")
    record.results.update(order=rep.order, differences=rep.differences.tolist(),
                          single_path_monotone=bool(np.all(np.diff(rep.per_path[0]) < 0)))
    record.checks["differences_decrease"] = rep.monotone
    record.checks["order_in_range"] = 0.3 <= rep.order <= 1.1
    return record


def run_sample_path(config: ExperimentConfig) -> RunRecord:
    """Write the Brownian rough path of stream ``(seed, 0)``."""
    record = RunRecord("sample-path", config.to_dict())
    T = float(config.params.get("T", 1.0))
    d = int(config.params.get("d", 1))
    eta = sample_brownian_lift(np.random.default_rng([config.seed, 0]), make_uniform_grid(T, config.grid_n),
                               config.substeps, d)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    save_rough_path(config.out_dir / "path.csv", eta)
    record.outputs.append("path.csv")
    return record


COMMANDS = {
    "lqc-verify": run_lqc_verify,
    "bound": run_bound,
    "hjb": run_hjb,
    "pmp": run_pmp,
    "wong-zakai": run_wong_zakai,
    "sample-path": run_sample_path,
}

COMMAND_DEFAULTS = {
    "hjb": {"fixture": "translation", "mesh_nodes": 1201, "controls": 21},
    "wong-zakai": {"fixture": "sine-drift"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roughctl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--paths", type=int, dest="n_paths")
    parser.add_argument("--grid", type=int, dest="grid_n")
    parser.add_argument("--out")
    parser.add_argument("--workers", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    """Command defaults, then the config file, then command-line flags."""
    data = dict(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config:
        ExperimentConfig.from_file(args.config)  # parse and validate before merging
        data.update(json.loads(Path(args.config).read_text()))
    for key in ("seed", "n_paths", "grid_n", "out", "workers"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config = load_config(args)
    except InvalidArgumentError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    try:
        record = COMMANDS[args.command](config)
    except InvalidArgumentError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (RoughCtlError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(json.dumps({"error": "numerical", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    record.write(config.out_dir)
    for name, ok in record.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {args.command}: {name}")
    return EXIT_PASS if record.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
