"""Experiment configs, dispatch, result tables and run directories.

A config is a YAML document::

    version: 1
    kind: verify-theorem
    seed: 0
    jobs: 1
    out: results
    params: {...}

``params`` is merged over the defaults for ``kind`` and validated up front;
errors name the offending field path (``params.spec.rho_b``). Every random
stream used by a run is keyed by ``derive_seed(seed, kind, index)``.

Numeric tables never contain ``jobs``, ``out`` or timing, so re-running an
archived config reproduces them byte for byte at any parallelism.
"""

import copy
import csv
import dataclasses
import datetime
import enum
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import driving
from . import estimators as est
from . import policy_gradient as pg
from . import theorem
from .rng import derive_seed, stream

VERSION = 1
KINDS = ("verify-theorem", "snr-sweep", "longtail", "is-dim", "grad-compare", "train")

CANONICAL_SPEC = {"rho_b": 0.01, "mean_b": [1.0], "var_a": 2.0, "var_b": 1.0, "component": "gaussian"}
GOLDEN_THETA = [0.9, 6.0, -2.5]

DEFAULTS = {
    "verify-theorem": {
        "spec": CANONICAL_SPEC,
        "unbiasedness": {"batch": 10000, "trials": 1000},
        "variance_ordering": {"batch": 1000, "trials": 10000},
        "rho_factor": {"rhos": [0.5, 0.1, 0.01], "mean_b": [1.0], "var_b": 1.0, "batch": 1000, "trials": 10000},
        "assumption": {"n": 1000000},
        "random_specs": {"count": 100},
        "z": 4.0,
        "rtol": 0.1,
    },
    "snr-sweep": {
        "spec": CANONICAL_SPEC,
        "rhos": [0.1, 0.03, 0.01],
        "n": 1000000,
        "rtol": 0.1,
    },
    "longtail": {
        "rho_grid": [float(10.0 ** (-4 + k / 4)) for k in range(13)],
        "var_a": 2.0,
        "mean_b": 1.0,
        "relative_error": 0.1,
        "z": 2.0,
        "expected_slope_mu1": -2.0,
        "expected_slope_mu2": -1.0,
        "slope_tol": 0.1,
    },
    "is-dim": {
        "dims": list(range(1, 17)),
        "shift": 0.5,
        "n": 1000000,
        "trials": 2,
        "slope_rtol": 0.1,
        "r2_min": 0.9,
        "exact_check": {"dim": 1, "shift": 1.0, "n": 1000000, "trials": 1, "z": 4.0},
    },
    "grad-compare": {
        "variance": {
            "enabled": True,
            "env": {"conflict_prob": 0.0135, "shaping_scale": 0.3},
            "theta": [0.9, 3.0, -2.0],
            "baseline": -0.0097,
            "batch": 1000,
            "trials": 400,
            "z": 4.0,
            "band": [0.5, 2.0],
        },
        "oracle": {
            "enabled": True,
            "env": {"conflict_prob": 1.0, "shaping_scale": 0.0},
            "theta": GOLDEN_THETA,
            "episodes": 100000,
            "fd_episodes": 4000000,
            "epsilon": [0.15, 0.15, 0.03],
            "rel_tol": 0.05,
            "self_tol": 0.01,
        },
    },
    "train": {
        "env": {"conflict_prob": 0.002, "shaping_scale": 0.3},
        "theta0": GOLDEN_THETA,
        "reference_mode": "full",
        "candidate_mode": "filtered_window",
        "replicates": 5,
        "learning_rate": 500.0,
        "batch": 50000,
        "iterations": 10,
        "theta_bound": 12.0,
        "eval_episodes": 2000,
        "baseline": None,
        "target_fraction": 0.5,
        "min_wins": 3,
    },
}

# keys whose value is a free-form mapping checked by the domain constructor
_OPEN_MAPPINGS = {"env"}


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` locates the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# ----------------------------------------------------------------------------
# config


def _check_type(path, value, default):
    if default is None:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(path, f"expected a number or null, got {value!r}")
        return None if value is None else float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if default:
            return [_check_type(f"{path}[{i}]", v, default[0]) for i, v in enumerate(value)]
        return list(value)
    if isinstance(default, dict):
        return _merge(path, default, value)
    raise ConfigError(path, "unsupported default")  # pragma: no cover


def _merge(path, defaults, given):
    if not isinstance(given, dict):
        raise ConfigError(path, f"expected a mapping, got {given!r}")
    unknown = sorted(set(given) - set(defaults))
    if unknown and path.rsplit(".", 1)[-1] not in _OPEN_MAPPINGS:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key in defaults:
            out[key] = _check_type(f"{path}.{key}", value, defaults[key])
        else:
            out[key] = value
    return out


def _build(path, fn, *args, **kwargs):
    """Call a domain constructor, re-raising its complaints with a field path."""
    try:
        return fn(*args, **kwargs)
    except (est.ConstraintError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None


def _positive(path, value):
    if not value > 0:
        raise ConfigError(path, f"must be positive, got {value}")


def _env(path, given):
    fields = {f.name for f in dataclasses.fields(driving.EnvConfig)}
    unknown = sorted(set(given) - fields)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    return _build(path, driving.EnvConfig, **given)


def _check_spec(path, d):
    if not 0.0 < d["rho_b"] <= 1.0:
        raise ConfigError(f"{path}.rho_b", f"must lie in (0, 1], got {d['rho_b']}")
    for key in ("var_a", "var_b"):
        if not d[key] >= 0.0:
            raise ConfigError(f"{path}.{key}", f"must be non-negative, got {d[key]}")
    return _build(path, est.MixtureSpec.from_dict, d)


def _validate(kind, p):
    """Build every domain object the run will need; raise ConfigError on failure."""
    if kind in ("verify-theorem", "snr-sweep"):
        _check_spec("params.spec", p["spec"])
    if kind == "verify-theorem":
        for part in ("unbiasedness", "variance_ordering", "rho_factor"):
            _positive(f"params.{part}.batch", p[part]["batch"])
            if p[part]["trials"] < 100:
                raise ConfigError(f"params.{part}.trials", "need at least 100 trials")
        rf = p["rho_factor"]
        for i, rho in enumerate(rf["rhos"]):
            if not 0.0 < rho <= 1.0:
                raise ConfigError(f"params.rho_factor.rhos[{i}]", f"must lie in (0, 1], got {rho}")
            _build(f"params.rho_factor.rhos[{i}]", est.MixtureSpec.satisfying, rho, rf["mean_b"], rf["var_b"])
        _positive("params.assumption.n", p["assumption"]["n"])
    elif kind == "snr-sweep":
        for i, rho in enumerate(p["rhos"]):
            if not 0.0 < rho <= 1.0:
                raise ConfigError(f"params.rhos[{i}]", f"must lie in (0, 1], got {rho}")
        if p["n"] < 2:
            raise ConfigError("params.n", "need at least 2 samples")
    elif kind == "longtail":
        if len(p["rho_grid"]) < 2:
            raise ConfigError("params.rho_grid", "need at least two points")
        _positive("params.relative_error", p["relative_error"])
        _build("params", theorem.longtail_curve, p["rho_grid"], p["var_a"], p["relative_error"], p["z"],
               mean_b=p["mean_b"])
    elif kind == "is-dim":
        if len(p["dims"]) < 2 or any(d < 1 for d in p["dims"]):
            raise ConfigError("params.dims", "need at least two positive dimensions")
        _positive("params.n", p["n"])
        _positive("params.trials", p["trials"])
        _positive("params.exact_check.n", p["exact_check"]["n"])
    elif kind == "grad-compare":
        for part in ("variance", "oracle"):
            _env(f"params.{part}.env", p[part]["env"])
            _build(f"params.{part}.theta", driving.PolicyParams, tuple(p[part]["theta"]))
        if p["variance"]["batch"] < 2 or p["variance"]["trials"] < 2:
            raise ConfigError("params.variance", "need batch >= 2 and trials >= 2")
        eps = p["oracle"]["epsilon"]
        if len(eps) not in (1, driving.N_PARAMS) or min(eps) <= 0:
            raise ConfigError("params.oracle.epsilon", "need one or three positive steps")
    elif kind == "train":
        _env("params.env", p["env"])
        _build("params.theta0", driving.PolicyParams, tuple(p["theta0"]))
        for key in ("reference_mode", "candidate_mode"):
            _build(f"params.{key}", pg.GradientMode, p[key])
        for key in ("replicates", "batch", "iterations", "eval_episodes"):
            _positive(f"params.{key}", p[key])
        if not 0 < p["target_fraction"] < 1:
            raise ConfigError("params.target_fraction", "must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    params: dict
    seed: int = 0
    jobs: int = 1
    out: str = "results"
    version: int = VERSION

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a mapping")
        unknown = sorted(set(d) - {"version", "kind", "seed", "jobs", "out", "params"})
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        if "version" not in d:
            raise ConfigError("version", "missing")
        if d["version"] != VERSION:
            raise ConfigError("version", f"unsupported version {d['version']!r} (expected {VERSION})")
        kind = d.get("kind")
        if kind not in KINDS:
            raise ConfigError("kind", f"expected one of {', '.join(KINDS)}, got {kind!r}")
        seed = _check_type("seed", d.get("seed", 0), 0)
        if seed < 0:
            raise ConfigError("seed", "must be non-negative")
        jobs = _check_type("jobs", d.get("jobs", 1), 0)
        if jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        out = _check_type("out", d.get("out", "results"), "")
        params = _merge("params", DEFAULTS[kind], d.get("params") or {})
        _validate(kind, params)
        return cls(kind=kind, params=params, seed=seed, jobs=jobs, out=out)

    @classmethod
    def loads(cls, text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<root>", f"not valid YAML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls, kind):
        """The committed config for ``kind`` shipped with the package."""
        if kind not in KINDS:
            raise ConfigError("kind", f"unknown kind {kind!r}")
        text = resources.files("rarelab").joinpath("configs", f"{kind}.yaml").read_text(encoding="utf-8")
        return cls.loads(text)

    def to_dict(self):
        return {
            "version": self.version,
            "kind": self.kind,
            "seed": self.seed,
            "jobs": self.jobs,
            "out": self.out,
            "params": copy.deepcopy(self.params),
        }

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def identity(self):
        """The fields that determine the numbers a run produces."""
        d = self.to_dict()
        del d["jobs"], d["out"]
        return d

    @property
    def digest(self):
        blob = json.dumps(self.identity(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **changes):
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    def sub_seed(self, index):
        return derive_seed(self.seed, self.kind, index)


# ----------------------------------------------------------------------------
# results


@dataclass
class Table:
    name: str
    rows: list
    columns: list = None

    def __post_init__(self):
        if self.columns is None:
            cols = []
            for row in self.rows:
                cols.extend(k for k in row if k not in cols)
            self.columns = cols


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    tables: list
    gates: dict  # gate name -> bool
    summary: dict  # scalar key figures
    lines: list = field(default_factory=list)  # extra human-readable lines
    wall_time: float = 0.0
    tool_version: str = __version__
    out_dir: object = None

    @property
    def passed(self):
        return all(self.gates.values())

    def table(self, name):
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)


def _plain(v):
    """Convert numpy scalars and arrays into JSON-friendly Python values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, enum.Enum):
        return v.value
    return v


def _csv_cell(v):
    v = _plain(v)
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return json.dumps(v)
    return str(v)


def table_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for row in table.rows:
        w.writerow([_csv_cell(row.get(c)) for c in table.columns])
    return buf.getvalue()


def dumps_json(obj):
    """Canonical JSON text; floats use the shortest round-trip repr."""
    return json.dumps(_plain(obj), indent=2) + "\n"


def table_json(result, table):
    return dumps_json(
        {
            "config": result.config.identity(),
            "records": [{c: row.get(c) for c in table.columns} for row in table.rows],
            "summary": {"gates": result.gates, **result.summary},
        }
    )


def emit_tables(result, directory, fmt="csv"):
    """Write one file per table plus a summary table; return the paths."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for table in result.tables:
        path = directory / f"{table.name}.{fmt}"
        text = table_csv(table) if fmt == "csv" else table_json(result, table)
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    if fmt == "csv":
        rows = [{"name": k, "value": v} for k, v in result.summary.items()]
        rows += [{"name": f"gate:{k}", "value": v} for k, v in result.gates.items()]
        path = directory / "summary.csv"
        path.write_text(table_csv(Table("summary", rows, ["name", "value"])), encoding="utf-8")
        paths.append(path)
    return paths


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def summarize(result):
    """Plain-text report: one PASS/FAIL line per gate, then key figures."""
    out = [f"{result.config.kind} (seed {result.config.seed}, config {result.config.digest})"]
    for name, ok in result.gates.items():
        out.append(f"{name}: {'PASS' if ok else 'FAIL'}")
    out.extend(result.lines)
    for k, v in result.summary.items():
        out.append(f"  {k} = {_fmt(v)}")
    out.append(f"overall: {'PASS' if result.passed else 'FAIL'}")
    return "\n".join(out) + "\n"


def new_run_dir(base, config):
    stamp = datetime.datetime.now().strftime("%Y%m%dT%H%M%S")
    base = Path(base)
    path = base / f"{stamp}-{config.digest}"
    k = 1
    while path.exists():
        path = base / f"{stamp}-{config.digest}-{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def write_result(result, fmt="csv", base=None):
    """Create the run directory with config copy, tables, summary and run metadata."""
    path = new_run_dir(base if base is not None else result.config.out, result.config)
    (path / "config.yaml").write_text(result.config.dumps(), encoding="utf-8")
    emit_tables(result, path, fmt)
    (path / "summary.txt").write_text(summarize(result), encoding="utf-8")
    meta = {"tool_version": result.tool_version, "wall_time_s": result.wall_time, "jobs": result.config.jobs}
    (path / "run.json").write_text(dumps_json(meta), encoding="utf-8")
    result.out_dir = path
    return path


# ----------------------------------------------------------------------------
# runners


def _spec(d):
    return est.MixtureSpec.from_dict(d)


def _run_verify(cfg):
    p = cfg.params
    spec = _spec(p["spec"])
    z, rtol, jobs = p["z"], p["rtol"], cfg.jobs
    u, o, rf = p["unbiasedness"], p["variance_ordering"], p["rho_factor"]
    reports = [
        theorem.verify_unbiasedness(spec, u["batch"], u["trials"], cfg.sub_seed(0), jobs=jobs, z=z),
        theorem.verify_variance_ordering(spec, o["batch"], o["trials"], cfg.sub_seed(1), jobs=jobs, rtol=rtol),
    ]
    rho_reports = [
        theorem.verify_rho_factor(
            est.MixtureSpec.satisfying(rho, rf["mean_b"], rf["var_b"]),
            rf["batch"], rf["trials"], cfg.sub_seed(2 + i), jobs=jobs, rtol=rtol,
        )
        for i, rho in enumerate(rf["rhos"])
    ]
    reports += rho_reports
    assumption = theorem.verify_assumption(
        est.MixtureSpec.satisfying(spec.rho_b, spec.mean_b, spec.var_b), p["assumption"]["n"], cfg.sub_seed(100), z=z
    )
    reports.append(assumption)

    rng = stream(cfg.sub_seed(101), "random-specs")
    sweep = []
    for i in range(p["random_specs"]["count"]):
        dim = int(rng.integers(1, 6))
        rs = est.MixtureSpec(
            float(10.0 ** rng.uniform(-4, 0)),
            tuple(rng.normal(0, 2, dim) + 1e-3),
            float(rng.uniform(0, 5)),
            float(rng.uniform(0, 5)),
        )
        cf = est.closed_form_moments(rs)
        sweep.append({
            "index": i, "dim": dim, "rho_b": rs.rho_b, "var_a": rs.var_a, "var_b": rs.var_b,
            "var_mu1": cf.var_mu1, "var_mu2": cf.var_mu2, "ordered": bool(cf.var_mu2 <= cf.var_mu1),
        })
    gates = {
        "unbiasedness": reports[0].passed,
        "variance ordering": reports[1].passed,
        "rho factor": all(r.passed for r in rho_reports),
        "assumption residual": assumption.passed,
        "closed-form ordering": all(r["ordered"] for r in sweep),
    }
    summary = {
        "mu1_grand_mean": reports[0].empirical["mu1_grand_mean"],
        "mu2_grand_mean": reports[0].empirical["mu2_grand_mean"],
        "mu": reports[0].closed_form["mu"],
        "var_mu1": reports[1].empirical["var_mu1"],
        "var_mu2": reports[1].empirical["var_mu2"],
        "closed_form_var_mu1": reports[1].closed_form["var_mu1"],
        "closed_form_var_mu2": reports[1].closed_form["var_mu2"],
        "random_spec_violations": sum(not r["ordered"] for r in sweep),
    }
    lines = []
    for r in rho_reports:
        summary[f"variance_ratio_rho_{r.spec.rho_b:g}"] = r.empirical["ratio"]
        lines.append(
            f"  rho={r.spec.rho_b:g}: variance ratio {r.empirical['ratio']:.4g} "
            f"(closed form {r.closed_form['ratio']:.4g}, 1/rho {1 / r.spec.rho_b:.4g})"
        )
    if not gates["unbiasedness"]:
        e, c = reports[0].empirical, reports[0].closed_form
        lines.append(
            f"  unbiasedness: mu1 {e['mu1_grand_mean']:.6g}, mu2 {e['mu2_grand_mean']:.6g}, expected {c['mu']:.6g} "
            f"+/- {z:g} x ({c['mu1_standard_error']:.3g}, {c['mu2_standard_error']:.3g})"
        )
    tables = [Table("verification", [r.to_row() for r in reports]), Table("random_specs", sweep)]
    return tables, gates, summary, lines


def _run_snr(cfg):
    p = cfg.params
    rows = []
    for i, rho in enumerate(p["rhos"]):
        spec = _spec({**p["spec"], "rho_b": rho})
        cf = est.closed_form_moments(spec)
        batch = est.sample_mixture(spec, p["n"], cfg.sub_seed(i))
        e1, e2 = est.estimate_mu1(batch), est.estimate_mu2(batch)
        s1, s2 = est.snr(e1, cf.mu), est.snr(e2, cf.mu)
        rows.append({
            "rho_b": rho, "n": p["n"], "critical_fraction": float(batch.critical.mean()),
            "snr_mu1": s1, "snr_mu2": s2, "closed_form_snr_mu1": cf.snr_mu1, "closed_form_snr_mu2": cf.snr_mu2,
            "snr_gain": s2 / s1, "closed_form_variance_ratio": cf.ratio,
            "sample_var_mu1": e1.sample_variance, "sample_var_mu2": e2.sample_variance,
        })
    rtol = p["rtol"]
    gates = {
        "snr mu1": all(abs(r["snr_mu1"] / r["closed_form_snr_mu1"] - 1) <= rtol for r in rows),
        "snr gain": all(abs(r["snr_gain"] / r["closed_form_variance_ratio"] - 1) <= rtol for r in rows),
    }
    summary = {}
    for r in rows:
        summary[f"snr_mu1_rho_{r['rho_b']:g}"] = r["snr_mu1"]
        summary[f"snr_gain_rho_{r['rho_b']:g}"] = r["snr_gain"]
    return [Table("snr", rows)], gates, summary, []


def _run_longtail(cfg):
    p = cfg.params
    curves = {
        k: theorem.longtail_curve(p["rho_grid"], p["var_a"], p["relative_error"], p["z"], kind=k, mean_b=p["mean_b"])
        for k in est.EstimatorKind
    }
    c1, c2 = curves[est.EstimatorKind.MU1], curves[est.EstimatorKind.MU2]
    rows = [
        {"rho_b": r, "required_n_mu1": int(n1), "required_n_mu2": int(n2)}
        for r, n1, n2 in zip(c1.x_values, c1.y_values, c2.y_values)
    ]
    tol = p["slope_tol"]
    gates = {
        "slope mu1": abs(c1.fitted_slope - p["expected_slope_mu1"]) <= tol,
        "slope mu2": abs(c2.fitted_slope - p["expected_slope_mu2"]) <= tol,
    }
    summary = {
        "fitted_slope_mu1": c1.fitted_slope, "fit_r2_mu1": c1.fit_r2,
        "fitted_slope_mu2": c2.fitted_slope, "fit_r2_mu2": c2.fit_r2,
    }
    return [Table("longtail", rows, ["rho_b", "required_n_mu1", "required_n_mu2"])], gates, summary, []


def _run_is(cfg):
    p = cfg.params
    curve = theorem.is_dimension_sweep(p["dims"], p["shift"], p["n"], p["trials"], cfg.sub_seed(0), cfg.jobs)
    total = p["n"] * p["trials"]
    rows = [
        {
            "dim": d, "log_second_moment": y, "exact_log_second_moment": d * p["shift"] ** 2,
            "relative_standard_error": theorem.is_relative_standard_error(d, p["shift"], total), "reliable": ok,
        }
        for d, y, ok in zip(curve.x_values, curve.y_values, curve.reliable)
    ]
    ex = p["exact_check"]
    exact = theorem.is_second_moment_exact(ex["dim"], ex["shift"])
    estimate = theorem.is_second_moment(ex["dim"], ex["shift"], ex["n"], ex["trials"], cfg.sub_seed(1), cfg.jobs)
    half = ex["z"] * exact * theorem.is_relative_standard_error(ex["dim"], ex["shift"], ex["n"] * ex["trials"])
    expected = p["shift"] ** 2
    gates = {
        "is slope": abs(curve.fitted_slope / expected - 1) <= p["slope_rtol"] if expected else False,
        "is fit": curve.fit_r2 >= p["r2_min"],
        "is exact moment": abs(estimate - exact) <= half,
    }
    summary = {
        "fitted_slope": curve.fitted_slope, "expected_slope": expected, "fit_r2": curve.fit_r2,
        "unreliable_points": sum(not ok for ok in curve.reliable),
        "exact_check_estimate": estimate, "exact_check_value": exact, "exact_check_half_width": half,
    }
    return [Table("is_dim", rows)], gates, summary, []


def _run_grad(cfg):
    p = cfg.params
    tables, gates, summary, lines = [], {}, {}, []
    v = p["variance"]
    if v["enabled"]:
        env = driving.EnvConfig(**v["env"])
        policy = driving.PolicyParams(tuple(v["theta"]))
        cmp = pg.gradient_variance_comparison(env, policy, v["baseline"], v["batch"], v["trials"], cfg.sub_seed(0), cfg.jobs)
        cmp = dataclasses.replace(cmp, z=v["z"], band=tuple(v["band"]))
        tables.append(Table("grad_compare", [cmp.to_row()]))
        gates["gradient means agree"] = cmp.means_agree
        gates["variance ratio band"] = cmp.ratio_in_band
        summary.update({
            "critical_fraction": cmp.critical_fraction, "variance_ratio": cmp.variance_ratio,
            "inverse_critical_fraction": 1 / cmp.critical_fraction if cmp.critical_fraction else math.inf,
            "ratio_times_rho": cmp.ratio_times_rho, "max_mean_gap_se": float(cmp.mean_gap_in_se.max()),
        })
        lines.append(
            f"  observed variance ratio {cmp.variance_ratio:.4g} vs 1/rho_hat {1 / cmp.critical_fraction:.4g}"
            if cmp.critical_fraction else "  no critical episodes observed"
        )
    o = p["oracle"]
    if o["enabled"]:
        oenv = driving.EnvConfig(**o["env"])
        policy = driving.PolicyParams(tuple(o["theta"]))
        summ = driving.rollout_summary(oenv, policy, o["episodes"], cfg.sub_seed(1), cfg.jobs)
        b = float(summ.total_return.mean())
        rf = pg.reinforce_gradient(summ, policy, b, pg.GradientMode.FULL)
        eps = np.broadcast_to(np.asarray(o["epsilon"], dtype=float), policy.vector.shape)
        fd = pg.finite_difference_gradient(oenv, policy, eps, o["fd_episodes"], cfg.sub_seed(2), cfg.jobs)
        fd_half = pg.finite_difference_gradient(oenv, policy, eps / 2, o["fd_episodes"], cfg.sub_seed(2), cfg.jobs)
        rel = np.abs(rf.mean - fd) / np.abs(fd)
        self_rel = np.abs(fd - fd_half) / np.abs(fd)
        se = np.sqrt(np.var(pg.episode_contributions(summ, b, pg.GradientMode.FULL), axis=0, ddof=1) / summ.n)
        rows = [
            {"coordinate": j, "epsilon": float(eps[j]), "reinforce": float(rf.mean[j]), "reinforce_se": float(se[j]),
             "finite_difference": float(fd[j]), "finite_difference_half_step": float(fd_half[j]),
             "relative_error": float(rel[j]), "self_consistency": float(self_rel[j])}
            for j in range(fd.size)
        ]
        tables.append(Table("gradient_oracle", rows))
        gates["reinforce vs finite difference"] = bool(np.all(rel <= o["rel_tol"]))
        gates["finite difference self-consistency"] = bool(np.all(self_rel <= o["self_tol"]))
        summary.update({"max_relative_error": float(rel.max()), "max_self_consistency": float(self_rel.max())})
    return tables, gates, summary, lines


def _run_train(cfg):
    p = cfg.params
    env = driving.EnvConfig(**p["env"])
    theta0 = driving.PolicyParams(tuple(p["theta0"]))
    ref, cand = pg.GradientMode(p["reference_mode"]), pg.GradientMode(p["candidate_mode"])
    curve_rows, rows = [], []
    wins = 0
    for r in range(p["replicates"]):
        seed = cfg.sub_seed(r)
        reached, finals, diverged, target, initial = {}, {}, {}, None, None
        for mode in (ref, cand):
            try:
                curve = pg.train(
                    env, theta0, mode, p["baseline"], p["iterations"], p["batch"], p["learning_rate"], seed,
                    eval_episodes=p["eval_episodes"], theta_bound=p["theta_bound"], jobs=cfg.jobs,
                )
                diverged[mode] = False
            except pg.DivergenceError as exc:
                curve = exc.curve
                diverged[mode] = True
            rates = curve.eval_crash_rates
            if initial is None:
                initial = float(rates[0])
                target = p["target_fraction"] * initial
            reached[mode] = curve.iterations_to_reach(target)
            finals[mode] = float(rates[-1])
            for row in curve.to_rows():
                curve_rows.append({"replicate": r, "seed": seed, "diverged": diverged[mode], **row})
        rc, rr = reached[cand], reached[ref]
        win = rc is not None and (rr is None or rc < rr)
        wins += win
        rows.append({
            "replicate": r, "seed": seed, "initial_crash_rate": initial, "target_crash_rate": target,
            f"{ref.value}_iterations": rr, f"{cand.value}_iterations": rc,
            f"{ref.value}_final_crash_rate": finals[ref], f"{cand.value}_final_crash_rate": finals[cand],
            f"{ref.value}_diverged": diverged[ref], f"{cand.value}_diverged": diverged[cand],
            "candidate_faster": win,
        })
    gates = {f"{cand.value} faster than {ref.value}": wins >= p["min_wins"]}
    summary = {"wins": wins, "replicates": p["replicates"], "min_wins": p["min_wins"]}
    lines = [
        f"  replicate {row['replicate']}: crash rate {row['initial_crash_rate']:.4g} -> "
        f"{cand.value} {row[f'{cand.value}_final_crash_rate']:.4g} "
        f"(target reached at iteration {row[f'{cand.value}_iterations']}), "
        f"{ref.value} {row[f'{ref.value}_final_crash_rate']:.4g} "
        f"(iteration {row[f'{ref.value}_iterations']}{', diverged' if row[f'{ref.value}_diverged'] else ''})"
        for row in rows
    ]
    return [Table("training", rows), Table("learning_curves", curve_rows)], gates, summary, lines


RUNNERS = {
    "verify-theorem": _run_verify,
    "snr-sweep": _run_snr,
    "longtail": _run_longtail,
    "is-dim": _run_is,
    "grad-compare": _run_grad,
    "train": _run_train,
}


def run(config, fmt=None):
    """Execute ``config``; with ``fmt`` set, also write a run directory under ``config.out``."""
    start = time.perf_counter()
    tables, gates, summary, lines = RUNNERS[config.kind](config)
    result = ExperimentResult(
        config=config,
        tables=tables,
        gates={k: bool(v) for k, v in gates.items()},
        summary=_plain(summary),
        lines=lines,
        wall_time=time.perf_counter() - start,
    )
    if fmt is not None:
        write_result(result, fmt)
    return result


# ----------------------------------------------------------------------------
# trajectory dumps


def dump_trajectories(path, config, policy, trajectories):
    """Write a batch of trajectories as one JSON file."""
    data = {
        "version": VERSION,
        "env": config.to_dict(),
        "theta": list(policy.theta),
        "trajectories": [
            {
                "outcome": tr.outcome.value,
                "conflict_onset": tr.conflict_onset,
                "critical_window": list(tr.critical_window) if tr.critical_window else None,
                "final_gap": tr.final_gap,
                "steps": [
                    {"gap": s.gap, "ego_speed": s.ego_speed, "lead_speed": s.lead_speed, "brake": s.brake,
                     "score": list(s.log_policy_gradient), "reward": s.reward}
                    for s in tr.steps
                ],
            }
            for tr in trajectories
        ],
    }
    Path(path).write_text(dumps_json(data), encoding="utf-8")


def load_trajectories(path):
    """Inverse of :func:`dump_trajectories`: ``(config, policy, trajectories)``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    config = driving.EnvConfig.from_dict(data["env"])
    trajs = [
        driving.Trajectory(
            steps=tuple(
                driving.Step(s["gap"], s["ego_speed"], s["lead_speed"], s["brake"], np.array(s["score"]), s["reward"])
                for s in t["steps"]
            ),
            outcome=driving.Outcome(t["outcome"]),
            conflict_onset=t["conflict_onset"],
            critical_window=tuple(t["critical_window"]) if t["critical_window"] else None,
            final_gap=t["final_gap"],
            near_miss_gap=config.near_miss_gap,
        )
        for t in data["trajectories"]
    ]
    return config, driving.PolicyParams(tuple(data["theta"])), trajs
