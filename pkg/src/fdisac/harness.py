"""Monte Carlo driver: scenario draws, trials, aggregation and file output."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import build_channels, perturbed_si
from .codebook import make_codebook
from .comm_opt import sum_rate
from .estimation import SearchGrid, estimate_targets, probe_bound, probe_context, rmse
from .isac import ISAC, MODES, algorithm1, prepare_designs, user_estimates
from .scenario import (ConfigError, Scenario, SphericalPosition, SystemConfig, dbm_to_watts,
                       fraunhofer_distance, fresnel_inner_distance, watts_to_dbm)

ELEVATION = math.radians(30.0)
NOMINAL_RANGE = (1.0, 15.0)

RECORD_COLUMNS = ("seed", "p_max_dbm", "rmse_m", "peb_m", "sum_rate_bpshz_true",
                  "sum_rate_bpshz_est", "residual_si_max", "feasible", "wall_ms")
EXTRA_COLUMNS = ("mode", "trial", "peb_design_m", "rmse_refined_m", "error")


@dataclass(frozen=True)
class RunSettings:
    """Experiment-level knobs that are not part of the physical model."""

    n_trials: int = 50
    p_max_dbm: tuple[float, ...] = (-20.0, -15.0, -10.0, -5.0, 0.0)
    modes: tuple[str, ...] = (ISAC,)
    k: int = 3
    u: int = 2
    seed: int | None = None
    record_timing: bool = False

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.p_max_dbm:
            raise ConfigError("at least one power point is required")
        if not 1 <= self.u <= self.k:
            raise ConfigError("need 1 <= users <= targets")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")


@dataclass
class TrialRecord:
    seed: int
    trial: int
    p_index: int
    p_max: float
    mode: str
    rmse: float
    peb: float
    sum_rate_true: float
    sum_rate_estimated: float
    residual_si_max: float
    feasible: bool
    wall_time: float
    peb_design: float = math.inf
    rmse_refined: float = math.nan
    scenario: Scenario | None = field(default=None, repr=False, compare=False)
    error: str = ""

    @property
    def p_max_dbm(self) -> float:
        return watts_to_dbm(self.p_max)

    @property
    def completed(self) -> bool:
        return not self.error


@dataclass
class PowerAggregate:
    p_max_dbm: float
    mode: str
    n_trials: int
    n_completed: int
    mean_rmse: float
    median_rmse: float
    mean_peb: float
    median_ratio: float
    mean_rmse_refined: float
    mean_sum_rate_true: float
    mean_sum_rate_est: float
    feasible_fraction: float
    mean_peb_design: float


@dataclass
class RunSummary:
    aggregates: list
    config: dict
    settings: dict
    run_id: str
    master_seed: int
    wall_time: float = 0.0

    def aggregate(self, p_max_dbm: float, mode: str) -> PowerAggregate:
        for a in self.aggregates:
            if a.mode == mode and math.isclose(a.p_max_dbm, p_max_dbm, abs_tol=1e-9):
                return a
        raise KeyError((p_max_dbm, mode))


def range_interval(config: SystemConfig) -> tuple[float, float]:
    """Target range interval for the configured aperture.

    The nominal 1..15 m interval is scaled so that its upper end sits at
    the Fraunhofer distance of one microstrip; the lower end is raised to
    the inner radiating near-field boundary if needed.
    """
    d_f = fraunhofer_distance(config.aperture, config)
    scale = d_f / NOMINAL_RANGE[1]
    lo = max(NOMINAL_RANGE[0] * scale, fresnel_inner_distance(config.aperture, config))
    return lo, d_f


def default_search_grid(config: SystemConfig) -> SearchGrid:
    lo, hi = range_interval(config)
    return SearchGrid(lo, hi)


def generate_scenario(rng: np.random.Generator, config: SystemConfig, k: int = 3,
                      u: int = 2) -> Scenario:
    """Random targets at 30 degrees elevation; the first ``u`` are DL users."""
    if not 1 <= u <= k:
        raise ValueError("need 1 <= u <= k")
    lo, hi = range_interval(config)
    r = rng.uniform(lo, hi, size=k)
    phi = rng.uniform(0.0, math.pi, size=k)
    phase = rng.uniform(0.0, 2 * math.pi, size=k)
    targets = tuple(SphericalPosition(float(r[i]), ELEVATION, float(phi[i])) for i in range(k))
    return Scenario(targets, tuple(np.exp(1j * phase)), tuple(range(u)))


def trial_seed(master: int, p_index: int, trial: int) -> int:
    """Deterministic 63-bit seed for one (power point, trial) pair."""
    state = np.random.SeedSequence([master, p_index, trial]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def scenario_rng(master: int, trial: int) -> np.random.Generator:
    # shared by every power point of a trial (common random numbers)
    return np.random.default_rng(np.random.SeedSequence([master, trial, 0x5CE]))


def run_trial(scenario: Scenario, config: SystemConfig, seed: int, modes: Sequence[str],
              search: SearchGrid, trial: int = 0, p_index: int = 0,
              timer: Callable[[], float] = time.perf_counter) -> list[TrialRecord]:
    """Probe, estimate and design for every mode at one power point.

    Estimation is shared by all modes; each mode then runs the joint
    design from the estimated user positions.
    """
    rng = np.random.default_rng(seed)
    t0 = timer()
    cb = make_codebook(config.codebook_bits)
    channels = build_channels(scenario, config)
    h_si_hat = perturbed_si(channels.h_si, config.si_estimation_error, rng)
    ctx = probe_context(channels, config, cb, rng, h_si_hat=h_si_hat)
    est = estimate_targets(None, ctx, search, scenario.k)
    err = rmse(est, scenario)
    err_refined = rmse(est.refined, scenario)
    bound = probe_bound(ctx, scenario)
    zeta_hat = user_estimates(est, scenario)

    designs = prepare_designs(zeta_hat, channels, config, cb)
    shared = timer() - t0

    out = []
    for mode in modes:
        t1 = timer()
        sol = algorithm1(scenario, channels, config, zeta_hat=zeta_hat, mode=mode,
                         codebook=cb, h_si_hat=h_si_hat, designs=designs)
        rate_true = sum_rate(sol.bf.w_tx, sol.bf.v, channels.h_dl, channels.p_tx, config,
                             interference=True)
        out.append(TrialRecord(
            seed=seed, trial=trial, p_index=p_index, p_max=config.p_max, mode=mode,
            rmse=err, peb=bound, sum_rate_true=rate_true, sum_rate_estimated=sol.sum_rate,
            residual_si_max=float(np.max(sol.residual_si)), feasible=sol.feasible,
            wall_time=shared / len(modes) + timer() - t1, peb_design=sol.peb,
            rmse_refined=err_refined, scenario=scenario))
    return out


def _failed(seed, trial, p_index, p_max, mode, scenario, exc, wall) -> TrialRecord:
    nan = math.nan
    return TrialRecord(seed, trial, p_index, p_max, mode, nan, nan, nan, nan, nan, False, wall,
                       nan, nan, scenario, f"{type(exc).__name__}: {exc}")


def run_monte_carlo(config: SystemConfig, p_max_grid: Iterable[float], n_trials: int,
                    modes: Sequence[str] = (ISAC,), k: int = 3, u: int = 2,
                    master_seed: int | None = None, search: SearchGrid | None = None,
                    progress: Callable[[TrialRecord], None] | None = None
                    ) -> tuple[RunSummary, list[TrialRecord]]:
    """Run ``n_trials`` trials per power point (in watts) and every mode.

    Scenarios depend on the trial only; receiver noise depends on the
    power point as well. Failing trials are recorded with their error.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    grid = [float(p) for p in p_max_grid]
    if not grid:
        raise ValueError("empty power grid")
    master = config.rng_seed if master_seed is None else int(master_seed)
    config = config.with_(rng_seed=master)
    search = default_search_grid(config) if search is None else search
    start = time.perf_counter()
    records: list[TrialRecord] = []
    for trial in range(n_trials):
        scen = generate_scenario(scenario_rng(master, trial), config, k, u)
        for p_index, p in enumerate(grid):
            cfg = config.with_(p_max=p)
            seed = trial_seed(master, p_index, trial)
            t0 = time.perf_counter()
            try:
                recs = run_trial(scen, cfg, seed, modes, search, trial, p_index)
            except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                wall = time.perf_counter() - t0
                recs = [_failed(seed, trial, p_index, p, m, scen, exc, wall) for m in modes]
            for r in recs:
                records.append(r)
                if progress is not None:
                    progress(r)
    order = {m: i for i, m in enumerate(modes)}
    records.sort(key=lambda r: (r.p_index, r.trial, order[r.mode]))
    settings = {"n_trials": n_trials, "p_max_dbm": [watts_to_dbm(p) for p in grid],
                "modes": list(modes), "k": k, "u": u,
                "search": dataclasses.asdict(search)}
    summary = summarize(records, config, settings, master)
    summary.wall_time = time.perf_counter() - start
    return summary, records


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else math.nan


def _median(x) -> float:
    return float(np.median(x)) if len(x) else math.nan


def summarize(records: Sequence[TrialRecord], config: SystemConfig, settings: dict,
              master_seed: int) -> RunSummary:
    """Per (power, mode) aggregates over the completed trials."""
    aggs = []
    keys = sorted({(r.p_index, r.p_max, r.mode) for r in records},
                  key=lambda t: (t[0], settings.get("modes", []).index(t[2])
                                 if t[2] in settings.get("modes", []) else 0))
    for p_index, p_max, mode in keys:
        group = [r for r in records if r.p_index == p_index and r.mode == mode]
        ok = [r for r in group if r.completed]
        e = np.array([r.rmse for r in ok])
        b = np.array([r.peb for r in ok])
        finite = np.isfinite(b) & (b > 0)
        aggs.append(PowerAggregate(
            p_max_dbm=watts_to_dbm(p_max), mode=mode, n_trials=len(group), n_completed=len(ok),
            mean_rmse=_mean(e), median_rmse=_median(e), mean_peb=_mean(b[finite]),
            median_ratio=_median(e[finite] / b[finite]),
            mean_rmse_refined=_mean([r.rmse_refined for r in ok]),
            mean_sum_rate_true=_mean([r.sum_rate_true for r in ok]),
            mean_sum_rate_est=_mean([r.sum_rate_estimated for r in ok]),
            feasible_fraction=_mean([float(r.feasible) for r in ok]),
            mean_peb_design=_mean([r.peb_design for r in ok if math.isfinite(r.peb_design)])))
    echo = config_echo(config)
    digest = hashlib.sha1(json.dumps({"config": echo, "settings": settings,
                                      "seed": master_seed}, sort_keys=True,
                                     default=str).encode()).hexdigest()
    return RunSummary(aggs, echo, settings, digest[:12], master_seed)


def config_echo(config: SystemConfig) -> dict:
    return {k: _json_value(v) for k, v in config.as_dict().items()}


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v) if math.isfinite(v) else str(float(v))
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    return v


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def record_row(r: TrialRecord, timing: bool = False) -> list[str]:
    wall = _fmt(r.wall_time * 1e3) if timing else ""
    vals = [r.seed, r.p_max_dbm, r.rmse, r.peb, r.sum_rate_true, r.sum_rate_estimated,
            r.residual_si_max, r.feasible]
    extra = [r.mode, r.trial, r.peb_design, r.rmse_refined, r.error]
    return [_fmt(v) for v in vals] + [wall] + [_fmt(v) for v in extra]


def records_csv(records: Sequence[TrialRecord], timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS + EXTRA_COLUMNS)
    for r in records:
        w.writerow(record_row(r, timing))
    return buf.getvalue()


def read_records(path: str | Path) -> list[dict]:
    """Parse ``records.csv`` back into typed dictionaries."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            d = dict(row)
            d["seed"] = int(d["seed"])
            d["trial"] = int(d["trial"])
            d["feasible"] = d["feasible"] == "1"
            for c in ("p_max_dbm", "rmse_m", "peb_m", "sum_rate_bpshz_true",
                      "sum_rate_bpshz_est", "residual_si_max", "peb_design_m", "rmse_refined_m"):
                d[c] = float(d[c])
            d["wall_ms"] = float(d["wall_ms"]) if d["wall_ms"] else None
            out.append(d)
    return out


PLOT_SERIES = {
    "rmse": ("mean_rmse", "median_rmse", "mean_peb", "mean_rmse_refined"),
    "sum_rate": ("mean_sum_rate_true", "mean_sum_rate_est"),
    "feasibility": ("feasible_fraction", "mean_peb_design"),
}


def plot_tables(summary: RunSummary) -> dict[str, str]:
    """One CSV per metric family, x = p_max_dbm, one column per (mode, series)."""
    modes = list(dict.fromkeys(a.mode for a in summary.aggregates))
    xs = list(dict.fromkeys(a.p_max_dbm for a in summary.aggregates))
    tables = {}
    for name, series in PLOT_SERIES.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p_max_dbm"] + [f"{m}:{s}" for m in modes for s in series])
        for x in xs:
            row = [_fmt(x)]
            for m in modes:
                a = summary.aggregate(x, m)
                row += [_fmt(getattr(a, s)) for s in series]
            w.writerow(row)
        tables[f"plotdata_{name}.csv"] = buf.getvalue()
    return tables


def summary_dict(summary: RunSummary) -> dict:
    return {
        "run_id": summary.run_id,
        "master_seed": summary.master_seed,
        "settings": _json_value(summary.settings),
        "config": summary.config,
        "aggregates": [_json_value(dataclasses.asdict(a)) for a in summary.aggregates],
        "counts": {"records": sum(a.n_trials for a in summary.aggregates),
                   "completed": sum(a.n_completed for a in summary.aggregates)},
    }


def emit_outputs(summary: RunSummary, records: Sequence[TrialRecord], path: str | Path,
                 timing: bool = False) -> list[Path]:
    """Write ``records.csv``, ``summary.json`` and the ``plotdata_*.csv`` tables.

    Wall-clock times are only written when ``timing`` is set; without them
    every file is a deterministic function of the seed and configuration.
    """
    out = Path(path)
    files = {"records.csv": records_csv(records, timing),
             "summary.json": json.dumps(summary_dict(summary), indent=2, sort_keys=True) + "\n"}
    files.update(plot_tables(summary))
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return written


# --- INI configuration -------------------------------------------------------

_WATT_FIELDS = {"p_max", "noise_power", "gamma_si"}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(SystemConfig)}


def _parse_value(name: str, raw: str):
    text = raw.strip()
    low = text.lower()
    try:
        if low.endswith("dbm"):
            if name not in _WATT_FIELDS:
                raise ConfigError(f"{name}: dBm values are only valid for powers")
            return dbm_to_watts(float(text[:-3]))
        if low.endswith("deg"):
            return math.radians(float(text[:-3]))
        if low in ("none", ""):
            return None
        if low in ("inf", "+inf"):
            return math.inf
        typ = _FIELD_TYPES[name]
        if "bool" in typ:
            return low in ("1", "true", "yes", "on")
        if typ.startswith("int"):
            return int(text)
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> tuple[SystemConfig, RunSettings]:
    """Read ``[system]`` and ``[run]`` sections.

    Powers accept a ``dBm`` suffix, angles a ``deg`` suffix; bare numbers
    are SI units.
    """
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    if cp.has_section("system"):
        for name, raw in cp.items("system"):
            if name not in _FIELD_TYPES:
                raise ConfigError(f"unknown system parameter {name!r}")
            values[name] = _parse_value(name, raw)
    try:
        config = SystemConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    run = {}
    if cp.has_section("run"):
        sec = cp["run"]
        allowed = {"trials", "p_max_dbm", "modes", "mode", "k", "u", "seed", "record_timing"}
        unknown = set(sec) - allowed
        if unknown:
            raise ConfigError(f"unknown run parameter(s): {', '.join(sorted(unknown))}")
        try:
            if "trials" in sec:
                run["n_trials"] = sec.getint("trials")
            if "p_max_dbm" in sec:
                run["p_max_dbm"] = parse_float_list(sec["p_max_dbm"])
            for key in ("modes", "mode"):
                if key in sec:
                    run["modes"] = tuple(m.strip() for m in sec[key].split(",") if m.strip())
            for key in ("k", "u", "seed"):
                if key in sec:
                    run[key] = sec.getint(key)
            if "record_timing" in sec:
                run["record_timing"] = sec.getboolean("record_timing")
        except ValueError as exc:
            raise ConfigError(f"[run]: {exc}") from exc
    return config, RunSettings(**run)


def parse_float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x.strip().removesuffix("dBm").removesuffix("dbm"))
                     for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc
    if not vals:
        raise ConfigError("empty number list")
    return vals


def load_config(path: str | Path) -> tuple[SystemConfig, RunSettings]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text)


def load_scenario(path: str | Path) -> Scenario:
    """JSON scenario: ``{"targets": [{"r", "theta_deg", "phi_deg", "beta_phase_deg"}], "users": [...]}``."""
    try:
        data = json.loads(Path(path).read_text())
        targets, betas = [], []
        for t in data["targets"]:
            targets.append(SphericalPosition(float(t["r"]), math.radians(float(t["theta_deg"])),
                                             math.radians(float(t["phi_deg"]))))
            betas.append(np.exp(1j * math.radians(float(t.get("beta_phase_deg", 0.0)))))
        return Scenario(tuple(targets), tuple(betas), tuple(data.get("users", [0])))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario file {path}: {exc}") from exc
