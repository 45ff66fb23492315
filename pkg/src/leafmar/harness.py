"""Multi-client scenario runner for LEAF, its baselines and the offloading policies."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .aio import Action, OffloadPreference, OrchestratorState, SceneModel, scene_rate, step
from .energy_model import (
    BITS_PER_MEGABIT,
    ClientSpec,
    Configuration,
    DeviceProfile,
    ProfileError,
    accuracy,
    energy_per_frame,
    latency_arrays,
    objective_term,
)
from .frame_metrics import MAX_INTENSITY, DegenerateFrameError, Frame, ncc, psnr, read_pgm
from .leaf_solver import InfeasibleError, SolverConfig, resolve_latency_bounds, solve

__all__ = [
    "LEAF_ALGORITHMS",
    "AIO_ALGORITHMS",
    "FRUGAL_NCC_THRESHOLD",
    "TEN_CLIENT_FPS",
    "ScenarioError",
    "TraceSource",
    "Scenario",
    "ClientRow",
    "Report",
    "ten_client_scenario",
    "default_scenario",
    "load_scenario",
    "scenario_from_dict",
    "synth_trace",
    "read_psnr_trace",
    "frames_from_trace",
    "run_fact_like",
    "run_leaf_scenario",
    "run_aio_scenario",
]

LEAF_ALGORITHMS = ("LEAF", "FACT_LIKE", "MINE")
AIO_ALGORITHMS = ("LEAF_AIO", "LEAF_FRUGAL", "LEAF_ONLY")
FRUGAL_NCC_THRESHOLD = 0.5
TEN_CLIENT_FPS = (9, 30, 16, 23, 14, 17, 13, 2, 19, 5)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSource:
    """Where per-frame PSNR values come from.

    ``kind`` is ``synthetic`` (seeded generator), ``psnr_file`` (one dB
    value per line) or ``pgm_dir`` (a directory of 8-bit PGM frames read in
    name order).
    """

    kind: str = "synthetic"
    path: str | None = None
    length: int = 3000
    drift: float = 0.0
    noise: float = 2.0
    start: float = 25.0

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "psnr_file", "pgm_dir"):
            raise ScenarioError(f"unknown trace kind {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise ScenarioError(f"trace kind {self.kind!r} needs a path")
        if self.kind == "synthetic" and self.length < 3:
            raise ScenarioError("synthetic traces need at least 3 frames")
        if self.noise < 0:
            raise ScenarioError("trace noise must be nonnegative")


@dataclass(frozen=True)
class Scenario:
    """Clients plus the sweep axes.

    ``preference_sweep`` entries are either a ratio ``lambda2/lambda1``
    (each client keeps its own lambda1) or an explicit ``(lambda1, lambda2)``
    pair.  An empty sweep runs every client at its own preferences.
    ``offload_sweep`` lists ``theta1/theta2`` ratios with ``theta2 = 1``.
    """

    clients: tuple[ClientSpec, ...]
    b_max: tuple[float, ...] = (300.0,)
    preference_sweep: tuple = ()
    offload_sweep: tuple[float, ...] = (1.0,)
    algorithms: tuple[str, ...] = LEAF_ALGORITHMS
    trace: TraceSource = TraceSource()
    seed: int = 0
    solver: SolverConfig = SolverConfig()

    def __post_init__(self) -> None:
        if not self.clients:
            raise ScenarioError("scenario needs at least one client")
        if not self.b_max or any(not b > 0 for b in self.b_max):
            raise ScenarioError("b_max values must be positive and at least one is needed")
        if not self.offload_sweep or any(not r > 0 for r in self.offload_sweep):
            raise ScenarioError("offload ratios must be positive and at least one is needed")
        unknown = [a for a in self.algorithms if a not in LEAF_ALGORITHMS + AIO_ALGORITHMS]
        if unknown or not self.algorithms:
            raise ScenarioError(f"unknown or missing algorithms: {unknown}")
        for p in self.preference_sweep:
            if isinstance(p, tuple):
                if len(p) != 2 or min(p) < 0:
                    raise ScenarioError(f"bad preference pair {p!r}")
            elif not p >= 0:
                raise ScenarioError(f"bad preference ratio {p!r}")

    def preference_points(self) -> list[tuple[str, tuple[ClientSpec, ...]]]:
        if not self.preference_sweep:
            return [("client", self.clients)]
        points = []
        for p in self.preference_sweep:
            if isinstance(p, tuple):
                l1, l2 = p
                specs = tuple(replace(c, lambda1=l1, lambda2=l2) for c in self.clients)
                points.append((f"{l1!r}:{l2!r}", specs))
            else:
                specs = tuple(replace(c, lambda2=p * c.lambda1) for c in self.clients)
                points.append((repr(float(p)), specs))
        return points


def ten_client_scenario(**overrides: Any) -> Scenario:
    clients = tuple(ClientSpec(fps=fps, lambda1=0.3, lambda2=1.8) for fps in TEN_CLIENT_FPS)
    return Scenario(clients=clients, **overrides)


# ------------------------------------------------------------- scenario files


def _as_tuple(value: Any) -> tuple:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return (value,)


def scenario_from_dict(raw: Mapping[str, Any]) -> Scenario:
    if not isinstance(raw, Mapping):
        raise ScenarioError("scenario must be a mapping")
    known = {"clients", "defaults", "b_max", "preference_sweep", "offload_sweep",
             "algorithms", "trace", "seed", "solver"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(unknown)}")
    defaults = dict(raw.get("defaults") or {})
    clients = []
    for entry in raw.get("clients") or []:
        spec = {**defaults, **(entry if isinstance(entry, Mapping) else {"fps": entry})}
        try:
            clients.append(ClientSpec(**spec))
        except (TypeError, ProfileError) as exc:
            raise ScenarioError(f"bad client entry {entry!r}: {exc}") from exc
    kwargs: dict[str, Any] = {"clients": tuple(clients)}
    if "b_max" in raw:
        kwargs["b_max"] = tuple(float(b) for b in _as_tuple(raw["b_max"]))
    if "preference_sweep" in raw:
        kwargs["preference_sweep"] = tuple(
            tuple(float(x) for x in p) if isinstance(p, (list, tuple)) else float(p)
            for p in raw["preference_sweep"] or ()
        )
    if "offload_sweep" in raw:
        kwargs["offload_sweep"] = tuple(float(r) for r in _as_tuple(raw["offload_sweep"]))
    if "algorithms" in raw:
        kwargs["algorithms"] = tuple(str(a).upper() for a in _as_tuple(raw["algorithms"]))
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    try:
        if raw.get("trace") is not None:
            kwargs["trace"] = TraceSource(**raw["trace"])
        if raw.get("solver") is not None:
            kwargs["solver"] = SolverConfig(**raw["solver"])
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc
    return Scenario(**kwargs)


def default_scenario_text() -> str:
    return resources.files("leafmar").joinpath("data/ten_clients.yaml").read_text(encoding="utf-8")


def default_scenario() -> Scenario:
    """The bundled ten-client scenario with every sweep axis filled in."""
    return scenario_from_dict(yaml.safe_load(default_scenario_text()))


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: not valid YAML: {exc}") from exc
    scenario = scenario_from_dict(raw)
    trace = scenario.trace
    if trace.path and not Path(trace.path).is_absolute():
        # relative trace paths are resolved against the scenario file
        scenario = replace(scenario, trace=replace(trace, path=str(Path(path).parent / trace.path)))
    return scenario


# ------------------------------------------------------------------ reports


@dataclass
class ClientRow:
    algorithm: str
    b_max: float
    preference: str
    theta_ratio: float
    client: int
    fps: int
    lambda1: float
    lambda2: float
    status: str
    f: float = math.nan
    s: float = math.nan
    b: float = math.nan
    energy: float = math.nan
    latency: float = math.nan
    accuracy: float = math.nan
    q: float = math.nan
    offload_fraction: float = math.nan
    data_mb: float = math.nan
    mean_iou: float = math.nan
    frames: int = 0
    detects: int = 0
    tracks: int = 0
    e_obj: float = math.nan
    e_trk: float = math.nan
    total_energy: float = math.nan

    @property
    def ok(self) -> bool:
        return self.status == "ok"


CSV_COLUMNS = tuple(f.name for f in fields(ClientRow))


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


@dataclass
class Report:
    rows: list[ClientRow] = field(default_factory=list)
    traces: dict[str, list[float]] = field(default_factory=dict)

    def select(self, **match: Any) -> list[ClientRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def aggregates(self) -> list[dict[str, Any]]:
        """One summary per (algorithm, b_max, preference, theta_ratio) point.

        Means run over feasible clients; ``q`` is the sum over them.
        """
        groups: dict[tuple, list[ClientRow]] = {}
        for r in self.rows:
            groups.setdefault((r.algorithm, r.b_max, r.preference, r.theta_ratio), []).append(r)
        out = []
        for (alg, b_max, pref, theta), rows in groups.items():
            ok = [r for r in rows if r.ok]
            entry: dict[str, Any] = {
                "algorithm": alg, "b_max": b_max, "preference": pref, "theta_ratio": theta,
                "clients": len(rows), "infeasible": len(rows) - len(ok),
            }
            for name in ("energy", "latency", "accuracy", "offload_fraction", "data_mb", "mean_iou"):
                vals = [getattr(r, name) for r in ok]
                entry[name] = math.fsum(vals) / len(vals) if vals else math.nan
            entry["q"] = math.fsum(r.q for r in ok) if ok else math.nan
            out.append(entry)
        return out

    def aggregate(self, **match: Any) -> dict[str, Any]:
        hits = [a for a in self.aggregates() if all(a[k] == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} aggregate points match {match}")
        return hits[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates(),
            "solver_traces": self.traces,
        }
        return json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path, fmt: str = "csv") -> None:
        text = self.to_csv() if fmt == "csv" else self.to_json()
        Path(path).write_text(text, encoding="utf-8")


# ------------------------------------------------------------------- traces


def synth_trace(seed: int, length: int, drift: float, noise: float, start: float = 25.0) -> np.ndarray:
    """``start + drift * i`` plus uniform noise in ``[-noise, noise]``, floored at 0 dB."""
    if length < 3:
        raise ValueError("trace length must be at least 3")
    rng = np.random.default_rng(seed)
    base = start + drift * np.arange(length, dtype=float)
    jitter = rng.uniform(-noise, noise, size=length) if noise > 0 else np.zeros(length)
    return np.maximum(base + jitter, 0.0)


def read_psnr_trace(path: str | Path) -> np.ndarray:
    values = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise ScenarioError(f"{path}:{lineno}: not a number: {line!r}") from exc
    if len(values) < 3:
        raise ScenarioError(f"{path}: need at least 3 PSNR values")
    return np.array(values)


def frames_from_trace(trace: np.ndarray, seed: int, shape: tuple[int, int] = (24, 24)) -> list[Frame]:
    """Frames whose consecutive PSNR approximately follows ``trace``.

    A random texture takes Gaussian steps whose variance matches the MSE
    implied by each PSNR value; intensities reflect off the 0 and 255 walls.
    ``trace[0]`` is ignored because the first frame has no predecessor.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, MAX_INTENSITY, size=shape)
    frames = [Frame(x)]
    for p in trace[1:]:
        sigma = MAX_INTENSITY / 10 ** (min(p, 100.0) / 20)
        x = x + rng.normal(0.0, sigma, size=shape)
        x = np.abs(x)
        x = MAX_INTENSITY - np.abs(MAX_INTENSITY - np.mod(x, 2 * MAX_INTENSITY))
        frames.append(Frame(x))
    return frames


def _pgm_frames(directory: str | Path) -> list[Frame]:
    paths = sorted(Path(directory).glob("*.pgm"))
    if len(paths) < 3:
        raise ScenarioError(f"{directory}: need at least 3 PGM frames")
    return [read_pgm(p) for p in paths]


def _client_inputs(scenario: Scenario, client: int, need_frames: bool) -> tuple[np.ndarray, list[Frame] | None]:
    src = scenario.trace
    seed = int(np.random.SeedSequence([scenario.seed, client]).generate_state(1)[0])
    if src.kind == "pgm_dir":
        frames = _pgm_frames(src.path)
        trace = np.array([PSNR_FIRST] + [psnr(a, b) for a, b in zip(frames, frames[1:])])
        return trace, frames
    if src.kind == "psnr_file":
        trace = read_psnr_trace(src.path)
    else:
        trace = synth_trace(seed, src.length, src.drift, src.noise, src.start)
    frames = frames_from_trace(trace, seed + 1) if need_frames else None
    return trace, frames


# the first frame of a PGM sequence has no predecessor; treat it as unchanged
PSNR_FIRST = 100.0


# ------------------------------------------------------------- LEAF family


def run_fact_like(profile: DeviceProfile, specs: Sequence[ClientSpec], b_max: float) -> list[Configuration]:
    """Even bandwidth split, governor-default frequency, per-client size grid search.

    Only sizes meeting the client's latency bound are candidates; if none
    does, the smallest model is used.
    """
    k = len(specs)
    b = b_max / k
    f = profile.default_frequency
    bounds = resolve_latency_bounds(profile, specs, b_max)
    sizes = np.asarray(profile.model_sizes, dtype=float)
    l_cv, l_tr, l_inf = latency_arrays(profile, f, sizes, b)
    lat = l_cv + l_tr + l_inf
    acc = accuracy(profile, sizes)
    configs = []
    for spec, bound in zip(specs, bounds):
        ok = lat <= bound
        if not ok.any():
            s = sizes[0]
        else:
            score = np.where(ok, spec.lambda1 * lat - spec.lambda2 * acc, np.inf)
            s = sizes[int(np.argmin(score))]
        configs.append(Configuration(float(f), float(s), float(b)))
    return configs


def _fill_row(profile: DeviceProfile, row: ClientRow, spec: ClientSpec, cfg: Configuration) -> ClientRow:
    br = energy_per_frame(profile, spec, cfg)
    row.f, row.s, row.b = cfg.f, cfg.s, cfg.b
    row.energy = br.total
    row.latency = br.latency
    row.accuracy = accuracy(profile, cfg.s)
    row.q = objective_term(profile, spec, cfg)
    return row


def _leaf_point(args) -> tuple[list[ClientRow], list[float] | None]:
    profile, scenario, algorithm, b_max, pref_label, specs = args
    rows = [
        ClientRow(algorithm, float(b_max), pref_label, math.nan, i, c.fps, c.lambda1, c.lambda2, "ok")
        for i, c in enumerate(specs)
    ]
    trace = None
    try:
        if algorithm == "FACT_LIKE":
            configs = run_fact_like(profile, specs, b_max)
        elif algorithm == "MINE":
            energy_only = [replace(c, lambda1=0.0, lambda2=0.0) for c in specs]
            alloc = solve(profile, energy_only, scenario.solver, b_max=b_max)
            configs, trace = alloc.configs, alloc.trace
        else:
            alloc = solve(profile, specs, scenario.solver, b_max=b_max)
            configs, trace = alloc.configs, alloc.trace
    except InfeasibleError as exc:
        for r in rows:
            r.status = "infeasible_culprit" if r.client in exc.clients else "infeasible"
        return rows, None
    for r, spec, cfg in zip(rows, specs, configs):
        _fill_row(profile, r, spec, cfg)
    return rows, trace


def _run_points(func, points: list, workers: int) -> list:
    if workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, points))
    return [func(p) for p in points]


def run_leaf_scenario(profile: DeviceProfile, scenario: Scenario, workers: int = 1) -> Report:
    """Every LEAF-family algorithm at every (b_max, preference) point."""
    algorithms = [a for a in scenario.algorithms if a in LEAF_ALGORITHMS]
    if not algorithms:
        raise ScenarioError("scenario lists no LEAF-family algorithm")
    points = [
        (profile, scenario, alg, b_max, label, specs)
        for b_max in scenario.b_max
        for label, specs in scenario.preference_points()
        for alg in algorithms
    ]
    report = Report()
    for (_, _, alg, b_max, label, _), (rows, trace) in zip(points, _run_points(_leaf_point, points, workers)):
        report.rows.extend(rows)
        if trace is not None:
            report.traces[f"{alg}|{float(b_max)!r}|{label}"] = trace
    return report


# -------------------------------------------------------------- AIO family


def _simulate_client(
    algorithm: str,
    theta_ratio: float,
    spec: ClientSpec,
    e_obj: float,
    e_trk: float,
    latency: float,
    tracking_latency: float,
    data_mb: float,
    trace: np.ndarray,
    frames: list[Frame] | None,
    scene: SceneModel,
) -> dict[str, float]:
    """Frame-by-frame policy run; frame 0 is always offloaded.

    Every frame gets a predicted IOU: 1.0 when it was detected, otherwise
    the scene model evaluated at the PSNR extrapolated from the latest
    detection with the scene rate measured at that detection.
    """
    pref = OffloadPreference(theta1=theta_ratio, theta2=1.0)
    state = OrchestratorState.for_client(spec.fps, e_obj, e_trk)
    # a separate estimator gives the non-AIO policies the same IOU predictor
    probe = OrchestratorState.for_client(spec.fps, e_obj, e_trk)
    detects = tracks = 0
    iou_sum = 0.0
    action = Action.DETECT
    last_detect = 0
    psnr_at_detect = float(trace[0])
    anchor: Frame | None = None
    for i, p in enumerate(trace):
        p = float(p)
        if probe.psnr_history:
            probe.grad_history.append((p - probe.psnr_history[-1]) / 2.0)
        probe.psnr_history.append(p)
        if algorithm == "LEAF_ONLY":
            action = Action.DETECT
        elif algorithm == "LEAF_FRUGAL" and i > 0:
            try:
                similar = ncc(anchor, frames[i]) >= FRUGAL_NCC_THRESHOLD
            except DegenerateFrameError:
                similar = True
            action = Action.TRACK if similar else Action.DETECT

        if action is Action.DETECT:
            detects += 1
            iou_sum += 1.0
            last_detect = i
            psnr_at_detect = p
            probe.v_bar = scene_rate(probe) if probe.grad_history else 0.0
            if frames is not None:
                anchor = frames[i]
        else:
            tracks += 1
            extrapolated = psnr_at_detect + probe.v_bar * (i - last_detect)
            iou_sum += scene.iou(min(scene.psnr_cap, max(0.0, extrapolated)))

        if algorithm == "LEAF_AIO":
            action = step(state, scene, pref, action is Action.DETECT, p)

    n = len(trace)
    total = detects * e_obj + tracks * e_trk
    return {
        "frames": n,
        "detects": detects,
        "tracks": tracks,
        "total_energy": total,
        "energy": total / n,
        "latency": (detects * latency + tracks * tracking_latency) / n,
        "offload_fraction": detects / n,
        "data_mb": detects * data_mb,
        "mean_iou": iou_sum / n,
    }


def _aio_point(args) -> list[ClientRow]:
    profile, scenario, algorithm, theta_ratio, b_max, label, specs, configs, inputs = args
    scene = SceneModel()
    rows = []
    for i, (spec, cfg, (trace, frames)) in enumerate(zip(specs, configs, inputs)):
        row = ClientRow(algorithm, float(b_max), label, float(theta_ratio), i, spec.fps,
                        spec.lambda1, spec.lambda2, "ok")
        _fill_row(profile, row, spec, cfg)
        e_obj = row.energy
        e_trk = profile.tracking_energy(cfg.f)
        sim = _simulate_client(
            algorithm, theta_ratio, spec, e_obj, e_trk, row.latency, profile.tracking_latency,
            profile.sigma * cfg.s * cfg.s / BITS_PER_MEGABIT, trace, frames, scene,
        )
        row.e_obj, row.e_trk = e_obj, e_trk
        for key, value in sim.items():
            setattr(row, key, value)
        rows.append(row)
    return rows


def run_aio_scenario(profile: DeviceProfile, scenario: Scenario, workers: int = 1) -> Report:
    """Offloading policies on top of the LEAF configuration for each client.

    LEAF is solved once per (b_max, preference) point with the scenario's
    clients; each client then replays its own PSNR trace under every
    offloading policy and every theta ratio.
    """
    algorithms = [a for a in scenario.algorithms if a in AIO_ALGORITHMS]
    if not algorithms:
        raise ScenarioError("scenario lists no offloading algorithm")
    need_frames = "LEAF_FRUGAL" in algorithms
    inputs = [_client_inputs(scenario, k, need_frames) for k in range(len(scenario.clients))]
    report = Report()
    points = []
    for b_max in scenario.b_max:
        for label, specs in scenario.preference_points():
            try:
                alloc = solve(profile, specs, scenario.solver, b_max=b_max)
            except InfeasibleError as exc:
                for alg in algorithms:
                    for theta in scenario.offload_sweep:
                        for i, c in enumerate(specs):
                            status = "infeasible_culprit" if i in exc.clients else "infeasible"
                            report.rows.append(ClientRow(alg, float(b_max), label, float(theta), i, c.fps,
                                                         c.lambda1, c.lambda2, status))
                continue
            report.traces[f"LEAF|{float(b_max)!r}|{label}"] = alloc.trace
            for alg in algorithms:
                for theta in scenario.offload_sweep:
                    points.append((profile, scenario, alg, theta, b_max, label, specs, alloc.configs, inputs))
    for rows in _run_points(_aio_point, points, workers):
        report.rows.extend(rows)
    return report

