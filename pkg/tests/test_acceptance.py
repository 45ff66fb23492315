"""End-to-end acceptance checks, one test per numbered criterion.

Each test prints a PASS/FAIL line and the full list is repeated in the
"acceptance" section of the pytest summary.
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

import bandwidth_oracle
from leafmar.aio import OffloadPreference, OrchestratorState, SceneModel, solve_rho
from leafmar.cli import main
from leafmar.energy_model import (
    ClientSpec,
    Configuration,
    eval_poly,
    latency_per_frame,
    objective_gradient,
    objective_term,
)
from leafmar.frame_metrics import BoundingBox, DegenerateFrameError, Frame, iou, mse, ncc, psnr
from leafmar.harness import default_scenario, run_aio_scenario, run_leaf_scenario
from leafmar.leaf_solver import InfeasibleError, allocate_bandwidth, solve
from leafmar.profiles import default_profile, dump_profile, load_profile

PROFILE = default_profile()
RATIOS = (2.0, 10.0, 50.0, 100.0)
B_MAX = (100.0, 200.0, 300.0, 400.0, 500.0)


@pytest.fixture(scope="module")
def leaf_sweep():
    start = time.perf_counter()
    scenario = replace(default_scenario(), algorithms=("LEAF", "FACT_LIKE", "MINE"),
                       b_max=B_MAX, preference_sweep=RATIOS)
    report = run_leaf_scenario(PROFILE, scenario)
    return report, time.perf_counter() - start


@pytest.fixture(scope="module")
def own_preferences():
    # every client at its own lambda1 = 0.3, lambda2 = 1.8
    scenario = replace(default_scenario(), algorithms=("LEAF", "FACT_LIKE", "MINE"),
                       b_max=(300.0,), preference_sweep=())
    return run_leaf_scenario(PROFILE, scenario)


# hand-typed fitted rows and the points they are checked at
GOLDEN_ROWS = {
    "e_gt_coeffs": (("-0.01071", "0.06055", "-0.1028", "0.107"), (0.3, 1.0, 1.49, 2.0, 2.649)),
    "e_prv_coeffs": (("0.01094", "0.04816"), (0.3, 1.0, 1.49, 2.0, 2.649)),
    "p_cv_coeffs": (("0.1124", "0.01", "0.2175", "0.04295"), (0.3, 1.0, 1.49, 2.0, 2.649)),
    "l_cv_coeffs": (("-0.145", "0.8", "-1.467", "0.996"), (0.3, 1.0, 1.49, 2.0, 2.649)),
    "r_star_coeffs": (("0.07651", "-0.4264", "0.7916", "0.4489"), (0.3, 1.0, 1.49, 2.0, 2.649)),
    "p_tr_coeffs": (("0.01821", "0.7368"), (1.0, 10.0, 60.0, 150.0, 300.0)),
    "l_inf_coeffs": (("0.07816", "0.08892"), (1.6384, 5.0176, 10.24, 26.2144, 36.9664)),
    "p_bs_coeffs": (("0.07873", "0.5918"), (0.3, 1.0, 1.49, 2.0, 2.649)),
}


def test_01_golden_model(verdict, tmp_path):
    start = time.perf_counter()
    worst = 0.0
    for row, (coeffs, points) in GOLDEN_ROWS.items():
        for x in points:
            xr = Fraction(str(x))
            exact = sum(Fraction(c) * xr ** (len(coeffs) - 1 - i) for i, c in enumerate(coeffs))
            got = eval_poly(getattr(PROFILE, row), x)
            worst = max(worst, abs(got - float(exact)) / abs(float(exact)))
    path = tmp_path / "profile.yaml"
    dump_profile(PROFILE, path)
    again = load_profile(path)
    constants = ("p_pro", "t_pro", "p_tail", "t_tail", "r_max_slope", "sigma", "accuracy_a", "accuracy_b")
    bit_exact = again == PROFILE and all(
        np.float64(getattr(again, c)).tobytes() == np.float64(getattr(PROFILE, c)).tobytes() for c in constants
    )
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and bit_exact and elapsed < 1.0
    detail = f"worst relative error {worst:.2e}, round trip bit-exact {bit_exact}, {elapsed:.3f} s"
    assert verdict(1, "fitted rows and constants", ok, detail), detail


def test_02_gradient_matches_central_differences(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    h = (1e-5 * (PROFILE.f_max - PROFILE.f_min), 1e-5 * (PROFILE.s_max - PROFILE.s_min), 1e-5 * 499.0)
    worst = 0.0
    for _ in range(100):
        spec = ClientSpec(fps=int(rng.integers(1, 31)), lambda1=rng.uniform(0, 2), lambda2=rng.uniform(0, 20))
        x = np.array([rng.uniform(PROFILE.f_min + h[0], PROFILE.f_max - h[0]),
                      rng.uniform(PROFILE.s_min + h[1], PROFILE.s_max - h[1]),
                      rng.uniform(1.0 + h[2], 500.0)])
        grad = objective_gradient(PROFILE, spec, Configuration(*x))
        for k in range(3):
            up, down = x.copy(), x.copy()
            up[k] += h[k]
            down[k] -= h[k]
            fd = (objective_term(PROFILE, spec, Configuration(*up))
                  - objective_term(PROFILE, spec, Configuration(*down))) / (2 * h[k])
            worst = max(worst, abs(grad[k] - fd) / abs(fd))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 5.0
    detail = f"worst relative gap {worst:.2e} over 300 partials, {elapsed:.2f} s"
    assert verdict(2, "analytic gradient", ok, detail), detail


def test_03_bandwidth_hessian_is_diagonal(verdict):
    rng = np.random.default_rng(3)
    worst_cross, min_diag = 0.0, math.inf
    for _ in range(100):
        n = int(rng.integers(2, 6))
        specs = [ClientSpec(fps=int(rng.integers(1, 31)), lambda1=rng.uniform(0, 2)) for _ in range(n)]
        f = rng.uniform(PROFILE.f_min, PROFILE.f_max, n)
        s = rng.uniform(PROFILE.s_min, PROFILE.s_max, n)
        b = rng.uniform(5.0, 300.0, n)
        step = 1e-2 * b

        def q(bb):
            return math.fsum(objective_term(PROFILE, sp, Configuration(f[k], s[k], bb[k]))
                             for k, sp in enumerate(specs))

        def shifted(i, di, j, dj):
            bb = b.copy()
            bb[i] += di * step[i]
            bb[j] += dj * step[j]
            return q(bb)

        for i in range(n):
            d2 = (shifted(i, 1, i, 0) - 2 * q(b) + shifted(i, -1, i, 0)) / step[i] ** 2
            min_diag = min(min_diag, d2)
            for j in range(i + 1, n):
                cross = (shifted(i, 1, j, 1) - shifted(i, 1, j, -1)
                         - shifted(i, -1, j, 1) + shifted(i, -1, j, -1)) / (4 * step[i] * step[j])
                worst_cross = max(worst_cross, abs(cross))
    ok = worst_cross < 1e-8 and min_diag > 0
    detail = f"largest cross term {worst_cross:.2e}, smallest diagonal {min_diag:.3e}"
    assert verdict(3, "bandwidth Hessian diagonal and positive", ok, detail), detail


def _random_instance(rng):
    """Three clients whose latency bounds are feasible and often active."""
    fps = [int(v) for v in rng.integers(1, 31, 3)]
    f = rng.uniform(PROFILE.f_min, PROFILE.f_max, 3)
    s = rng.uniform(PROFILE.s_min, PROFILE.s_max, 3)
    b_max = float(rng.uniform(30.0, 500.0))
    share = rng.dirichlet(np.ones(3)) * rng.uniform(0.3, 0.95) * b_max
    bounds = []
    for k in range(3):
        lat = latency_per_frame(PROFILE, Configuration(f[k], s[k], share[k]))
        # a bound met exactly at the sampled share, or a loose one
        bounds.append(lat.total if rng.random() < 0.6 else lat.total * 5)
    specs = [ClientSpec(fps=fps[k], l_max=bounds[k]) for k in range(3)]
    return specs, f, s, b_max, bounds


def test_04_bandwidth_split_matches_reference_solver(verdict):
    rng = np.random.default_rng(4)
    worst_gap, worst_kkt, active = 0.0, 0.0, 0
    for _ in range(20):
        specs, f, s, b_max, bounds = _random_instance(rng)
        cfgs = [Configuration(f[k], s[k], 1.0) for k in range(3)]
        b, duals = allocate_bandwidth(PROFILE, specs, cfgs, b_max=b_max)
        ref = bandwidth_oracle.solve(list(f), list(s), [sp.fps for sp in specs], [0.3] * 3, [1.8] * 3,
                                     bounds, b_max)
        worst_gap = max(worst_gap, float(np.max(np.abs(b - ref) / ref)))
        active += sum(v > 0 for v in duals.beta)
        # stationarity of Q_k(b) + mu * (sum b - b_max) + beta_k * (L_k(b) - L_max_k)
        for k, spec in enumerate(specs):
            cfg = Configuration(f[k], s[k], b[k])
            d_q = objective_gradient(PROFILE, spec, cfg)[2]
            d_l = -latency_per_frame(PROFILE, cfg).l_tr / b[k]
            stationarity = abs(d_q + duals.mu + duals.beta[k] * d_l) / abs(d_q)
            slack_l = (latency_per_frame(PROFILE, cfg).total - bounds[k]) / bounds[k]
            worst_kkt = max(worst_kkt, stationarity, max(slack_l, 0.0),
                            duals.beta[k] * abs(slack_l) / abs(d_q))
        worst_kkt = max(worst_kkt, max(b.sum() - b_max, 0.0) / b_max,
                        duals.mu * abs(b.sum() - b_max) / b_max)
    ok = worst_gap <= 1e-3 and worst_kkt < 1e-4
    detail = f"worst relative gap {worst_gap:.2e}, worst KKT residual {worst_kkt:.2e}, {active} active bounds"
    assert verdict(4, "dual bandwidth split", ok, detail), detail


def test_05_leaf_beats_baselines_everywhere(verdict, leaf_sweep):
    report, elapsed = leaf_sweep
    losses = []
    for b_max in B_MAX:
        for ratio in RATIOS:
            label = repr(ratio)
            q = {alg: report.aggregate(algorithm=alg, b_max=b_max, preference=label)["q"]
                 for alg in ("LEAF", "FACT_LIKE", "MINE")}
            if not (q["LEAF"] <= q["FACT_LIKE"] and q["LEAF"] <= q["MINE"]):
                losses.append((b_max, ratio, q))
    ok = not losses and elapsed < 60.0
    detail = f"{20 - len(losses)}/20 points won, sweep {elapsed:.1f} s"
    assert verdict(5, "LEAF objective no worse than FACT_LIKE and MINE", ok, detail), (detail, losses)


def test_06_leaf_saves_energy_against_fact_like(verdict, own_preferences):
    leaf = own_preferences.aggregate(algorithm="LEAF")
    fact = own_preferences.aggregate(algorithm="FACT_LIKE")
    e_ratio = leaf["energy"] / fact["energy"]
    a_ratio = leaf["accuracy"] / fact["accuracy"]
    ok = e_ratio <= 0.85 and a_ratio >= 0.85
    detail = f"energy ratio {e_ratio:.4f} (need <= 0.85), accuracy ratio {a_ratio:.4f} (need >= 0.85)"
    assert verdict(6, "LEAF vs FACT_LIKE at 300 Mbps", ok, detail), detail


def test_07_leaf_gains_accuracy_against_energy_only(verdict, leaf_sweep):
    report, _ = leaf_sweep
    leaf = report.aggregate(algorithm="LEAF", b_max=300.0, preference="2.0")
    mine = report.aggregate(algorithm="MINE", b_max=300.0, preference="2.0")
    a_ratio = leaf["accuracy"] / mine["accuracy"]
    e_ratio = leaf["energy"] / mine["energy"]
    ok = a_ratio >= 1.3 and e_ratio <= 1.5
    detail = f"accuracy ratio {a_ratio:.4f} (need >= 1.3), energy ratio {e_ratio:.4f} (need <= 1.5)"
    assert verdict(7, "LEAF vs MINE at lambda2/lambda1 = 2", ok, detail), detail


def test_08_descent_and_feasibility(verdict):
    rng = np.random.default_rng(8)
    problems, infeasible = [], 0
    for trial in range(50):
        n = int(rng.integers(1, 7))
        loose = rng.random() < 0.5
        specs = [
            ClientSpec(fps=int(rng.integers(1, 31)), lambda1=float(rng.uniform(0, 1)),
                       lambda2=float(rng.uniform(0, 10)), l_max=float(rng.uniform(1, 5)) if loose else None)
            for _ in range(n)
        ]
        b_max = float(rng.uniform(20.0, 500.0))
        try:
            alloc = solve(PROFILE, specs, b_max=b_max)
        except InfeasibleError:
            infeasible += 1
            continue
        trace = alloc.trace
        if any(b > a + 1e-9 for a, b in zip(trace, trace[1:])):
            problems.append((trial, "trace rises"))
        if sum(c.b for c in alloc.configs) > b_max + 1e-6:
            problems.append((trial, "bandwidth"))
        for c, bound in zip(alloc.configs, alloc.latency_bounds):
            if latency_per_frame(PROFILE, c).total > bound + 1e-9 or c.s not in PROFILE.model_sizes:
                problems.append((trial, "latency or size"))
    ok = not problems
    detail = f"{50 - infeasible} solved, {infeasible} reported infeasible, {len(problems)} violations"
    assert verdict(8, "monotone descent and feasible allocations", ok, detail), (detail, problems)


def _exact_rho(e_obj, e_trk, theta1, theta2, psnr_latest, v_bar, rho_max):
    def iou_of(p):
        raw = Fraction(-0.004335) * p * p + Fraction(0.2411) * p - Fraction(2.328)
        return min(Fraction(1), max(Fraction(0), raw))

    e_obj, e_trk, theta1, theta2 = (Fraction(x) for x in (e_obj, e_trk, theta1, theta2))
    costs = []
    for rho in range(rho_max + 1):
        p = min(Fraction(100), max(Fraction(0), Fraction(psnr_latest) + Fraction(v_bar) * rho))
        costs.append(theta1 * (e_obj + e_trk * rho) / (1 + rho) - theta2 * iou_of(p))
    return costs.index(min(costs))


def test_09_tracking_budget_is_the_exhaustive_argmin(verdict):
    rng = np.random.default_rng(9)
    scene = SceneModel()
    mismatches = []
    for _ in range(200):
        e_obj, e_trk = float(rng.uniform(0.05, 5.0)), float(rng.uniform(0.01, 5.0))
        th1 = 0.0 if rng.random() < 0.1 else float(rng.uniform(1e-3, 10.0))
        th2 = 0.0 if th1 > 0 and rng.random() < 0.1 else float(rng.uniform(1e-3, 10.0))
        p = float(rng.uniform(0.0, 100.0))
        v = 0.0 if rng.random() < 0.1 else float(rng.uniform(-5.0, 5.0))
        rho_max = int(rng.integers(0, 151))
        state = OrchestratorState(e_obj=e_obj, e_trk=e_trk, window_frames=30, rho_max=rho_max)
        state.v_bar = v
        got = solve_rho(state, scene, OffloadPreference(th1, th2), p)
        want = _exact_rho(e_obj, e_trk, th1, th2, p, v, rho_max)
        if got != want:
            mismatches.append((e_obj, e_trk, th1, th2, p, v, rho_max, got, want))
    ok = not mismatches
    detail = f"{200 - len(mismatches)}/200 tuples agree"
    assert verdict(9, "tracking budget equals exhaustive search", ok, detail), mismatches[:3]


def test_10_offloading_trend(verdict):
    start = time.perf_counter()
    scenario = replace(default_scenario(), b_max=(300.0,), preference_sweep=(), seed=0,
                       algorithms=("LEAF_AIO", "LEAF_FRUGAL", "LEAF_ONLY"))
    report = run_aio_scenario(PROFILE, scenario)
    elapsed = time.perf_counter() - start
    thetas = scenario.offload_sweep
    aio = [report.aggregate(algorithm="LEAF_AIO", theta_ratio=t) for t in thetas]
    energy = [a["energy"] for a in aio]
    quality = [a["mean_iou"] for a in aio]
    monotone = all(b <= a for a, b in zip(energy, energy[1:])) and all(b <= a for a, b in zip(quality, quality[1:]))
    always = report.select(algorithm="LEAF_ONLY")
    full = all(r.offload_fraction == 1.0 for r in always)
    highest = all(
        report.aggregate(algorithm="LEAF_ONLY", theta_ratio=t)["energy"]
        > max(report.aggregate(algorithm=alg, theta_ratio=t)["energy"] for alg in ("LEAF_AIO", "LEAF_FRUGAL"))
        for t in thetas
    )
    ok = monotone and full and highest and elapsed < 30.0
    detail = (f"energy {[round(e, 5) for e in energy]}, IOU {[round(q, 5) for q in quality]}, "
              f"always-offload fraction 1.0 {full}, highest energy {highest}, {elapsed:.1f} s")
    assert verdict(10, "offloading trend over theta1/theta2", ok, detail), detail


def test_11_frame_metric_hand_cases(verdict):
    z = Frame(np.zeros((2, 2)))
    ten = Frame(np.full((2, 2), 10.0))
    one = np.zeros((4, 4))
    one[1, 2] = 255
    a = Frame(np.array([[0.0, 0.0], [255.0, 255.0]]))
    checks = {
        "mse identical": mse(ten, ten) == 0.0,
        "mse 0 vs 10": mse(z, ten) == 100.0,
        "mse one pixel": mse(Frame(np.zeros((4, 4))), Frame(one)) == 255**2 / 16,
        "psnr mse 100": psnr(z, ten) == 20 * math.log10(255 / 10) and round(psnr(z, ten), 2) == 28.13,
        "psnr identical": psnr(ten, ten) == 100.0,
        "psnr maximal": psnr(z, Frame(np.full((2, 2), 255.0))) == 0.0,
        "iou identical": iou(BoundingBox(1, 2, 3, 4), BoundingBox(1, 2, 3, 4)) == 1.0,
        "iou disjoint": iou(BoundingBox(0, 0, 1, 1), BoundingBox(3, 3, 1, 1)) == 0.0,
        "iou third": iou(BoundingBox(0, 0, 1, 1), BoundingBox(0.5, 0, 1, 1)) == 1 / 3,
        "ncc self": ncc(a, a) == 1.0,
        "ncc negated": ncc(a, Frame(255 - a.pixels)) == -1.0,
        "ncc orthogonal": ncc(a, Frame(np.array([[0.0, 255.0], [0.0, 255.0]]))) == 0.0,
    }
    try:
        ncc(a, Frame(np.full((2, 2), 9.0)))
        checks["ncc constant frame"] = False
    except DegenerateFrameError:
        checks["ncc constant frame"] = True
    failed = [k for k, v in checks.items() if not v]
    detail = f"{len(checks) - len(failed)}/{len(checks)} hand cases exact"
    assert verdict(11, "frame metric hand cases", not failed, detail), failed


REPEAT_SCENARIO = """\
clients: [9, 30, 16, 23, 14, 17, 13, 2, 19, 5]
b_max: [150, 350]
preference_sweep: [2, 50]
offload_sweep: [1, 4]
algorithms: [LEAF, FACT_LIKE, MINE, LEAF_AIO, LEAF_FRUGAL, LEAF_ONLY]
trace: {length: 800}
"""


def test_12_sweeps_are_byte_identical(verdict, tmp_path, capsys):
    scenario = tmp_path / "repeat.yaml"
    scenario.write_text(REPEAT_SCENARIO)
    outputs = []
    for attempt in range(2):
        for command in ("sweep", "aio-run"):
            target = tmp_path / f"{command}-{attempt}.csv"
            code = main([command, "--scenario", str(scenario), "--seed", "11", "--out", str(target)])
            assert code == 0
            outputs.append(target.read_bytes())
    capsys.readouterr()
    same = outputs[0] == outputs[2] and outputs[1] == outputs[3]
    detail = f"sweep {len(outputs[0])} bytes, aio-run {len(outputs[1])} bytes, identical {same}"
    assert verdict(12, "repeatable CSV output", same, detail), detail
