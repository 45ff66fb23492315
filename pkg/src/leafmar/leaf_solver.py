"""LEAF: block-coordinate descent over CPU frequency, model size and bandwidth.

Each outer cycle runs three blocks:

1. projected gradient on every client's CPU frequency,
2. projected gradient on every client's relaxed (continuous) model size,
3. Lagrangian dual decomposition for the bandwidth split, using the
   closed-form KKT share ``B_k = sqrt(Phi_k / (r_max_slope * mu))`` and
   projected subgradient steps on the multipliers.

The cycle repeats until the relative change of the summed objective drops
below ``tau``; the relaxed sizes are then rounded to the nearest installed
model.  Per-client work inside a block is vectorised with numpy, which
keeps the iteration barrier between blocks intact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .energy_model import (
    BITS_PER_MEGABIT,
    ClientSpec,
    Configuration,
    DeviceProfile,
    DomainError,
    default_latency_bound,
    eval_poly,
    latency_arrays,
    objective_arrays,
    objective_gradient_arrays,
)

__all__ = [
    "SolverConfig",
    "DualState",
    "Allocation",
    "InfeasibleError",
    "resolve_latency_bounds",
    "update_frequency",
    "update_model_size",
    "allocate_bandwidth",
    "solve",
]

log = logging.getLogger(__name__)


class InfeasibleError(RuntimeError):
    """No bandwidth split meets every latency bound within ``b_max``.

    ``clients`` holds a smallest set of client indices whose minimum
    bandwidth demands already exceed the budget (or that cannot meet their
    bound with any bandwidth).
    """

    def __init__(self, message: str, clients: Sequence[int]):
        super().__init__(message)
        self.clients = tuple(int(k) for k in clients)


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 0.05          # frequency step, GHz^2 / J
    eta: float = 1000.0          # model-size step, px^2 / J
    theta_mu: float = 1.0
    theta_beta: float = 1.0
    tau: float = 1e-6
    max_outer_iters: int = 200
    max_inner_iters: int = 10_000
    max_dual_iters: int = 10_000
    inner_tol: float = 1e-6
    dual_tol: float = 1e-12
    mu_init: float = 1.0
    mu_floor: float = 1e-15
    gradient: str = "analytic"   # or "finite_difference"
    polish: bool = True          # descent-only discrete search after rounding

    def __post_init__(self) -> None:
        for name in ("gamma", "eta", "theta_mu", "theta_beta", "inner_tol", "dual_tol", "mu_init", "mu_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        for name in ("max_outer_iters", "max_inner_iters", "max_dual_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.gradient not in ("analytic", "finite_difference"):
            raise ValueError("gradient must be 'analytic' or 'finite_difference'")


@dataclass(frozen=True)
class DualState:
    mu: float
    beta: tuple[float, ...]
    iterations: int
    converged: bool
    bandwidth_residual: float        # mu * (sum(b) - b_max)
    latency_residuals: tuple[float, ...]   # beta_k * (L_k - L_max_k)


@dataclass
class Allocation:
    configs: list[Configuration]
    q_value: float
    q_relaxed: float
    q_initial: float
    trace: list[float]
    relaxed_sizes: list[float]
    latency_bounds: list[float]
    duals: DualState
    converged: bool
    iterations: int
    b_max: float
    status: str = "converged"
    q_nearest: float = math.nan   # Q right after nearest-size rounding, before polishing
    rounding_gap: float = field(init=False)

    def __post_init__(self) -> None:
        self.rounding_gap = self.q_value - self.q_relaxed

    def to_dict(self) -> dict:
        out = asdict(self)
        out["configs"] = [asdict(c) for c in self.configs]
        return out


# ---------------------------------------------------------------- helpers


@dataclass(frozen=True)
class _Clients:
    fps: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    l_max: np.ndarray

    @classmethod
    def from_specs(cls, specs: Sequence[ClientSpec], l_max: Sequence[float]) -> "_Clients":
        return cls(
            fps=np.array([c.fps for c in specs], dtype=float),
            lambda1=np.array([c.lambda1 for c in specs], dtype=float),
            lambda2=np.array([c.lambda2 for c in specs], dtype=float),
            l_max=np.asarray(l_max, dtype=float),
        )


def resolve_latency_bounds(profile: DeviceProfile, specs: Sequence[ClientSpec], b_max: float) -> list[float]:
    """Per-client latency bounds, filling ``None`` with the solver default."""
    default = default_latency_bound(profile, b_max / len(specs))
    return [default if c.l_max is None else float(c.l_max) for c in specs]


def _gradient_fn(profile: DeviceProfile, cl: _Clients, which: int, solver_cfg: SolverConfig, span: float):
    def analytic(f, s, b):
        return objective_gradient_arrays(profile, f, s, b, cl.fps, cl.lambda1, cl.lambda2)[which]

    if solver_cfg.gradient == "analytic":
        return analytic

    h = 1e-6 * span

    def central(f, s, b):
        args = [np.asarray(f, float), np.asarray(s, float), np.asarray(b, float)]
        up = list(args)
        dn = list(args)
        up[which] = args[which] + h
        dn[which] = args[which] - h
        q_up = objective_arrays(profile, *up, cl.fps, cl.lambda1, cl.lambda2)
        q_dn = objective_arrays(profile, *dn, cl.fps, cl.lambda1, cl.lambda2)
        return (q_up - q_dn) / (2 * h)

    return central


def _feasible_interval(
    latency: Callable[[np.ndarray], np.ndarray],
    x: float,
    lo: float,
    hi: float,
    l_max: float,
    grid: int = 129,
) -> tuple[float, float]:
    """Sub-interval of [lo, hi] around ``x`` on which ``latency <= l_max``.

    When ``x`` itself violates the bound the interval around the nearest
    feasible grid point is returned; when nothing is feasible the interval
    collapses onto the latency-minimising grid point.
    """
    if not np.isfinite(l_max):
        return lo, hi
    xs = np.linspace(lo, hi, grid)
    lat = latency(xs)
    ok = lat <= l_max
    if not ok.any():
        best = float(xs[np.argmin(lat)])
        return best, best
    if latency(np.array([x]))[0] <= l_max:
        anchor = x
    else:
        anchor = float(xs[np.flatnonzero(ok)[np.argmin(np.abs(xs[ok] - x))]])

    def boundary(bad: float, good: float) -> float:
        for _ in range(60):
            mid = 0.5 * (bad + good)
            if latency(np.array([mid]))[0] <= l_max:
                good = mid
            else:
                bad = mid
        return good

    left_bad = xs[(xs < anchor) & ~ok]
    a = lo if left_bad.size == 0 else boundary(float(left_bad.max()), anchor)
    right_bad = xs[(xs > anchor) & ~ok]
    b = hi if right_bad.size == 0 else boundary(float(right_bad.min()), anchor)
    return a, b


def _projected_gradient(
    objective: Callable[[np.ndarray], np.ndarray],
    gradient: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    step: float,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Constant-step projected gradient, one scalar variable per client.

    A step that would raise a client's objective is halved until it does
    not (at most 40 times); a client stops once its update is below ``tol``.
    Starting points outside [lo, hi] are projected in unconditionally.
    """
    x = np.asarray(x0, dtype=float).copy()
    restoring = (x < lo) | (x > hi)
    q = objective(x)
    active = np.ones_like(x, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        g = gradient(x)
        t = np.full_like(x, step)
        cand = np.where(active, np.clip(x - t * g, lo, hi), x)
        q_cand = objective(cand)
        ok = (q_cand <= q) | restoring
        for _ in range(40):
            bad = active & ~ok
            if not bad.any():
                break
            t[bad] *= 0.5
            cand[bad] = np.clip(x[bad] - t[bad] * g[bad], lo[bad], hi[bad])
            q_cand = objective(cand)
            ok = (q_cand <= q) | restoring
        cand = np.where(active & ok, cand, x)
        moved = np.abs(cand - x)
        x = cand
        q = objective(x)
        restoring[:] = False
        active &= moved >= tol
    return x


def _multi_start(objective, gradient, x, lo, hi, step: float, solver_cfg: SolverConfig) -> np.ndarray:
    """Projected gradient from the current point and from both interval ends.

    The per-frame objective can have a second local minimum on the box
    boundary (conversion latency turns down again near f_max), so each
    client keeps whichever of the three runs ends lowest.  The run from the
    current point alone already guarantees the block does not increase Q.
    """
    runs = [
        _projected_gradient(objective, gradient, x0, lo, hi, step, solver_cfg.inner_tol, solver_cfg.max_inner_iters)
        for x0 in (x, lo, hi)
    ]
    values = np.stack([objective(r) for r in runs])
    pick = np.argmin(values, axis=0)   # first minimum: the current-point run wins ties
    return np.stack(runs)[pick, np.arange(len(x))]


def _frequency_block(profile, cl: _Clients, f, s, b, solver_cfg: SolverConfig) -> np.ndarray:
    k = len(f)
    lo = np.empty(k)
    hi = np.empty(k)
    for i in range(k):
        lo[i], hi[i] = _feasible_interval(
            lambda xs, i=i: sum(latency_arrays(profile, xs, s[i], b[i])),
            f[i], profile.f_min, profile.f_max, cl.l_max[i],
        )
    grad = _gradient_fn(profile, cl, 0, solver_cfg, profile.f_max - profile.f_min)
    return _multi_start(
        lambda x: objective_arrays(profile, x, s, b, cl.fps, cl.lambda1, cl.lambda2),
        lambda x: grad(x, s, b),
        f, lo, hi, solver_cfg.gamma, solver_cfg,
    )


def _size_block(profile, cl: _Clients, f, s, b, solver_cfg: SolverConfig) -> np.ndarray:
    k = len(s)
    lo = np.empty(k)
    hi = np.empty(k)
    for i in range(k):
        lo[i], hi[i] = _feasible_interval(
            lambda xs, i=i: sum(latency_arrays(profile, f[i], xs, b[i])),
            s[i], float(profile.s_min), float(profile.s_max), cl.l_max[i],
        )
    grad = _gradient_fn(profile, cl, 1, solver_cfg, profile.s_max - profile.s_min)
    return _multi_start(
        lambda x: objective_arrays(profile, f, x, b, cl.fps, cl.lambda1, cl.lambda2),
        lambda x: grad(f, x, b),
        s, lo, hi, solver_cfg.eta, solver_cfg,
    )


def _bandwidth_block(profile: DeviceProfile, cl: _Clients, f, s, b_max: float, solver_cfg: SolverConfig):
    p_tr = profile.p_tr_coeffs
    if len(p_tr) > 2 and any(c != 0 for c in p_tr[:-2]):
        raise DomainError("closed-form bandwidth share needs P_tr affine in the data rate")
    kappa = profile.r_max_slope
    r_star = eval_poly(profile.r_star_coeffs, f)
    # megabits per frame divided by r*(f): l_tr = payload / (kappa * B)
    payload = profile.sigma * s * s / (BITS_PER_MEGABIT * r_star)
    weight = (
        cl.fps * (eval_poly(profile.e_gt_coeffs, f) + eval_poly(profile.e_prv_coeffs, f))
        + eval_poly(p_tr, 0.0)
        + eval_poly(profile.p_bs_coeffs, f)
        + cl.lambda1
    )
    l_cv, _, l_inf = latency_arrays(profile, f, s, 1.0)
    slack = cl.l_max - l_cv - l_inf   # latency left for transmission

    with np.errstate(divide="ignore"):
        b_need = np.where(slack > 0, payload / (kappa * np.where(slack > 0, slack, 1.0)), np.inf)
    # sizes pushed onto their latency boundary make sum(b_need) == b_max up to rounding
    if not np.all(np.isfinite(b_need)) or b_need.sum() > b_max * (1 + 1e-9):
        order = np.argsort(-b_need, kind="stable")
        cum = np.cumsum(b_need[order])
        n = int(np.searchsorted(cum, b_max, side="right")) + 1
        culprits = sorted(order[: min(n, len(order))].tolist())
        raise InfeasibleError(
            f"latency bounds need {b_need.sum():.6g} Mbps but only {b_max:.6g} Mbps available",
            culprits,
        )

    mu = solver_cfg.mu_init
    beta = np.zeros_like(weight)
    converged = False
    it = 0
    for it in range(1, solver_cfg.max_dual_iters + 1):
        b = np.sqrt((weight + beta) * payload / (kappa * max(mu, solver_cfg.mu_floor)))
        gap_b = b.sum() - b_max
        gap_l = payload / (kappa * b) - slack          # L_k - L_max_k
        if (
            abs(gap_b) <= solver_cfg.dual_tol * b_max
            and np.all(gap_l <= solver_cfg.dual_tol * cl.l_max)
            and np.all(beta * np.abs(gap_l) <= solver_cfg.dual_tol)
        ):
            converged = True
            break
        # subgradient steps, scaled by the current multiplier magnitudes
        mu = max(solver_cfg.mu_floor, mu + solver_cfg.theta_mu * mu * gap_b / b_max)
        beta = np.maximum(0.0, beta + solver_cfg.theta_beta * (weight + beta) * gap_l / slack)
    if not converged:
        log.warning("dual iteration hit the cap of %d steps", solver_cfg.max_dual_iters)
    gap_l = payload / (kappa * b) - slack
    duals = DualState(
        mu=float(mu),
        beta=tuple(float(v) for v in beta),
        iterations=it,
        converged=converged,
        bandwidth_residual=float(mu * (b.sum() - b_max)),
        latency_residuals=tuple(float(v) for v in beta * gap_l),
    )
    return b, duals


def _total_q(profile, cl: _Clients, f, s, b) -> float:
    return float(np.sum(objective_arrays(profile, f, s, b, cl.fps, cl.lambda1, cl.lambda2)))


# ------------------------------------------------------------- public ops


def _single(spec: ClientSpec) -> _Clients:
    l_max = np.inf if spec.l_max is None else spec.l_max
    return _Clients.from_specs([spec], [l_max])


def update_frequency(
    profile: DeviceProfile, spec: ClientSpec, cfg: Configuration, solver_cfg: SolverConfig | None = None
) -> float:
    """Frequency minimising the client objective with size and bandwidth fixed."""
    solver_cfg = solver_cfg or SolverConfig()
    f = _frequency_block(
        profile, _single(spec), np.array([cfg.f]), np.array([cfg.s]), np.array([cfg.b]), solver_cfg
    )
    return float(f[0])


def update_model_size(
    profile: DeviceProfile, spec: ClientSpec, cfg: Configuration, solver_cfg: SolverConfig | None = None
) -> float:
    """Relaxed model size minimising the client objective with f and b fixed."""
    solver_cfg = solver_cfg or SolverConfig()
    s = _size_block(
        profile, _single(spec), np.array([cfg.f]), np.array([cfg.s]), np.array([cfg.b]), solver_cfg
    )
    return float(s[0])


def allocate_bandwidth(
    profile: DeviceProfile,
    specs: Sequence[ClientSpec],
    configs: Sequence[Configuration],
    solver_cfg: SolverConfig | None = None,
    b_max: float = 100.0,
) -> tuple[np.ndarray, DualState]:
    """Split ``b_max`` among clients with frequencies and sizes held fixed.

    The ``b`` field of ``configs`` is ignored.  Unset latency bounds take
    the solver default for an even split of ``b_max``.
    """
    solver_cfg = solver_cfg or SolverConfig()
    if b_max <= 0:
        raise ValueError("b_max must be positive")
    cl = _Clients.from_specs(specs, resolve_latency_bounds(profile, specs, b_max))
    f = np.array([c.f for c in configs], dtype=float)
    s = np.array([c.s for c in configs], dtype=float)
    return _bandwidth_block(profile, cl, f, s, b_max, solver_cfg)


def _round_sizes(profile: DeviceProfile, s_hat: np.ndarray) -> np.ndarray:
    sizes = np.asarray(profile.model_sizes, dtype=float)
    # argmin returns the first hit, i.e. the smaller size on a tie
    return sizes[np.argmin(np.abs(sizes[None, :] - s_hat[:, None]), axis=1)]


def _feasible_rounding(profile, cl: _Clients, f, s_round, b_max: float, solver_cfg: SolverConfig):
    """Split bandwidth at the rounded sizes, stepping culprits down a size while infeasible."""
    sizes = list(profile.model_sizes)
    while True:
        try:
            return _bandwidth_block(profile, cl, f, s_round, b_max, solver_cfg)
        except InfeasibleError as exc:
            movable = [i for i in exc.clients if s_round[i] > sizes[0]]
            if not movable:
                raise
            for i in movable:
                s_round[i] = sizes[sizes.index(int(s_round[i])) - 1]


def _refit(profile, cl: _Clients, f, s, b, duals, b_max: float, solver_cfg: SolverConfig):
    """Alternate the frequency and bandwidth blocks with sizes held fixed."""
    q = _total_q(profile, cl, f, s, b)
    for _ in range(solver_cfg.max_outer_iters):
        f_new = _frequency_block(profile, cl, f, s, b, solver_cfg)
        b_new, duals_new = _bandwidth_block(profile, cl, f_new, s, b_max, solver_cfg)
        q_new = _total_q(profile, cl, f_new, s, b_new)
        if q_new > q:
            break
        f, b, duals = f_new, b_new, duals_new
        done = q - q_new <= solver_cfg.tau * abs(q_new)
        q = q_new
        if done:
            break
    return f, b, duals, q


def _polish(profile, cl: _Clients, f, s, b, duals, b_max: float, solver_cfg: SolverConfig):
    """Improve the rounded point; every accepted move lowers the summed objective.

    Nearest-size rounding can land a client on a size whose latency bound
    is only met with a large slice of bandwidth, starving everyone else.
    After refitting frequencies and bandwidth, single clients are moved one
    size up or down whenever that (with bandwidth re-split) lowers Q.
    """
    sizes = list(profile.model_sizes)
    f, b, duals, q = _refit(profile, cl, f, s, b, duals, b_max, solver_cfg)
    for _ in range(len(sizes) * len(s)):
        best = None
        for i in range(len(s)):
            pos = sizes.index(int(s[i]))
            for nxt in (pos - 1, pos + 1):
                if not 0 <= nxt < len(sizes):
                    continue
                cand = s.copy()
                cand[i] = sizes[nxt]
                try:
                    b_c, duals_c = _bandwidth_block(profile, cl, f, cand, b_max, solver_cfg)
                except InfeasibleError:
                    continue
                q_c = _total_q(profile, cl, f, cand, b_c)
                if q_c < q - 1e-12 * abs(q) and (best is None or q_c < best[0]):
                    best = (q_c, cand, b_c, duals_c)
        if best is None:
            break
        _, s, b, duals = best
        f, b, duals, q = _refit(profile, cl, f, s, b, duals, b_max, solver_cfg)
    return f, s, b, duals


def solve(
    profile: DeviceProfile,
    specs: Sequence[ClientSpec],
    solver_cfg: SolverConfig | None = None,
    b_max: float = 300.0,
) -> Allocation:
    """Run LEAF for ``specs`` sharing ``b_max`` Mbps."""
    if not specs:
        raise ValueError("need at least one client")
    if b_max <= 0:
        raise ValueError("b_max must be positive")
    solver_cfg = solver_cfg or SolverConfig()
    k = len(specs)
    l_max = resolve_latency_bounds(profile, specs, b_max)
    cl = _Clients.from_specs(specs, l_max)

    f = np.full(k, profile.f_min)
    s = np.full(k, float(profile.s_min))
    b = np.full(k, b_max / k)
    q_prev = q_initial = _total_q(profile, cl, f, s, b)
    trace: list[float] = []
    converged = False
    duals = None
    for _ in range(solver_cfg.max_outer_iters):
        f = _frequency_block(profile, cl, f, s, b, solver_cfg)
        s = _size_block(profile, cl, f, s, b, solver_cfg)
        b, duals = _bandwidth_block(profile, cl, f, s, b_max, solver_cfg)
        q = _total_q(profile, cl, f, s, b)
        trace.append(q)
        change = abs(q - q_prev) / abs(q) if q != 0 else abs(q - q_prev)
        q_prev = q
        if change <= solver_cfg.tau:
            converged = True
            break

    q_relaxed = trace[-1]
    s_hat = s.copy()
    s_round = _round_sizes(profile, s_hat)
    b, duals = _feasible_rounding(profile, cl, f, s_round, b_max, solver_cfg)
    q_nearest = _total_q(profile, cl, f, s_round, b)
    if solver_cfg.polish:
        f, s_round, b, duals = _polish(profile, cl, f, s_round, b, duals, b_max, solver_cfg)

    configs = [Configuration(float(fi), float(si), float(bi)) for fi, si, bi in zip(f, s_round, b)]
    return Allocation(
        configs=configs,
        q_value=_total_q(profile, cl, f, s_round, b),
        q_relaxed=q_relaxed,
        q_initial=q_initial,
        trace=trace,
        relaxed_sizes=[float(v) for v in s_hat],
        latency_bounds=[float(v) for v in l_max],
        duals=duals,
        converged=converged,
        iterations=len(trace),
        b_max=float(b_max),
        status="converged" if converged else "max_outer_iters",
        q_nearest=q_nearest,
    )
