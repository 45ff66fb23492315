"""Per-frame latency, energy and accuracy of one edge-assisted MAR client.

A frame's life on the device is split into image generation and preview,
YUV->RGB conversion, radio communication (promotion, transmission, tail
and idle) and the device base load.  Every term is driven by the fitted
regression polynomials held in a :class:`DeviceProfile`.

All public functions are pure.  The ``*_arrays`` helpers broadcast over
numpy arrays and are what the solver uses in its inner loops; they skip
input validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ProfileError",
    "DeviceProfile",
    "ClientSpec",
    "Configuration",
    "LatencyBreakdown",
    "EnergyBreakdown",
    "eval_poly",
    "poly_derivative",
    "data_rate",
    "latency_per_frame",
    "energy_per_frame",
    "accuracy",
    "objective_term",
    "objective_gradient",
    "objective_arrays",
    "objective_gradient_arrays",
    "latency_arrays",
    "default_latency_bound",
]

BITS_PER_MEGABIT = 1e6


class DomainError(ValueError):
    """Raised when an input lies outside the range a regression was fitted on."""


class ProfileError(ValueError):
    """Raised when a device profile or client spec violates its invariants."""


Poly = tuple[float, ...]


def _as_poly(coeffs: Sequence[float]) -> Poly:
    out = tuple(float(c) for c in coeffs)
    if not out:
        raise ProfileError("polynomial needs at least one coefficient")
    return out


@dataclass(frozen=True)
class DeviceProfile:
    """Fitted device model.

    Polynomial coefficients are stored highest power first, the same order
    the regression table prints them in.
    """

    e_gt_coeffs: Poly
    e_prv_coeffs: Poly
    p_cv_coeffs: Poly
    l_cv_coeffs: Poly
    r_max_slope: float
    r_star_coeffs: Poly
    p_tr_coeffs: Poly
    l_inf_coeffs: Poly
    p_bs_coeffs: Poly
    p_pro: float
    t_pro: float
    p_tail: float
    t_tail: float
    f_min: float
    f_max: float
    model_sizes: tuple[int, ...]
    sigma: float = 24.0
    accuracy_a: float = 1.578
    accuracy_b: float = 6.5e-3
    l_inf_area_divisor: float = 1e4
    default_frequency: float = 1.49
    tracking_frequencies: tuple[float, ...] = ()
    tracking_joules: tuple[float, ...] = ()
    tracking_latency: float = 0.04
    name: str = "custom"

    def __post_init__(self) -> None:
        for name in (
            "e_gt_coeffs", "e_prv_coeffs", "p_cv_coeffs", "l_cv_coeffs",
            "r_star_coeffs", "p_tr_coeffs", "l_inf_coeffs", "p_bs_coeffs",
        ):
            object.__setattr__(self, name, _as_poly(getattr(self, name)))
        object.__setattr__(self, "model_sizes", tuple(int(s) for s in self.model_sizes))
        object.__setattr__(self, "tracking_frequencies", tuple(float(x) for x in self.tracking_frequencies))
        object.__setattr__(self, "tracking_joules", tuple(float(x) for x in self.tracking_joules))

        if not 0 < self.f_min < self.f_max:
            raise ProfileError(f"need 0 < f_min < f_max, got {self.f_min}, {self.f_max}")
        sizes = self.model_sizes
        if not sizes or sizes[0] <= 0 or any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ProfileError("model_sizes must be nonempty, positive and strictly increasing")
        if self.sigma <= 0:
            raise ProfileError("sigma must be positive")
        if min(self.t_pro, self.t_tail, self.p_pro, self.p_tail) < 0:
            raise ProfileError("promotion/tail constants must be nonnegative")
        if self.r_max_slope <= 0:
            raise ProfileError("r_max_slope must be positive")
        if self.l_inf_area_divisor <= 0:
            raise ProfileError("l_inf_area_divisor must be positive")
        if not self.f_min <= self.default_frequency <= self.f_max:
            raise ProfileError("default_frequency must lie in [f_min, f_max]")
        if len(self.tracking_frequencies) != len(self.tracking_joules):
            raise ProfileError("tracking table columns differ in length")
        if any(e <= 0 for e in self.tracking_joules):
            raise ProfileError("tracking energies must be positive")
        freqs = self.tracking_frequencies
        if any(a >= b for a, b in zip(freqs, freqs[1:])):
            raise ProfileError("tracking frequencies must be strictly increasing")

    @property
    def s_min(self) -> int:
        return self.model_sizes[0]

    @property
    def s_max(self) -> int:
        return self.model_sizes[-1]

    def tracking_energy(self, f: float) -> float:
        """Per-frame local tracking energy at CPU frequency ``f`` (table lookup)."""
        if not self.tracking_frequencies:
            raise ProfileError("profile has no tracking energy table")
        return float(np.interp(f, self.tracking_frequencies, self.tracking_joules))


@dataclass(frozen=True)
class ClientSpec:
    """One MAR client's camera rate and preferences.

    ``l_max=None`` defers the latency bound to the solver default.
    """

    fps: int
    lambda1: float = 0.3
    lambda2: float = 1.8
    l_max: float | None = None

    def __post_init__(self) -> None:
        if int(self.fps) != self.fps or self.fps < 1:
            raise ProfileError(f"fps must be an integer >= 1, got {self.fps}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ProfileError("preference weights must be nonnegative")
        if self.l_max is not None and self.l_max <= 0:
            raise ProfileError("l_max must be positive")


@dataclass(frozen=True)
class Configuration:
    f: float
    s: float
    b: float

    def __post_init__(self) -> None:
        if not (self.s > 0 and self.b > 0):
            raise DomainError(f"model size and bandwidth must be positive, got s={self.s}, b={self.b}")


class LatencyBreakdown(NamedTuple):
    l_cv: float
    l_tr: float
    l_inf: float
    total: float


@dataclass(frozen=True)
class EnergyBreakdown:
    e_img: float
    e_cv: float
    e_com: float
    e_bs: float
    l_cv: float
    l_tr: float
    l_inf: float
    total: float = field(init=False)
    latency: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "total", self.e_img + self.e_cv + self.e_com + self.e_bs)
        object.__setattr__(self, "latency", self.l_cv + self.l_tr + self.l_inf)


def eval_poly(coeffs: Sequence[float], x):
    """Horner evaluation with coefficients highest power first.

    Works on scalars and numpy arrays alike.
    """
    if len(coeffs) == 0:
        raise ValueError("empty coefficient list")
    acc = coeffs[0] + 0.0 * x
    for c in coeffs[1:]:
        acc = acc * x + c
    return acc


def poly_derivative(coeffs: Sequence[float]) -> Poly:
    n = len(coeffs) - 1
    if n == 0:
        return (0.0,)
    return tuple(c * (n - i) for i, c in enumerate(coeffs[:-1]))


def _check_frequency(profile: DeviceProfile, f: float) -> None:
    if not profile.f_min <= f <= profile.f_max:
        raise DomainError(
            f"CPU frequency {f} GHz outside fitted range [{profile.f_min}, {profile.f_max}]"
        )


def data_rate(profile: DeviceProfile, f: float, b: float) -> float:
    """Achieved uplink rate in Mbps for bandwidth ``b`` (Mbps) at frequency ``f``."""
    _check_frequency(profile, f)
    if b <= 0:
        raise DomainError(f"bandwidth must be positive, got {b}")
    rate = profile.r_max_slope * b * eval_poly(profile.r_star_coeffs, f)
    if rate <= 0:
        raise DomainError(f"nonpositive data rate {rate} at f={f}")
    return float(rate)


def latency_arrays(profile: DeviceProfile, f, s, b):
    """(l_cv, l_tr, l_inf) for broadcastable arrays; no validation."""
    rate = profile.r_max_slope * b * eval_poly(profile.r_star_coeffs, f)
    l_cv = eval_poly(profile.l_cv_coeffs, f)
    # the only bit <-> megabit conversion in the model
    l_tr = profile.sigma * s * s / (rate * BITS_PER_MEGABIT)
    l_inf = eval_poly(profile.l_inf_coeffs, s * s / profile.l_inf_area_divisor)
    return l_cv, l_tr, l_inf


def latency_per_frame(profile: DeviceProfile, cfg: Configuration) -> LatencyBreakdown:
    data_rate(profile, cfg.f, cfg.b)  # domain checks
    l_cv, l_tr, l_inf = (float(v) for v in latency_arrays(profile, cfg.f, cfg.s, cfg.b))
    return LatencyBreakdown(l_cv, l_tr, l_inf, l_cv + l_tr + l_inf)


def _energy_arrays(profile: DeviceProfile, f, s, b, fps):
    l_cv, l_tr, l_inf = latency_arrays(profile, f, s, b)
    latency = l_cv + l_tr + l_inf
    rate = profile.r_max_slope * b * eval_poly(profile.r_star_coeffs, f)
    p_bs = eval_poly(profile.p_bs_coeffs, f)
    per_frame = eval_poly(profile.e_gt_coeffs, f) + eval_poly(profile.e_prv_coeffs, f)

    e_img = per_frame * fps * latency
    e_cv = eval_poly(profile.p_cv_coeffs, f) * l_cv
    # idle and base energy switch on the same predicate
    waits = l_inf > profile.t_tail
    idle = np.where(waits, p_bs * (l_inf - profile.t_tail), 0.0)
    e_bs = np.where(waits, p_bs * (latency - l_inf + profile.t_tail), p_bs * latency)
    e_com = (
        eval_poly(profile.p_tr_coeffs, rate) * l_tr
        + idle
        + profile.p_pro * profile.t_pro
        + profile.p_tail * profile.t_tail
    )
    return e_img, e_cv, e_com, e_bs, (l_cv, l_tr, l_inf)


def energy_per_frame(profile: DeviceProfile, spec: ClientSpec, cfg: Configuration) -> EnergyBreakdown:
    data_rate(profile, cfg.f, cfg.b)
    e_img, e_cv, e_com, e_bs, lat = _energy_arrays(profile, cfg.f, cfg.s, cfg.b, spec.fps)
    return EnergyBreakdown(
        e_img=float(e_img), e_cv=float(e_cv), e_com=float(e_com), e_bs=float(e_bs),
        l_cv=float(lat[0]), l_tr=float(lat[1]), l_inf=float(lat[2]),
    )


def accuracy(profile: DeviceProfile, s):
    """Detection accuracy of a model with side length ``s`` pixels."""
    if np.any(np.asarray(s) <= 0):
        raise DomainError("model size must be positive")
    out = 1.0 - profile.accuracy_a * np.exp(-profile.accuracy_b * np.asarray(s, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def objective_arrays(profile: DeviceProfile, f, s, b, fps, lambda1, lambda2):
    """Per-client E + lambda1*L - lambda2*A, vectorised."""
    e_img, e_cv, e_com, e_bs, (l_cv, l_tr, l_inf) = _energy_arrays(profile, f, s, b, fps)
    acc = 1.0 - profile.accuracy_a * np.exp(-profile.accuracy_b * s)
    return (e_img + e_cv + e_com + e_bs) + lambda1 * (l_cv + l_tr + l_inf) - lambda2 * acc


def objective_term(profile: DeviceProfile, spec: ClientSpec, cfg: Configuration) -> float:
    br = energy_per_frame(profile, spec, cfg)
    return br.total + spec.lambda1 * br.latency - spec.lambda2 * accuracy(profile, cfg.s)


def objective_gradient_arrays(profile: DeviceProfile, f, s, b, fps, lambda1, lambda2):
    """Analytic (dQ/df, dQ/ds, dQ/db) of the per-client objective.

    Idle plus base energy always sums to P_bs * L, whichever side of the
    tail duration inference falls, so the gradient has no branch.
    """
    kappa = profile.r_max_slope
    rs = eval_poly(profile.r_star_coeffs, f)
    rs_f = eval_poly(poly_derivative(profile.r_star_coeffs), f)
    rate = kappa * b * rs
    rate_f = kappa * b * rs_f
    rate_b = kappa * rs

    l_cv = eval_poly(profile.l_cv_coeffs, f)
    l_cv_f = eval_poly(poly_derivative(profile.l_cv_coeffs), f)
    l_tr = profile.sigma * s * s / (rate * BITS_PER_MEGABIT)
    l_tr_f = -l_tr * rs_f / rs
    l_tr_s = 2.0 * l_tr / s
    l_tr_b = -l_tr / b
    area = s * s / profile.l_inf_area_divisor
    l_inf = eval_poly(profile.l_inf_coeffs, area)
    l_inf_s = eval_poly(poly_derivative(profile.l_inf_coeffs), area) * 2.0 * s / profile.l_inf_area_divisor

    lat = l_cv + l_tr + l_inf
    lat_f = l_cv_f + l_tr_f
    lat_s = l_tr_s + l_inf_s
    lat_b = l_tr_b

    g = eval_poly(profile.e_gt_coeffs, f) + eval_poly(profile.e_prv_coeffs, f)
    g_f = eval_poly(poly_derivative(profile.e_gt_coeffs), f) + eval_poly(
        poly_derivative(profile.e_prv_coeffs), f
    )
    p_cv = eval_poly(profile.p_cv_coeffs, f)
    p_cv_f = eval_poly(poly_derivative(profile.p_cv_coeffs), f)
    p_bs = eval_poly(profile.p_bs_coeffs, f)
    p_bs_f = eval_poly(poly_derivative(profile.p_bs_coeffs), f)
    p_tr = eval_poly(profile.p_tr_coeffs, rate)
    p_tr_r = eval_poly(poly_derivative(profile.p_tr_coeffs), rate)

    d_f = (
        fps * (g_f * lat + g * lat_f)
        + p_cv_f * l_cv + p_cv * l_cv_f
        + p_tr_r * rate_f * l_tr + p_tr * l_tr_f
        + p_bs_f * lat + p_bs * lat_f
        + lambda1 * lat_f
    )
    acc_s = profile.accuracy_a * profile.accuracy_b * np.exp(-profile.accuracy_b * s)
    d_s = fps * g * lat_s + p_tr * l_tr_s + p_bs * lat_s + lambda1 * lat_s - lambda2 * acc_s
    d_b = fps * g * lat_b + p_tr_r * rate_b * l_tr + p_tr * l_tr_b + p_bs * lat_b + lambda1 * lat_b
    return d_f, d_s, d_b


def objective_gradient(profile: DeviceProfile, spec: ClientSpec, cfg: Configuration) -> tuple[float, float, float]:
    data_rate(profile, cfg.f, cfg.b)
    d = objective_gradient_arrays(profile, cfg.f, cfg.s, cfg.b, spec.fps, spec.lambda1, spec.lambda2)
    return tuple(float(x) for x in d)  # type: ignore[return-value]


def default_latency_bound(profile: DeviceProfile, b_even: float) -> float:
    """Twice the latency at (f_max, s_min, even bandwidth share)."""
    l_cv, l_tr, l_inf = latency_arrays(profile, profile.f_max, float(profile.s_min), b_even)
    return 2.0 * float(l_cv + l_tr + l_inf)

