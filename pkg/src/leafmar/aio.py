"""Adaptive image offloading: how many frames to track locally between offloads.

After every detection result the orchestrator estimates how fast the scene
is changing (a weighted mean of PSNR gradients), extrapolates the PSNR a
tracker would see after ``rho`` more frames, and picks the ``rho`` that
minimises ``theta1 * mean_energy(rho) - theta2 * IOU(rho)``.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

from .frame_metrics import PSNR_CAP_DB

__all__ = [
    "Action",
    "SceneModel",
    "OffloadPreference",
    "OrchestratorState",
    "window_frames_for",
    "update_history",
    "scene_rate",
    "predict_iou",
    "offload_cost",
    "solve_rho",
    "step",
]

DEFAULT_RHO_MAX = 120


class Action(str, enum.Enum):
    DETECT = "detect"
    TRACK = "track"


@dataclass(frozen=True)
class SceneModel:
    """Quadratic fit of tracking IOU against PSNR (dB) for one scene attribute."""

    iou_coeffs: tuple[float, float, float] = (-0.004335, 0.2411, -2.328)
    attribute_name: str = "motion_blur"
    psnr_cap: float = PSNR_CAP_DB

    def raw_iou(self, psnr: float) -> float:
        a, b, c = self.iou_coeffs
        return a * psnr * psnr + b * psnr + c

    def iou(self, psnr: float) -> float:
        return min(1.0, max(0.0, self.raw_iou(psnr)))


@dataclass(frozen=True)
class OffloadPreference:
    theta1: float = 1.0   # energy weight
    theta2: float = 1.0   # accuracy weight

    def __post_init__(self) -> None:
        # zero weights are allowed for degenerate experiments; negatives are not
        if self.theta1 < 0 or self.theta2 < 0 or self.theta1 + self.theta2 == 0:
            raise ValueError("offload weights must be nonnegative and not both zero")


def window_frames_for(fps: int) -> int:
    """History length covering two seconds of camera frames."""
    return max(1, math.ceil(2 * fps))


@dataclass
class OrchestratorState:
    e_obj: float
    e_trk: float
    window_frames: int
    decay: float | None = None
    rho_max: int = DEFAULT_RHO_MAX
    rho: int = 0
    v_bar: float = 0.0
    psnr_history: deque = field(init=False)
    grad_history: deque = field(init=False)

    def __post_init__(self) -> None:
        if not (self.e_obj > 0 and self.e_trk > 0):
            raise ValueError("detection and tracking energies must be positive")
        if self.window_frames < 1 or self.rho_max < 0 or self.rho < 0:
            raise ValueError("window_frames >= 1, rho_max >= 0 and rho >= 0 required")
        if self.decay is None:
            self.decay = 1.0 / self.window_frames
        if self.decay < 0:
            raise ValueError("decay must be nonnegative")
        self.psnr_history = deque(maxlen=self.window_frames)
        self.grad_history = deque(maxlen=self.window_frames)

    @classmethod
    def for_client(cls, fps: int, e_obj: float, e_trk: float, **kwargs) -> "OrchestratorState":
        return cls(e_obj=e_obj, e_trk=e_trk, window_frames=window_frames_for(fps), **kwargs)


def update_history(state: OrchestratorState, psnr_prev_pair: float, psnr_curr_pair: float) -> OrchestratorState:
    """Record the newest PSNR and its half-difference gradient."""
    state.psnr_history.append(psnr_curr_pair)
    state.grad_history.append((psnr_curr_pair - psnr_prev_pair) / 2.0)
    return state


def scene_rate(state: OrchestratorState) -> float:
    """Exponentially weighted mean of recent PSNR gradients, newest weighted most."""
    if not state.grad_history:
        raise ValueError("no PSNR gradients recorded yet")
    num = 0.0
    den = 0.0
    for j, v in enumerate(reversed(state.grad_history)):
        if math.isinf(state.decay):
            w = 1.0 if j == 0 else 0.0
        else:
            w = math.exp(-state.decay * j)
        num += w * v
        den += w
    return num / den


def predict_iou(state: OrchestratorState, scene: SceneModel, rho: int, psnr_latest: float) -> float:
    """IOU expected after tracking ``rho`` frames at the current scene rate."""
    psnr = min(scene.psnr_cap, max(0.0, psnr_latest + state.v_bar * rho))
    return scene.iou(psnr)


def offload_cost(
    state: OrchestratorState, scene: SceneModel, pref: OffloadPreference, rho: int, psnr_latest: float
) -> float:
    """theta1 * (e_obj + e_trk * rho) / (1 + rho) - theta2 * IOU(rho)."""
    amortised = state.e_trk + (state.e_obj - state.e_trk) / (1 + rho)
    return pref.theta1 * amortised - pref.theta2 * predict_iou(state, scene, rho, psnr_latest)


def solve_rho(state: OrchestratorState, scene: SceneModel, pref: OffloadPreference, psnr_latest: float) -> int:
    """Exhaustive argmin of ``offload_cost`` over 0..rho_max; ties go to the smaller rho.

    Each candidate is compared with the incumbent through the difference of
    the energy and accuracy terms, so a tiny difference in one term is not
    rounded away against a large value of the other.
    """
    d = state.e_obj - state.e_trk
    best_rho = 0
    best_iou = predict_iou(state, scene, 0, psnr_latest)
    for rho in range(1, state.rho_max + 1):
        iou = predict_iou(state, scene, rho, psnr_latest)
        energy_delta = d * (best_rho - rho) / ((1 + rho) * (1 + best_rho))
        if pref.theta1 * energy_delta - pref.theta2 * (iou - best_iou) < 0:
            best_rho, best_iou = rho, iou
    return best_rho


def _record(state: OrchestratorState, psnr_latest: float) -> None:
    if state.psnr_history:
        update_history(state, state.psnr_history[-1], psnr_latest)
    else:
        state.psnr_history.append(psnr_latest)


def step(
    state: OrchestratorState,
    scene: SceneModel,
    pref: OffloadPreference,
    detection_arrived: bool,
    psnr_latest: float,
) -> Action:
    """Advance one camera frame and return the action for the next frame.

    With a fresh detection result and no tracking budget left, the scene
    rate is re-estimated and a new budget solved for.  Otherwise the budget
    counts down, asking for a detection once it is used up.  With no budget
    and no result yet, the request for a detection stands.
    """
    _record(state, psnr_latest)
    if state.rho > 0:
        state.rho -= 1
        return Action.DETECT if state.rho == 0 else Action.TRACK
    if not detection_arrived:
        return Action.DETECT
    # before any gradient exists the scene is treated as static
    state.v_bar = scene_rate(state) if state.grad_history else 0.0
    state.rho = solve_rho(state, scene, pref, psnr_latest)
    return Action.DETECT if state.rho == 0 else Action.TRACK
