"""Loading and saving device profiles as YAML."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .energy_model import DeviceProfile, ProfileError

__all__ = [
    "default_profile",
    "default_profile_text",
    "profile_from_dict",
    "profile_to_dict",
    "load_profile",
    "dump_profile",
]

_REQUIRED = (
    "e_gt_coeffs", "e_prv_coeffs", "p_cv_coeffs", "l_cv_coeffs", "r_max_slope",
    "r_star_coeffs", "p_tr_coeffs", "l_inf_coeffs", "p_bs_coeffs",
    "p_pro", "t_pro", "p_tail", "t_tail", "f_min", "f_max", "model_sizes",
)
_OPTIONAL = (
    "sigma", "accuracy_a", "accuracy_b", "l_inf_area_divisor",
    "default_frequency", "tracking_latency", "name",
)


def default_profile_text() -> str:
    return resources.files("leafmar").joinpath("data/default_profile.yaml").read_text(encoding="utf-8")


def default_profile() -> DeviceProfile:
    return profile_from_dict(yaml.safe_load(default_profile_text()))


def profile_from_dict(raw: Mapping[str, Any]) -> DeviceProfile:
    if not isinstance(raw, Mapping):
        raise ProfileError("profile must be a mapping")
    missing = [k for k in _REQUIRED if k not in raw]
    if missing:
        raise ProfileError(f"profile is missing keys: {', '.join(missing)}")
    known = set(_REQUIRED) | set(_OPTIONAL) | {"tracking_energy_table"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ProfileError(f"unknown profile keys: {', '.join(unknown)}")

    kwargs: dict[str, Any] = {k: raw[k] for k in _REQUIRED}
    kwargs.update({k: raw[k] for k in _OPTIONAL if k in raw})
    table = raw.get("tracking_energy_table")
    if table is not None:
        try:
            kwargs["tracking_frequencies"] = table["frequencies"]
            kwargs["tracking_joules"] = table["joules"]
        except (KeyError, TypeError) as exc:
            raise ProfileError("tracking_energy_table needs 'frequencies' and 'joules'") from exc
    try:
        return DeviceProfile(**kwargs)
    except TypeError as exc:
        raise ProfileError(str(exc)) from exc


def profile_to_dict(profile: DeviceProfile) -> dict[str, Any]:
    out: dict[str, Any] = {"name": profile.name}
    for key in _REQUIRED + _OPTIONAL:
        if key == "name":
            continue
        value = getattr(profile, key)
        out[key] = list(value) if isinstance(value, tuple) else value
    if profile.tracking_frequencies:
        out["tracking_energy_table"] = {
            "frequencies": list(profile.tracking_frequencies),
            "joules": list(profile.tracking_joules),
        }
    return out


def load_profile(path: str | Path) -> DeviceProfile:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ProfileError(f"{path}: not valid YAML: {exc}") from exc
    return profile_from_dict(raw)


def dump_profile(profile: DeviceProfile, path: str | Path | None = None) -> str:
    """Serialise ``profile``; floats are written with ``repr`` so they round-trip exactly."""
    text = yaml.safe_dump(profile_to_dict(profile), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
