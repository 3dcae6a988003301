"""INI-style run configuration: parsing, defaults, and serialization.

Schema (all keys optional; omitted keys take the documented defaults,
which reproduce the published vessel experiment)::

    [mesh]
    dim = 3                   # 2 or 3
    refine = 3                # >= 0; defaults to 3 in 3D, 2 in 2D

    [time]
    T_end = 15.0
    N = 150                   # number of time steps (tau = T_end / N)
    snapshot_stride = 10

    [params]
    Pe = 11000000.0           # Peclet number
    Re = 10.0                 # Reynolds number
    Ke_star = 0.0075          # drift coupling number
    Ke = 0.072                # force coupling number
    rho_ratio = 3.82          # particle/fluid density ratio
    M_bar = 0.28              # saturation magnetization number
    xi_bar = 72000.0          # Langevin argument scale
    v_max = 1.0               # inflow centerline speed
    pulse_peak = 2.0          # injection pulse: time of maximum,
    pulse_duration = 1.5      #   temporal half-width,
    pulse_radius = 0.25       #   radial extent

    [variant]
    variant = full            # full | no-fluid | no-magnet | reduced

    [dipole]
    position = 4.0, 0.5, 3.5  # dim components, outside the vessel
    moment = 0.0, 0.0, 790.0  # dim components

    [sweep]
    distances = 2, 3, 4, 5, 6 # magnet wall distances; presence selects
                              # sweep mode

Unknown sections or keys are rejected by name so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses

from .constitutive import ModelVariant, NondimParams
from .scenario import ScenarioConfig, default_params

__all__ = [
    "ConfigError",
    "build_config",
    "parse_config",
    "serialize_config",
]


class ConfigError(ValueError):
    """A configuration file or flag value is missing, unknown, or invalid."""


_SCHEMA = {
    "mesh": ("dim", "refine"),
    "time": ("T_end", "N", "snapshot_stride"),
    "params": ("Pe", "Re", "Ke_star", "Ke", "rho_ratio", "M_bar", "xi_bar",
               "v_max", "pulse_peak", "pulse_duration", "pulse_radius"),
    "variant": ("variant",),
    "dipole": ("position", "moment"),
    "sweep": ("distances",),
}

# file key -> NondimParams field
_PARAM_FIELDS = {
    "Pe": "pe",
    "Re": "re",
    "Ke_star": "ke_star",
    "Ke": "ke",
    "rho_ratio": "rho_ratio",
    "M_bar": "m_bar",
    "xi_bar": "xi_bar",
}


def _read_raw(path) -> dict[tuple[str, str], str]:
    """Flatten an INI file to {(section, key): value}, schema-checked."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case: T_end and N are capitalized
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path!r}: {exc}") from exc

    raw: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown config section [{section}] in {path!r}")
        for key, value in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown config key '{key}' in section [{section}] "
                    f"of {path!r}")
            raw[(section, key)] = value
    return raw


def _parse_scalar(raw, section: str, key: str, convert, default):
    if (section, key) not in raw:
        return default
    value = raw[(section, key)]
    try:
        return convert(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"invalid value {value!r} for config key '{key}' in "
            f"section [{section}]: {exc}") from exc


def _parse_tuple(raw, section: str, key: str):
    if (section, key) not in raw:
        return None
    value = raw[(section, key)]
    try:
        items = tuple(float(tok) for tok in value.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(
            f"invalid value {value!r} for config key '{key}' in "
            f"section [{section}]: {exc}") from exc
    if not items:
        raise ConfigError(
            f"empty value for config key '{key}' in section [{section}]")
    return items


def _config_from_raw(raw: dict[tuple[str, str], str]) -> ScenarioConfig:
    param_values = dataclasses.asdict(default_params())
    for key, field_name in _PARAM_FIELDS.items():
        param_values[field_name] = _parse_scalar(
            raw, "params", key, float, param_values[field_name])
    try:
        params = NondimParams(**param_values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    variant_name = raw.get(("variant", "variant"), "full").strip()
    try:
        variant = ModelVariant.from_name(variant_name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    kwargs = dict(
        dim=_parse_scalar(raw, "mesh", "dim", int, 3),
        refine=_parse_scalar(raw, "mesh", "refine", int, None),
        t_end=_parse_scalar(raw, "time", "T_end", float, 15.0),
        n_steps=_parse_scalar(raw, "time", "N", int, 150),
        snapshot_stride=_parse_scalar(raw, "time", "snapshot_stride", int, 10),
        params=params,
        variant=variant,
        v_max=_parse_scalar(raw, "params", "v_max", float, 1.0),
        pulse_peak=_parse_scalar(raw, "params", "pulse_peak", float, 2.0),
        pulse_duration=_parse_scalar(raw, "params", "pulse_duration",
                                     float, 1.5),
        pulse_radius=_parse_scalar(raw, "params", "pulse_radius", float, 0.25),
        dipole_position=_parse_tuple(raw, "dipole", "position"),
        dipole_moment=_parse_tuple(raw, "dipole", "moment"),
        sweep_distances=_parse_tuple(raw, "sweep", "distances"),
    )
    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ScenarioConfig:
    """Build a fully validated run configuration from an INI file.

    Omitted keys take the documented defaults (the published experiment).
    Unknown sections/keys and invariant violations raise
    :class:`ConfigError` naming the offender.
    """
    return _config_from_raw(_read_raw(path))


def build_config(path=None, *, dim=None, refine=None, variant=None,
                 tau=None, sweep_distances=None) -> ScenarioConfig:
    """Combine an optional config file with command-line overrides.

    Flag values win over file values.  ``tau`` is converted to a step
    count against the resolved ``T_end`` and must divide it evenly.
    """
    raw = _read_raw(path) if path is not None else {}
    if dim is not None:
        raw[("mesh", "dim")] = str(int(dim))
    if refine is not None:
        raw[("mesh", "refine")] = str(int(refine))
    if variant is not None:
        raw[("variant", "variant")] = str(variant)
    if sweep_distances is not None:
        raw[("sweep", "distances")] = ",".join(
            repr(float(d)) for d in sweep_distances)
    if tau is not None:
        tau = float(tau)
        if not tau > 0:
            raise ConfigError(f"tau must be positive, got {tau}")
        t_end = _parse_scalar(raw, "time", "T_end", float, 15.0)
        n_exact = t_end / tau
        n_steps = int(round(n_exact))
        if n_steps < 1 or abs(n_exact - n_steps) > 1e-9 * max(1.0, n_exact):
            raise ConfigError(
                f"tau={tau} does not divide T_end={t_end} into a whole "
                "number of steps")
        raw[("time", "N")] = str(n_steps)
    return _config_from_raw(raw)


def serialize_config(config: ScenarioConfig) -> str:
    """Render a fully resolved configuration as INI text.

    Floats are written in shortest round-trip form, so parsing the
    result reproduces an equal :class:`ScenarioConfig`.
    """
    lines = []
    lines.append("[mesh]")
    lines.append(f"dim = {config.dim}")
    lines.append(f"refine = {config.refine}")
    lines.append("")
    lines.append("[time]")
    lines.append(f"T_end = {config.t_end!r}")
    lines.append(f"N = {config.n_steps}")
    lines.append(f"snapshot_stride = {config.snapshot_stride}")
    lines.append("")
    lines.append("[params]")
    for key, field_name in _PARAM_FIELDS.items():
        lines.append(f"{key} = {getattr(config.params, field_name)!r}")
    lines.append(f"v_max = {config.v_max!r}")
    lines.append(f"pulse_peak = {config.pulse_peak!r}")
    lines.append(f"pulse_duration = {config.pulse_duration!r}")
    lines.append(f"pulse_radius = {config.pulse_radius!r}")
    lines.append("")
    lines.append("[variant]")
    lines.append(f"variant = {config.variant.name}")
    lines.append("")
    lines.append("[dipole]")
    lines.append("position = " + ", ".join(
        repr(c) for c in config.dipole_position))
    lines.append("moment = " + ", ".join(
        repr(c) for c in config.dipole_moment))
    if config.sweep_distances is not None:
        lines.append("")
        lines.append("[sweep]")
        lines.append("distances = " + ", ".join(
            repr(d) for d in config.sweep_distances))
    return "\n".join(lines) + "\n"
