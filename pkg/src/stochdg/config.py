"""Experiment configuration: INI-style text files, strictly validated.

Sections and keys are fixed; unknown ones are rejected before any work
happens.  The parsed config also carries a content hash that is stamped
into every output file, so results are traceable to their exact inputs.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .operators import Regime

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config_text"]


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "mesh": {"kind", "path", "nx", "ny", "x0", "x1", "y0", "y1", "amplitude",
             "mesh_seed", "n_radial", "n_angular", "r_inner", "r_outer",
             "warp_amplitude", "p_geo", "periodic"},
    "discretization": {"p", "c11"},
    "run": {"regime", "sampler", "dt", "n_steps", "burn_in_fraction", "seed",
            "temporal_correction", "random_flux_h", "chunk_steps"},
    "outputs": {"row_indices", "snapshot_stride", "error_checkpoints"},
    "scaling": {"levels", "steps_per_level", "repeats"},
}

_MESH_KINDS = {"file", "cartesian", "annulus", "perturbed"}
_REGIMES = {r.value: r for r in Regime}


@dataclass
class ExperimentConfig:
    # mesh
    mesh_kind: str
    mesh_path: Optional[str] = None
    nx: int = 4
    ny: int = 4
    domain: tuple = (-1.0, 1.0, -1.0, 1.0)
    amplitude: float = 0.22
    mesh_seed: int = 0
    n_radial: int = 2
    n_angular: int = 8
    r_inner: float = 0.5
    r_outer: float = 1.5
    warp_amplitude: float = 0.0
    p_geo: Optional[int] = None
    periodic_axes: str = "none"
    # discretization
    p: int = 1
    c11: Optional[float] = None          # None = automatic (p+1)^2/h scaling
    # run
    regime: Regime = Regime.PERIODIC
    sampler: str = "fdd"
    dt: float = 1e-5
    n_steps: int = 0
    burn_in_fraction: float = 0.1
    seed: int = 0
    temporal_correction: bool = False
    random_flux_h: str = "per_element"
    chunk_steps: int = 2048
    # outputs
    row_indices: tuple = ()
    snapshot_stride: int = 0
    error_checkpoints: tuple = ()
    # scaling
    scaling_levels: tuple = ()
    steps_per_level: int = 256
    repeats: int = 3
    # provenance
    config_hash: str = ""
    source_path: Optional[str] = None


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _int_tuple(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _levels(raw: str) -> tuple:
    out = []
    for tok in raw.replace(",", " ").split():
        a, sep, b = tok.lower().partition("x")
        if not sep:
            raise ValueError(f"level {tok!r} must look like 8x8")
        out.append((int(a), int(b)))
    return tuple(out)


def parse_config_text(text: str, source_path: Optional[str] = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    if not parser.has_section("mesh") or not parser.has_option("mesh", "kind"):
        raise ConfigError("config needs [mesh] kind = file|cartesian|annulus|perturbed")
    kind = parser.get("mesh", "kind").strip()
    if kind not in _MESH_KINDS:
        raise ConfigError(f"unknown mesh kind {kind!r}")
    if kind == "file" and not parser.has_option("mesh", "path"):
        raise ConfigError("[mesh] kind = file needs path = <mesh file>")

    regime_raw = _get(parser, "run", "regime", str.strip, "periodic")
    if regime_raw not in _REGIMES:
        raise ConfigError(f"unknown regime {regime_raw!r}; "
                          f"expected one of {sorted(_REGIMES)}")
    sampler = _get(parser, "run", "sampler", str.strip, "fdd")
    if sampler not in ("fdd", "random_flux"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    h_mode = _get(parser, "run", "random_flux_h", str.strip, "per_element")
    if h_mode not in ("per_element", "global"):
        raise ConfigError(f"unknown random_flux_h {h_mode!r}")
    periodic_axes = _get(parser, "mesh", "periodic", str.strip, "none").lower()
    if periodic_axes not in ("none", "x", "y", "xy"):
        raise ConfigError(f"[mesh] periodic must be none|x|y|xy, got {periodic_axes!r}")

    c11_raw = _get(parser, "discretization", "c11", str.strip, "auto")
    c11 = None if c11_raw == "auto" else float(c11_raw)

    cfg = ExperimentConfig(
        mesh_kind=kind,
        mesh_path=_get(parser, "mesh", "path", str.strip, None),
        nx=_get(parser, "mesh", "nx", int, 4),
        ny=_get(parser, "mesh", "ny", int, 4),
        domain=(
            _get(parser, "mesh", "x0", float, -1.0),
            _get(parser, "mesh", "x1", float, 1.0),
            _get(parser, "mesh", "y0", float, -1.0),
            _get(parser, "mesh", "y1", float, 1.0),
        ),
        amplitude=_get(parser, "mesh", "amplitude", float, 0.22),
        mesh_seed=_get(parser, "mesh", "mesh_seed", int, 0),
        n_radial=_get(parser, "mesh", "n_radial", int, 2),
        n_angular=_get(parser, "mesh", "n_angular", int, 8),
        r_inner=_get(parser, "mesh", "r_inner", float, 0.5),
        r_outer=_get(parser, "mesh", "r_outer", float, 1.5),
        warp_amplitude=_get(parser, "mesh", "warp_amplitude", float, 0.0),
        p_geo=_get(parser, "mesh", "p_geo", int, None),
        periodic_axes=periodic_axes,
        p=_get(parser, "discretization", "p", int, 1),
        c11=c11,
        regime=_REGIMES[regime_raw],
        sampler=sampler,
        dt=_get(parser, "run", "dt", float, 1e-5),
        n_steps=_get(parser, "run", "n_steps", int, 0),
        burn_in_fraction=_get(parser, "run", "burn_in_fraction", float, 0.1),
        seed=_get(parser, "run", "seed", int, 0),
        temporal_correction=_get(parser, "run", "temporal_correction", _bool, False),
        random_flux_h=h_mode,
        chunk_steps=_get(parser, "run", "chunk_steps", int, 2048),
        row_indices=_get(parser, "outputs", "row_indices", _int_tuple, ()),
        snapshot_stride=_get(parser, "outputs", "snapshot_stride", int, 0),
        error_checkpoints=_get(parser, "outputs", "error_checkpoints", _int_tuple, ()),
        scaling_levels=_get(parser, "scaling", "levels", _levels, ()),
        steps_per_level=_get(parser, "scaling", "steps_per_level", int, 256),
        repeats=_get(parser, "scaling", "repeats", int, 3),
        config_hash=hashlib.sha256(text.encode()).hexdigest()[:12],
        source_path=source_path,
    )

    if cfg.p < 1:
        raise ConfigError("p must be >= 1 (Gauss-Lobatto nodal basis)")
    if cfg.dt <= 0:
        raise ConfigError("dt must be positive")
    if cfg.n_steps < 0:
        raise ConfigError("n_steps must be nonnegative")
    if not (0.0 <= cfg.burn_in_fraction < 1.0):
        raise ConfigError("burn_in_fraction must lie in [0, 1)")
    if cfg.regime is Regime.PERIODIC and cfg.mesh_kind != "file" and cfg.periodic_axes == "none":
        raise ConfigError("periodic regime needs [mesh] periodic = x|y|xy")
    if cfg.snapshot_stride < 0:
        raise ConfigError("snapshot_stride must be nonnegative")
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    cfg = parse_config_text(text, source_path=str(path))
    if cfg.mesh_path is not None and not Path(cfg.mesh_path).is_absolute():
        cfg.mesh_path = str((Path(path).parent / cfg.mesh_path).resolve())
    return cfg
