"""INI-style experiment configuration.

The config file is plain configparser INI with sections mapped onto the
package dataclasses:

    [train]    -> trainer.TrainConfig fields
    [sim]      -> simenv.SimConfig fields (flat ones)
    [terrain]  -> terrain.CGCLConfig fields
    [atlas]    -> torque_atlas BracingParams / GridSpec / LegChain fields
    [eval] / [rsweep] / [ablate] -> subcommand-specific keys

Unknown keys raise ConfigError so typos fail loudly. Values are coerced
from the dataclass field types; tuples are comma-separated, optional
floats accept "none".
"""

import configparser
import hashlib
import types
import typing
from dataclasses import fields, replace

from .kinematics import LegChain
from .simenv import RobotModel, SimConfig
from .terrain import CGCLConfig
from .torque_atlas import BracingParams, GridSpec
from .trainer import TrainConfig


class ConfigError(Exception):
    """Malformed config file or unknown key."""


def load_ini(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


def config_hash(path=None):
    """Short content hash of the config file ('defaults' when none given)."""
    if path is None:
        return "defaults"
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:12]


def _coerce(raw, ftype):
    raw = raw.strip()
    origin = typing.get_origin(ftype)
    if origin in (typing.Union, types.UnionType):  # Optional[float] and friends
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if ftype is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is tuple or origin is tuple:
        return tuple(float(tok) for tok in raw.split(",") if tok.strip())
    if ftype is str:
        return raw
    raise ConfigError(f"unsupported field type {ftype}")


def section_kwargs(cp, section, dataclass_type, skip=()):
    """Typed kwargs for a dataclass from one INI section (may be absent)."""
    if not cp.has_section(section):
        return {}
    by_name = {f.name: f for f in fields(dataclass_type)}
    out = {}
    for key, raw in cp.items(section):
        if key in skip:
            continue
        if key not in by_name:
            raise ConfigError(
                f"[{section}] unknown key {key!r} for {dataclass_type.__name__}"
            )
        try:
            out[key] = _coerce(raw, by_name[key].type)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return out


def make_train_config(cp=None, seed=None, **overrides) -> TrainConfig:
    kwargs = section_kwargs(cp, "train", TrainConfig) if cp else {}
    kwargs.update(overrides)
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def make_sim_config(cp=None, **overrides) -> SimConfig:
    cgcl_kwargs = section_kwargs(cp, "terrain", CGCLConfig) if cp else {}
    kwargs = section_kwargs(cp, "sim", SimConfig, skip=("cgcl",)) if cp else {}
    kwargs.update(overrides)
    base = SimConfig(**kwargs)
    if cgcl_kwargs:
        base = replace(base, cgcl=CGCLConfig(**cgcl_kwargs))
    return base


def make_atlas_config(cp=None):
    """(LegChain, BracingParams, GridSpec, safety_factor) from [atlas]."""
    safety = 2.0
    if cp and cp.has_section("atlas"):
        safety = cp.getfloat("atlas", "safety_factor", fallback=2.0)
    chain_keys = {f.name for f in fields(LegChain)}
    brace_keys = {f.name for f in fields(BracingParams)}
    grid_keys = {f.name for f in fields(GridSpec)}
    chain_kw, brace_kw, grid_kw = {}, {}, {}
    if cp and cp.has_section("atlas"):
        by_type = [
            (chain_keys, LegChain, chain_kw),
            (brace_keys, BracingParams, brace_kw),
            (grid_keys, GridSpec, grid_kw),
        ]
        for key, raw in cp.items("atlas"):
            if key == "safety_factor":
                continue
            for names, dc, sink in by_type:
                if key in names:
                    ftype = {f.name: f.type for f in fields(dc)}[key]
                    sink[key] = _coerce(raw, ftype)
                    break
            else:
                raise ConfigError(f"[atlas] unknown key {key!r}")
    return LegChain(**chain_kw), BracingParams(**brace_kw), GridSpec(**grid_kw), safety


def section_dict(cp, section):
    """Raw string key/values for a free-form section (empty when absent)."""
    if cp is None or not cp.has_section(section):
        return {}
    return dict(cp.items(section))
