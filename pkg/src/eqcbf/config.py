"""
Run configuration: INI files with section headers, overridable from the
command line by ``--section.key value`` flags.

Example::

    [problem]
    system = single_integrator
    system_params = u_norm_max=1.0
    constraint = circle
    constraint_params = r=1.0

    [horizon]
    T = 2.0
    n_segments = 10

    [grid]
    axes = x:-10:10:41 y:-10:10:41

    [m_grid]
    chart = integrator_rotation
    axes = x:-15:0.1:30 y:0:0:1

Axes are ``name:lo:hi:count`` with an optional ``:p`` suffix for periodic
axes. Numeric values accept ``pi`` arithmetic (``-pi``, ``pi/2``).
Parameter lists are whitespace-separated ``key=value`` pairs; vector values
are comma-separated (``n=1,0``).
"""

from __future__ import annotations

import ast
import configparser
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grids import Axis, GridSpec
from .solver import OptimizerConfig

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg,
        ast.UAdd: operator.pos}
_NAMES = {"pi": np.pi, "tau": 2 * np.pi, "e": np.e, "inf": np.inf}


def _arith(node):
    if isinstance(node, ast.Expression):
        return _arith(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.left), _arith(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.operand))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "deg" \
            and len(node.args) == 1:
        return np.deg2rad(_arith(node.args[0]))
    raise ValueError("not an arithmetic expression")


def parse_number(text):
    """Number from a literal or a small arithmetic expression in ``pi``/``deg(...)``."""
    try:
        return _arith(ast.parse(str(text).strip(), mode="eval"))
    except (SyntaxError, ValueError, TypeError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse number '{text}'") from exc


def parse_value(text):
    """Scalar, vector (comma separated), boolean, or string."""
    t = str(text).strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in t:
        parts = [p for p in t.split(",") if p.strip()]
        try:
            return [parse_number(p) for p in parts]
        except ConfigError:
            return t
    try:
        v = parse_number(t)
    except ConfigError:
        return t
    return int(v) if isinstance(v, int) and not isinstance(v, bool) else v


def parse_params(text):
    """``"a=2 b=1 n=1,0"`` -> ``{"a": 2, "b": 1, "n": [1, 0]}``."""
    out = {}
    if not text:
        return out
    for tok in str(text).split():
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got '{tok}'")
        k, v = tok.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def parse_axes(text):
    """``"x:-10:10:41 psi:-pi:pi:24:p"`` -> :class:`GridSpec`."""
    axes = []
    for tok in str(text).split():
        parts = tok.split(":")
        if len(parts) not in (4, 5):
            raise ConfigError(f"axis '{tok}' must be name:lo:hi:count[:p]")
        name, lo, hi, count = parts[:4]
        periodic = len(parts) == 5
        if periodic and parts[4] != "p":
            raise ConfigError(f"axis '{tok}': unknown flag '{parts[4]}'")
        try:
            n = int(count)
        except ValueError as exc:
            raise ConfigError(f"axis '{tok}': count must be an integer") from exc
        axes.append(Axis(name, float(parse_number(lo)), float(parse_number(hi)), n, periodic))
    if not axes:
        raise ConfigError("empty axes specification")
    return GridSpec.from_axes(*axes)


@dataclass
class RunConfig:
    """Parsed configuration; ``sections`` keeps the raw strings."""

    sections: dict = field(default_factory=dict)
    source: str = "<memory>"

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def value(self, section, key, default=None):
        raw = self.get(section, key)
        return default if raw is None else parse_value(raw)

    def require(self, section, key):
        raw = self.get(section, key)
        if raw is None:
            raise ConfigError(f"missing [{section}] {key} in {self.source}")
        return raw

    def section_values(self, section, skip=()):
        return {k: parse_value(v) for k, v in self.sections.get(section, {}).items() if k not in skip}

    # builders

    def system(self):
        from .systems import make_named_system

        return make_named_system(self.require("problem", "system"),
                                 parse_params(self.get("problem", "system_params", "")))

    def constraint(self):
        from .constraints import make_constraint

        return make_constraint(self.require("problem", "constraint"),
                               parse_params(self.get("problem", "constraint_params", "")))

    def horizon(self, constraint, system):
        from .solver import make_horizon

        hz = self.section_values("horizon")
        allowed = {"T", "n_segments", "gamma", "delta", "substeps", "worst_case_disturbance"}
        unknown = set(hz) - allowed
        if unknown:
            raise ConfigError(f"unknown [horizon] keys: {sorted(unknown)}")
        if "T" not in hz:
            raise ConfigError("missing [horizon] T")
        return make_horizon(constraint, system, **hz)

    def optimizer(self):
        vals = self.section_values("optimizer")
        fields = set(OptimizerConfig.__dataclass_fields__)
        unknown = set(vals) - fields
        if unknown:
            raise ConfigError(f"unknown [optimizer] keys: {sorted(unknown)}")
        return OptimizerConfig(**vals)

    def grid(self, section="grid"):
        return parse_axes(self.require(section, "axes"))

    def workers(self, override=None):
        from .solver import default_workers

        if override is not None:
            return int(override)
        w = self.value("run", "workers")
        return int(w) if w is not None else default_workers()


def load_config(path=None, text=None, overrides=None):
    """Read an INI file (or text) and apply ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    source = "<memory>"
    try:
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {path}")
            cp.read_string(p.read_text(), source=str(p))
            source = str(p)
        elif text is not None:
            cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    sections = {s: dict(cp[s]) for s in cp.sections()}
    for key, val in (overrides or {}).items():
        if "." not in key:
            raise ConfigError(f"override '{key}' must be section.key")
        sec, k = key.split(".", 1)
        sections.setdefault(sec, {})[k] = str(val)
    return RunConfig(sections, source)


def split_overrides(extra):
    """``["--horizon.T", "4", "--grid.axes=x:0:1:3"]`` -> override dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument '{tok}'")
        body = tok[2:]
        if "=" in body:
            k, v = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override '{tok}' needs a value")
            k, v = body, extra[i + 1]
            i += 2
        out[k] = v
    return out
