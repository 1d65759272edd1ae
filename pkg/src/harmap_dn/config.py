"""Experiment configuration: JSON schema, validation and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, ExpressionSyntaxError, UnknownIdentifierError
from .expr import parse_metric_expression
from .geometry import DOMAIN_VARIABLES, ConformalTestCase, MetricField, TargetMetric
from .grid import GridDomain

_number = {"type": "number"}
_component = {
    "oneOf": [
        _number,
        {"type": "string"},
        {"type": "object", "additionalProperties": False, "required": ["bump"],
         "properties": {"bump": {
             "type": "object", "additionalProperties": False,
             "required": ["edge"],
             "properties": {"edge": {"enum": ["left", "right", "bottom", "top"]},
                            "center": _number,
                            "width": {"type": "number", "exclusiveMinimum": 0}}}}},
    ]
}
_direction = {"type": "array", "items": _component, "minItems": 1, "maxItems": 3}
_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "string"}}}

_target = {
    "type": "object", "additionalProperties": False, "required": ["family"],
    "properties": {
        "family": {"enum": ["euclidean", "conformal", "polynomial-perturbation", "expressions"]},
        "n": {"type": "integer", "minimum": 2, "maximum": 3},
        "phi": {"type": "string"},
        "amplitude": _number,
        "P": _matrix,
        "entries": _matrix,
        "radius": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["target_metric"],
    "properties": {
        "grid": {"type": "integer", "minimum": 4},
        "grids": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 1},
        "domain_metric": {
            "type": "object", "additionalProperties": False, "required": ["family"],
            "properties": {
                "family": {"enum": ["euclidean", "constant", "bubble", "expressions"]},
                "g11": _number, "g12": _number, "g22": _number,
                "amplitude": _number,
                "entries": {"type": "array", "items": {"type": "string"},
                            "minItems": 3, "maxItems": 3},
                "conformal_factor": {"type": "string"},
            },
        },
        "target_metric": _target,
        "other_target_metric": _target,
        "q": {"type": "array", "items": _number, "minItems": 2, "maxItems": 3},
        "boundary": _direction,
        "amplitude": _number,
        "slots": {"type": "array", "items": _direction, "minItems": 1, "maxItems": 5},
        "variation": _direction,
        "delta": {"type": "number", "exclusiveMinimum": 0},
        "t": {"type": "number", "exclusiveMinimum": 0},
        "C": {"type": "number", "exclusiveMinimum": 0},
        "probe": _component,
        "jet_order": {"type": "integer", "minimum": 0, "maximum": 2},
        "identities": {"type": "array", "items": {"type": "string"}},
        "linearization_order": {"type": "integer", "minimum": 1, "maximum": 4},
        "check_jets": {"type": "boolean"},
        "error_estimate": {"type": "boolean"},
        "dump_solution": {"type": "boolean"},
        "energy_mode": {"enum": ["pairing", "difference"]},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "continuation_steps": {"type": "integer", "minimum": 1},
        "output": {"type": "string"},
        "seed": {"type": "integer"},
    },
}

IDENTITY_NAMES = ("order2", "order3", "order3-cyclic", "order4",
                  "alessandrini0", "alessandrini1", "alessandrini2")


def _edge_param(x, y, edge):
    on = {"left": x == 0.0, "right": x == 1.0, "bottom": y == 0.0, "top": y == 1.0}[edge]
    s = y if edge in ("left", "right") else x
    return on, s


def bump(edge: str, center: float = 0.5, width: float = 0.25):
    """Smooth compactly supported bump along one edge, zero on the other edges."""

    def f(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        on, s = _edge_param(x, y, edge)
        r = (s - center) / width
        inside = on & (np.abs(r) < 1)
        out = np.zeros(x.shape)
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
        return out

    return f


LIBRARY = {
    "const": lambda x, y: np.ones(np.broadcast(x, y).shape),
    "x": lambda x, y: np.asarray(x, float) + 0.0 * np.asarray(y, float),
    "y": lambda x, y: np.asarray(y, float) + 0.0 * np.asarray(x, float),
    "x2-y2": lambda x, y: np.asarray(x, float) ** 2 - np.asarray(y, float) ** 2,
    "rez3": lambda x, y: np.asarray(x, float) ** 3 - 3.0 * np.asarray(x, float) * np.asarray(y, float) ** 2,
}


def boundary_function(spec):
    """Callable ``(x, y) -> values`` for a named, numeric, bump or expression component."""
    if isinstance(spec, (int, float)):
        value = float(spec)
        return lambda x, y: np.full(np.broadcast(x, y).shape, value)
    if isinstance(spec, dict):
        return bump(**spec["bump"])
    if spec in LIBRARY:
        return LIBRARY[spec]
    try:
        expr = parse_metric_expression(spec, DOMAIN_VARIABLES)
    except (ExpressionSyntaxError, UnknownIdentifierError) as exc:
        raise ConfigError(f"bad boundary function {spec!r}: {exc}") from exc
    return lambda x, y: np.broadcast_to(np.asarray(expr(x, y), float),
                                        np.broadcast(x, y).shape)


def component_name(spec) -> str:
    if isinstance(spec, dict):
        b = spec["bump"]
        return f"bump({b['edge']},{b.get('center', 0.5)},{b.get('width', 0.25)})"
    return str(spec)


def direction_array(spec, n: int, grid: GridDomain) -> np.ndarray:
    if len(spec) != n:
        raise ConfigError(f"boundary direction has {len(spec)} components, target has {n}")
    return np.array([grid.sample_boundary(boundary_function(c)) for c in spec])


def direction_name(spec) -> str:
    return "(" + ", ".join(component_name(c) for c in spec) + ")"


def build_domain_metric(spec: dict | None) -> MetricField:
    spec = spec or {"family": "euclidean"}
    fam = spec["family"]
    try:
        if fam == "euclidean":
            g = MetricField.euclidean()
        elif fam == "constant":
            g = MetricField.constant(spec.get("g11", 1.0), spec.get("g12", 0.0),
                                     spec.get("g22", 1.0))
        elif fam == "bubble":
            g = ConformalTestCase.bubble(amplitude=spec.get("amplitude", 0.5)).metric()
        else:
            if "entries" not in spec:
                raise ConfigError("expression domain metric needs 'entries'")
            g = MetricField.from_expressions(*spec["entries"])
        if "conformal_factor" in spec:
            g = ConformalTestCase.from_expression(spec["conformal_factor"], g).metric()
    except (ExpressionSyntaxError, UnknownIdentifierError) as exc:
        raise ConfigError(f"bad domain metric expression: {exc}") from exc
    return g


def build_target_metric(spec: dict, q) -> TargetMetric:
    fam = spec["family"]
    kwargs = {}
    if "radius" in spec:
        kwargs = {"domain_radius": float(spec["radius"]), "domain_center": tuple(q)}
    try:
        if fam == "euclidean":
            return TargetMetric.euclidean(spec.get("n", len(q)), **kwargs)
        if fam == "conformal":
            if "phi" not in spec:
                raise ConfigError("conformal target needs 'phi'")
            return TargetMetric.conformal(spec.get("n", len(q)), spec["phi"], **kwargs)
        if fam == "polynomial-perturbation":
            if "P" not in spec:
                raise ConfigError("polynomial-perturbation target needs 'P'")
            return TargetMetric.polynomial_perturbation(len(spec["P"]), spec.get("amplitude", 1.0),
                                                        spec["P"], **kwargs)
        if "entries" not in spec:
            raise ConfigError("expression target needs 'entries'")
        return TargetMetric.from_expressions(spec["entries"], **kwargs)
    except (ExpressionSyntaxError, UnknownIdentifierError) as exc:
        raise ConfigError(f"bad target metric expression: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path, grid: int | None = None, delta: float | None = None):
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, grid, delta)

    @classmethod
    def from_dict(cls, raw: dict, grid: int | None = None, delta: float | None = None):
        raw = copy.deepcopy(raw)
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(map(str, exc.absolute_path)) or "<root>"
            raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
        if grid is not None:
            raw["grid"] = int(grid)
            raw.pop("grids", None)
        if delta is not None:
            raw["delta"] = float(delta)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    def validate(self):
        """Build every metric and direction once so errors surface before computing."""
        self.domain_metric()
        h = self.target_metric()
        if len(self.q) != h.n:
            raise ConfigError(f"q has {len(self.q)} components, target has {h.n}")
        grid = GridDomain(self.grids[0])
        for spec in self.raw.get("slots", []):
            direction_array(spec, h.n, grid)
        for key in ("boundary", "variation"):
            if key in self.raw:
                direction_array(self.raw[key], h.n, grid)
        if "probe" in self.raw:
            grid.sample_boundary(boundary_function(self.raw["probe"]))
        if "other_target_metric" in self.raw:
            self.other_target_metric()
        for name in self.raw.get("identities", []):
            if name not in IDENTITY_NAMES:
                raise ConfigError(f"unknown identity {name!r}; choose from "
                                  f"{', '.join(IDENTITY_NAMES)}")

    @property
    def hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def grids(self) -> list:
        if "grids" in self.raw:
            return list(self.raw["grids"])
        return [self.raw.get("grid", 32)]

    @property
    def q(self) -> tuple:
        target_n = self.raw["target_metric"].get("n")
        if "q" in self.raw:
            return tuple(float(c) for c in self.raw["q"])
        return (0.0,) * (target_n or 2)

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def domain_metric(self) -> MetricField:
        return build_domain_metric(self.raw.get("domain_metric"))

    def target_metric(self) -> TargetMetric:
        return build_target_metric(self.raw["target_metric"], self.q)

    def other_target_metric(self) -> TargetMetric:
        if "other_target_metric" not in self.raw:
            raise ConfigError("this command needs 'other_target_metric'")
        return build_target_metric(self.raw["other_target_metric"], self.q)

    def directions(self, key: str, grid: GridDomain, n: int):
        if key not in self.raw:
            raise ConfigError(f"this command needs '{key}'")
        return direction_array(self.raw[key], n, grid)

    def slot_arrays(self, grid: GridDomain, n: int) -> list:
        if "slots" not in self.raw:
            raise ConfigError("this command needs 'slots'")
        return [direction_array(s, n, grid) for s in self.raw["slots"]]

    def slot_names(self) -> list:
        return [direction_name(s) for s in self.raw.get("slots", [])]
