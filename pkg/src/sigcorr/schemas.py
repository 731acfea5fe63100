"""JSON schemas for model files and CLI run configurations.

Complex matrices are nested lists of ``[re, im]`` pairs, row by row.
"""

import jsonschema

_complex = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_matrix = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": _complex}}

MODEL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dim"],
    "properties": {
        "dim": {"type": "integer", "minimum": 1},
        "hamiltonian": {"anyOf": [_matrix, {"type": "null"}]},
        "decay": {"type": "array", "items": _matrix},
        "channels": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["label", "c"],
                "properties": {
                    "label": {"type": "string", "minLength": 1},
                    "c": _matrix,
                    "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                },
            },
        },
    },
}

_filter = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exponential", "box", "tabulated"]},
        "center": {"type": "number"},
        "lam": {"type": "number", "exclusiveMinimum": 0},
        "a": {"type": "number"},
        "b": {"type": "number"},
        "height": {"type": "number"},
        "grid": {"type": "array", "items": {"type": "number"}},
        "values": {"type": "array", "items": {"type": "number"}},
    },
}

_detector = {"anyOf": [{"type": "string"}, {"type": "integer", "minimum": 0}]}

_entry = {
    "type": "object",
    "additionalProperties": False,
    "required": ["detector"],
    "properties": {
        "detector": _detector,
        "time": {"type": "number"},
        "filter": _filter,
    },
}

_initial_state = {"anyOf": [
    {"const": "stationary"},
    {"type": "object", "additionalProperties": False, "required": ["matrix"],
     "properties": {"matrix": _matrix}},
]}

_common = {
    "model": {"type": "string"},
    "initial_state": _initial_state,
    "dt": {"type": "number", "exclusiveMinimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "eta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "out": {"type": "string"},
}


def _command(required, **props):
    return {
        "type": "object",
        "additionalProperties": False,
        "required": ["model", *required],
        "properties": {**_common, **props},
    }


EXACT = _command(
    ["kind"],
    kind={"enum": ["pointwise", "smoothed", "full"]},
    evaluations={"type": "array", "items": {"type": "array", "minItems": 1, "items": _entry}},
    grid={
        "type": "object",
        "additionalProperties": False,
        "required": ["detectors", "t1", "t2"],
        "properties": {
            "detectors": {"type": "array", "items": _detector, "minItems": 2, "maxItems": 2},
            "t1": {"type": "array", "items": {"type": "number"}},
            "t2": {"type": "array", "items": {"type": "number"}},
        },
    },
    tol={"type": "number", "exclusiveMinimum": 0},
)

SIMULATE = _command(
    ["T"],
    T={"type": "number", "exclusiveMinimum": 0},
    snapshot_stride={"type": "integer", "minimum": 0},
    mode={"enum": ["nonlinear", "linear-physical", "linear-wiener"]},
    scheme={"enum": ["euler", "kraus"]},
    positivity_tol={"type": ["number", "null"]},
)

ESTIMATE = _command(
    ["method"],
    method={"enum": ["ensemble", "ergodic"]},
    entries={"type": "array", "items": _entry},
    trajectories={"type": "integer", "minimum": 2},
    T={"type": "number", "exclusiveMinimum": 0},
    detectors={"type": "array", "items": _detector, "minItems": 2, "maxItems": 2},
    lam={"type": "number", "exclusiveMinimum": 0},
    lags={"type": "array", "items": {"type": "number"}, "minItems": 1},
    T_total={"type": "number", "exclusiveMinimum": 0},
    burn_in={"type": "number", "minimum": 0},
    stride={"type": "number", "exclusiveMinimum": 0},
    workers={"type": "integer", "minimum": 1},
)

POVM = _command(
    ["entries", "deltas"],
    entries={"type": "array", "minItems": 1, "items": _entry},
    deltas={"type": "array", "minItems": 2, "items": {"type": "number", "exclusiveMinimum": 0}},
)

_bound = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

FIT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["observations", "free"],
    "properties": {
        "template": {"const": "qubit"},
        "observations": {"type": "string"},
        "free": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "patternProperties": {
                "^(gamma_minus|gamma_x|eta_x|eta_minus)$": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["initial", "bounds"],
                    "properties": {"initial": {"type": "number"}, "bounds": _bound},
                },
            },
        },
        "fixed": {
            "type": "object",
            "additionalProperties": False,
            "patternProperties": {
                "^(gamma_minus|gamma_x|eta_x|eta_minus)$": {"type": "number"},
            },
        },
        "budget": {"type": "integer", "minimum": 10},
        "out": {"type": "string"},
    },
}

SCHEMAS = {
    "model": MODEL,
    "exact": EXACT,
    "simulate": SIMULATE,
    "estimate": ESTIMATE,
    "povm-check": POVM,
    "fit": FIT,
}


def validate(document, kind):
    """Validate ``document`` against the named schema.

    Raises ``jsonschema.ValidationError`` on the first violation.
    """
    jsonschema.validate(document, SCHEMAS[kind])
