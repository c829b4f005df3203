"""Policy files: a versioned, human-readable JSON schema.

Probabilities and magnitudes are stored as effective values (after the
sigmoid), mixture weights as raw logits.  Every number is written as the
shortest decimal that reads back to the same float32, so ``load`` followed by
``dumps`` reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import operations as ops
from .autodiff import Tensor
from .policy import INFERENCE, OpParams, Policy, Stage, SubPolicy

SCHEMA_VERSION = 1

_TOP_FIELDS = {"version", "op_table", "L", "K", "lambda", "eta", "sub_policies"}
_STAGE_FIELDS = {"weights", "ops"}
_OP_FIELDS = {"name", "probability", "magnitude"}


class PolicyFormatError(ValueError):
    """Raised for malformed or incompatible policy files."""


def _f32(value) -> float:
    """The float64 whose shortest repr is that of ``float32(value)``."""
    return float(str(np.float32(value)))


def _sigmoid32(raw: np.ndarray) -> np.float32:
    raw = np.float64(raw)
    with np.errstate(over="ignore"):
        return np.float32(1.0 / (1.0 + np.exp(-raw)))


def _logit32(p: float) -> np.float32:
    """A float32 logit whose float32 sigmoid is exactly ``p``."""
    p32 = np.float32(p)
    if p32 <= 0:
        return np.float32(-np.inf)
    if p32 >= 1:
        return np.float32(np.inf)
    raw = np.float32(np.log(np.float64(p32)) - np.log1p(-np.float64(p32)))
    # the float32 logit can land one or two ulps away from a preimage
    for _ in range(64):
        got = _sigmoid32(raw)
        if got == p32:
            return raw
        raw = np.nextafter(raw, np.float32(np.inf) if got < p32 else np.float32(-np.inf))
    raise PolicyFormatError(f"cannot represent probability {p!r} as a float32 logit")


def to_dict(policy: Policy) -> dict:
    subs = []
    for sub in policy.sub_policies:
        stages = []
        for stage in sub.stages:
            stages.append({
                "weights": [_f32(w) for w in stage.weights.data],
                "ops": [{"name": o.kind,
                         "probability": _f32(_sigmoid32(o.p_raw.data)),
                         "magnitude": _f32(_sigmoid32(o.mu_raw.data))} for o in stage.ops],
            })
        subs.append({"stages": stages})
    table = [ops.SPEC_BY_NAME[name].to_dict() for name in policy.op_names]
    return {
        "version": SCHEMA_VERSION,
        "op_table": table,
        "L": policy.L,
        "K": policy.K,
        "lambda": _f32(policy.lam),
        "eta": _f32(policy.eta),
        "sub_policies": subs,
    }


def dumps(policy: Policy) -> str:
    return json.dumps(to_dict(policy), indent=2) + "\n"


def save(policy: Policy, path) -> None:
    Path(path).write_text(dumps(policy), encoding="utf-8")


def _require_keys(obj, expected: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise PolicyFormatError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = set(obj) - expected
    if unknown:
        raise PolicyFormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = expected - set(obj)
    if missing:
        raise PolicyFormatError(f"{where}: missing field(s) {sorted(missing)}")


def _unit(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0 <= value <= 1:
        raise PolicyFormatError(f"{where}: expected a number in [0, 1], got {value!r}")
    return float(value)


def from_dict(doc: dict, mode: str = INFERENCE) -> Policy:
    _require_keys(doc, _TOP_FIELDS, "policy")
    if doc["version"] != SCHEMA_VERSION:
        raise PolicyFormatError(f"unsupported policy schema version {doc['version']!r} "
                                f"(this reader handles {SCHEMA_VERSION})")
    table = doc["op_table"]
    if not isinstance(table, list) or not table:
        raise PolicyFormatError("op_table must be a non-empty list")
    names = []
    for i, entry in enumerate(table):
        name = entry.get("name") if isinstance(entry, dict) else None
        if name not in ops.SPEC_BY_NAME:
            raise PolicyFormatError(f"op_table[{i}]: unknown operation {name!r}")
        if entry != ops.SPEC_BY_NAME[name].to_dict():
            raise PolicyFormatError(f"op_table[{i}]: metadata for {name!r} does not match this build")
        names.append(name)
    if len(set(names)) != len(names):
        raise PolicyFormatError("op_table lists an operation twice")

    subs_doc = doc["sub_policies"]
    L, K = doc["L"], doc["K"]
    if not isinstance(subs_doc, list) or len(subs_doc) != L or L < 1:
        raise PolicyFormatError(f"expected L={L} >= 1 sub-policies, found {len(subs_doc) if isinstance(subs_doc, list) else subs_doc!r}")
    subs = []
    for i, sub_doc in enumerate(subs_doc):
        _require_keys(sub_doc, {"stages"}, f"sub_policies[{i}]")
        if not isinstance(sub_doc["stages"], list) or len(sub_doc["stages"]) != K or K < 1:
            raise PolicyFormatError(f"sub_policies[{i}]: expected K={K} >= 1 stages")
        stages = []
        for k, st in enumerate(sub_doc["stages"]):
            where = f"sub_policies[{i}].stages[{k}]"
            _require_keys(st, _STAGE_FIELDS, where)
            weights = st["weights"]
            if not isinstance(weights, list) or len(weights) != len(names):
                raise PolicyFormatError(f"{where}: weights must have {len(names)} entries")
            if not all(isinstance(w, (int, float)) and not isinstance(w, bool) and np.isfinite(w) for w in weights):
                raise PolicyFormatError(f"{where}: weights must be finite numbers")
            if not isinstance(st["ops"], list) or len(st["ops"]) != len(names):
                raise PolicyFormatError(f"{where}: ops must have {len(names)} entries")
            params = []
            for j, od in enumerate(st["ops"]):
                _require_keys(od, _OP_FIELDS, f"{where}.ops[{j}]")
                if od["name"] != names[j]:
                    raise PolicyFormatError(f"{where}.ops[{j}]: operation {od['name']!r} is not "
                                            f"op_table entry {names[j]!r}")
                p = _unit(od["probability"], f"{where}.ops[{j}].probability")
                mu = _unit(od["magnitude"], f"{where}.ops[{j}].magnitude")
                params.append(OpParams(names[j], Tensor(_logit32(p), requires_grad=True),
                                       Tensor(_logit32(mu), requires_grad=True)))
            stages.append(Stage(Tensor(np.array(weights, dtype=np.float32), requires_grad=True), params))
        subs.append(SubPolicy(stages))
    try:
        return Policy(subs, lam=float(np.float32(doc["lambda"])), eta=float(np.float32(doc["eta"])),
                      mode=mode, op_names=tuple(names))
    except (TypeError, ValueError) as exc:
        raise PolicyFormatError(str(exc)) from exc


def loads(text: str, mode: str = INFERENCE) -> Policy:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFormatError(f"policy file is not valid JSON: {exc}") from exc
    return from_dict(doc, mode)


def load(path, mode: str = INFERENCE) -> Policy:
    return loads(Path(path).read_text(encoding="utf-8"), mode)
