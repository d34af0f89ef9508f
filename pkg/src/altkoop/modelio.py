"""Model files: JSON with full-precision decimal numbers.

Floats are written with ``repr`` so loading gives back the exact binary
values, and keys are sorted so save -> load -> save is byte-identical.
Wall-clock timings are not stored in the model file (they would break
byte-identical reruns); :func:`write_runtime` puts them in a sidecar.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dictionary import BlockDictionary, DictionaryParams
from .errors import ShapeError, UsageError
from .objective import Normalization

FORMAT = "altkoop-model"
VERSION = 1


def _matrix(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _unmatrix(obj, where):
    try:
        shape = tuple(int(s) for s in obj["shape"])
        values = np.array(obj["values"], dtype=float)
        return values.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"model file: malformed matrix in {where}: {exc}") from None


def dictionary_to_dict(params):
    if isinstance(params, BlockDictionary):
        return {
            "kind": "block",
            "blocks": [list(map(int, b)) for b in params.blocks],
            "parts": [dictionary_to_dict(p) for p in params.parts],
        }
    return {
        "kind": "single",
        "activation": params.activation.value,
        "augment_state": params.augment_state,
        "layers": [_matrix(w) for w in params.layers],
    }


def dictionary_from_dict(obj):
    kind = obj.get("kind")
    if kind == "block":
        return BlockDictionary([dictionary_from_dict(p) for p in obj["parts"]], obj["blocks"])
    if kind == "single":
        layers = [_unmatrix(w, "dictionary layer") for w in obj["layers"]]
        return DictionaryParams(tuple(layers), obj["activation"], bool(obj["augment_state"]))
    raise UsageError(f"model file: unknown dictionary kind {kind!r}")


@dataclass(eq=False)
class ModelFile:
    """Trained model plus what is needed to use and audit it.

    ``params``/``k`` is the primary iterate; ``alternate`` optionally holds the
    other one (tracked best for distributed runs, final for centralized).
    """

    params: object
    k: np.ndarray
    normalization: Optional[Normalization] = None
    partition: Optional[dict] = None
    training: dict = field(default_factory=dict)
    alternate: Optional[dict] = None

    @property
    def state_dim(self):
        return self.params.state_dim

    def to_dict(self):
        out = {
            "format": FORMAT,
            "version": VERSION,
            "dictionary": dictionary_to_dict(self.params),
            "koopman": _matrix(self.k),
            "normalization": None if self.normalization is None else {
                "offset": [float(v) for v in self.normalization.offset],
                "scale": [float(v) for v in self.normalization.scale],
            },
            "partition": self.partition,
            "training": self.training,
            "alternate": None,
        }
        if self.alternate is not None:
            out["alternate"] = {
                "label": self.alternate["label"],
                "dictionary": dictionary_to_dict(self.alternate["params"]),
                "koopman": _matrix(self.alternate["k"]),
            }
        return out

    @classmethod
    def from_dict(cls, obj):
        if obj.get("format") != FORMAT:
            raise UsageError("model file: not an altkoop model")
        if obj.get("version") != VERSION:
            raise UsageError(f"model file: unsupported version {obj.get('version')!r}")
        params = dictionary_from_dict(obj["dictionary"])
        k = _unmatrix(obj["koopman"], "koopman")
        if k.shape != (params.lift_dim, params.lift_dim):
            raise ShapeError(f"model file: K has shape {k.shape}, dictionary lifts to {params.lift_dim}")
        norm = obj.get("normalization")
        if norm is not None:
            norm = Normalization(np.array(norm["offset"], dtype=float), np.array(norm["scale"], dtype=float))
        alt = obj.get("alternate")
        if alt is not None:
            alt = {"label": alt["label"], "params": dictionary_from_dict(alt["dictionary"]),
                   "k": _unmatrix(alt["koopman"], "alternate koopman")}
        return cls(params, k, norm, obj.get("partition"), obj.get("training") or {}, alt)

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def select(self, which="primary"):
        """``(params, K)`` for ``primary`` or ``alternate``."""
        if which == "primary":
            return self.params, self.k
        if which == "alternate":
            if self.alternate is None:
                raise UsageError("model file has no alternate iterate")
            return self.alternate["params"], self.alternate["k"]
        raise UsageError(f"iterate must be 'primary' or 'alternate', got {which!r}")


def save(model, path):
    Path(path).write_text(model.dumps(), encoding="utf-8", newline="\n")


def load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read model file {path}: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"model file {path} is not valid JSON: {exc}") from None
    return ModelFile.from_dict(obj)


def runtime_path(model_path):
    p = Path(model_path)
    return p.with_name(p.stem + ".runtime.json")


def write_runtime(model_path, info):
    """Write run metadata that legitimately varies between reruns."""
    runtime_path(model_path).write_text(json.dumps(info, sort_keys=True, indent=1) + "\n",
                                        encoding="utf-8", newline="\n")
