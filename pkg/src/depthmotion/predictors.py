"""Direct per-sample parameterizations standing in for learned depth and motion networks.

All parameters live in one :class:`~depthmotion.diffengine.ParamSet` under
these names::

    depth/<frame id>              H x W log-depth field
    ego/<pair id>                 6-vector, target camera -> source camera
    obj/<pair id>/<object id>     6-vector, applied before the ego transform
    prior/<category id>           scalar height prior in world units

Every ``predict_*`` method takes an optional ``values`` mapping (tape
variables or plain arrays keyed by the same names) and falls back to the
stored arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffengine as de
from .motion import MIDDLE, NEXT, PREV, SequenceSample


def depth_key(frame_id: str) -> str:
    return f"depth/{frame_id}"


def ego_key(pair_id: str) -> str:
    return f"ego/{pair_id}"


def obj_key(pair_id: str, object_id: int) -> str:
    return f"obj/{pair_id}/{object_id}"


def prior_key(category: int) -> str:
    return f"prior/{category}"


def middle_frame_id(sample: SequenceSample) -> str:
    return f"{sample.name}/{MIDDLE}"


def pair_id(sample: SequenceSample, which: str) -> str:
    return f"{sample.name}/{which}"


class DirectDepthPredictor:
    """Depth is ``exp`` of a stored field, so it is positive for any parameter value.

    ``template`` is the log-depth field used to initialise newly registered
    frames; it starts as the constant ``ln(init_depth)``.
    """

    def __init__(self, params: de.ParamSet, shape: tuple[int, int], init_depth: float = 5.0):
        if init_depth <= 0:
            raise ValueError("init_depth must be positive")
        self.params = params
        self.shape = tuple(shape)
        self.template = np.full(self.shape, np.log(init_depth))

    def register(self, frame_id: str, init: np.ndarray | None = None) -> None:
        field = self.template if init is None else np.asarray(init, dtype=np.float64)
        if field.shape != self.shape:
            raise de.ContractError(f"log-depth field shape {field.shape} != {self.shape}")
        key = depth_key(frame_id)
        if key in self.params:
            self.params[key] = field
        else:
            self.params.add(key, field.copy())

    def frame_ids(self) -> list[str]:
        return [n[len("depth/"):] for n in self.params.names() if n.startswith("depth/")]

    def predict_depth(self, frame_id: str, values: Mapping | None = None):
        key = depth_key(frame_id)
        if key not in self.params:
            raise KeyError(f"unknown frame {frame_id!r}")
        field = self.params[key] if values is None else values[key]
        return de.exp(field)

    def refresh_template(self) -> None:
        """Set the template to the mean of all registered fields (log space)."""
        ids = self.frame_ids()
        if ids:
            self.template = np.mean([self.params[depth_key(i)] for i in ids], axis=0)


class DirectMotionPredictor:
    """Separate parameter banks for ego-motion and per-object motion, zero-initialised."""

    def __init__(self, params: de.ParamSet):
        self.params = params
        self.ego_template = np.zeros(6)

    def register_pair(self, pair: str, init=None) -> None:
        key = ego_key(pair)
        val = self.ego_template if init is None else np.asarray(init, dtype=np.float64)
        if key in self.params:
            self.params[key] = val
        else:
            self.params.add(key, np.array(val, dtype=np.float64))

    def register_object(self, pair: str, object_id: int, init=None) -> None:
        key = obj_key(pair, object_id)
        val = np.zeros(6) if init is None else np.asarray(init, dtype=np.float64)
        if key in self.params:
            self.params[key] = val
        else:
            self.params.add(key, np.array(val, dtype=np.float64))

    def predict_ego(self, pair: str, values: Mapping | None = None):
        key = ego_key(pair)
        if key not in self.params:
            raise KeyError(f"unknown frame pair {pair!r}")
        return self.params[key] if values is None else values[key]

    def predict_object_motion(self, pair: str, object_id: int, values: Mapping | None = None):
        key = obj_key(pair, object_id)
        if key not in self.params:
            raise KeyError(f"unknown object {object_id} for pair {pair!r}")
        return self.params[key] if values is None else values[key]


class DirectModel:
    """Depth, motion and height-prior parameters sharing one ParamSet."""

    def __init__(self, shape: tuple[int, int], init_depth: float = 5.0, prior_init: float = 1.0,
                 params: de.ParamSet | None = None):
        self.params = params if params is not None else de.ParamSet()
        self.depth = DirectDepthPredictor(self.params, shape, init_depth)
        self.motion = DirectMotionPredictor(self.params)
        self.prior_init = float(prior_init)

    def register_sample(self, sample: SequenceSample, depth_init=None, ego_init=None) -> None:
        """Create any parameters the sample needs that are not already present."""
        fid = middle_frame_id(sample)
        if depth_key(fid) not in self.params or depth_init is not None:
            self.depth.register(fid, depth_init)
        for which in (PREV, NEXT):
            pid = pair_id(sample, which)
            init = None if ego_init is None else ego_init[which]
            if ego_key(pid) not in self.params or init is not None:
                self.motion.register_pair(pid, init)
            for oid in sample.masks.middle():
                if obj_key(pid, oid) not in self.params:
                    self.motion.register_object(pid, oid)
        for oid in sample.masks.middle():
            cat = sample.masks.categories[oid]
            if prior_key(cat) not in self.params:
                self.params.add(prior_key(cat), np.array(self.prior_init))

    def prior(self, category: int, values: Mapping | None = None):
        key = prior_key(category)
        if key not in self.params:
            raise KeyError(key)
        return self.params[key] if values is None else values[key]

    def set_prior(self, category: int, value: float) -> None:
        key = prior_key(category)
        if key in self.params:
            self.params[key] = np.array(float(value))
        else:
            self.params.add(key, np.array(float(value)))


# -- checkpoint format ------------------------------------------------------
# <stem>.bin: for each array, uint32 ndim, ndim x uint32 dims, then float32
# data, all little-endian. <stem>.json: {"arrays": [{"name", "offset", "shape"}], "meta": {...}}

def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    path = Path(path)
    index = []
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f4")
            index.append({"name": name, "offset": fh.tell(), "shape": list(arr.shape)})
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    doc = {"arrays": index, "meta": dict(meta or {})}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for entry in doc["arrays"]:
        off = entry["offset"]
        (ndim,) = struct.unpack_from("<I", blob, off)
        dims = struct.unpack_from(f"<{ndim}I", blob, off + 4)
        if list(dims) != entry["shape"]:
            raise ValueError(f"checkpoint index and data disagree for {entry['name']}")
        start = off + 4 + 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float64)
    return arrays, doc.get("meta", {})


def model_arrays(model: DirectModel) -> dict[str, np.ndarray]:
    arrays = dict(model.params.items())
    arrays["template/depth"] = model.depth.template
    arrays["template/ego"] = model.motion.ego_template
    return arrays


def model_from_arrays(arrays: Mapping[str, np.ndarray], init_depth: float = 5.0,
                      prior_init: float = 1.0) -> DirectModel:
    template = arrays["template/depth"]
    model = DirectModel(template.shape, init_depth=init_depth, prior_init=prior_init)
    model.depth.template = np.array(template, dtype=np.float64)
    model.motion.ego_template = np.array(arrays["template/ego"], dtype=np.float64)
    for name, arr in arrays.items():
        if not name.startswith("template/"):
            model.params.add(name, arr)
    return model
