"""Weight files: one flat little-endian blob plus a JSON sidecar manifest."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .functional import EncoderWeights, parameter_layout

FORMAT = "singleload-weights"


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def manifest_for(w: EncoderWeights) -> dict:
    entries, off = [], 0
    for name, shape, dtype in parameter_layout(w.model):
        arr = w.tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"{name}: shape {arr.shape} does not match layout {shape}")
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        entries.append({"name": name, "shape": list(shape), "dtype": dtype, "offset": off,
                        "nbytes": nbytes, "scale": w.scales[name]})
        off += nbytes
    return {"format": FORMAT, "version": 1, "model": asdict(w.model), "tensors": entries,
            "activation_scales": dict(sorted(w.act.items()))}


def save_weights(w: EncoderWeights, stem) -> tuple[Path, Path]:
    bin_path, man_path = _paths(stem)
    man = manifest_for(w)
    with open(bin_path, "wb") as fh:
        for e in man["tensors"]:
            fh.write(np.ascontiguousarray(w.tensors[e["name"]], dtype=np.dtype(e["dtype"]).newbyteorder("<")).tobytes())
    man_path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return bin_path, man_path


def load_weights(stem) -> EncoderWeights:
    bin_path, man_path = _paths(stem)
    man = json.loads(man_path.read_text())
    if man.get("format") != FORMAT:
        raise ValueError(f"{man_path} is not a {FORMAT} manifest")
    blob = bin_path.read_bytes()
    model = ModelConfig(**man["model"]).validate()
    tensors, scales = {}, {}
    for e in man["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ValueError(f"{bin_path} truncated inside {e['name']}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        tensors[e["name"]] = np.frombuffer(blob, dt, offset=e["offset"],
                                           count=int(np.prod(e["shape"]))).reshape(e["shape"]).astype(e["dtype"])
        scales[e["name"]] = float(e["scale"])
    return EncoderWeights(model, tensors, scales, dict(man["activation_scales"]))


def manifest_digest(stem) -> str:
    return hashlib.sha256(_paths(stem)[1].read_bytes()).hexdigest()
