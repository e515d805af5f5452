import json

import numpy as np
import pytest

from singleload import functional as fn
from singleload.config import ModelConfig
from singleload.weightio import load_weights, manifest_digest, save_weights


def test_roundtrip(tmp_path):
    m = ModelConfig("io", 32, 8, 16, 2, 2)
    w = fn.generate_weights(m, 3)
    bin_path, man_path = save_weights(w, tmp_path / "toy")
    assert bin_path.stat().st_size == fn.parameter_bytes(m)
    back = load_weights(tmp_path / "toy")
    assert back.model == m and back.scales == w.scales and back.act == w.act
    for k, v in w.tensors.items():
        assert back[k].dtype == v.dtype and (back[k] == v).all()
    img = fn.random_image(m, 4)
    assert (fn.encoder_forward(img, back, 8) == fn.encoder_forward(img, w, 8)).all()
    assert manifest_digest(tmp_path / "toy") == manifest_digest(tmp_path / "toy")


def test_seeded_generation_is_reproducible():
    m = ModelConfig("io", 32, 8, 16, 2, 1)
    a, b = fn.generate_weights(m, 11), fn.generate_weights(m, 11)
    assert all((a[k] == b[k]).all() for k in a.tensors) and a.act == b.act


def test_truncated_blob(tmp_path):
    m = ModelConfig("io", 32, 8, 16, 2, 1)
    bin_path, _ = save_weights(fn.generate_weights(m, 1), tmp_path / "t")
    bin_path.write_bytes(bin_path.read_bytes()[:-10])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "t")


def test_wrong_format(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps({"format": "other"}))
    (tmp_path / "x.bin").write_bytes(b"")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "x")
