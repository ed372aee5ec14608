import json

import numpy as np
import pytest

from a2j.autodiff import Tensor
from a2j.checkpoint import BLOB, MANIFEST, CheckpointError, load_checkpoint, load_tensors, save_checkpoint, save_tensors
from a2j.model import A2JConfig, build_model

TINY = A2JConfig(num_joints=3, width=32, height=32, trunk_channels=(4, 4, 8, 8), regression_channels=8,
                 branch_channels=4, branch_layers=1, seed=2)


def test_model_round_trip_is_bit_exact(tmp_path, rng):
    model = build_model(TINY)
    for _, p in model.named_parameters():
        p.data[...] = rng.normal(0, 1, p.data.shape)
    save_checkpoint(str(tmp_path), model, {"note": "x"}, extra={"step": np.array([3.0], np.float32)})
    back, meta, extra = load_checkpoint(str(tmp_path))
    assert meta["note"] == "x" and back.cfg == TINY
    assert extra["step"].tolist() == [3.0]
    a, b = model.state_dict(), back.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    x = rng.uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32)
    model.eval()
    back.eval()
    assert model.predict(Tensor(x)).uv.data.tobytes() == back.predict(Tensor(x)).uv.data.tobytes()


def test_blob_is_little_endian_float32_at_manifest_offsets(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([-1.5], np.float32)}
    save_tensors(str(tmp_path), tensors)
    manifest = json.loads((tmp_path / MANIFEST).read_text(encoding="utf-8"))
    raw = (tmp_path / BLOB).read_bytes()
    for e in manifest["tensors"]:
        seg = np.frombuffer(raw[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        np.testing.assert_array_equal(seg, tensors[e["name"]])
    assert raw[-4:] == np.float32(-1.5).astype("<f4").tobytes()


def test_truncated_blob(tmp_path):
    save_tensors(str(tmp_path), {"a": np.ones(10, np.float32)})
    (tmp_path / BLOB).write_bytes((tmp_path / BLOB).read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="bytes"):
        load_tensors(str(tmp_path))


def _edit_manifest(path, fn):
    m = json.loads((path / MANIFEST).read_text())
    fn(m)
    (path / MANIFEST).write_text(json.dumps(m))


def test_version_and_shape_mismatch(tmp_path):
    save_tensors(str(tmp_path), {"a": np.ones((2, 2), np.float32)})
    _edit_manifest(tmp_path, lambda m: m.update(version=7))
    with pytest.raises(CheckpointError, match="version"):
        load_tensors(str(tmp_path))
    _edit_manifest(tmp_path, lambda m: (m.update(version=1), m["tensors"][0].update(shape=[3, 2])))
    with pytest.raises(CheckpointError, match="shape"):
        load_tensors(str(tmp_path))
    with pytest.raises(CheckpointError):
        load_tensors(str(tmp_path / "nowhere"))


def test_architecture_mismatch(tmp_path):
    model = build_model(TINY)
    save_checkpoint(str(tmp_path), model)
    # claim a different joint count than the stored tensors
    _edit_manifest(tmp_path, lambda m: m["meta"]["model_config"].update(num_joints=4))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))
