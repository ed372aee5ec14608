import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2j.geometry import CropTransform, world_to_crop
from a2j.synth import (
    AugConfig,
    AugDraw,
    DatasetError,
    GenConfig,
    Sample,
    augment,
    generate_dataset,
    generate_sample,
    make_subject,
    read_dataset,
    sample_seed,
    write_dataset,
)


def test_joint_count_follows_chains():
    assert GenConfig().num_joints == 14
    assert GenConfig(chains=(2, 2)).num_joints == 5


def test_generation_is_bitwise_deterministic(small_cfg):
    a = generate_dataset(3, small_cfg, 6)
    b = generate_dataset(3, small_cfg, 6)
    for name in ("depth", "uv", "td", "world"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_sample_depends_only_on_master_seed_and_index(small_cfg):
    ds = generate_dataset(5, small_cfg, 4)
    alone = generate_sample(sample_seed(5, 3), small_cfg, small_cfg.train_subjects[3])
    assert alone.depth.tobytes() == ds.depth[3].tobytes()
    assert sample_seed(5, 3) != sample_seed(5, 4) != sample_seed(6, 3)


def test_ground_truth_reprojects(small_train):
    ds = small_train
    for i in range(len(ds)):
        uv, td = world_to_crop(ds.world[i].astype(np.float64), ds.transforms[i], ds.camera)
        np.testing.assert_allclose(uv, ds.uv[i], atol=1e-3)
        np.testing.assert_allclose(td, ds.td[i], atol=1e-2)


def test_joints_project_inside_the_source_image(small_train, small_cfg):
    uvz = small_train.camera.project(small_train.world.astype(np.float64))
    assert np.all((uvz[..., 0] >= 0) & (uvz[..., 0] < small_cfg.image_width))
    assert np.all((uvz[..., 1] >= 0) & (uvz[..., 1] < small_cfg.image_height))


def test_depth_maps_valid_or_exactly_zero(small_train, small_cfg):
    d = small_train.depth
    assert np.all(d >= 0)
    lo, hi = small_cfg.sensor_range
    valid = d[d > 0]
    assert valid.min() >= lo * 0.99 and valid.max() <= hi * 1.01
    # every frame contains foreground nearer than the background wall
    assert ((d > 0) & (d < small_cfg.background_depth - 1)).any(axis=(1, 2)).all()


def test_train_and_test_geometry_disjoint(small_train, small_test):
    assert not set(small_train.subjects.tolist()) & set(small_test.subjects.tolist())


def test_subject_geometry_is_stable(small_cfg):
    a, b = make_subject(small_cfg, 7), make_subject(small_cfg, 7)
    np.testing.assert_array_equal(a.lengths, b.lengths)
    assert not np.array_equal(a.lengths, make_subject(small_cfg, 8).lengths)


def test_degenerate_configs_rejected():
    with pytest.raises(ValueError):
        GenConfig(segment_length=(0.0, 0.0))
    with pytest.raises(ValueError):
        GenConfig(chains=(0, 3))
    with pytest.raises(ValueError):
        generate_dataset(0, GenConfig(), 1, "val")


def test_dataset_round_trip(tmp_path, small_test):
    write_dataset(str(tmp_path), small_test)
    back = read_dataset(str(tmp_path))
    for name in ("depth", "uv", "td", "world"):
        assert getattr(back, name).tobytes() == getattr(small_test, name).tobytes()
    assert back.transforms == small_test.transforms
    np.testing.assert_array_equal(back.subjects, small_test.subjects)
    raw = np.fromfile(tmp_path / "uv.f32", dtype="<f4")
    np.testing.assert_array_equal(raw, small_test.uv.ravel())


def test_truncated_blob_detected(tmp_path, small_test):
    write_dataset(str(tmp_path), small_test)
    path = tmp_path / "depth.f32"
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(DatasetError, match="truncated"):
        read_dataset(str(tmp_path))


def test_version_and_k_mismatch_detected(tmp_path, small_test):
    import json
    write_dataset(str(tmp_path), small_test)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    bad = dict(manifest, version=99)
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(str(tmp_path))
    bad = dict(manifest, num_joints=13)
    (tmp_path / "manifest.json").write_text(json.dumps(bad))
    with pytest.raises(DatasetError):
        read_dataset(str(tmp_path))
    with pytest.raises(DatasetError):
        read_dataset(str(tmp_path / "missing"))


def _marker_sample(points, size=64):
    """A flat valid background with small deep-negative markers at the joint locations."""
    depth = np.full((size, size), 500.0, np.float32)
    for x, y in points:
        depth[int(y) - 1:int(y) + 1, int(x) - 1:int(x) + 1] = 300.0
    t = CropTransform(0, 0, size, size, size, size, 1.0, 500.0)
    pts = np.asarray(points, np.float32)
    return Sample(depth, pts, np.zeros(len(pts), np.float32), t, np.zeros((len(pts), 3), np.float32))


def test_identity_augmentation_is_exact(small_train):
    s = small_train.sample(0)
    out = augment(s, 42, AugConfig.identity())
    assert out.depth.tobytes() == s.depth.tobytes()
    np.testing.assert_array_equal(out.uv, s.uv)
    np.testing.assert_array_equal(out.td, s.td)


def test_quarter_turn_moves_joint_and_marker_together():
    s = _marker_sample([(44.0, 32.0)])
    out = augment(s, 0, AugConfig(), draw=AugDraw(90.0, 1.0, 1.0, False))
    rel = s.uv[0] - 32.0
    np.testing.assert_allclose(out.uv[0] - 32.0, [-rel[1], rel[0]], atol=0.5)
    ys, xs = np.nonzero(out.depth < 400)
    np.testing.assert_allclose([xs.mean() + 0.5, ys.mean() + 0.5], out.uv[0], atol=1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-30, 30), st.floats(0.9, 1.1), st.floats(0.95, 1.05))
def test_augmentation_keeps_markers_on_joints(angle, scale, dscale):
    s = _marker_sample([(24.0, 30.0), (40.0, 36.0)])
    out = augment(s, 0, AugConfig(), draw=AugDraw(angle, scale, dscale, False))
    for j in range(2):
        x, y = out.uv[j]
        patch = out.depth[int(y) - 2:int(y) + 3, int(x) - 2:int(x) + 3]
        assert patch.min() < 420
    np.testing.assert_allclose(out.td, s.td * dscale, atol=1e-6)


def test_depth_scaling_and_noise_touch_only_valid_pixels(small_train):
    s = small_train.sample(1)
    out = augment(s, 3, AugConfig(), draw=AugDraw(0.0, 1.0, 1.05, True))
    np.testing.assert_array_equal(out.depth == 0, s.depth == 0)
    np.testing.assert_allclose(out.td, s.td * 1.05, rtol=1e-6)
    assert not np.array_equal(out.depth, s.depth)


def test_out_of_bounds_augmentation_is_clamped(caplog):
    s = _marker_sample([(2.0, 2.0), (61.0, 61.0)])
    with caplog.at_level("INFO"):
        out = augment(s, 0, AugConfig(), draw=AugDraw(30.0, 1.1, 1.0, False))
    assert np.all((out.uv >= 0) & (out.uv < 64))
    assert "clamped" in caplog.text


def test_augmentation_deterministic_per_seed(small_train):
    s = small_train.sample(2)
    a, b = augment(s, 9, AugConfig()), augment(s, 9, AugConfig())
    assert a.depth.tobytes() == b.depth.tobytes()
    assert augment(s, 10, AugConfig()).depth.tobytes() != a.depth.tobytes()


def test_network_inputs_normalized(small_train):
    x = small_train.network_inputs()
    assert x.shape == small_train.depth.shape
    assert x.min() >= -1 and x.max() <= 1
    np.testing.assert_array_equal(x[small_train.depth == 0], 1.0)
