import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import axis_camera, cloud_from
from refgs.numkit import make_rng
from refgs.scene import (
    ALPHA_MAX,
    Camera,
    Gaussian,
    GaussianCloud,
    LayoutError,
    SceneSpec,
    Splat2D,
    camera_azimuth,
    depth_sort,
    generate_cameras,
    generate_scene,
    load_scene,
    project_cloud,
    project_gaussian,
    save_scene,
    splat_weight,
)


def _naive_rotation(q):
    w, x, y, z = q / np.sqrt(sum(c * c for c in q))
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def _naive_cov2d(mu, scale, q, cam):
    """Matrix oracle written with explicit loops over the factors."""
    r = _naive_rotation(np.asarray(q, float))
    s = np.diag(scale)
    sigma = r @ s @ s @ r.T
    t = cam.rotation @ mu + cam.translation
    j = np.array([[cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2], [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
    out = np.zeros((2, 2))
    m = j @ cam.rotation
    for a in range(2):
        for b in range(2):
            out[a, b] = sum(m[a, k] * sigma[k, l] * m[b, l] for k in range(3) for l in range(3))
    return out + 0.3 * np.eye(2)


def test_generate_scene_counts():
    cloud, objs = generate_scene(SceneSpec(n_objects=2, gaussians_per_object=50, n_background=0), 0)
    assert len(cloud) == 100
    ids, counts = np.unique(cloud.object_id, return_counts=True)
    assert ids.tolist() == [0, 1] and counts.tolist() == [50, 50]
    assert [o.id for o in objs] == [0, 1]


def test_generate_scene_is_deterministic():
    a, _ = generate_scene(SceneSpec(), 3)
    b, _ = generate_scene(SceneSpec(), 3)
    assert a.geometry_hash() == b.geometry_hash()
    c, _ = generate_scene(SceneSpec(), 4)
    assert a.geometry_hash() != c.geometry_hash()


@pytest.mark.parametrize("seed", range(5))
def test_generate_scene_respects_separation(seed):
    spec = SceneSpec()
    _, objs = generate_scene(spec, seed)
    for a, b in itertools.combinations(objs, 2):
        assert np.linalg.norm(a.centroid[:2] - b.centroid[:2]) >= spec.min_separation - 0.35


def test_placed_centroids_respect_separation_exactly():
    from refgs.scene import place_centroids
    pts = place_centroids(8, 2.0, 1.1, make_rng(0, "scene"))
    d = [np.linalg.norm(p - q) for p, q in itertools.combinations(pts, 2)]
    assert min(d) >= 1.1


def test_infeasible_layout_is_an_error():
    with pytest.raises(LayoutError):
        generate_scene(SceneSpec(n_objects=12, bounds=0.5, min_separation=1.5), 0)


def test_scene_objects_are_compact_clusters():
    cloud, objs = generate_scene(SceneSpec(), 0)
    for o in objs:
        pts = cloud.mu[cloud.object_id == o.id]
        assert np.max(np.linalg.norm(pts - o.centroid, axis=1)) < 1.0


def test_four_cameras_without_jitter_sit_at_right_angles():
    cams = generate_cameras(4, jitter=0.0)
    np.testing.assert_allclose([camera_azimuth(c) for c in cams], [0, 90, 180, 270], atol=1e-9)


def test_default_split_is_sixteen_train_four_novel():
    cams = generate_cameras(20)
    assert sum(c.split == "train" for c in cams) == 16
    assert sum(c.split == "novel" for c in cams) == 4


def test_cameras_face_the_target():
    target = np.array([0.0, 0.0, 0.3])
    for cam in generate_cameras(12, seed=5):
        np.testing.assert_allclose(cam.rotation @ cam.rotation.T, np.eye(3), atol=1e-12)
        t = cam.to_camera(target)
        u, v = cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy
        assert abs(u - cam.cx) < 1e-9 and abs(v - cam.cy) < 1e-9


def test_too_few_cameras_is_an_error():
    with pytest.raises(ValueError):
        generate_cameras(1)


def test_camera_invariants():
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 4, 8, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 8, 8, 2 * np.eye(3), np.zeros(3))


def test_gaussian_invariants():
    with pytest.raises(ValueError):
        cloud_from([[0, 0, 1]], scale=-0.1)
    with pytest.raises(ValueError):
        cloud_from([[0, 0, 1]], opacity=1.5)
    with pytest.raises(ValueError):
        cloud_from([[0, 0, 1]], rot=np.array([[1.0, 0.1, 0, 0]]))


def test_on_axis_gaussian_projects_to_principal_point():
    cam = axis_camera(16)
    s = project_gaussian(Gaussian(np.array([0, 0, 3.0]), np.full(3, 0.2), np.array([1.0, 0, 0, 0]), 0.5,
                                  np.zeros(3)), cam)
    np.testing.assert_array_equal(s.center, [cam.cx, cam.cy])
    assert s.depth == 3.0


def test_gaussian_behind_camera_is_culled():
    g = Gaussian(np.array([0, 0, -1.0]), np.full(3, 0.2), np.array([1.0, 0, 0, 0]), 0.5, np.zeros(3))
    assert project_gaussian(g, axis_camera()) is None
    g.mu = np.array([0, 0, 0.005])
    assert project_gaussian(g, axis_camera()) is None


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_projected_covariance_matches_matrix_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = generate_cameras(5, seed=seed % 97)[seed % 5]
    mu = rng.uniform(-1, 1, 3)
    scale = rng.uniform(0.05, 0.5, 3)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    s = project_gaussian(Gaussian(mu, scale, q, 0.7, np.zeros(3)), cam)
    np.testing.assert_allclose(s.cov2d, _naive_cov2d(mu, scale, q, cam), rtol=1e-10, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(s.cov2d) > 0)


def test_vectorised_projection_agrees_with_single():
    cam = generate_cameras(4)[1]
    cloud, _ = generate_scene(SceneSpec(n_objects=2, gaussians_per_object=10, n_background=4), 1)
    s = project_cloud(cloud, cam)
    for i in range(len(cloud)):
        one = project_gaussian(cloud[i], cam)
        np.testing.assert_allclose(s.center[i], one.center, rtol=1e-13)
        np.testing.assert_allclose(s.cov2d[i], one.cov2d, rtol=1e-12)


def test_depth_sort_examples():
    assert depth_sort([3, 1, 2]).tolist() == [1, 2, 0]
    assert depth_sort([2.0, 1.0, 2.0, 1.0]).tolist() == [1, 3, 0, 2]


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=0, max_size=1000))
def test_depth_sort_matches_comparison_sort(depths):
    order = depth_sort(depths)
    assert sorted(order.tolist()) == list(range(len(depths)))
    assert order.tolist() == sorted(range(len(depths)), key=lambda i: (depths[i], i))


def test_splat_weight_examples():
    s = Splat2D(np.array([3.0, 4.0]), np.eye(2), 1.0, 0)
    assert splat_weight(s, 0.5, (3.0, 4.0)) == 0.5
    assert splat_weight(s, 1.0, (3.0, 4.0)) == ALPHA_MAX
    assert splat_weight(s, 0.5, (30.0, 4.0)) == 0.0  # below the 1/255 cutoff


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_splat_weight_matches_inverse_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2))
    cov = a @ a.T + 0.3 * np.eye(2)
    c = rng.uniform(0, 8, 2)
    v = c + rng.normal(0, 1.0, 2)
    op = rng.uniform(0.05, 1.0)
    d = v - c
    g = np.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
    expect = min(op * g, 0.99)
    expect = 0.0 if expect < 1 / 255 else expect
    assert splat_weight(Splat2D(c, cov, 1.0, 0), op, v) == pytest.approx(expect, rel=1e-12, abs=1e-15)


def test_scene_file_round_trip(tmp_path):
    cloud, objs = generate_scene(SceneSpec(n_objects=3, gaussians_per_object=5, n_background=4), 2)
    cams = generate_cameras(4, width=16, height=16)
    save_scene(tmp_path / "scene.json", cloud, objs, cams)
    c2, o2, k2 = load_scene(tmp_path / "scene.json")
    assert c2.geometry_hash() == cloud.geometry_hash()
    assert [o.color_tag for o in o2] == [o.color_tag for o in objs]
    np.testing.assert_array_equal(k2[2].rotation, cams[2].rotation)
    save_scene(tmp_path / "again.json", c2, o2, k2)
    assert (tmp_path / "scene.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_background_is_serialized_by_name(tmp_path):
    cloud, objs = generate_scene(SceneSpec(n_objects=2, gaussians_per_object=2, n_background=1), 0)
    save_scene(tmp_path / "s.json", cloud, objs, generate_cameras(2, width=8, height=8))
    assert '"object_id":"background"' in (tmp_path / "s.json").read_text().replace(" ", "")


def test_subset_keeps_rows_aligned():
    cloud = cloud_from([[0, 0, 1], [0, 0, 2], [0, 0, 3]], object_id=np.array([0, 1, 2]))
    sub = cloud.subset(np.array([True, False, True]))
    assert sub.object_id.tolist() == [0, 2]
    assert isinstance(sub, GaussianCloud) and len(sub) == 2
