import numpy as np
import pytest

from bevocc.geometry import (
    CameraModel,
    EgoPose,
    Point3Set,
    PoseError,
    bilinear_sample,
    look_camera,
    project_to_view,
    rigid,
    transform_to_frame,
)
from bevocc.numerics import Tensor, grad_check, ops


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])
    return EgoPose(rigid(r, rng.normal(scale=5, size=3)))


def test_random_poses_are_rigid():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p = random_pose(rng).validate()
        r = p.rotation
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(r) - 1) < 1e-9


def test_transform_identity_when_poses_equal():
    rng = np.random.default_rng(1)
    pts = rng.normal(scale=10, size=(50, 3))
    pose = random_pose(rng)
    out = transform_to_frame(pts, pose, pose)
    assert np.abs(out - pts).max() <= 1e-12 * 10


def test_transform_translation_hand_case():
    out = transform_to_frame(np.zeros((1, 3)), EgoPose.translation(1, 0, 0), EgoPose.identity())
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-15)


def test_transform_round_trip_swapped():
    rng = np.random.default_rng(2)
    pts = rng.normal(scale=10, size=(20, 3))
    a, b = random_pose(rng), random_pose(rng)
    back = transform_to_frame(transform_to_frame(pts, a, b), b, a)
    assert np.abs(back - pts).max() < 1e-10


def test_transform_preserves_distances():
    rng = np.random.default_rng(3)
    p, q = rng.normal(scale=10, size=(100, 3)), rng.normal(scale=10, size=(100, 3))
    a, b = random_pose(rng), random_pose(rng)
    d0 = np.linalg.norm(p - q, axis=1)
    d1 = np.linalg.norm(transform_to_frame(p, a, b) - transform_to_frame(q, a, b), axis=1)
    assert np.abs(d0 - d1).max() < 1e-9


def test_transform_point_set_and_tensor_paths_agree():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(5, 3))
    a, b = random_pose(rng), random_pose(rng)
    ps = transform_to_frame(Point3Set(pts), a, b)
    assert ps.frame == "past-ego"
    tt = transform_to_frame(Tensor(pts), a, b)
    np.testing.assert_allclose(ps.points, tt.data, atol=1e-12)


def test_singular_pose_rejected():
    with pytest.raises(PoseError):
        transform_to_frame(np.zeros((1, 3)), EgoPose.identity(), EgoPose(np.zeros((4, 4))))


def _axis_camera(fx=100.0, size=(128, 128)):
    k = np.array([[fx, 0, 64.0], [0, fx, 64.0], [0, 0, 1]])
    return CameraModel(k, np.eye(4), size)


def test_projection_principal_point():
    proj = project_to_view(np.array([[0.0, 0.0, 7.0]]), _axis_camera())
    assert proj.valid[0]
    assert (proj.u[0], proj.v[0]) == (64.0, 64.0)


def test_projection_behind_camera_invalid():
    proj = project_to_view(np.array([[0.0, 0.0, -3.0], [0.0, 0.0, 0.05]]), _axis_camera())
    assert not proj.valid.any()


def test_projection_pinhole_hand_case():
    proj = project_to_view(np.array([[0.5, 0.0, 2.0]]), _axis_camera())
    assert proj.u[0] == pytest.approx(89.0)
    assert proj.v[0] == pytest.approx(64.0)


def test_projection_out_of_image_invalid():
    proj = project_to_view(np.array([[5.0, 0.0, 2.0]]), _axis_camera())
    assert not proj.valid[0]


def test_look_camera_sees_forward_point():
    cam = look_camera(np.pi / 2, (0, 0, 1.5), (64, 32), 70.0)
    proj = project_to_view(np.array([[0.0, 10.0, 1.5]]), cam)
    assert proj.valid[0]
    assert proj.u[0] == pytest.approx(cam.cx)
    assert proj.v[0] == pytest.approx(cam.cy)
    origin, dirs = cam.pixel_rays_ego()
    np.testing.assert_allclose(origin, [0, 0, 1.5], atol=1e-12)
    np.testing.assert_allclose(dirs[16, 31], [0, 1, 0], atol=0.05)


# --------------------------------------------------------------- sampling

def test_bilinear_reproduces_nodes():
    rng = np.random.default_rng(5)
    fm = rng.normal(size=(4, 5, 3))
    for y in range(4):
        for x in range(5):
            out = bilinear_sample(Tensor(fm), Tensor([float(x)]), Tensor([float(y)]))
            np.testing.assert_array_equal(out.data[0], fm[y, x])


def test_bilinear_cell_centre_hand_case():
    fm = np.array([[0.0, 0.0], [0.0, 4.0]])[..., None]
    out = bilinear_sample(Tensor(fm), Tensor([0.5]), Tensor([0.5]))
    assert out.data[0, 0] == pytest.approx(1.0)


def test_bilinear_clamps_to_border():
    rng = np.random.default_rng(6)
    fm = rng.normal(size=(3, 4, 2))
    out = bilinear_sample(Tensor(fm), Tensor([-5.0, 10.0, 1.0]), Tensor([1.0, 2.0, -3.0]))
    np.testing.assert_array_equal(out.data[0], fm[1, 0])
    np.testing.assert_array_equal(out.data[1], fm[2, 3])
    np.testing.assert_array_equal(out.data[2], fm[0, 1])


def test_bilinear_exact_on_affine_maps():
    rng = np.random.default_rng(7)
    a, b, c = rng.normal(size=3)
    h, w = 6, 9
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    fm = (a * uu + b * vv + c)[..., None]
    u = rng.uniform(0, w - 1, size=200)
    v = rng.uniform(0, h - 1, size=200)
    out = bilinear_sample(Tensor(fm), Tensor(u), Tensor(v)).data[:, 0]
    assert np.abs(out - (a * u + b * v + c)).max() <= 1e-10


def test_projection_then_sampling_grad_check():
    rng = np.random.default_rng(8)
    cam = look_camera(0.0, (0, 0, 1.0), (16, 12), 80.0)
    fm = Tensor(rng.normal(size=(12, 16, 3)), requires_grad=True)
    # points in front of the camera, well inside the image
    pts = np.column_stack([rng.uniform(4, 8, 6), rng.uniform(-1.5, 1.5, 6), rng.uniform(0.3, 1.7, 6)])
    pts_t = Tensor(pts, requires_grad=True)
    w = rng.normal(size=(6, 3))
    proj = project_to_view(pts_t, cam)
    assert proj.valid.all()
    frac_u = proj.u.data - np.floor(proj.u.data)
    frac_v = proj.v.data - np.floor(proj.v.data)
    assert np.all((frac_u > 1e-3) & (frac_u < 1 - 1e-3) & (frac_v > 1e-3) & (frac_v < 1 - 1e-3))

    def f():
        p = project_to_view(pts_t, cam)
        return ops.sum(bilinear_sample(fm, p.u, p.v) * w)

    assert grad_check(f, [pts_t, fm]) < 1e-4
