import numpy as np
import pytest

from advcamo import diffcore as dc
from advcamo import scene as sc


def write_tmp_obj(tmp_path, text, name="m.obj"):
    p = tmp_path / name
    p.write_text(text)
    return p


SINGLE_TRI = """
v 0 0 0
v 1 0 0
v 0 1 0
f 1 2 3
"""

TWO_TRI = """
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
f 1 2 3
f 1 3 4
"""

QUAD = """
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
f 1 2 3 4
"""


from conftest import make_two_face_mesh as two_face_mesh  # noqa: E402


def facing_pose(size=64, distance=5.0):
    # pitch 0 yaw 0 puts the camera on the +x axis; the two-face mesh lies in
    # the xz... use a mesh in the yz plane instead: simpler to look straight on
    return sc.CameraPose(distance, 0.0, 0.0, fov=40.0, image_size=size)


def test_load_single_triangle(tmp_path):
    mesh = sc.load_mesh(write_tmp_obj(tmp_path, SINGLE_TRI))
    assert len(mesh.faces) == 1
    assert mesh.edges == []


def test_load_two_triangles_one_shared_edge(tmp_path):
    mesh = sc.load_mesh(write_tmp_obj(tmp_path, TWO_TRI))
    assert len(mesh.edges) == 1
    i, j, length = mesh.edges[0]
    assert {i, j} == {0, 1}
    assert length == pytest.approx(np.sqrt(2.0))


def test_load_quad_rejected(tmp_path):
    with pytest.raises(sc.SceneError, match="non-triangular"):
        sc.load_mesh(write_tmp_obj(tmp_path, QUAD))


def test_load_empty_rejected(tmp_path):
    with pytest.raises(sc.SceneError, match="empty"):
        sc.load_mesh(write_tmp_obj(tmp_path, "v 0 0 0\n"))


def test_obj_roundtrip(tmp_path):
    mesh = sc.make_vehicle_mesh()
    path = tmp_path / "vehicle.obj"
    sc.write_obj(mesh, path)
    again = sc.load_mesh(path)
    assert len(again.faces) == len(mesh.faces)
    assert np.allclose(again.vertices, mesh.vertices)


def test_sample_faces_deterministic():
    mesh = sc.make_vehicle_mesh()
    a = sc.sample_faces(mesh, 0.6, seed=3)
    b = sc.sample_faces(mesh, 0.6, seed=3)
    c = sc.sample_faces(mesh, 0.6, seed=4)
    assert np.array_equal(a.sampled_faces, b.sampled_faces)
    assert not np.array_equal(a.sampled_faces, c.sampled_faces)
    assert a.n_sampled == round(0.6 * len(mesh.faces))


def test_mask_zero_means_background_exactly():
    mesh = two_face_mesh()
    tex = sc.Texture(np.full((2, 3), 0.5))
    bg = sc.make_background("gradient", 7, 64)
    # aim the camera far off to the side so the object leaves the frame
    pose = sc.CameraPose(50.0, 0.0, 0.0, fov=2.0, image_size=64, look_offset=(0.0, 30.0, 0.0))
    scene = sc.rasterize(mesh, tex, pose, bg)
    assert scene.mask.sum() == 0
    assert np.array_equal(scene.image, bg)
    assert scene.gt_box is None


def test_frontoparallel_triangle_flat_color():
    verts = np.array([[0.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 1, 2]])
    mesh = sc.Mesh(verts, faces, np.arange(1), [])
    tex = sc.Texture(np.array([[0.2, 0.4, 0.6]]))
    bg = np.zeros((64, 64, 3))
    pose = sc.CameraPose(6.0, 0.0, 0.0, fov=45.0, image_size=64)
    scene = sc.rasterize(mesh, tex, pose, bg, light_dir=None)
    assert scene.mask.sum() > 50
    covered = scene.image[scene.mask == 1]
    assert np.allclose(covered, [0.2, 0.4, 0.6])
    assert np.all(scene.shading[scene.mask == 1] == 1.0)


def test_compositing_identity():
    mesh = sc.make_vehicle_mesh()
    mesh = sc.sample_faces(mesh, 0.6, seed=0)
    rng = np.random.default_rng(0)
    tex = sc.Texture(rng.uniform(size=(mesh.n_sampled, 3)))
    bg = sc.make_background("noise", 3, 96)
    pose = sc.CameraPose(6.0, 30.0, 45.0, fov=50.0, image_size=96)
    scene = sc.rasterize(mesh, tex, pose, bg)
    # recompute the right-hand side independently
    colors = np.where(
        (scene.face_index >= 0)[..., None],
        tex.values[np.clip(scene.face_index, 0, None)],
        sc.NEUTRAL_GRAY,
    )
    render = scene.shading[..., None] * colors
    m = scene.mask[..., None]
    rhs = m * render + (1 - m) * bg
    assert np.max(np.abs(scene.image - rhs)) == 0.0


def test_mask_face_index_consistency():
    mesh = sc.sample_faces(sc.make_vehicle_mesh(), 0.5, seed=1)
    tex = sc.Texture(np.full((mesh.n_sampled, 3), 0.5))
    bg = sc.make_background("gradient", 1, 96)
    scene = sc.rasterize(mesh, tex, sc.CameraPose(6.0, 40.0, 120.0, image_size=96), bg)
    fi = scene.face_index
    assert np.all(scene.mask[fi >= 0] == 1)
    assert np.all(fi[scene.mask == 0] == -1)
    # some body pixels belong to non-sampled faces but stay inside the mask
    assert ((fi == -1) & (scene.mask == 1)).sum() > 0
    assert scene.shading.min() >= sc.SHADING_FLOOR
    assert scene.shading.max() <= 1.0


def test_texture_gradient_locality_and_value():
    mesh = two_face_mesh()
    tex0 = np.array([[0.3, 0.5, 0.7], [0.6, 0.2, 0.4]])
    bg = sc.make_background("gradient", 2, 64)
    pose = sc.CameraPose(6.0, 0.0, 0.0, fov=45.0, image_size=64)
    scene = sc.rasterize(mesh, sc.Texture(tex0), pose, bg)
    assert scene.mask.sum() > 100

    def total(t):
        return dc.reduce_sum(sc.composite_tensor(scene, t))

    err = dc.finite_difference_check(total, dc.Tensor(tex0), eps=1e-5)
    assert err < 1e-6
    # analytic value: d(sum X)/d(tex[f, c]) equals the summed shading over
    # pixels covered by face f
    with dc.Tape() as tape:
        leaf = dc.Tensor(tex0.copy(), requires_grad=True)
        g = tape.grad(total(leaf), [leaf])[0].data
    for f in range(2):
        expect = scene.shading[scene.face_index == f].sum()
        assert np.allclose(g[f], expect)
    # perturbing face 0 changes only its own pixels
    tex1 = tex0.copy()
    tex1[0] += 0.05
    delta = sc.composite_image(scene.face_index, scene.mask, scene.shading, bg, tex1) - scene.image
    changed = np.abs(delta).sum(axis=2) > 0
    assert np.all(scene.face_index[changed] == 0)


def test_make_background_determinism_and_kinds(tmp_path):
    a = sc.make_background("gradient", 7, 128)
    b = sc.make_background("gradient", 7, 128)
    assert np.array_equal(a, b)
    n1 = sc.make_background("noise", 1, 64)
    n2 = sc.make_background("noise", 2, 64)
    assert not np.array_equal(n1, n2)
    img = np.random.default_rng(0).uniform(size=(128, 128, 3))
    p = tmp_path / "bg.png"
    sc.save_png(img, p)
    loaded = sc.make_background("file", 0, 128, path=p)
    assert loaded.shape == (128, 128, 3)
    assert np.max(np.abs(loaded - img)) < 1.0 / 255.0
    with pytest.raises(sc.SceneError, match="unknown"):
        sc.make_background("plaid", 0, 64)


def test_pose_grid_counts():
    poses = sc.pose_grid([10, 20, 30, 40, 50], [50, 70, 90], [0, 45, 90, 135, 180, 225, 270, 315])
    assert len(poses) == 120
    assert len(sc.pose_grid([4], [70], [0])) == 1
    with pytest.raises(sc.SceneError):
        sc.pose_grid([], [50], [0])
    # deterministic distance-major order
    assert poses[0].distance == 10 and poses[-1].distance == 50
    assert poses[1].yaw == 45


def test_camera_inside_bounding_sphere_rejected():
    mesh = sc.make_vehicle_mesh()
    tex = sc.Texture(np.full((mesh.n_sampled, 3), 0.5))
    bg = np.zeros((64, 64, 3))
    with pytest.raises(sc.SceneError, match="bounding sphere"):
        sc.rasterize(mesh, tex, sc.CameraPose(0.5, 30.0, 0.0, image_size=64), bg)


def test_scene_npz_roundtrip(tmp_path):
    mesh = sc.sample_faces(sc.make_vehicle_mesh(), 0.6, seed=0)
    tex = sc.Texture(np.full((mesh.n_sampled, 3), 0.5))
    bg = sc.make_background("gradient", 5, 64)
    scene = sc.rasterize(mesh, tex, sc.CameraPose(6.0, 50.0, 90.0, image_size=64), bg, background_id="gradient:5")
    path = tmp_path / "scene.npz"
    sc.save_scene_npz(scene, path)
    loaded = sc.load_scene_npz(path)
    assert np.array_equal(loaded.face_index, scene.face_index)
    assert np.array_equal(loaded.mask, scene.mask)
    assert np.array_equal(loaded.shading, scene.shading)
    assert np.array_equal(loaded.background, scene.background)
    assert loaded.gt_box == scene.gt_box
    assert loaded.pose == scene.pose
    assert loaded.background_id == "gradient:5"


def test_vehicle_renders_reasonably():
    mesh = sc.sample_faces(sc.make_vehicle_mesh(), 0.6, seed=0)
    rng = np.random.default_rng(1)
    tex = sc.Texture(rng.uniform(size=(mesh.n_sampled, 3)))
    bg = sc.make_background("noise", 4, 128)
    for pose in sc.pose_grid([4, 6, 8], [50, 70, 90], [0, 90, 180, 270]):
        scene = sc.rasterize(mesh, tex, pose, bg)
        assert scene.gt_box is not None
        x1, y1, x2, y2 = scene.gt_box
        assert (x2 - x1) >= 8 and (y2 - y1) >= 6
