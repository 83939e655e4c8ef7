import numpy as np
import pytest

from advcamo import scene as sc


@pytest.fixture(scope="session")
def vehicle_mesh():
    return sc.sample_faces(sc.make_vehicle_mesh(), 0.6, seed=0)


def make_two_face_mesh() -> sc.Mesh:
    """Square in the yz plane split into two triangles, both paintable.

    Faces a camera placed on the +x axis (pitch 0, yaw 0).
    """
    verts = np.array(
        [[0.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 1.0, 1.0], [0.0, -1.0, 1.0]]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    sampled = np.arange(2)
    return sc.Mesh(verts, faces, sampled, sc._shared_edges(verts, faces, sampled))


@pytest.fixture
def two_face_mesh():
    return make_two_face_mesh()


def render_scene_set(mesh, image_size=64, distances=(5.0, 7.0), pitches=(30.0, 60.0),
                     yaws=(0.0, 90.0, 180.0, 270.0), bg_seeds=(0, 1), offsets=None):
    """Small deterministic scene set for unit tests."""
    rng = np.random.default_rng(1234)
    tex = sc.Texture(np.full((mesh.n_sampled, 3), 0.5))
    scenes = []
    for bi, bg_seed in enumerate(bg_seeds):
        kind = "noise" if bg_seed % 2 else "gradient"
        bg = sc.make_background(kind, bg_seed, image_size)
        for pose in sc.pose_grid(distances, pitches, yaws, fov=50.0, image_size=image_size):
            off = tuple(rng.uniform(-0.5, 0.5, size=2)) + (0.0,)
            pose = sc.CameraPose(pose.distance, pose.pitch, pose.yaw, pose.fov,
                                 pose.image_size, look_offset=off)
            scenes.append(sc.rasterize(mesh, tex, pose, bg, background_id=f"{kind}:{bg_seed}"))
    return [s for s in scenes if s.gt_box is not None]


@pytest.fixture(scope="session")
def small_scene_set(vehicle_mesh):
    return render_scene_set(vehicle_mesh)
