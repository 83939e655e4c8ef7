import numpy as np
import pytest

from advcamo import diffcore as dc
from advcamo import losses as ls
from advcamo import scene as sc
from advcamo.attention import AttentionStack
from conftest import make_two_face_mesh


def make_stack(total_map, mask):
    """AttentionStack stand-in from a single made-up layer map."""
    total = dc.Tensor(np.asarray(total_map, dtype=np.float64))
    m = np.asarray(mask, dtype=np.uint8)
    s_fg = dc.mul(total, dc.Tensor(m.astype(np.float64)))
    s_bg = dc.mul(total, dc.Tensor(1.0 - m.astype(np.float64)))
    return AttentionStack(layers={"s8": total}, s_fg=s_fg, s_bg=s_bg, mask=m)


def test_region_mean_hand_sum():
    val = ls.region_mean([[1.0, 2.0], [3.0, 4.0]], [[1, 0], [0, 1]])
    assert val.item() == pytest.approx(2.5)


def test_region_mean_constant():
    val = ls.region_mean(np.full((5, 5), 0.7), np.eye(5))
    assert val.item() == pytest.approx(0.7)


def test_region_mean_empty_region():
    with pytest.raises(ls.LossError, match="empty region"):
        ls.region_mean(np.ones((3, 3)), np.zeros((3, 3)))


def test_topk_mean_hand_sort():
    v = ls.topk_mean(np.array([0.1, 0.9, 0.5, 0.3]), np.ones(4), 2)
    assert v.item() == pytest.approx(0.7)


def test_topk_mean_full_selection_equals_region_mean():
    rng = np.random.default_rng(0)
    m = rng.uniform(size=12)
    mask = rng.random(12) < 0.7
    mask[0] = True
    full = ls.topk_mean(m, mask, 50).item()
    assert full == pytest.approx(ls.region_mean(m, mask).item())


def test_topk_mean_constant_region():
    assert ls.topk_mean(np.full(9, 0.4), np.ones(9), 3).item() == pytest.approx(0.4)


def test_topk_mean_permutation_invariant():
    rng = np.random.default_rng(1)
    vals = rng.uniform(size=20)
    perm = rng.permutation(20)
    a = ls.topk_mean(vals, np.ones(20), 5).item()
    b = ls.topk_mean(vals[perm], np.ones(20), 5).item()
    assert a == pytest.approx(b)


def test_ratio_property():
    rng = np.random.default_rng(2)
    for _ in range(20):
        vals = rng.uniform(size=30)
        phi = ls.topk_mean(vals, np.ones(30), 7).item()
        mean = ls.region_mean(vals, np.ones(30)).item()
        assert phi >= (1 - 1e-9) * mean
    const = np.full(30, 0.3)
    assert ls.topk_mean(const, np.ones(30), 7).item() == pytest.approx(
        ls.region_mean(const, np.ones(30)).item()
    )


def test_fas_uniform_foreground_ratio_floor():
    stack = make_stack(np.full((8, 8), 0.6), np.ones((8, 8)))
    w = ls.LossWeights(alpha1=0.0, alpha2=1.0)
    l_fas, l_baa = ls.fas_baa(stack, w)
    assert l_fas.item() == pytest.approx(0.6 / (0.6 + 1e-6))
    assert l_baa.item() == 0.0  # all-ones mask: empty-background rule


def test_fas_mean_term():
    mask = np.zeros((8, 8))
    mask[:4] = 1
    m = np.where(mask == 1, 0.4, 0.9)
    stack = make_stack(m, mask)
    w = ls.LossWeights(alpha1=5.0, alpha2=0.0)
    l_fas, l_baa = ls.fas_baa(stack, w)
    assert l_fas.item() == pytest.approx(2.0)
    assert l_baa.item() == pytest.approx(-5.0 * 0.9)


def test_fas_empty_foreground_rejected():
    stack = make_stack(np.ones((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ls.LossError, match="foreground"):
        ls.fas_baa(stack, ls.LossWeights())


def test_fas_monotone_in_alphas():
    rng = np.random.default_rng(3)
    mask = (rng.random((8, 8)) < 0.5).astype(float)
    mask[0, 0] = 1
    mask[-1, -1] = 0
    m = rng.uniform(size=(8, 8))
    stack = make_stack(m, mask)
    prev_fas = None
    prev_baa = None
    for a in (0.5, 1.0, 2.0, 4.0):
        l_fas, l_baa = ls.fas_baa(stack, ls.LossWeights(alpha1=a, alpha2=a))
        if prev_fas is not None:
            assert l_fas.item() >= prev_fas
            assert l_baa.item() <= prev_baa
        prev_fas, prev_baa = l_fas.item(), l_baa.item()


def test_effective_topk_scaling():
    assert ls.effective_topk(100, 608) == 100
    assert ls.effective_topk(100, 128) == 4
    assert ls.effective_topk(50, 128) == 4  # floored
    assert ls.effective_topk(200, 128) == 9


def test_smooth_uniform_zero(two_face_mesh):
    tex = np.full((2, 3), 0.31)
    assert ls.smooth_3d(tex, two_face_mesh).item() == 0.0


def test_smooth_two_faces_hand_value():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 3, 1]])
    mesh = sc.Mesh(verts, faces, np.arange(2), sc._shared_edges(verts, faces, np.arange(2)))
    assert len(mesh.edges) == 1 and mesh.edges[0][2] == pytest.approx(1.0)
    tex = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert ls.smooth_3d(tex, mesh).item() == pytest.approx(1.0)
    # doubling edge lengths doubles the loss
    mesh2 = sc.Mesh(verts * 2, faces, np.arange(2), sc._shared_edges(verts * 2, faces, np.arange(2)))
    assert ls.smooth_3d(tex, mesh2).item() == pytest.approx(2.0)


def test_smooth_invariant_to_relabeling():
    mesh = sc.sample_faces(sc.make_vehicle_mesh(), 0.5, seed=2)
    rng = np.random.default_rng(4)
    tex = rng.uniform(size=(mesh.n_sampled, 3))
    base = ls.smooth_3d(tex, mesh).item()
    perm = rng.permutation(mesh.n_sampled)
    inv = np.argsort(perm)
    remapped_edges = [(int(inv[i]), int(inv[j]), l) for i, j, l in mesh.edges]
    mesh_p = sc.Mesh(mesh.vertices, mesh.faces, mesh.sampled_faces, remapped_edges)
    assert ls.smooth_3d(tex[perm], mesh_p).item() == pytest.approx(base)


def test_nps_examples():
    pal = ls.PrintablePalette(np.array([[0.0, 0.0, 0.0]]))
    assert ls.nps(np.array([[1.0, 1.0, 1.0]]), pal).item() == pytest.approx(3.0)
    pal30 = ls.default_palette()
    assert len(pal30.colors) == 30
    in_pal = pal30.colors[[3, 17, 29]]
    assert ls.nps(in_pal, pal30).item() == pytest.approx(0.0)
    # adding a palette color can never increase the score
    rng = np.random.default_rng(5)
    tex = rng.uniform(size=(6, 3))
    small = ls.PrintablePalette(pal30.colors[:5])
    grown = ls.PrintablePalette(np.vstack([pal30.colors[:5], rng.uniform(size=(1, 3))]))
    assert ls.nps(tex, grown).item() <= ls.nps(tex, small).item() + 1e-12


def test_palette_io(tmp_path):
    p = tmp_path / "pal.txt"
    p.write_text("# two colors\n0 0 0\n1.0 0.5 0.25\n")
    pal = ls.load_palette(p)
    assert pal.colors.shape == (2, 3)
    with pytest.raises(ls.LossError):
        ls.load_palette(tmp_path / "bad.txt") if (tmp_path / "bad.txt").write_text("1 2\n") else None


def test_total_loss_identities(two_face_mesh):
    rng = np.random.default_rng(6)
    mask = np.zeros((8, 8))
    mask[2:6, 2:6] = 1
    stack = make_stack(rng.uniform(size=(8, 8)), mask)
    pal = ls.default_palette()
    tex = np.full((2, 3), 0.5)

    w0 = ls.LossWeights(alpha1=5.0, alpha2=1.0, beta=0.0, gamma=0.0)
    b = ls.total_loss(stack, tex, two_face_mesh, pal, w0)
    assert b.l_total == pytest.approx(b.l_fas + b.l_baa)

    w1 = ls.LossWeights(alpha1=0.0, alpha2=0.0, beta=1.0, gamma=0.0)
    b1 = ls.total_loss(stack, tex, two_face_mesh, pal, w1)
    assert b1.l_s3d == 0.0  # uniform texture

    w = ls.LossWeights()
    bb = ls.total_loss(stack, tex, two_face_mesh, pal, w)
    assert abs(bb.l_total - (bb.l_fas + bb.l_baa + w.beta * bb.l_s3d + w.gamma * bb.l_nps)) < 1e-12


def test_total_loss_items(two_face_mesh):
    rng = np.random.default_rng(7)
    mask = np.zeros((8, 8))
    mask[1:5, 1:5] = 1
    stack = make_stack(rng.uniform(size=(8, 8)), mask)
    pal = ls.default_palette()
    tex = rng.uniform(size=(2, 3))
    w = ls.LossWeights(beta=0.0, gamma=0.0)
    fas_only = ls.total_loss(stack, tex, two_face_mesh, pal, w, items="fas")
    baa_only = ls.total_loss(stack, tex, two_face_mesh, pal, w, items="baa")
    both = ls.total_loss(stack, tex, two_face_mesh, pal, w, items="fas+baa")
    assert fas_only.l_baa == 0.0 and baa_only.l_fas == 0.0
    assert both.l_total == pytest.approx(fas_only.l_total + baa_only.l_total)
    with pytest.raises(ls.LossError):
        ls.total_loss(stack, tex, two_face_mesh, pal, w, items="everything")


def test_smooth_nps_gradients(two_face_mesh):
    pal = ls.PrintablePalette(np.array([[0.1, 0.2, 0.3], [0.8, 0.7, 0.6]]))
    rng = np.random.default_rng(8)
    tex = rng.uniform(0.2, 0.9, size=(2, 3))

    err_s = dc.finite_difference_check(lambda t: ls.smooth_3d(t, two_face_mesh), dc.Tensor(tex))
    assert err_s < 1e-5
    err_n = dc.finite_difference_check(lambda t: ls.nps(t, pal), dc.Tensor(tex))
    assert err_n < 1e-5
