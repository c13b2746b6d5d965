import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import boundary_brute, nearest_label_brute, random_blob
from sesaseg.distance import DistanceProbabilityMap, dpm_from_labels
from sesaseg.errors import DegenerateInputError, EmptyClassError, GridMismatchError, SesaError
from sesaseg.surface import (
    LabeledSurface,
    classify_surface,
    export_labeled_surface_ply,
    hard_boundary_mask,
    ply_bytes,
    project_volume_labels,
    soft_boundary_mask,
    soft_boundary_mask_vjp,
    wall_ring,
)


def _cube():
    lab = np.zeros((5, 5, 5))
    lab[1:4, 1:4, 1:4] = 1
    return lab


def test_cube_shell():
    mask = hard_boundary_mask(_cube()).mask
    assert mask.sum() == 26
    assert mask[2, 2, 2] == 0
    assert (mask[_cube() == 0] == 0).all()


def test_single_voxel_mask():
    lab = np.zeros((3, 3, 3))
    lab[0, 2, 1] = 1
    assert np.array_equal(hard_boundary_mask(lab).mask, lab)


def test_hard_mask_errors():
    with pytest.raises(EmptyClassError):
        hard_boundary_mask(np.zeros((2, 2, 2)))


def test_soft_mask_step_along_x():
    f = np.zeros((6, 3, 3))
    f[3:] = 1.0
    m = soft_boundary_mask(f).mask
    assert (m[2] == 1).all() and (m[3] == 1).all()
    assert (m[:2] == 0).all() and (m[4:] == 0).all()


def test_soft_mask_ramp_and_constant():
    ramp = np.broadcast_to(np.linspace(0, 1, 5)[:, None, None], (5, 4, 3))
    assert np.allclose(soft_boundary_mask(ramp).mask, 1.0, atol=1e-14)
    with pytest.raises(DegenerateInputError):
        soft_boundary_mask(np.full((3, 3, 3), 0.5))
    with pytest.raises(SesaError):
        soft_boundary_mask(np.full((3, 3, 3), 1.5))


def test_soft_mask_support_near_hard_boundary():
    rng = np.random.default_rng(4)
    for _ in range(10):
        lab = random_blob(rng, (9, 8, 7))
        soft = soft_boundary_mask(lab).mask > 0
        near = np.zeros_like(soft)
        for i, j, k in np.argwhere(boundary_brute(lab)):
            near[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2, max(k - 1, 0):k + 2] = True
        assert not (soft & ~near).any()


def test_soft_mask_vjp_matches_finite_differences():
    rng = np.random.default_rng(9)
    f = rng.uniform(0.05, 0.95, (5, 4, 4))
    g = rng.standard_normal(f.shape)
    grad = soft_boundary_mask_vjp(f, g)
    h = 1e-6
    for flat in rng.choice(f.size, 30, replace=False):
        idx = np.unravel_index(flat, f.shape)
        up, dn = f.copy(), f.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (np.sum(g * soft_boundary_mask(up).mask) - np.sum(g * soft_boundary_mask(dn).mask)) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-6 * max(1.0, abs(fd))


def test_wall_ring():
    ring = wall_ring(_cube(), thickness=1)
    assert ring.sum() == 6 * 9
    assert not (ring & (_cube() > 0)).any()
    with pytest.raises(SesaError):
        wall_ring(_cube(), thickness=0)


def test_classify_ties_and_scaling():
    surface = hard_boundary_mask(_cube())
    same = np.full((5, 5, 5), 0.3)
    assert not classify_surface(DistanceProbabilityMap(same, same), surface).scar.any()
    rng = np.random.default_rng(0)
    pn, ps = rng.random((2, 5, 5, 5))
    base = classify_surface(DistanceProbabilityMap(pn, ps), surface).scar
    assert np.array_equal(base, classify_surface(DistanceProbabilityMap(pn * 0.1, ps * 0.1), surface).scar)
    assert np.array_equal(base, classify_surface(DistanceProbabilityMap(np.log(pn), np.log(ps)), surface).scar)


def test_classify_errors():
    surface = hard_boundary_mask(_cube())
    with pytest.raises(GridMismatchError):
        classify_surface(DistanceProbabilityMap(np.zeros((4, 4, 4)), np.zeros((4, 4, 4))), surface)
    soft = soft_boundary_mask(_cube())
    with pytest.raises(SesaError):
        classify_surface(DistanceProbabilityMap(np.zeros((5, 5, 5)), np.zeros((5, 5, 5))), soft)


def test_classify_exact_dpm_on_half_scarred_cube():
    la = _cube()
    labels = wall_ring(la, 1).astype(float)
    labels[labels > 0] = np.where(np.indices(la.shape)[0][labels > 0] <= 1, 2.0, 1.0)
    out = classify_surface(dpm_from_labels(labels), hard_boundary_mask(la))
    x = out.points[:, 0]
    # the x=1 face touches only scar wall, the x=3 face only normal wall
    assert out.scar[x == 1].all() and not out.scar[x == 3].any()


def test_projection_identity_and_radius_zero():
    la = _cube()
    ref = hard_boundary_mask(la).mask
    labels = ref.copy()
    labels[1, :, :] *= 2
    proj = project_volume_labels(labels, ref)
    assert np.array_equal(proj.to_label_volume(), labels)
    ring = wall_ring(la, 1).astype(float) * 2
    assert not project_volume_labels(ring, ref, radius=0).scar.any()


def test_projection_of_outward_shifted_scar():
    la = np.zeros((6, 6, 6))
    la[:, :, :3] = 1
    ref = hard_boundary_mask(la).mask  # the z = 2 plane
    labels = ref.copy()
    labels[:3, :, 2] = 2.0
    shifted = np.zeros_like(labels)
    shifted[:, :, 3] = labels[:, :, 2]
    a = project_volume_labels(labels, ref).scar
    assert np.array_equal(project_volume_labels(shifted, ref).scar, a)
    assert a.sum() == 18


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 1.0, 1.5, 2.0, 3.0]))
def test_projection_matches_brute_force(seed, radius):
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(3, 8, 3))
    ref = boundary_brute(random_blob(rng, dims))
    labels = rng.choice([0.0, 1.0, 2.0], size=dims, p=[0.8, 0.1, 0.1])
    got = project_volume_labels(labels, ref, radius)
    pts = np.argwhere(ref.transpose(2, 1, 0))[:, ::-1]  # x-fastest order
    assert np.array_equal(got.points, pts)
    assert np.array_equal(got.scar, nearest_label_brute(labels, pts, radius))


def test_projection_idempotent():
    rng = np.random.default_rng(3)
    ref = hard_boundary_mask(random_blob(rng, (8, 8, 8))).mask
    labels = ref * rng.choice([1.0, 2.0], size=ref.shape)
    once = project_volume_labels(labels, ref).to_label_volume()
    twice = project_volume_labels(once, ref).to_label_volume()
    assert np.array_equal(once, twice) and np.array_equal(once, labels)


def test_ply_single_point(tmp_path):
    surf = LabeledSurface(np.array([[1, 2, 3]]), np.array([True]), (4, 4, 4), (0.5, 1.0, 2.0))
    text = ply_bytes(surf).decode()
    assert "element vertex 1\n" in text
    assert text.rstrip().splitlines()[-1] == "0.500000 2.000000 6.000000 255 0 0"
    export_labeled_surface_ply(surf, tmp_path / "a.ply")
    export_labeled_surface_ply(surf, tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_ply_vertex_count_and_empty():
    proj = project_volume_labels(np.zeros((5, 5, 5)), hard_boundary_mask(_cube()).mask)
    body = ply_bytes(proj).decode().split("end_header\n")[1]
    assert len(body.splitlines()) == 26
    assert all(line.endswith("255 255 255") for line in body.splitlines())
    with pytest.raises(SesaError):
        ply_bytes(LabeledSurface(np.zeros((0, 3), int), np.zeros(0, bool), (2, 2, 2)))
