"""Descriptor grid tests.

The oracles below re-derive the binning, histogram, and pooling
semantics with independent scalar code; the implementation is compared
against them on random inputs before any property tests run.
"""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from ads3d import descriptors as dsc
from ads3d import geometry as geo
from ads3d.io import OrganizedPointCloud

NBINS = 11


def make_ps(points: np.ndarray) -> geo.PointSet:
    n = len(points)
    back = np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64)])
    return geo.PointSet(points=np.asarray(points, dtype=np.float32), back_index=back)


# --------------------------------------------------------------------oracles

def soft_bin_oracle(x: float, lo: float, hi: float, nbins: int,
                    circular: bool) -> np.ndarray:
    """Unit vote split by distance to the two nearest bin centers."""
    width = (hi - lo) / nbins
    centers = lo + (np.arange(nbins) + 0.5) * width
    out = np.zeros(nbins)
    if circular:
        t = (x - centers[0]) / width
        k = math.floor(t)
        frac = t - k
        out[k % nbins] += 1 - frac
        out[(k + 1) % nbins] += frac
    elif x <= centers[0]:
        out[0] = 1.0
    elif x >= centers[-1]:
        out[-1] = 1.0
    else:
        k = int(np.searchsorted(centers, x, side="right")) - 1
        frac = (x - centers[k]) / width
        out[k] += 1 - frac
        out[k + 1] += frac
    return out


def spfh_oracle(points: np.ndarray, normals: np.ndarray, src: int,
                nbrs: np.ndarray, nbins: int = NBINS) -> np.ndarray:
    """Scalar recomputation of the angle histogram of one point."""
    p = points[src].astype(np.float64)
    ns = normals[src].astype(np.float64)
    hist = np.zeros(3 * nbins)
    pairs = 0
    for j in nbrs:
        q = points[j].astype(np.float64)
        nt = normals[j].astype(np.float64)
        d = q - p
        dist = float(np.linalg.norm(d))
        if dist == 0.0:
            continue
        vraw = np.cross(d, ns)
        vn = float(np.linalg.norm(vraw))
        if vn <= dist * 1e-9:
            continue
        v = vraw / vn
        w = np.cross(ns, v)
        alpha = float(v @ nt)
        phi = float(ns @ d) / dist
        theta = math.atan2(float(w @ nt), float(ns @ nt))
        hist[0:nbins] += soft_bin_oracle(alpha, -1.0, 1.0, nbins, False)
        hist[nbins:2 * nbins] += soft_bin_oracle(phi, -1.0, 1.0, nbins, False)
        hist[2 * nbins:] += soft_bin_oracle(theta, -math.pi, math.pi, nbins, True)
        pairs += 1
    return hist * (100.0 / pairs) if pairs else hist


def pool_oracle(dense: np.ndarray, g: int) -> np.ndarray:
    h, w, d = dense.shape
    out = np.zeros((g, g, d))
    for i in range(g):
        r0, r1 = (i * h) // g, ((i + 1) * h) // g
        for j in range(g):
            c0, c1 = (j * w) // g, ((j + 1) * w) // g
            out[i, j] = dense[r0:r1, c0:c1].astype(np.float64).mean(axis=(0, 1))
    return out


def jittered_surface(side: int, pitch: float, seed: int) -> np.ndarray:
    """Gently curved lattice with coordinates snapped to multiples of
    2^-18 so that exact translations stay exact in float32.

    Centered on the origin in x and y: the slope bound then keeps
    n . p away from zero everywhere, so the viewpoint flip rule cannot
    change sign under floating-point drift of a rotated copy.
    """
    rng = np.random.default_rng(seed)
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    x = (ii - (side - 1) / 2) * pitch + rng.uniform(-0.2, 0.2, ii.shape) * pitch
    y = (jj - (side - 1) / 2) * pitch + rng.uniform(-0.2, 0.2, jj.shape) * pitch
    z = 0.2 + 0.01 * np.sin(2 * np.pi * x / 0.3) * np.cos(2 * np.pi * y / 0.3)
    pts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    return np.round(pts * 2.0 ** 18) / 2.0 ** 18


def random_rotation(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ---------------------------------------------------------------soft binning

def test_soft_votes_match_center_distance_oracle():
    for circular in (False, True):
        lo, hi = (-math.pi, math.pi) if circular else (-1.0, 1.0)
        width = (hi - lo) / NBINS
        edges = lo + np.arange(NBINS + 1) * width
        centers = edges[:-1] + width / 2
        xs = np.concatenate([np.linspace(lo, hi, 197), edges, centers,
                             [lo - 0.3 * width, hi + 0.3 * width]])
        if circular:
            xs = xs[(xs >= lo) & (xs <= hi)]
        b0, b1, f = dsc._soft_votes(xs, lo, hi, NBINS, circular)
        for i, x in enumerate(xs):
            got = np.zeros(NBINS)
            got[b0[i]] += 1 - f[i]
            got[b1[i]] += f[i]
            assert_allclose(got, soft_bin_oracle(float(x), lo, hi, NBINS, circular),
                            atol=1e-12)


@given(st.floats(min_value=-1.5, max_value=1.5, allow_nan=False),
       st.booleans())
@settings(max_examples=200, deadline=None)
def test_soft_votes_conserve_mass(x, circular):
    lo, hi = (-math.pi, math.pi) if circular else (-1.0, 1.0)
    b0, b1, f = dsc._soft_votes(np.array([x]), lo, hi, NBINS, circular)
    assert 0 <= b0[0] < NBINS and 0 <= b1[0] < NBINS
    assert math.isclose((1 - f[0]) + f[0], 1.0, abs_tol=1e-12)


def test_soft_votes_circular_seam_consistent():
    lo, hi = -math.pi, math.pi
    a = dsc._soft_votes(np.array([math.pi]), lo, hi, NBINS, True)
    b = dsc._soft_votes(np.array([-math.pi]), lo, hi, NBINS, True)
    ha, hb = np.zeros(NBINS), np.zeros(NBINS)
    ha[a[0][0]] += 1 - a[2][0]
    ha[a[1][0]] += a[2][0]
    hb[b[0][0]] += 1 - b[2][0]
    hb[b[1][0]] += b[2][0]
    assert_allclose(ha, hb, atol=1e-12)


# ----------------------------------------------------------------------spfh

def test_spfh_matches_scalar_oracle():
    rng = np.random.default_rng(21)
    pts = (0.2 + 0.15 * rng.random((40, 3))).astype(np.float32)
    pts[17] = pts[5]  # coincident pair, must be skipped on both routes
    normals = rng.normal(size=(40, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[5] = (0.0, 0.0, 1.0)
    pts[11] = pts[5] + np.array([0, 0, 0.05], dtype=np.float32)  # parallel pair
    ps = make_ps(pts)
    nf = geo.NormalField(normals.astype(np.float32))
    p64 = ps.points.astype(np.float64)
    n64 = nf.normals.astype(np.float64)
    for src in (5, 0, 23):
        nbrs = np.array([i for i in range(40) if i != src])
        got = dsc.spfh(src, ps, nf, nbrs)
        assert_allclose(got, spfh_oracle(p64, n64, src, nbrs), rtol=1e-9, atol=1e-9)


def test_spfh_sub_histograms_sum_to_100():
    rng = np.random.default_rng(3)
    pts = (0.1 * rng.random((25, 3))).astype(np.float32)
    normals = rng.normal(size=(25, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    ps = make_ps(pts)
    nf = geo.NormalField(normals.astype(np.float32))
    hist = dsc.spfh(4, ps, nf, np.array([i for i in range(25) if i != 4]))
    for k in range(3):
        assert abs(hist[k * NBINS:(k + 1) * NBINS].sum() - 100.0) < 1e-3


def test_spfh_empty_neighbors_is_zero():
    ps = make_ps(np.array([[0.1, 0.2, 0.3]]))
    nf = geo.NormalField(np.array([[0.0, 0.0, 1.0]], dtype=np.float32))
    assert_array_equal(dsc.spfh(0, ps, nf, np.array([], dtype=np.int64)),
                       np.zeros(3 * NBINS))


def test_plane_spfh_concentrates_mass_in_zero_bins():
    pitch = 0.02
    ii, jj = np.meshgrid(np.arange(15), np.arange(15), indexing="ij")
    pts = np.stack([ii * pitch, jj * pitch, np.full_like(ii, 0.3, dtype=float)],
                   axis=-1).reshape(-1, 3)
    ps = make_ps(pts)
    nf = geo.estimate_normals(ps, 0.05, 30, np.zeros(3))
    index = geo.build_index(ps)
    center = 7 * 15 + 7
    nbrs, _ = geo.radius_knn(index, ps.points[center], 0.25, 100)
    hist = dsc.spfh(center, ps, nf, nbrs)
    for k in range(3):
        sub = hist[k * NBINS:(k + 1) * NBINS]
        assert sub[NBINS // 2] >= 95.0, f"sub-histogram {k}: {sub}"


# ----------------------------------------------------------------------fpfh

def test_fpfh_points_matches_per_point_route():
    rng = np.random.default_rng(7)
    pts = (0.2 + 0.15 * rng.random((220, 3))).astype(np.float32)
    pts[17] = pts[5]
    ps = make_ps(pts)
    params = dsc.FpfhParams(radius=0.09, max_nn=14, normal_radius=0.07,
                            normal_max_nn=12)
    route_a = dsc.fpfh_points(ps, params)

    nf = geo.estimate_normals(ps, params.normal_radius, params.normal_max_nn,
                              np.asarray(params.viewpoint, dtype=np.float64))
    index = geo.build_index(ps)
    p64 = index.points
    n64 = nf.normals.astype(np.float64)
    nbrs_of = [geo.radius_knn(index, ps.points[i], params.radius, params.max_nn)[0]
               for i in range(len(ps))]
    spfh_of = [dsc.spfh(i, ps, nf, nbrs_of[i]) for i in range(len(ps))]
    for i in range(len(ps)):
        nbrs = nbrs_of[i]
        d = p64[nbrs] - p64[i]
        dn = np.linalg.norm(d, axis=1)
        vn = np.linalg.norm(np.cross(d, np.broadcast_to(n64[i], d.shape)), axis=1)
        keep = (dn > 0) & (vn > dn * 1e-9)
        expected = spfh_of[i].copy()
        if keep.any():
            expected += np.mean([spfh_of[j] / w
                                 for j, w in zip(nbrs[keep], dn[keep])], axis=0)
        assert_allclose(route_a[i], expected, rtol=1e-9, atol=1e-9,
                        err_msg=f"point {i}")


def test_fpfh_rotation_invariance_per_point():
    side = 24
    pts = jittered_surface(side, 0.02, seed=11)
    params = dsc.FpfhParams()
    base = dsc.fpfh_points(make_ps(pts), params)
    interior = (np.ones((side, side), dtype=bool))
    interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
    interior = interior.ravel()
    for seed in (31, 32, 33):
        rot = random_rotation(seed)
        moved = dsc.fpfh_points(make_ps(pts @ rot.T), params)
        l1 = np.abs(base - moved).sum(axis=1)
        assert l1[interior].max() <= 1e-2, f"seed {seed}: {l1[interior].max()}"


def test_fpfh_translation_invariance_bit_exact():
    pts = jittered_surface(16, 0.02, seed=13)
    t = np.array([0.25, -1.5, 0.5])
    params = dsc.FpfhParams()
    base = dsc.fpfh_points(make_ps(pts), params)
    shifted = dsc.fpfh_points(make_ps(pts + t),
                              dsc.FpfhParams(viewpoint=tuple(t)))
    assert base.tobytes() == shifted.tobytes()


def test_fpfh_isolated_point_gets_zero_descriptor():
    pts = np.array([[0.1, 0.1, 0.2], [0.11, 0.1, 0.2], [0.1, 0.11, 0.2],
                    [0.11, 0.11, 0.2], [5.0, 5.0, 5.0]], dtype=np.float32)
    feats = dsc.fpfh_points(make_ps(pts), dsc.FpfhParams(radius=0.05, max_nn=10))
    assert_array_equal(feats[4], np.zeros(33))
    assert feats[:4].sum() > 0


def test_fpfh_grid_matches_scatter_and_pool():
    side = 45
    pts = jittered_surface(side, 0.02, seed=17).astype(np.float32)
    grid = pts.reshape(side, side, 3)
    cloud = OrganizedPointCloud(grid=grid)
    params = dsc.FpfhParams()
    got = dsc.fpfh_grid(cloud, params)
    assert got.values.shape == (28, 28, 33)
    assert got.method == "fpfh"

    feats = dsc.fpfh_points(geo.point_set_from_cloud(cloud), params)
    dense = np.zeros((side, side, 33))
    dense[np.repeat(np.arange(side), side), np.tile(np.arange(side), side)] = feats
    assert_allclose(got.values, pool_oracle(dense, 28).astype(np.float32),
                    rtol=1e-5, atol=1e-5)


def test_fpfh_grid_empty_cloud_warns_and_zeroes():
    cloud = OrganizedPointCloud(grid=np.zeros((32, 32, 3), dtype=np.float32))
    with pytest.warns(UserWarning):
        grid = dsc.fpfh_grid(cloud, dsc.FpfhParams())
    assert grid.values.shape == (28, 28, 33)
    assert not grid.values.any()


def test_fpfh_deterministic():
    pts = jittered_surface(12, 0.02, seed=19)
    a = dsc.fpfh_points(make_ps(pts), dsc.FpfhParams())
    b = dsc.fpfh_points(make_ps(pts), dsc.FpfhParams())
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------------------pooling

def test_pool_to_grid_matches_double_loop():
    rng = np.random.default_rng(5)
    for h, w in ((45, 45), (224, 224), (29, 37)):
        dense = rng.random((h, w, 4))
        assert_allclose(dsc.pool_to_grid(dense, 28),
                        pool_oracle(dense, 28).astype(np.float32),
                        rtol=1e-6, atol=1e-6)


def test_pool_to_grid_exact_for_divisible_blocks():
    vals = np.arange(4, dtype=np.float64).reshape(2, 2)
    dense = np.kron(vals, np.ones((8, 8)))[:, :, None]
    out = dsc.pool_to_grid(dense, 2)
    assert_allclose(out[:, :, 0], vals)
    ones = np.ones((56, 56, 1))
    assert_allclose(dsc.pool_to_grid(ones, 28), np.ones((28, 28, 1)))


def test_pool_to_grid_rejects_small_maps():
    with pytest.raises(ValueError):
        dsc.pool_to_grid(np.zeros((27, 45, 2)), 28)


# -----------------------------------------------------------------raw / hog

def test_raw_patches_match_slicing_oracle():
    rng = np.random.default_rng(9)
    depth = rng.random((64, 64)).astype(np.float32)
    grid = dsc.raw_depth_patches(depth)
    assert grid.values.shape == (8, 8, 64)
    for p, q in ((0, 0), (3, 5), (7, 7)):
        assert_array_equal(grid.values[p, q],
                           depth[8 * p:8 * p + 8, 8 * q:8 * q + 8].ravel())


def test_raw_patches_constant_and_row_ramp():
    const = dsc.raw_depth_patches(np.full((32, 32), 2.5, dtype=np.float32))
    assert_array_equal(const.values, np.full((4, 4, 64), 2.5, dtype=np.float32))
    ramp = dsc.raw_depth_patches(
        np.arange(32, dtype=np.float32)[:, None].repeat(32, axis=1))
    expected = np.repeat(np.arange(8, dtype=np.float32), 8)
    assert_array_equal(ramp.values[0, 0], expected)


def test_raw_patches_reject_bad_dims():
    with pytest.raises(ValueError):
        dsc.raw_depth_patches(np.zeros((30, 30)))
    with pytest.raises(ValueError):
        dsc.raw_rgb_patches(np.zeros((30, 30, 3), dtype=np.uint8))


def test_raw_rgb_patches_scale_and_layout():
    rgb = np.zeros((16, 16, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 51)
    grid = dsc.raw_rgb_patches(rgb)
    assert grid.values.shape == (2, 2, 192)
    assert_allclose(grid.values[0, 0, :3], [1.0, 0.0, 0.2], atol=1e-7)
    assert not grid.values[0, 1].any()


def test_hog_pure_horizontal_gradient():
    depth = np.arange(32, dtype=np.float64)[None, :].repeat(32, axis=0)
    grid = dsc.hog_depth(depth)
    assert grid.values.shape == (4, 4, 32)
    expected = np.zeros(32, dtype=np.float32)
    expected[[0, 8, 16, 24]] = 0.5  # four cells, all mass in bin 0
    assert_allclose(grid.values, np.broadcast_to(expected, (4, 4, 32)), atol=1e-6)


def test_hog_pure_vertical_gradient_hits_quarter_turn_bin():
    depth = np.arange(32, dtype=np.float64)[:, None].repeat(32, axis=1)
    grid = dsc.hog_depth(depth)
    expected = np.zeros(32, dtype=np.float32)
    expected[[4, 12, 20, 28]] = 0.5
    assert_allclose(grid.values, np.broadcast_to(expected, (4, 4, 32)), atol=1e-6)


def test_hog_step_edge_mass_in_horizontal_bin():
    depth = np.zeros((32, 32))
    depth[:, 16:] = 1.0
    grid = dsc.hog_depth(depth)
    edge = grid.values[1, 2]  # cell containing columns 16..23
    hist0 = edge.reshape(4, 8)[0]
    assert hist0[0] > 0
    assert_allclose(hist0[1:], 0.0, atol=1e-7)


def test_hog_constant_depth_is_zero():
    grid = dsc.hog_depth(np.full((32, 32), 3.3))
    assert_array_equal(grid.values, np.zeros((4, 4, 32), dtype=np.float32))


def test_hog_blocks_clamp_at_border():
    rng = np.random.default_rng(13)
    depth = rng.random((32, 32))
    grid = dsc.hog_depth(depth)
    last = grid.values[3, 3].reshape(4, 8)
    # at the corner all four block cells clamp to the same cell histogram
    assert_allclose(last[0], last[1], atol=1e-7)
    assert_allclose(last[0], last[3], atol=1e-7)


# ---------------------------------------------------------------------dsift

def wave_depth(size: int, angle: float, center: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    x = (jj - center) * math.cos(angle) + (ii - center) * math.sin(angle)
    return np.sin(2 * np.pi * x / 9.0) * 0.5 + 0.05 * x


def test_dsift_constant_is_zero():
    grid = dsc.dsift_depth(np.full((64, 64), 1.7))
    assert grid.values.shape == (8, 8, 128)
    assert_array_equal(grid.values, np.zeros_like(grid.values))


def test_dsift_descriptor_norm_properties():
    rng = np.random.default_rng(15)
    grid = dsc.dsift_depth(rng.random((64, 64)))
    norms = np.linalg.norm(grid.values.reshape(-1, 128), axis=1)
    assert_allclose(norms, 1.0, atol=1e-5)  # renormalized after the clamp
    assert grid.values.min() >= 0.0
    assert grid.values.max() <= 1.0 + 1e-5


def test_dsift_quarter_turn_alignment():
    # rotating the pattern 90 degrees about the anchor center maps the
    # pixel lattice onto itself, so alignment must cancel the rotation
    center = 4 * 8 + 3.5
    d0 = dsc.dsift_depth(wave_depth(64, 0.0, center))
    d90 = dsc.dsift_depth(wave_depth(64, math.pi / 2, center))
    diff = np.linalg.norm(d0.values[4, 4] - d90.values[4, 4])
    assert diff <= 0.05, f"L2 deviation {diff}"


# ------------------------------------------------------------shift behavior

def test_patch_grids_shift_with_the_image():
    rng = np.random.default_rng(27)
    depth = rng.random((64, 64))
    shifted = np.roll(depth, 8, axis=1)
    # the rightmost compared patch must keep its whole block support away
    # from the image border, where one-sided gradients see shifted content
    for fn, margin in ((dsc.raw_depth_patches, 1), (dsc.hog_depth, 1),
                       (dsc.dsift_depth, 3)):
        a = fn(depth).values
        b = fn(shifted).values
        assert_allclose(b[margin:-margin, margin + 1:-margin - 1],
                        a[margin:-margin, margin:-margin - 2], atol=1e-12,
                        err_msg=fn.__name__)


# --------------------------------------------------------------------concat

def test_concat_features_layout_and_errors():
    rng = np.random.default_rng(17)
    a = dsc.PatchFeatureGrid(values=rng.random((4, 4, 3)).astype(np.float32),
                             method="raw")
    b = dsc.PatchFeatureGrid(values=rng.random((4, 4, 2)).astype(np.float32),
                             method="hog")
    fused = dsc.concat_features(a, b)
    assert fused.method == "fused"
    assert fused.dim == 5
    assert_array_equal(fused.values[2, 1, :3], a.values[2, 1])
    assert_array_equal(fused.values[2, 1, 3:], b.values[2, 1])
    zeros = dsc.PatchFeatureGrid(values=np.zeros((4, 4, 2), dtype=np.float32),
                                 method="hog")
    padded = dsc.concat_features(a, zeros)
    assert_array_equal(padded.values[:, :, :3], a.values)
    assert not padded.values[:, :, 3:].any()
    with pytest.raises(ValueError):
        dsc.concat_features(a, dsc.PatchFeatureGrid(
            values=np.zeros((5, 5, 2), dtype=np.float32), method="hog"))


def test_grid_validation_rejects_bad_shapes():
    with pytest.raises(ValueError):
        dsc.PatchFeatureGrid(values=np.zeros((4, 5, 2), dtype=np.float32),
                             method="raw")
