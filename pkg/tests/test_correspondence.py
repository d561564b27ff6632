import numpy as np
import pytest

from morphflow import correspondence as corr
from morphflow import kernels
from morphflow.geometry import Mesh


def icosphere_like(rng, n_theta=8, n_phi=12, radius=1.0):
    """Closed-ish triangulated sphere patchwork (simple UV grid with poles)."""
    verts = [[0.0, 0.0, radius]]
    for i in range(1, n_theta):
        th = np.pi * i / n_theta
        for j in range(n_phi):
            ph = 2 * np.pi * j / n_phi
            verts.append(
                [
                    radius * np.sin(th) * np.cos(ph),
                    radius * np.sin(th) * np.sin(ph),
                    radius * np.cos(th),
                ]
            )
    verts.append([0.0, 0.0, -radius])
    verts = np.array(verts)
    faces = []
    def ring(i, j):
        return 1 + (i - 1) * n_phi + (j % n_phi)
    for j in range(n_phi):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_theta - 1):
        for j in range(n_phi):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, b])
            faces.append([b, c, d])
    last = len(verts) - 1
    for j in range(n_phi):
        faces.append([last, ring(n_theta - 1, j + 1), ring(n_theta - 1, j)])
    return Mesh(verts, np.array(faces))


# ---------------------------------------------------------------------------
# independent closest-point oracle (plane projection + edge clamping), used to
# cross-check the kernel's region-classification route


def _seg_closest(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return a + t * ab


def oracle_point_triangle(p, a, b, c):
    n = np.cross(b - a, c - a)
    nn = np.dot(n, n)
    q = p - (np.dot(p - a, n) / nn) * n
    m = np.stack([b - a, c - a], axis=1)
    uv, *_ = np.linalg.lstsq(m, q - a, rcond=None)
    v, w = uv
    if v >= 0 and w >= 0 and v + w <= 1:
        return q
    cands = [_seg_closest(p, a, b), _seg_closest(p, b, c), _seg_closest(p, a, c)]
    d = [np.dot(p - x, p - x) for x in cands]
    return cands[int(np.argmin(d))]


def oracle_closest(points, mesh):
    """Returns best face, best sqdist, and the runner-up sqdist per point."""
    tris = mesh.vertices[mesh.faces]
    faces = np.empty(len(points), dtype=np.int64)
    sq = np.empty(len(points))
    second = np.empty(len(points))
    for i, p in enumerate(points):
        best, bf, run = np.inf, -1, np.inf
        for f in range(len(tris)):
            q = oracle_point_triangle(p, *tris[f])
            d = float(np.dot(p - q, p - q))
            if d < best:
                best, run, bf = d, best, f
            elif d < run:
                run = d
        faces[i] = bf
        sq[i] = best
        second[i] = run
    return faces, sq, second


BACKENDS = [kernels.numpy_backend] + ([kernels.compiled] if kernels.compiled else [])


@pytest.fixture(params=[b.NAME for b in BACKENDS])
def backend(request, monkeypatch):
    chosen = {b.NAME: b for b in BACKENDS}[request.param]
    monkeypatch.setattr(kernels, "active", chosen)
    return chosen


class TestKernels:
    def test_pair_regions(self, backend):
        a = np.array([0.0, 0.0, 0.0])
        b = np.array([2.0, 0.0, 0.0])
        c = np.array([0.0, 2.0, 0.0])
        tris = np.array([[a, b, c]])
        cases = {
            (-1.0, -1.0, 0.0): (1.0, 0.0, 0.0),      # vertex a
            (3.0, -1.0, 0.0): (0.0, 1.0, 0.0),       # vertex b
            (-1.0, 3.0, 0.0): (0.0, 0.0, 1.0),       # vertex c
            (1.0, -1.0, 0.5): (0.5, 0.5, 0.0),       # edge ab
            (-1.0, 1.0, 0.5): (0.5, 0.0, 0.5),       # edge ac
            (2.0, 2.0, 0.0): (0.0, 0.5, 0.5),        # edge bc
            (0.5, 0.5, 1.0): (0.5, 0.25, 0.25),      # interior
        }
        for p, want in cases.items():
            f, bary, sq = backend.closest_points(np.array([p]), tris)
            assert f[0] == 0
            np.testing.assert_allclose(bary[0], want, atol=1e-12)

    def test_ties_take_lowest_face(self, backend):
        # two identical triangles; query equidistant -> face 0
        tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
        tris = np.concatenate([tri, tri], axis=0)
        f, _, sq = backend.closest_points(np.array([[0.2, 0.2, 1.0]]), tris)
        assert f[0] == 0
        cand = np.array([1, 0], dtype=np.int64)  # unsorted candidates
        offs = np.array([0, 2], dtype=np.int64)
        fs, _, _ = backend.closest_points_subset(np.array([[0.2, 0.2, 1.0]]), tris, cand, offs)
        # numpy backend expects ascending candidates; compiled handles either
        if backend.NAME == "compiled":
            assert fs[0] == 0

    def test_matches_independent_oracle(self, backend):
        rng = np.random.default_rng(21)
        mesh = icosphere_like(rng, n_theta=5, n_phi=8)
        # points hovering over face interiors (unique winners) plus far points
        tris = mesh.vertices[mesh.faces]
        fsel = rng.integers(0, mesh.n_faces, size=30)
        t = tris[fsel]
        centers = t.mean(axis=1)
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        near = centers + 0.05 * n * rng.choice([-1.0, 1.0], size=(30, 1))
        pts = np.concatenate([near, rng.normal(size=(10, 3)) * 1.4])
        f, bary, sq = backend.closest_points(pts, mesh.vertices[mesh.faces])
        of, osq, osecond = oracle_closest(pts, mesh)
        np.testing.assert_allclose(sq, osq, atol=1e-10)
        # where the winner is unique by a real margin the face must agree;
        # exact ties (closest point on a shared edge) may go either way
        unique = osecond - osq > 1e-9
        assert unique.sum() > 20
        assert np.all(f[unique] == of[unique])

    def test_backends_agree(self):
        if kernels.compiled is None:
            pytest.skip("compiled kernel not built")
        rng = np.random.default_rng(22)
        mesh = icosphere_like(rng, n_theta=6, n_phi=9)
        pts = rng.normal(size=(60, 3))
        tris = mesh.vertices[mesh.faces]
        f1, b1, d1 = kernels.compiled.closest_points(pts, tris)
        f2, b2, d2 = kernels.numpy_backend.closest_points(pts, tris)
        np.testing.assert_allclose(d1, d2, atol=1e-14)
        # faces may differ only on last-ulp ties; positions must still agree
        diff = f1 != f2
        p1 = np.einsum("nkd,nk->nd", tris[f1], b1)
        p2 = np.einsum("nkd,nk->nd", tris[f2], b2)
        np.testing.assert_allclose(p1, p2, atol=1e-9)
        same = ~diff
        np.testing.assert_allclose(b1[same], b2[same], atol=1e-13)


class TestBuildMap:
    def test_identity_map(self, backend):
        rng = np.random.default_rng(23)
        mesh = icosphere_like(rng)
        bmap = corr.build_map(mesh, mesh)
        out = corr.apply_map(bmap, mesh.vertices)
        np.testing.assert_allclose(out, mesh.vertices, atol=1e-12)
        # weight mass concentrates on the vertex itself
        for i in range(mesh.n_vertices):
            k = np.argmax(bmap.weights[i])
            assert bmap.indices[i, k] == i
            assert bmap.weights[i, k] > 1.0 - 1e-9

    def test_on_surface_recovery(self, backend):
        rng = np.random.default_rng(24)
        source = icosphere_like(rng)
        # sample points exactly on faces
        fsel = rng.integers(0, source.n_faces, size=120)
        r1, r2 = rng.random((2, 120))
        swap = r1 + r2 > 1
        r1[swap], r2[swap] = 1 - r1[swap], 1 - r2[swap]
        tris = source.vertices[source.faces[fsel]]
        pts = (1 - r1 - r2)[:, None] * tris[:, 0] + r1[:, None] * tris[:, 1] + r2[:, None] * tris[:, 2]
        target = Mesh(pts, np.stack([np.arange(0, 40), np.arange(40, 80), np.arange(80, 120)], axis=1))
        bmap = corr.build_map(source, target)
        np.testing.assert_allclose(corr.apply_map(bmap, source.vertices), pts, atol=1e-9)

    def test_weights_valid(self, backend):
        rng = np.random.default_rng(25)
        source = icosphere_like(rng)
        target = icosphere_like(rng, n_theta=6, n_phi=10, radius=1.0)
        bmap = corr.build_map(source, target, max_distance=1.0)
        assert np.all(bmap.weights >= 0)
        assert np.all(bmap.weights <= 1)
        np.testing.assert_allclose(bmap.weights.sum(axis=1), 1.0, atol=1e-12)
        # indices rows are faces of the source
        face_set = {tuple(f) for f in source.faces.tolist()}
        for row in bmap.indices.tolist():
            assert tuple(row) in face_set

    def test_accelerated_equals_exhaustive(self, backend):
        rng = np.random.default_rng(26)
        source = icosphere_like(rng, n_theta=9, n_phi=14)  # F <= 500
        assert source.n_faces <= 500
        target = icosphere_like(rng, n_theta=7, n_phi=11, radius=1.05)
        fast = corr.build_map(source, target, max_distance=2.0, accelerate=True)
        slow = corr.build_map(source, target, max_distance=2.0, accelerate=False)
        np.testing.assert_array_equal(fast.indices, slow.indices)
        np.testing.assert_allclose(fast.weights, slow.weights, rtol=0, atol=0)

    def test_max_distance_error_lists_vertices(self, backend):
        rng = np.random.default_rng(27)
        source = icosphere_like(rng)
        far = np.array([[0.0, 0.0, 5.0], [0.1, 0.0, 0.9]])
        target = Mesh(np.concatenate([far, source.vertices[:1]]), np.array([[0, 1, 2]]))
        with pytest.raises(corr.MappingError, match=r"\[0\]"):
            corr.build_map(source, target)

    def test_empty_source(self):
        m = Mesh(np.zeros((3, 3)) + np.eye(3), np.zeros((0, 3), dtype=int))
        with pytest.raises(corr.MappingError, match="no faces"):
            corr.build_map(m, m)


class TestApplyMap:
    def make_pair(self, rng):
        source = icosphere_like(rng)
        target = icosphere_like(rng, n_theta=6, n_phi=10)
        bmap = corr.build_map(source, target, max_distance=1.0)
        return source, target, bmap

    def test_linearity(self):
        rng = np.random.default_rng(28)
        source, _, bmap = self.make_pair(rng)
        x = rng.normal(size=(source.n_vertices, 3))
        y = rng.normal(size=(source.n_vertices, 3))
        lhs = corr.apply_map(bmap, 2.0 * x + 3.0 * y)
        rhs = 2.0 * corr.apply_map(bmap, x) + 3.0 * corr.apply_map(bmap, y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_matrix_form_matches(self):
        rng = np.random.default_rng(29)
        source, _, bmap = self.make_pair(rng)
        m = corr.map_matrix(bmap)
        np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-12)
        x = rng.normal(size=(source.n_vertices, 3))
        np.testing.assert_allclose((x.T @ m).T, corr.apply_map(bmap, x), atol=1e-12)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(30)
        _, _, bmap = self.make_pair(rng)
        with pytest.raises(corr.MappingError):
            corr.apply_map(bmap, np.zeros((5, 3)))


class TestMapIO:
    def test_binary_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(31)
        source = icosphere_like(rng)
        target = icosphere_like(rng, n_theta=6, n_phi=10)
        bmap = corr.build_map(source, target, max_distance=1.0)
        p = str(tmp_path / "map.npz")
        corr.save_map(p, bmap)
        loaded = corr.load_map(p)
        np.testing.assert_array_equal(loaded.indices, bmap.indices)
        assert np.array_equal(loaded.weights, bmap.weights)  # bit-exact
        assert loaded.source_vertex_count == bmap.source_vertex_count

    def test_text_round_trip(self, tmp_path):
        rng = np.random.default_rng(32)
        source = icosphere_like(rng)
        target = icosphere_like(rng, n_theta=6, n_phi=10)
        bmap = corr.build_map(source, target, max_distance=1.0)
        p = str(tmp_path / "map.txt")
        corr.save_map(p, bmap)
        loaded = corr.load_map(p)
        np.testing.assert_array_equal(loaded.indices, bmap.indices)
        np.testing.assert_allclose(loaded.weights, bmap.weights, rtol=0, atol=0)

    def test_weight_validation(self):
        with pytest.raises(corr.MappingError, match="sum to 1"):
            corr.BarycentricMap(4, 1, np.array([[0, 1, 2]]), np.array([[0.5, 0.2, 0.2]]))
        with pytest.raises(corr.MappingError, match=r"outside \[0,1\]"):
            corr.BarycentricMap(4, 1, np.array([[0, 1, 2]]), np.array([[1.5, -0.3, -0.2]]))
