import numpy as np
import pytest
from skimage.metrics import structural_similarity as sk_ssim

from roigen import metrics as M


def toy_set(seed, n=5, edge=16):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (edge, edge, edge)).astype(np.float32) for _ in range(n)]


class TestMmd2:
    def test_identical_sets_zero(self):
        xs = toy_set(0)
        assert abs(M.mmd2(xs, xs, batch_size=3, tests=20, seed=1)) <= 1e-6

    def test_hand_computed_toy(self):
        # {0,0,0} vs {1,1,1}, linear kernel, B=3:
        # kxx = 0, kyy = 1, kxy = 0 -> sum over i != j of (0 + 1 - 0 - 0) / 6 = 1
        x = [np.zeros((1, 1, 1)) for _ in range(3)]
        y = [np.ones((1, 1, 1)) for _ in range(3)]
        assert M.mmd2_batch(np.zeros((3, 1)), np.ones((3, 1))) == pytest.approx(1.0)
        assert M.mmd2(x, y, batch_size=3, tests=5, seed=0) == pytest.approx(1.0)

    def test_separation(self):
        x = [np.full((2, 2, 2), -0.5) for _ in range(4)]
        y = [np.full((2, 2, 2), 0.5) for _ in range(4)]
        apart = M.mmd2(x, y, batch_size=3, tests=10, seed=0)
        together = M.mmd2(x, x, batch_size=3, tests=10, seed=0)
        assert apart > together

    def test_mean_shift_convergence(self):
        # linear-kernel MMD^2 between shifted Gaussians approaches ||delta||^2
        rng = np.random.default_rng(5)
        delta = 0.7
        x = [rng.normal(0, 1, (4, 4, 4)) for _ in range(40)]
        y = [rng.normal(delta, 1, (4, 4, 4)) for _ in range(40)]
        est = M.mmd2(x, y, batch_size=3, tests=400, seed=2)
        want = delta ** 2 * 64  # squared norm of the mean shift over 64 voxels
        assert est == pytest.approx(want, rel=0.5)

    def test_rbf_kernel_runs(self):
        xs, ys = toy_set(1), toy_set(2)
        v = M.mmd2(xs, ys, batch_size=3, tests=5, seed=0, kernel="rbf")
        assert np.isfinite(v)

    def test_set_too_small(self):
        with pytest.raises(ValueError):
            M.mmd2(toy_set(0, n=2), toy_set(1), batch_size=3)


class TestSsim:
    def test_matches_skimage_2d_and_3d(self):
        rng = np.random.default_rng(0)
        a2, b2 = rng.uniform(-1, 1, (20, 20)), rng.uniform(-1, 1, (20, 20))
        a3, b3 = rng.uniform(-1, 1, (12, 12, 12)), rng.uniform(-1, 1, (12, 12, 12))
        assert M.ssim(a2, b2) == pytest.approx(sk_ssim(a2, b2, data_range=2.0), abs=1e-10)
        assert M.ssim3d(a3, b3) == pytest.approx(sk_ssim(a3, b3, data_range=2.0), abs=1e-10)

    def test_self_similarity_one(self):
        a = toy_set(1)[0]
        assert M.ssim3d(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.uniform(-1, 1, (10, 10, 10))
            b = rng.uniform(-1, 1, (10, 10, 10))
            assert M.ssim3d(a, b) == pytest.approx(M.ssim3d(b, a), abs=1e-12)

    def test_too_small_input(self):
        a = np.zeros((4, 4, 4))
        with pytest.raises(ValueError, match="minimum edge"):
            M.ssim3d(a, a)


class TestMsSsim:
    def test_single_scale_equals_plain_ssim(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (24, 24))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), -1, 1)
        assert M.ms_ssim_2d(a, b, scales=1) == pytest.approx(M.ssim(a, b), abs=1e-12)
        assert M.ms_ssim_2d(a, b, scales=1) == pytest.approx(
            sk_ssim(a, b, data_range=2.0), abs=1e-10)

    def test_identical_volumes_one(self):
        vols = [toy_set(4)[0]] * 3
        assert M.ms_ssim_pairwise(vols, pairs=10, seed=0) == pytest.approx(1.0, abs=1e-6)

    def test_pairwise_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, (16, 16, 16))
        b = rng.uniform(-1, 1, (16, 16, 16))
        assert M.ms_ssim_volume(a, b) == pytest.approx(M.ms_ssim_volume(b, a), abs=1e-12)

    def test_needs_two_volumes(self):
        with pytest.raises(ValueError):
            M.ms_ssim_pairwise(toy_set(0, n=1))


class TestPsnr:
    def test_identical_capped(self):
        a = toy_set(6)[0]
        assert M.psnr(a, a) == 99.0

    def test_uniform_offset_20db(self):
        a = toy_set(7)[0].astype(np.float64) * 0.5
        assert M.psnr(a, a + 0.2) == pytest.approx(20.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.psnr(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


class TestFid:
    def _extractor(self):
        from roigen.networks import PerceptualExtractor
        return PerceptualExtractor(seed=0)

    def test_self_fid_zero(self):
        xs = toy_set(8, n=3, edge=12)
        ext = self._extractor()
        assert M.fid_plane(xs, list(xs), "axial", ext) == pytest.approx(0.0, abs=1e-4)

    def test_closed_form_mean_shift(self):
        # equal covariance, mean shift delta -> distance ||delta||^2
        rng = np.random.default_rng(9)
        f = rng.normal(0, 1.0, (4000, 3))
        delta = np.array([0.5, -0.3, 0.2])
        mu1, s1 = f.mean(0), np.cov(f, rowvar=False)
        mu2 = mu1 + delta
        d = M.frechet_distance(mu1, s1, mu2, s1.copy())
        assert d == pytest.approx(float(delta @ delta), abs=1e-3)

    def test_noise_farther_than_heldout(self):
        from roigen.volumes import make_synthetic_roi
        real = [make_synthetic_roi(i, 16, 2) for i in range(4)]
        held = [make_synthetic_roi(100 + i, 16, 2) for i in range(4)]
        rng = np.random.default_rng(0)
        noise = [rng.uniform(-1, 1, (16, 16, 16)).astype(np.float32) for _ in range(4)]
        ext = self._extractor()
        assert M.fid_plane(real, noise, "axial", ext) > M.fid_plane(real, held, "axial", ext)

    def test_order_invariance(self):
        xs, ys = toy_set(10, n=3, edge=12), toy_set(11, n=3, edge=12)
        ext = self._extractor()
        a = M.fid_plane(xs, ys, "coronal", ext)
        b = M.fid_plane(list(reversed(xs)), list(reversed(ys)), "coronal", ext)
        assert a == pytest.approx(b, abs=1e-8)

    def test_empty_set(self):
        with pytest.raises(ValueError):
            M.fid_plane([], toy_set(0), "axial", self._extractor())


class TestNearestReal:
    def test_member_retrieves_itself(self):
        xs = toy_set(12)
        best, score = M.nearest_real(xs[2], xs)
        assert best == 2 and score == pytest.approx(1.0)

    def test_matches_independent_rescan(self):
        xs = toy_set(13, n=6)
        g = toy_set(14, n=1)[0]
        best, score = M.nearest_real(g, xs)
        scores = [M.ssim3d(g, r) for r in xs]
        assert best == int(np.argmax(scores))
        assert score == pytest.approx(max(scores))

    def test_singleton(self):
        xs = toy_set(15, n=1)
        assert M.nearest_real(toy_set(16, n=1)[0], xs)[0] == 0

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            M.nearest_real(toy_set(0, n=1)[0], [])
