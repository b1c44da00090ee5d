"""Generative-model evaluation: batch-wise MMD^2, pairwise MS-SSIM,
plane-wise FID, 3D SSIM / PSNR, and nearest-real retrieval.

Everything operates on numpy volumes in [-1, 1] (data range 2.0) and is
deterministic given (inputs, seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import linalg
from scipy.ndimage import uniform_filter

DATA_RANGE = 2.0
PSNR_CAP = 99.0
FID_JITTER = 1e-6

# standard five-scale MS-SSIM exponents
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

PLANE_AXIS = {"axial": 2, "coronal": 1, "sagittal": 0}


@dataclass
class MetricsReport:
    entries: list = field(default_factory=list)

    def add(self, name: str, value: float, **config):
        self.entries.append({"metric": name, "value": float(value), **config})

    def as_lines(self) -> list[str]:
        import json
        return [json.dumps(e, sort_keys=True) for e in self.entries]


# ---------------------------------------------------------------------------
# SSIM family

def _ssim_stats(a: np.ndarray, b: np.ndarray, data_range: float, win: int):
    """Windowed mean/variance/covariance maps (uniform window, sample
    covariance normalization), cropped to valid interior."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if min(a.shape) < win:
        raise ValueError(
            f"input size {a.shape} smaller than SSIM window {win}; "
            f"minimum edge is {win}")
    np_win = win ** a.ndim
    cov_norm = np_win / (np_win - 1)
    f = lambda x: uniform_filter(x, size=win)
    ua, ub = f(a), f(b)
    uaa, ubb, uab = f(a * a), f(b * b), f(a * b)
    va = cov_norm * (uaa - ua * ua)
    vb = cov_norm * (ubb - ub * ub)
    vab = cov_norm * (uab - ua * ub)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    lum = (2 * ua * ub + c1) / (ua ** 2 + ub ** 2 + c1)
    cs = (2 * vab + c2) / (va + vb + c2)
    pad = (win - 1) // 2
    crop = tuple(slice(pad, s - pad) for s in a.shape)
    return lum[crop], cs[crop]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE,
         win: int = 7) -> float:
    """Plain windowed SSIM for arrays of any dimensionality."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    lum, cs = _ssim_stats(a, b, data_range, win)
    return float((lum * cs).mean())


def ssim3d(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 3:
        raise ValueError("ssim3d expects 3D volumes")
    return ssim(a, b, data_range=DATA_RANGE)


def _downsample2(x: np.ndarray) -> np.ndarray:
    s = [n - n % 2 for n in x.shape]
    x = x[tuple(slice(0, n) for n in s)]
    for ax in range(x.ndim):
        x = (np.take(x, range(0, x.shape[ax], 2), axis=ax)
             + np.take(x, range(1, x.shape[ax], 2), axis=ax)) / 2
    return x


def ms_ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE,
               scales: int = 5, win: int = 7) -> float:
    """Multi-scale SSIM of one slice pair; scales=1 reduces to plain SSIM."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    vals = []
    x, y = a, b
    for s in range(scales):
        lum, cs = _ssim_stats(x, y, data_range, win)
        if s == scales - 1:
            vals.append(max(float((lum * cs).mean()), 0.0))
        else:
            vals.append(max(float(cs.mean()), 0.0))
            x, y = _downsample2(x), _downsample2(y)
    return float(np.prod(np.asarray(vals) ** weights))


def max_ms_ssim_scales(edge: int, win: int = 7, limit: int = 5) -> int:
    s = 1
    while s < limit and edge // (2 ** s) >= win:
        s += 1
    return s


def ms_ssim_volume(a: np.ndarray, b: np.ndarray, scales: int | None = None) -> float:
    """Volume-level MS-SSIM: mean of per-axial-slice multi-scale SSIM."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if scales is None:
        scales = max_ms_ssim_scales(min(a.shape[0], a.shape[1]))
    vals = [ms_ssim_2d(a[:, :, i], b[:, :, i], scales=scales)
            for i in range(a.shape[2])]
    return float(np.mean(vals))


def ms_ssim_pairwise(volumes, pairs: int = 1000, seed: int = 0,
                     scales: int | None = None) -> float:
    """Mean MS-SSIM over randomly sampled unordered pairs from one set."""
    n = len(volumes)
    if n < 2:
        raise ValueError("need at least 2 volumes")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(pairs):
        i, j = rng.choice(n, size=2, replace=False)
        total += ms_ssim_volume(volumes[i], volumes[j], scales=scales)
    return total / pairs


# ---------------------------------------------------------------------------
# PSNR

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(DATA_RANGE ** 2 / mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# MMD^2

def _kernel(x: np.ndarray, y: np.ndarray, kind: str, bandwidth: float | None):
    if kind == "linear":
        return x @ y.T
    if kind == "rbf":
        d2 = np.sum(x * x, 1)[:, None] - 2 * x @ y.T + np.sum(y * y, 1)[None]
        return np.exp(-d2 / (2 * bandwidth ** 2))
    raise ValueError(f"unknown kernel {kind!r}")


def _median_bandwidth(pts: np.ndarray) -> float:
    d2 = (np.sum(pts * pts, 1)[:, None] - 2 * pts @ pts.T
          + np.sum(pts * pts, 1)[None])
    med = np.median(d2[np.triu_indices(len(pts), 1)])
    return float(np.sqrt(max(med, 1e-12) / 2))


def mmd2_batch(x: np.ndarray, y: np.ndarray, kernel: str = "linear",
               bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 for equal-size batches; exactly 0 when x == y rowwise."""
    b = len(x)
    if b < 2 or len(y) != b:
        raise ValueError("need equal batch sizes >= 2")
    if kernel == "rbf" and bandwidth is None:
        bandwidth = _median_bandwidth(np.concatenate([x, y]))
    kxx = _kernel(x, x, kernel, bandwidth)
    kyy = _kernel(y, y, kernel, bandwidth)
    kxy = _kernel(x, y, kernel, bandwidth)
    off = ~np.eye(b, dtype=bool)
    return float((kxx[off] + kyy[off] - kxy[off] - kxy.T[off]).sum() / (b * (b - 1)))


def mmd2(real, gen, batch_size: int = 3, tests: int = 100, seed: int = 0,
         kernel: str = "linear") -> float:
    """Mean over `tests` batch draws of the unbiased batch MMD^2.

    Both sides draw their batch indices from identically seeded per-test
    streams, so mmd2(X, X) is exactly zero and parallel evaluation over
    tests matches sequential.
    """
    if len(real) < batch_size or len(gen) < batch_size:
        raise ValueError(f"both sets must have at least batch_size={batch_size} volumes")
    xr = np.stack([np.asarray(v, np.float64).reshape(-1) for v in real])
    xg = np.stack([np.asarray(v, np.float64).reshape(-1) for v in gen])
    total = 0.0
    for t in range(tests):
        ir = np.random.default_rng((seed, t)).choice(len(xr), batch_size, replace=False)
        ig = np.random.default_rng((seed, t)).choice(len(xg), batch_size, replace=False)
        total += mmd2_batch(xr[ir], xg[ig], kernel=kernel)
    return total / tests


# ---------------------------------------------------------------------------
# Plane-wise FID

def _slice_features(volumes, plane: str, extractor) -> np.ndarray:
    axis = PLANE_AXIS[plane]
    feats = []
    with torch.no_grad():
        for v in volumes:
            v = np.asarray(v, np.float32)
            for i in range(v.shape[axis]):
                sl = np.take(v, i, axis=axis)
                taps = extractor(torch.from_numpy(sl))
                # pooled per-channel activations, all taps concatenated
                vec = torch.cat([t.mean(dim=(-2, -1)).reshape(-1) for t in taps])
                feats.append(vec.numpy())
    return np.stack(feats).astype(np.float64)


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_JITTER) -> float:
    diff = mu1 - mu2
    sigma1 = sigma1 + np.eye(len(mu1)) * eps
    sigma2 = sigma2 + np.eye(len(mu2)) * eps
    covmean, _ = linalg.sqrtm(sigma1 @ sigma2, disp=False)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(diff @ diff + np.trace(sigma1 + sigma2 - 2 * covmean))


def fid_plane(real, gen, plane: str, extractor) -> float:
    """Frechet distance between Gaussian fits of pooled per-slice features
    along one anatomical plane."""
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}")
    if not len(real) or not len(gen):
        raise ValueError("both sets must be nonempty")
    fr = _slice_features(real, plane, extractor)
    fg = _slice_features(gen, plane, extractor)
    mu_r, mu_g = fr.mean(0), fg.mean(0)
    cov_r = np.cov(fr, rowvar=False)
    cov_g = np.cov(fg, rowvar=False)
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


# ---------------------------------------------------------------------------
# Nearest-real retrieval

def nearest_real(gen: np.ndarray, real_set):
    """Most similar real volume under 3D SSIM; ties go to the lowest id."""
    if not len(real_set):
        raise ValueError("real set is empty")
    best_id, best = 0, -np.inf
    for i, r in enumerate(real_set):
        s = ssim3d(gen, r)
        if s > best:
            best_id, best = i, s
    return best_id, best
