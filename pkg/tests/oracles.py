"""Straight-line reference implementations used as test oracles.

These deliberately avoid the package's helpers: files are decoded with
PIL/numpy directly and every metric is written out from its formula.
"""

import numpy as np
from PIL import Image

SX = np.array([[-0.125, 0.0, 0.125], [-0.25, 0.0, 0.25], [-0.125, 0.0, 0.125]])
SY = SX.T


def load_rgb(path):
    return (np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0).astype(np.float32)


def load_depth(path):
    path = str(path)
    if path.endswith(".pfm"):
        with open(path, "rb") as f:
            assert f.readline().strip() == b"Pf"
            w, h = map(int, f.readline().split())
            scale = float(f.readline())
            data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
        return data.reshape(h, w)[::-1].astype(np.float32)
    a = np.asarray(Image.open(path), dtype=np.float64)
    return (a / 65535.0).astype(np.float32)


def load_normals(path):
    raw = np.asarray(Image.open(path), dtype=np.float64) / 255.0 * 2.0 - 1.0
    norm = np.sqrt((raw * raw).sum(axis=2))
    out = raw / np.maximum(norm, 1e-7)[:, :, None]
    out[norm < 1e-7] = (0.0, 0.0, 1.0)
    return out


def sobel_mag(g):
    g = np.asarray(g, dtype=np.float64)
    h, w = g.shape
    p = np.pad(g, 1, mode="edge")
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            gx = gx + SX[i, j] * p[i:i + h, j:j + w]
            gy = gy + SY[i, j] * p[i:i + h, j:j + w]
    return np.sqrt(gx * gx + gy * gy)


def normalize01(d):
    d = np.asarray(d, dtype=np.float64)
    span = d.max() - d.min()
    return np.zeros_like(d) if span == 0 else (d - d.min()) / span


def edges(mag, pct=90.0):
    if mag.max() <= 0:
        return np.zeros(mag.shape, dtype=bool)
    s = np.sort(mag.ravel())
    k = max(int(np.ceil(pct / 100.0 * s.size)), 1)
    return (mag >= s[k - 1]) & (mag > 0)


def local_variance_mean(d, window=11):
    r = window // 2
    h, w = d.shape
    p = np.pad(d, r, mode="edge")
    c1 = np.zeros((h + 2 * r + 1, w + 2 * r + 1))
    c2 = np.zeros_like(c1)
    c1[1:, 1:] = p.cumsum(0).cumsum(1)
    c2[1:, 1:] = (p * p).cumsum(0).cumsum(1)

    def box(c):
        return (c[window:, window:] - c[:-window, window:] - c[window:, :-window] + c[:-window, :-window]) / window ** 2

    m = box(c1)
    return float(np.maximum(box(c2) - m * m, 0.0).mean())


def rgb_edges(rgb):
    lum = 0.299 * rgb[:, :, 0].astype(np.float64) + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return edges(sobel_mag(normalize01(lum)))


def consistency(b, bi):
    return 0.0 if bi.sum() == 0 else float((b & bi).sum()) / float(bi.sum())


def depth_metrics(depth, rgb):
    d = normalize01(depth)
    mag = sobel_mag(d)
    return (consistency(edges(mag), rgb_edges(rgb)), local_variance_mean(d), float(mag.mean()), float(mag.max()))


def normal_metrics(n, rgb):
    mag = sobel_mag(n[:, :, 0]) + sobel_mag(n[:, :, 1]) + sobel_mag(n[:, :, 2])
    flat = n.reshape(-1, 3)
    mean = flat.mean(axis=0)
    vo = float(np.mean(1.0 - flat @ mean))
    return (consistency(edges(mag), rgb_edges(rgb)), min(max(vo, 0.0), 1.0), float(mag.max()))


def score(dm, nm):
    ds = 0.3 * dm[0] - 0.2 * dm[1] + 0.2 * dm[2] + 0.3 * dm[3]
    ns = 0.4 * nm[0] + 0.4 * nm[1] + 0.2 * nm[2]
    return ds + ns


def select(rgb_path, candidates):
    """candidates: list of (depth_path, normal_path); returns argmax index (first on ties)."""
    rgb = load_rgb(rgb_path)
    scores = [score(depth_metrics(load_depth(d), rgb), normal_metrics(load_normals(n), rgb)) for d, n in candidates]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best, scores
