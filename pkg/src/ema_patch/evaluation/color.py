"""sRGB/CIELAB conversion, CIEDE2000 and dominant-colour extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# D65 reference white, 2 degree observer
WHITE_D65 = np.array([0.95047, 1.0, 1.08883])

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_SRGB = np.linalg.inv(_SRGB_TO_XYZ)

_EPS = 216 / 24389
_KAPPA = 24389 / 27


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float

    def __iter__(self):
        return iter((self.L, self.a, self.b))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.L, self.a, self.b)


def _to_linear(c: np.ndarray) -> np.ndarray:
    # sign-symmetric extension keeps out-of-gamut values invertible
    ac = np.abs(c)
    lin = np.where(ac <= 0.04045, ac / 12.92, ((ac + 0.055) / 1.055) ** 2.4)
    return np.sign(c) * lin


def _to_gamma(c: np.ndarray) -> np.ndarray:
    ac = np.abs(c)
    g = np.where(ac <= 0.0031308, ac * 12.92, 1.055 * ac ** (1 / 2.4) - 0.055)
    return np.sign(c) * g


def srgb_to_lab(rgb) -> np.ndarray:
    """``(..., 3)`` sRGB in [0, 1] to CIELAB (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    xyz = _to_linear(rgb) @ _SRGB_TO_XYZ.T / WHITE_D65
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    """Inverse of :func:`srgb_to_lab`; values outside [0, 1] are not clipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f**3 > _EPS, f**3, (116 * f - 16) / _KAPPA) * WHITE_D65
    return _to_gamma(xyz @ _XYZ_TO_SRGB.T)


def delta_e00(c1, c2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0) -> float:
    """CIEDE2000 colour difference between two Lab colours."""
    L1, a1, b1 = (float(v) for v in c1)
    L2, a2, b2 = (float(v) for v in c2)

    C1 = math.hypot(a1, b1)
    C2 = math.hypot(a2, b2)
    Cbar7 = ((C1 + C2) / 2) ** 7
    G = 0.5 * (1 - math.sqrt(Cbar7 / (Cbar7 + 25.0**7)))
    a1p, a2p = (1 + G) * a1, (1 + G) * a2
    C1p, C2p = math.hypot(a1p, b1), math.hypot(a2p, b2)
    h1p = math.degrees(math.atan2(b1, a1p)) % 360 if C1p else 0.0
    h2p = math.degrees(math.atan2(b2, a2p)) % 360 if C2p else 0.0

    dLp = L2 - L1
    dCp = C2p - C1p
    if C1p * C2p == 0:
        dhp = 0.0
    else:
        dhp = h2p - h1p
        if dhp > 180:
            dhp -= 360
        elif dhp < -180:
            dhp += 360
    dHp = 2 * math.sqrt(C1p * C2p) * math.sin(math.radians(dhp) / 2)

    Lbp = (L1 + L2) / 2
    Cbp = (C1p + C2p) / 2
    if C1p * C2p == 0:
        hbp = h1p + h2p
    elif abs(h1p - h2p) <= 180:
        hbp = (h1p + h2p) / 2
    elif h1p + h2p < 360:
        hbp = (h1p + h2p + 360) / 2
    else:
        hbp = (h1p + h2p - 360) / 2

    T = (1 - 0.17 * math.cos(math.radians(hbp - 30)) + 0.24 * math.cos(math.radians(2 * hbp))
         + 0.32 * math.cos(math.radians(3 * hbp + 6)) - 0.20 * math.cos(math.radians(4 * hbp - 63)))
    dtheta = 30 * math.exp(-(((hbp - 275) / 25) ** 2))
    Cbp7 = Cbp**7
    RC = 2 * math.sqrt(Cbp7 / (Cbp7 + 25.0**7))
    SL = 1 + 0.015 * (Lbp - 50) ** 2 / math.sqrt(20 + (Lbp - 50) ** 2)
    SC = 1 + 0.045 * Cbp
    SH = 1 + 0.015 * Cbp * T
    RT = -math.sin(math.radians(2 * dtheta)) * RC

    tL = dLp / (kL * SL)
    tC = dCp / (kC * SC)
    tH = dHp / (kH * SH)
    return math.sqrt(max(tL * tL + tC * tC + tH * tH + RT * tC * tH, 0.0))


def _as_hwc(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if hasattr(image, "detach") else np.asarray(image)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = np.moveaxis(arr, 0, -1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    return arr


def _kmeanspp_init(x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.choice(len(x), p=w / w.sum()))]
    for _ in range(1, k):
        d2 = ((x[:, None, :] - x[idx][None, :, :]) ** 2).sum(-1).min(axis=1)
        p = w * d2
        if p.sum() <= 0:
            break
        idx.append(int(rng.choice(len(x), p=p / p.sum())))
    return x[idx].copy()


def dominant_color(image, k: int = 3, iters: int = 20, seed: int = 0) -> LabColor:
    """Centroid of the heaviest k-means cluster of the image's pixels in Lab.

    Clustering runs on unique pixel values weighted by their counts, which
    makes the result independent of pixel order.
    """
    hwc = _as_hwc(image)
    px = hwc.reshape(-1, 3)
    if px.shape[0] == 0:
        raise ValueError("empty image")
    uniq, counts = np.unique(px, axis=0, return_counts=True)
    lab = srgb_to_lab(uniq)
    w = counts.astype(np.float64)
    if len(lab) == 1:
        return LabColor(*(float(v) for v in lab[0]))
    k = min(k, len(lab))
    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(lab, w, k, rng)
    labels = np.zeros(len(lab), dtype=np.int64)
    for _ in range(iters):
        d2 = ((lab[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(len(centers)):
            m = labels == j
            if m.any():
                new[j] = (lab[m] * w[m, None]).sum(0) / w[m].sum()
        if np.array_equal(new, centers):
            break
        centers = new
    weights = np.array([w[labels == j].sum() for j in range(len(centers))])
    best = int(np.argmax(weights))
    members = np.flatnonzero(labels == best)
    if len(members) == 1:
        return LabColor(*(float(v) for v in lab[members[0]]))
    return LabColor(*(float(v) for v in centers[best]))


def color_difference(image_a, image_b, seed: int = 0) -> float:
    return delta_e00(dominant_color(image_a, seed=seed), dominant_color(image_b, seed=seed))
