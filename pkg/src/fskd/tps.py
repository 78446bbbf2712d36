"""Uncertainty-weighted thin-plate-spline warping.

Landmarks are (N, 2) arrays of (x, y) pixel positions.  Each
correspondence carries an uncertainty strength J_i; the solver relaxes
the fit at landmark i in proportion to λ·J_i² so confident landmarks
are matched tightly and uncertain ones are allowed to slip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

IDENTICAL_UC = 20.0**2 * np.log(20.0**2)


class TpsError(ValueError):
    pass


def radial_basis(d2):
    """U = d² log d² with U(0) = 0 (the limit)."""
    d2 = np.asarray(d2, dtype=np.float64)
    out = np.zeros_like(d2)
    nz = d2 > 0
    out[nz] = d2[nz] * np.log(d2[nz])
    return out


def _pairwise_d2(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


@dataclass
class Correspondences:
    src: np.ndarray  # P, support landmarks (N, 2)
    dst: np.ndarray  # P', predicted query landmarks (N, 2)
    strength: np.ndarray  # J, (N,)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if self.strength is None:
            self.strength = np.ones(len(self.src))
        self.strength = np.asarray(self.strength, dtype=np.float64).reshape(-1)
        n = len(self.src)
        if len(self.dst) != n or len(self.strength) != n:
            raise TpsError("correspondences: P, P' and J differ in length")
        if n < 3:
            raise TpsError(f"correspondences: need at least 3 landmarks, got {n}")
        if np.any(self.strength < 0):
            raise TpsError("correspondences: uncertainty strengths must be >= 0")

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        dst = doc.get("P_prime", doc.get("P'"))
        if "P" not in doc or dst is None:
            raise TpsError("correspondences: document needs 'P' and 'P_prime'")
        return cls(doc["P"], dst, doc.get("J")), float(doc.get("lambda", 1.0))

    def to_json(self, lam):
        return json.dumps({"P": self.src.tolist(), "P_prime": self.dst.tolist(),
                           "J": self.strength.tolist(), "lambda": lam})


@dataclass
class TpsTransform:
    params: np.ndarray  # T = [B | A], shape (2, N + 3)
    landmarks: np.ndarray  # (N, 2)
    lam: float
    strength: np.ndarray

    @property
    def rbf_weights(self):
        return self.params[:, : len(self.landmarks)]

    @property
    def affine(self):
        return self.params[:, len(self.landmarks):]

    def side_conditions(self):
        """(B·1, B·Pᵀ): both vanish for a valid solution."""
        b = self.rbf_weights
        return b.sum(axis=1), b @ self.landmarks

    def bending(self):
        b = self.rbf_weights
        r = radial_basis(_pairwise_d2(self.landmarks, self.landmarks))
        return float(np.trace(b @ r @ b.T))

    def __call__(self, points):
        return tps_apply(self, points)


def solve_tps(corr, lam=1.0):
    """Solve [[R + λD², P̂ᵀ], [P̂, 0]] [Bᵀ; Aᵀ] = [P'ᵀ; 0]."""
    if lam < 0:
        raise TpsError("solve_tps: lambda must be >= 0")
    p = corr.src
    n = len(p)
    d2 = _pairwise_d2(p, p)
    if np.any(d2[~np.eye(n, dtype=bool)] == 0):
        raise TpsError("solve_tps: duplicate support landmarks")
    phat = np.vstack([np.ones(n), p.T])
    affine_rank = np.linalg.matrix_rank(phat)
    if affine_rank < 3:
        raise TpsError(f"solve_tps: landmarks are collinear (affine rank {affine_rank} < 3)")
    k = radial_basis(d2) + lam * np.diag(corr.strength**2)
    system = np.zeros((n + 3, n + 3))
    system[:n, :n] = k
    system[:n, n:] = phat.T
    system[n:, :n] = phat
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = corr.dst
    try:
        sol = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(system)
        raise TpsError(f"solve_tps: singular system (rank {rank} of {n + 3})") from None
    return TpsTransform(sol.T.copy(), p.copy(), float(lam), corr.strength.copy())


def tps_apply(t, points):
    """Evaluate f at one (2,) point or an (M, 2) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    u = radial_basis(_pairwise_d2(pts, t.landmarks))
    out = u @ t.rbf_weights.T + t.affine[:, 0] + pts @ t.affine[:, 1:].T
    return out[0] if single else out


def tps_objective(corr, t, lam):
    """Σ (1/J_i)² ‖p'_i − f(p_i)‖² + λ tr(B R Bᵀ).

    Landmarks with J_i = 0 are hard constraints and contribute no
    residual term.
    """
    res = corr.dst - tps_apply(t, corr.src)
    j = corr.strength
    w2 = np.zeros_like(j)
    w2[j > 0] = 1.0 / j[j > 0] ** 2
    fit = float((w2 * (res * res).sum(1)).sum())
    return fit + lam * t.bending()


def warp_image(image, t, out_size=None, pad=0):
    """Inverse-map every output pixel through ``t`` and sample bilinearly.

    Pixel (row i, col j) sits at continuous position (x=j, y=i).  Samples
    falling outside the source get ``pad``.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    oh, ow = (h, w) if out_size is None else out_size
    ys, xs = np.mgrid[0:oh, 0:ow]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = tps_apply(t, grid)
    out = remap_bilinear(img, src[:, 0], src[:, 1], pad)
    return out.reshape((oh, ow) + img.shape[2:])


def remap_bilinear(img, x, y, pad=0):
    img = np.asarray(img)
    h, w = img.shape[:2]
    data = img.astype(np.float64).reshape(h, w, -1)
    tol = 1e-6  # round-off from the solve must not push edge pixels out
    inside = (x >= -tol) & (x <= w - 1 + tol) & (y >= -tol) & (y <= h - 1 + tol)
    xc, yc = np.clip(x, 0, w - 1), np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (xc - x0)[:, None], (yc - y0)[:, None]
    val = (data[y0, x0] * (1 - fx) * (1 - fy) + data[y0, x1] * fx * (1 - fy)
           + data[y1, x0] * (1 - fx) * fy + data[y1, x1] * fx * fy)
    val[~inside] = pad
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        val = np.clip(np.rint(val), info.min, info.max)
    return val.astype(img.dtype).reshape((len(x),) + img.shape[2:])


def fit_affine(corr):
    """Weighted least-squares affine map (2, 3) for the same weights."""
    j = corr.strength
    w = np.where(j > 0, 1.0 / np.where(j > 0, j, 1.0), 1e12)
    phat = np.hstack([np.ones((len(corr.src), 1)), corr.src])
    a, *_ = np.linalg.lstsq(phat * w[:, None], corr.dst * w[:, None], rcond=None)
    return a.T
