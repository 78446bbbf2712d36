"""Gaussian uncertainty losses, covariance fusion and ellipse analysis.

Loss functions accept numpy arrays or :class:`~fskd.autodiff.Var` nodes
and return ``Var`` so they can sit inside a training graph.  Leading
batch axes are allowed everywhere; the result then has one loss per
batch entry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SD_FLOOR = 1e-3


def precision_from_factor(q, eps=1e-6):
    """Omega = Q Qᵀ / d + eps I for a (..., k, d) factor."""
    q = ad.const(q)
    k, d = q.shape[-2], q.shape[-1]
    if d < k:
        raise ValueError(f"precision_from_factor: latent dim d={d} smaller than k={k}")
    omega = ad.matmul(q, ad.transpose(q)) * (1.0 / d)
    if eps:
        omega = omega + eps * np.eye(k)
    return omega


def nll_precision(x, vstar, omega):
    """½[(x−v*)ᵀ Ω (x−v*) − log det Ω]."""
    r = ad.sub(x, vstar)
    return (ad.quad_form(r, omega) - ad.logdet(omega)) * 0.5


def nll_covariance(x, vstar, sigma):
    """½[(x−v*)ᵀ Σ⁻¹ (x−v*) + log det Σ], evaluated in numpy."""
    r = np.asarray(x, dtype=np.float64) - np.asarray(vstar, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("nll_covariance: covariance is singular or indefinite") from None
    z = np.linalg.solve(chol, r[..., None])[..., 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return 0.5 * ((z * z).sum(-1) + logdet)


def expand_weights(w):
    """(..., m) keypoint weights -> (..., 2m) duplicated diagonal entries."""
    w = ad.const(w)
    m = w.shape[-1]
    stacked = ad.concat([ad.reshape(w, w.shape + (1,))] * 2, axis=-1)
    return ad.reshape(stacked, w.shape[:-1] + (2 * m,))


def uc_loss(x, vstar, omega, w, beta=1.0):
    """SD-weighted Gaussian NLL.

    ``w`` holds one distinctiveness weight per keypoint in the stacked
    offset; W = diag(w1, w1, ..., wm, wm).
    ½[rᵀ(Ω + βW)r − log det Ω − β log det W]
    """
    w = ad.const(w)
    if np.any(w.value <= 0):
        raise ValueError("uc_loss: keypoint weights must be positive")
    if beta < 0:
        raise ValueError("uc_loss: beta must be non-negative")
    base = nll_precision(x, vstar, omega)
    if beta == 0:
        return base
    r = ad.sub(x, vstar)
    wdiag = expand_weights(w)
    weighted = ad.sum(wdiag * r * r, axis=-1)
    logdet_w = ad.sum(ad.log(wdiag), axis=-1)
    return base + (weighted - logdet_w) * (0.5 * beta)


def weighted_cls_loss(p, gstar, w=1.0):
    """−√w · log P[g*] for a probability map (S, S) or flat (S*S,).

    Batched input is (B, S, S) or (B, S*S) with B labels and B weights.
    Probabilities below 1e-12 are floored and a warning is logged.
    """
    p = ad.const(p)
    single = np.ndim(gstar) == 0
    labels = np.atleast_1d(np.asarray(gstar, dtype=np.int64))
    flat = ad.reshape(p, (len(labels), -1))
    if np.any(np.abs(flat.value.sum(-1) - 1.0) > 1e-6):
        raise ValueError("weighted_cls_loss: probabilities do not sum to 1")
    wv = w.value if isinstance(w, ad.Var) else np.asarray(w)
    if np.any(wv <= 0) or np.any(wv > 1):
        raise ValueError("weighted_cls_loss: weight outside (0, 1]")
    picked = ad.index_select(flat, (np.arange(len(labels)), labels))
    if np.any(picked.value < PROB_FLOOR):
        log.warning("weighted_cls_loss: probability below floor %g clamped", PROB_FLOOR)
    logp = ad.log(ad.clip(picked, PROB_FLOOR, 1.0))
    scale = ad.sqrt(w) if isinstance(w, ad.Var) else ad.const(np.sqrt(np.asarray(w, dtype=np.float64)))
    loss = -(scale * logp)
    return ad.reshape(loss, ()) if single else loss


def weighted_cls_loss_logits(logits, gstar, w=None):
    """Same loss computed from (B, S*S) logits via log-softmax."""
    logits = ad.const(logits)
    logp = ad.gather_cell(ad.reshape(ad.log_softmax(logits, -1), logits.shape + (1,)), gstar)
    logp = ad.reshape(logp, (logits.shape[0],))
    if w is None:
        return -logp
    return -(ad.sqrt(ad.const(w)) * logp)


def vanilla_offset_loss(v, vstar):
    """Mean squared error over offset components (last axis)."""
    r = ad.sub(v, vstar)
    return ad.mean(r * r, axis=-1)


def vanilla_cls_loss(p, gstar):
    return weighted_cls_loss(p, gstar, 1.0)


def sd_positive_transform(x, eps=1e-4):
    """(x + √(x² + eps)) / 2, a smooth strictly positive ramp."""
    if isinstance(x, ad.Var):
        return (x + ad.sqrt(x * x + eps)) * 0.5
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (x + np.sqrt(x * x + eps))


def keypoint_weight(sd_support, sd_query):
    """Mean of support and query distinctiveness, clipped into (0, 1]."""
    s = np.asarray(sd_support, dtype=np.float64)
    q = np.asarray(sd_query, dtype=np.float64)
    if np.any(s > 1) or np.any(q > 1):
        log.warning("keypoint_weight: SD value above 1 clipped")
    w = 0.5 * (np.clip(s, SD_FLOOR, 1.0) + np.clip(q, SD_FLOOR, 1.0))
    return float(w) if w.ndim == 0 else w


def fuse_covariances(sigmas, l0):
    """Σ = 1/(4 N_S) Σ_i (l0/S_i)² Σ^(S_i), in pixel² units.

    ``sigmas`` is a list of (cov, scale) pairs.
    """
    if not sigmas:
        raise ValueError("fuse_covariances: empty list")
    total = np.zeros_like(np.asarray(sigmas[0][0], dtype=np.float64))
    for cov, s in sigmas:
        total = total + (l0 / s) ** 2 * np.asarray(cov, dtype=np.float64)
    return total / (4.0 * len(sigmas))


@dataclass(frozen=True)
class UncertaintyEllipse:
    axes: tuple  # (major, minor) = 3·sqrt(eigenvalues)
    angle: float  # radians, direction of the major axis
    eigenvalues: tuple
    strength: float  # J = 3(√λ1 + √λ2)

    def normalized_strength(self, bbox):
        return self.strength / max(bbox)


def uncertainty_ellipse(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (2, 2):
        raise ValueError(f"uncertainty_ellipse: expected 2x2, got {sigma.shape}")
    if abs(sigma[0, 1] - sigma[1, 0]) > 1e-9:
        raise ValueError("uncertainty_ellipse: covariance is not symmetric")
    vals, vecs = np.linalg.eigh(sigma)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    lead = vecs[:, 0]
    if lead[0] < 0 or (lead[0] == 0 and lead[1] < 0):
        lead = -lead
    angle = math.atan2(lead[1], lead[0])
    a1, a2 = 3 * math.sqrt(vals[0]), 3 * math.sqrt(vals[1])
    return UncertaintyEllipse((a1, a2), angle, (float(vals[0]), float(vals[1])), a1 + a2)
