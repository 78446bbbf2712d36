"""Few-shot keypoint detector: encoder, prototypes, descriptors and heads.

The encoder is a frozen random patch projection (one dense layer per
non-overlapping p x p patch followed by relu).  Everything after the
prototype/modulation step is trainable: the descriptor extractor, one
grid head per scale (logits, offset field, latent covariance field), a
group-covariance head per scale and the SD head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .uncertainty import SD_FLOOR, sd_positive_transform

FROZEN = ("enc_w", "enc_b")


@dataclass
class FeatureMap:
    data: np.ndarray  # (l, l, C)
    l0: int

    @property
    def side(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[-1]

    @property
    def factor(self):
        return self.side / self.l0


def head_width(cfg):
    return 3 + 2 * cfg.latent_dim


def init_params(cfg: RunConfig, seed=None):
    """Seeded parameter set for ``cfg`` (frozen encoder included)."""
    rng = np.random.default_rng(cfg.model_seed if seed is None else seed)
    p, c = cfg.patch, cfg.channels
    l = cfg.l0 // p
    if cfg.l0 % p:
        raise ValueError(f"l0={cfg.l0} is not a multiple of patch={p}")
    if l % cfg.pool_side:
        raise ValueError(f"feature side {l} is not a multiple of pool_side={cfg.pool_side}")

    def dense(n_in, n_out, gain=2.0):
        return rng.normal(0.0, math.sqrt(gain / n_in), (n_in, n_out)), np.zeros(n_out)

    params = {}
    params["enc_w"] = encoder_weights(cfg.encoder_init, p, c, rng)
    params["enc_b"] = rng.normal(0.0, 0.1, c)
    ch = c
    if cfg.proj_channels:
        params["proj_w"], params["proj_b"] = dense(c, cfg.proj_channels)
        ch = cfg.proj_channels
    d = cfg.descriptor_dim
    params["desc1_w"], params["desc1_b"] = dense(cfg.pool_side**2 * ch, d)
    params["desc2_w"], params["desc2_b"] = dense(d, d)
    for s in cfg.scales:
        w, b = dense(d, s * s * head_width(cfg), gain=1.0)
        w = w.reshape(d, s * s, head_width(cfg))
        w[:, :, 1:3] *= 0.1  # start offsets near the cell centre
        w[:, :, 3:] *= 0.5
        params[f"head{s}_w"] = w.reshape(d, -1)
        params[f"head{s}_b"] = b
        for m in (2, 3):
            params[f"mkv{m}_{s}_w"], params[f"mkv{m}_{s}_b"] = dense(m * d, (2 * m) ** 2, gain=0.5)
    params["sd1_w"], params["sd1_b"] = dense(c, cfg.sd_hidden)
    params["sd2_w"], params["sd2_b"] = dense(cfg.sd_hidden, 1, gain=1.0)
    params["sd2_b"] = np.full(1, 0.5)
    # contiguous float64 everywhere so a reloaded checkpoint takes the
    # same BLAS paths (and round-off) as the fresh parameters
    return {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}


# frozen feature path ---------------------------------------------------------

def encoder_weights(kind, p, c, rng):
    """Frozen (p*p*3, c) patch projection.

    ``raw`` draws every weight independently.  ``smooth`` draws a random
    colour mix per channel times a blurred random spatial envelope, so a
    part shifted by a few pixels inside its patch keeps a similar
    response, which is what pretrained first-layer filters give a CNN.
    """
    fan_in = p * p * 3
    if kind == "raw":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, c))
    if kind != "smooth":
        raise ValueError(f"unknown encoder_init {kind!r}")
    colour = rng.normal(0.0, 1.0, (c, 3))
    env = rng.normal(0.0, 1.0, (c, p, p))
    k = np.fft.fftfreq(p)
    sigma = p / 4.0
    blur = np.exp(-2 * (math.pi * sigma) ** 2 * (k[:, None] ** 2 + k[None, :] ** 2))
    env = np.real(np.fft.ifft2(np.fft.fft2(env) * blur))
    env /= env.std(axis=(1, 2), keepdims=True)
    w = (env[..., None] * colour[:, None, None, :]).reshape(c, fan_in).T
    return w * math.sqrt(2.0) / np.linalg.norm(w, axis=0, keepdims=True)


def encode_image(image, params, cfg):
    """(l0, l0, 3) uint8 image -> FeatureMap of shape (l, l, C)."""
    img = np.asarray(image)
    l0, p = cfg.l0, cfg.patch
    if img.shape[:2] != (l0, l0):
        raise ValueError(f"encode_image: expected {l0}x{l0} image, got {img.shape[:2]}")
    x = img.astype(np.float64) / 255.0 - 0.5
    l = l0 // p
    patches = x.reshape(l, p, l, p, 3).transpose(0, 2, 1, 3, 4).reshape(l, l, p * p * 3)
    feat = np.maximum(patches @ params["enc_w"] + params["enc_b"], 0.0)
    if cfg.feature_norm == "center_l2":
        # per-image channel centring, then unit rms per position
        feat = feat - feat.mean(axis=(0, 1), keepdims=True)
        feat = feat * math.sqrt(feat.shape[-1]) / (np.linalg.norm(feat, axis=-1, keepdims=True) + 1e-6)
    elif cfg.feature_norm != "none":
        raise ValueError(f"unknown feature_norm {cfg.feature_norm!r}")
    return FeatureMap(feat, l0)


def cell_centres(side):
    c = np.arange(side) + 0.5
    xs, ys = np.meshgrid(c, c)
    return xs, ys


def gaussian_weights(side, u_f, xi, normalize=False):
    xs, ys = cell_centres(side)
    w = np.exp(-((xs - u_f[0]) ** 2 + (ys - u_f[1]) ** 2) / (2 * xi * xi))
    return w / w.sum() if normalize else w


def extract_keypoint_repr(fm, u, mode="gauss", xi=None, normalize=False):
    """Keypoint representation Φ from a feature map at pixel position u.

    Feature cell (i, j) is centred at (j + 0.5, i + 0.5) in feature-grid
    units; u is scaled into that frame by the downsize factor.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > fm.l0):
        raise ValueError(f"extract_keypoint_repr: position {u.tolist()} outside image")
    u_f = u * fm.factor
    side = fm.side
    if mode == "index":
        j, i = np.minimum(np.floor(u_f).astype(int), side - 1)
        return fm.data[i, j].copy()
    if mode == "bilinear":
        pts = np.array([[u_f[0] - 0.5, u_f[1] - 0.5]])
        out = [ad.bilinear_sample(fm.data[None, :, :, c], pts).value[0] for c in range(fm.channels)]
        return np.array(out)
    if mode == "gauss":
        if xi is None:
            xi = 14.0 * fm.factor
        if xi <= 0:
            raise ValueError("extract_keypoint_repr: xi must be positive")
        w = gaussian_weights(side, u_f, xi, normalize)
        return np.tensordot(w, fm.data, axes=([0, 1], [0, 1]))
    raise ValueError(f"extract_keypoint_repr: unknown mode {mode!r}")


def build_prototypes(reprs):
    """Mean representation per type; types with no entries are omitted."""
    return {t: np.mean(np.asarray(v), axis=0) for t, v in reprs.items() if len(v)}


def modulate(query_fm, proto):
    proto = np.asarray(proto)
    if proto.shape[-1] != query_fm.channels:
        raise ValueError(f"modulate: channel mismatch {query_fm.channels} vs {proto.shape[-1]}")
    return query_fm.data * proto


# trainable path -------------------------------------------------------------

def _dense(x, params, name):
    return ad.matmul(x, params[name + "_w"]) + params[name + "_b"]


def extract_descriptor(attentive, params, cfg, taps=None):
    """(M, l, l, C) attentive maps -> (M, D) descriptors (Var)."""
    a = ad.const(attentive)
    if cfg.proj_channels:
        a = ad.relu(_dense(a, params, "proj"))
    pooled = ad.block_average_pool(a, cfg.pool_side)
    flat = ad.reshape(pooled, (a.shape[0], -1))
    pre1 = _dense(flat, params, "desc1")
    if taps is not None:
        taps["pre1"] = pre1
    h = ad.relu(pre1)
    return ad.relu(_dense(h, params, "desc2"))


@dataclass
class GridHeadOutput:
    scale: int
    logits: ad.Var  # (M, S*S)
    offsets: ad.Var  # (M, S*S, 2) in (-1, 1)
    latent: ad.Var  # (M, S*S, 2d)

    @property
    def probs(self):
        return ad.softmax(self.logits, -1)


def predict_grid(psi, scale, params, cfg):
    out = _dense(psi, params, f"head{scale}")
    m = psi.shape[0]
    out = ad.reshape(out, (m, scale * scale, head_width(cfg)))
    logits = ad.reshape(out[:, :, 0], (m, scale * scale))
    offsets = ad.tanh(out[:, :, 1:3])
    latent = out[:, :, 3:]
    return GridHeadOutput(scale, logits, offsets, latent)


def latent_to_factor(latent_rows, cfg):
    """(M, 2d) latent vectors -> (M, 2, d) precision factors Q."""
    return ad.reshape(latent_rows, (latent_rows.shape[0], 2, cfg.latent_dim))


def predict_group_precision(descriptors, scale, params, cfg):
    """(G, m, D) grouped descriptors -> (G, 2m, 2m) factors Q_mkv."""
    g, m = descriptors.shape[0], descriptors.shape[1]
    if m not in (2, 3):
        raise ValueError(f"predict_group_precision: group size must be 2 or 3, got {m}")
    flat = ad.reshape(descriptors, (g, m * descriptors.shape[2]))
    q = _dense(flat, params, f"mkv{m}_{scale}")
    return ad.reshape(q, (g, 2 * m, 2 * m))


def sd_head(features, params):
    """(B, l, l, C) frozen features -> (B, l, l) SD maps in [1e-3, 1]."""
    h = ad.relu(_dense(ad.const(features), params, "sd1"))
    raw = _dense(h, params, "sd2")
    raw = ad.reshape(raw, raw.shape[:-1])
    return ad.clip(sd_positive_transform(raw, 1e-4), SD_FLOOR, 1.0)


def sample_sd(sd_maps, which, points_px, l0):
    """Bilinear SD lookup at pixel points; ``which`` picks the map per point."""
    side = sd_maps.shape[-1]
    pts = np.asarray(points_px, dtype=np.float64) * side / l0 - 0.5
    maps = sd_maps[np.asarray(which, dtype=np.int64)]
    return ad.bilinear_sample(maps, pts)


# auxiliary keypoints ------------------------------------------------------------

def generate_aux_keypoints(kps, visible, paths, nodes, mask=None):
    """Interpolate along each path whose endpoints are visible.

    Returns a list of (path_index, node, (x, y)); nodes landing on the
    background of ``mask`` are dropped.
    """
    out = []
    if np.count_nonzero(visible) < 2:
        return out
    kps = np.asarray(kps, dtype=np.float64)
    for pi, (a, b) in enumerate(paths):
        if not (visible[a] and visible[b]):
            continue
        for t in nodes:
            pt = kps[a] + t * (kps[b] - kps[a])
            if mask is not None:
                xi, yi = int(pt[0]), int(pt[1])
                h, w = mask.shape
                if not (0 <= xi < w and 0 <= yi < h and mask[yi, xi]):
                    continue
            out.append((pi, t, (float(pt[0]), float(pt[1]))))
    return out


def make_groups(sequence, m):
    """Sliding windows of width m (stride 1) over an ordered path sequence."""
    if m not in (1, 2, 3):
        raise ValueError(f"make_groups: group size must be 1, 2 or 3, got {m}")
    if m == 1 or len(sequence) < m:
        return []
    return [tuple(sequence[i:i + m]) for i in range(len(sequence) - m + 1)]


def choose_paths(visible, mode, limb_paths, num_paths, rng):
    """Interpolation paths for an episode (default | rand | exhaust)."""
    vis = [int(i) for i in np.flatnonzero(visible)]
    if mode == "default":
        return [tuple(p) for p in limb_paths]
    pairs = [(a, b) for i, a in enumerate(vis) for b in vis[i + 1:]]
    if mode == "exhaust":
        return pairs
    if mode == "rand":
        if not pairs:
            return []
        idx = rng.choice(len(pairs), size=min(num_paths, len(pairs)), replace=False)
        return [pairs[i] for i in sorted(idx)]
    raise ValueError(f"unknown path mode {mode!r}")
