"""Episode assembly, the training objective, detection and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .grid import ScalePrediction, decode_grid, encode_grid_batch, fuse_predictions
from .synth import DEFAULT_LIMB_PATHS, flip_instance
from .uncertainty import (fuse_covariances, precision_from_factor, uc_loss, uncertainty_ellipse,
                          vanilla_offset_loss, weighted_cls_loss_logits)

log = logging.getLogger(__name__)


class FeatureCache:
    """Frozen encoder outputs keyed by image identity (and flip)."""

    def __init__(self, params, cfg):
        self.params, self.cfg = params, cfg
        self._cache = {}

    def __call__(self, ai):
        key = (id(ai.image), ai.name)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not ai.image:
            hit = (ai.image, M.encode_image(ai.image, self.params, self.cfg))
            self._cache[key] = hit
        return hit[1]


class FlipCache:
    def __init__(self):
        self._cache = {}

    def __call__(self, ai):
        key = id(ai)
        hit = self._cache.get(key)
        if hit is None:
            hit = (ai, flip_instance(ai))
            self._cache[key] = hit
        return hit[1]


@dataclass
class EpisodeBatch:
    protos: np.ndarray  # (M, C)
    query_pos: np.ndarray  # (M, 2)
    support_pos: np.ndarray  # (M, 2)
    support_idx: np.ndarray  # (M,) which support image the SD is read from
    is_aux: np.ndarray  # (M,) bool
    types: list  # keypoint type (or (path, node) for aux) per row
    groups: list = field(default_factory=list)  # tuples of row indices
    query_feat: np.ndarray | None = None
    image_feats: np.ndarray | None = None  # (K + 1, l, l, C), query last

    @property
    def size(self):
        return len(self.protos)


def _repr(fm, u, cfg):
    xi = cfg.xi_pixels * fm.factor
    return M.extract_keypoint_repr(fm, u, cfg.extraction, xi, cfg.normalize_pooling)


def prepare_episode(episode, feats, cfg, rng=None, supervised=True, limb_paths=DEFAULT_LIMB_PATHS,
                    aux=None):
    """Collect prototypes, targets, auxiliary points and groups.

    Keypoints invisible in the query are dropped when ``supervised``.
    """
    supports, query = episode.supports, episode.query
    sfeats = [feats(s) for s in supports]
    qfeat = feats(query)
    protos, qpos, spos, sidx, is_aux, types = [], [], [], [], [], []
    row_of_type = {}
    for t in episode.types:
        avail = [k for k, s in enumerate(supports) if s.visible[t]]
        if not avail or (supervised and not query.visible[t]):
            continue
        reps = [_repr(sfeats[k], supports[k].keypoints[t], cfg) for k in avail]
        row_of_type[t] = len(protos)
        protos.append(np.mean(reps, axis=0))
        qpos.append(query.keypoints[t])
        spos.append(supports[avail[0]].keypoints[t])
        sidx.append(avail[0])
        is_aux.append(False)
        types.append(int(t))
    groups = []
    if supervised and (cfg.aux if aux is None else aux):
        both = query.visible.copy()
        for s in supports:
            both &= s.visible
        allowed = np.zeros_like(both)
        allowed[list(episode.types)] = True
        both &= allowed
        paths = M.choose_paths(both, cfg.path_mode, limb_paths, cfg.num_paths,
                               rng if rng is not None else np.random.default_rng(0))
        for pi, (a, b) in enumerate(paths):
            if not (both[a] and both[b]):
                continue
            seq = [row_of_type[a]] if a in row_of_type else []
            for t_node in cfg.nodes:
                qp = query.keypoints[a] + t_node * (query.keypoints[b] - query.keypoints[a])
                if not _on_mask(query.mask, qp):
                    continue
                sps = [s.keypoints[a] + t_node * (s.keypoints[b] - s.keypoints[a]) for s in supports]
                ok = [k for k, sp in enumerate(sps) if _on_mask(supports[k].mask, sp)]
                if not ok:
                    continue
                reps = [_repr(sfeats[k], sps[k], cfg) for k in ok]
                seq.append(len(protos))
                protos.append(np.mean(reps, axis=0))
                qpos.append(qp)
                spos.append(sps[ok[0]])
                sidx.append(ok[0])
                is_aux.append(True)
                types.append((pi, t_node))
            if b in row_of_type:
                seq.append(row_of_type[b])
            groups.extend(M.make_groups(seq, cfg.group_size))
    c = qfeat.channels
    return EpisodeBatch(
        np.asarray(protos, dtype=np.float64).reshape(-1, c),
        np.asarray(qpos, dtype=np.float64).reshape(-1, 2),
        np.asarray(spos, dtype=np.float64).reshape(-1, 2),
        np.asarray(sidx, dtype=np.int64),
        np.asarray(is_aux, dtype=bool),
        types,
        groups,
        qfeat.data,
        np.stack([f.data for f in sfeats] + [qfeat.data]),
    )


def _on_mask(mask, pt):
    h, w = mask.shape
    x, y = int(pt[0]), int(pt[1])
    return 0 <= x < w and 0 <= y < h and bool(mask[y, x])


def descriptors(batch, params, cfg, taps=None):
    attentive = batch.query_feat[None] * batch.protos[:, None, None, :]
    return M.extract_descriptor(attentive, params, cfg, taps)


def _mean_rows(v, rows):
    if not np.any(rows):
        return None
    return ad.mean(ad.index_select(v, np.flatnonzero(rows)))


def episode_loss(params, batch, cfg):
    """Total loss (Var) and a dict of per-term floats.

    L = γ1·L_ms + γ2·L̃_ms + γ3·L_ms-mk, each term averaged over scales.
    """
    if batch.size == 0:
        raise ValueError("episode_loss: no supervisable keypoints")
    l0 = cfg.l0
    psi = descriptors(batch, params, cfg)
    n = batch.size
    main_rows, aux_rows = ~batch.is_aux, batch.is_aux
    w = None
    if cfg.uncertainty:
        sd = M.sd_head(batch.image_feats, params)
        k = batch.image_feats.shape[0] - 1
        ws = M.sample_sd(sd, batch.support_idx, batch.support_pos, l0)
        wq = M.sample_sd(sd, np.full(n, k), batch.query_pos, l0)
        w = (ws + wq) * 0.5
    terms = {"main": [], "aux": [], "group": []}
    x_by_scale = {}
    for s in cfg.scales:
        head = M.predict_grid(psi, s, params, cfg)
        labels, vstar = encode_grid_batch(batch.query_pos, s, l0)
        x = ad.gather_cell(head.offsets, labels)
        x_by_scale[s] = (x, vstar)
        if cfg.uncertainty:
            q = M.latent_to_factor(ad.gather_cell(head.latent, labels), cfg)
            omega = precision_from_factor(q, cfg.eps)
            loc = uc_loss(x, vstar, omega, ad.reshape(w, (n, 1)), cfg.beta)
            cls = weighted_cls_loss_logits(head.logits, labels, w)
        else:
            loc = vanilla_offset_loss(x, vstar)
            cls = weighted_cls_loss_logits(head.logits, labels)
        per_kp = loc * cfg.alpha_uc + cls * cfg.alpha_cls
        main = _mean_rows(per_kp, main_rows)
        if main is not None:
            terms["main"].append(main)
        aux = _mean_rows(per_kp, aux_rows)
        if aux is not None:
            terms["aux"].append(aux)
        if cfg.uncertainty and batch.groups and cfg.group_size > 1:
            terms["group"].append(_group_term(psi, x, vstar, w, batch.groups, s, params, cfg))
    total = ad.const(0.0)
    report = {}
    for name, gamma in (("main", cfg.gamma_main), ("aux", cfg.gamma_aux), ("group", cfg.gamma_group)):
        vals = terms[name]
        if not vals:
            report[name] = 0.0
            continue
        term = vals[0]
        for v in vals[1:]:
            term = term + v
        term = term * (1.0 / len(cfg.scales))
        report[name] = float(term.value)
        total = total + term * gamma
    report["total"] = float(total.value)
    return total, report


def _group_term(psi, x, vstar, w, groups, scale, params, cfg):
    idx = np.asarray(groups, dtype=np.int64)  # (G, m)
    g, m = idx.shape
    desc = ad.index_select(psi, idx)  # (G, m, D)
    q = M.predict_group_precision(desc, scale, params, cfg)
    omega = precision_from_factor(q, cfg.eps)
    xs = ad.reshape(ad.index_select(x, idx), (g, 2 * m))
    vs = vstar[idx].reshape(g, 2 * m)
    ws = ad.index_select(w, idx)
    # per keypoint inside the group, so the term is on the scale of L_ms
    return ad.mean(uc_loss(xs, vs, omega, ws, cfg.beta)) * (1.0 / m)


# inference -----------------------------------------------------------------------

@dataclass
class KeypointEstimate:
    type: int
    position: np.ndarray  # (2,) pixels
    cov: np.ndarray  # (2, 2) pixels²
    per_scale: list

    @property
    def ellipse(self):
        return uncertainty_ellipse(0.5 * (self.cov + self.cov.T))


def detect_batch(params, batch, cfg):
    """Predict one KeypointEstimate per row of ``batch``."""
    psi = descriptors(batch, params, cfg)
    n = batch.size
    per_scale = []
    for s in cfg.scales:
        head = M.predict_grid(psi, s, params, cfg)
        cells = np.argmax(head.logits.value, axis=1)
        offsets = head.offsets.value[np.arange(n), cells]
        q = head.latent.value[np.arange(n), cells].reshape(n, 2, cfg.latent_dim)
        omega = q @ np.swapaxes(q, -1, -2) / cfg.latent_dim + cfg.eps * np.eye(2)
        sigma = np.linalg.inv(omega)
        sigma = 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
        per_scale.append((s, cells, offsets, sigma))
    out = []
    for i in range(n):
        preds = [ScalePrediction(s, (int(c[i] % s), int(c[i] // s)), tuple(o[i]), sg[i])
                 for s, c, o, sg in per_scale]
        u = fuse_predictions(preds, cfg.l0)
        cov = fuse_covariances([(p.cov, p.scale) for p in preds], cfg.l0)
        out.append(KeypointEstimate(batch.types[i], u, cov, preds))
    return out


def detect(params, cfg, supports, query_image, types, feats=None):
    """Detect ``types`` on ``query_image`` from annotated supports.

    Types with no visible support keypoint are reported as None.
    """
    from .synth import AnnotatedImage, Episode

    feats = feats or FeatureCache(params, cfg)
    if not isinstance(query_image, AnnotatedImage):
        l0 = cfg.l0
        n_types = len(supports[0].keypoints)
        query_image = AnnotatedImage(np.asarray(query_image), np.zeros((n_types, 2)),
                                     np.zeros(n_types, bool), (0, 0, l0, l0),
                                     np.ones((l0, l0), bool), -1, "query")
    ep = Episode(list(supports), query_image, list(types))
    batch = prepare_episode(ep, feats, cfg, supervised=False)
    est = {e.type: e for e in detect_batch(params, batch, cfg)} if batch.size else {}
    return [est.get(int(t)) for t in types]


def sd_weights(params, batch, cfg):
    sd = M.sd_head(batch.image_feats, params)
    k = batch.image_feats.shape[0] - 1
    n = batch.size
    ws = M.sample_sd(sd, batch.support_idx, batch.support_pos, cfg.l0).value
    wq = M.sample_sd(sd, np.full(n, k), batch.query_pos, cfg.l0).value
    return 0.5 * (ws + wq)


def eval_types(cfg, split):
    if cfg.eval_types == "novel":
        return list(split.novel_types)
    if cfg.eval_types == "base":
        return list(split.base_types)
    return sorted(split.base_types + split.novel_types)


def evaluate(params, cfg, ds, num_episodes=None, seed=None, types=None, role="test", feats=None):
    """PCK over sampled test episodes plus uncertainty/distinctiveness records."""
    from .synth import sample_episode

    num_episodes = cfg.eval_episodes if num_episodes is None else num_episodes
    if num_episodes <= 0:
        raise ValueError("evaluate: need at least one episode")
    seed = cfg.eval_seed if seed is None else seed
    types = eval_types(cfg, ds.split) if types is None else list(types)
    feats = feats or FeatureCache(params, cfg)
    rng = np.random.default_rng(seed)
    ep_scores, per_type = [], {t: [] for t in types}
    records = []  # (type, d', J', w)
    for _ in range(num_episodes):
        ep = sample_episode(ds, types, cfg.k_shot, cfg.episode_mode, rng, role=role)
        batch = prepare_episode(ep, feats, cfg, supervised=True, aux=False)
        if batch.size == 0:
            continue
        est = detect_batch(params, batch, cfg)
        w = sd_weights(params, batch, cfg)
        q = ep.query
        thr_base = max(q.bbox_size)
        hits = []
        for i, e in enumerate(est):
            d = float(np.linalg.norm(e.position - batch.query_pos[i]))
            ok = d < cfg.tau * thr_base
            hits.append(ok)
            per_type[e.type].append(ok)
            records.append((e.type, d / thr_base, e.ellipse.strength / thr_base, float(w[i])))
        ep_scores.append(float(np.mean(hits)))
    scores = np.asarray(ep_scores)
    mean = float(scores.mean()) if len(scores) else float("nan")
    half = float(1.96 * scores.std(ddof=1) / math.sqrt(len(scores))) if len(scores) > 1 else float("nan")
    return {
        "pck": mean,
        "pck_ci95": half,
        "episodes": len(scores),
        "per_type": {str(t): (float(np.mean(v)) if v else None) for t, v in per_type.items()},
        "records": records,
    }


def binned_trend(d_norm, values, width=0.05):
    """Average (d', value) per d' interval of ``width``."""
    d_norm, values = np.asarray(d_norm), np.asarray(values)
    if len(d_norm) == 0:
        return []
    bins = np.floor(d_norm / width).astype(int)
    out = []
    for b in np.unique(bins):
        sel = bins == b
        out.append({"bin": [round(b * width, 10), round((b + 1) * width, 10)], "count": int(sel.sum()),
                    "d_mean": float(d_norm[sel].mean()), "value_mean": float(values[sel].mean())})
    return out


def spearman(x, y):
    from scipy.stats import spearmanr

    if len(x) < 2:
        return float("nan")
    return float(spearmanr(x, y).statistic)


def compute_ukp(params, cfg, ds, num_episodes, seed, types=None, role="train", feats=None):
    """Average support keypoint prototypes over sampled episodes."""
    from .synth import sample_episode

    types = sorted(ds.split.base_types + ds.split.novel_types) if types is None else list(types)
    feats = feats or FeatureCache(params, cfg)
    rng = np.random.default_rng(seed)
    sums = {}
    for _ in range(num_episodes):
        ep = sample_episode(ds, types, cfg.k_shot, cfg.episode_mode, rng, role=role)
        for t, proto in episode_prototypes(ep, feats, cfg).items():
            sums.setdefault(t, []).append(proto)
    return {t: np.mean(v, axis=0) for t, v in sums.items()}


def episode_prototypes(ep, feats, cfg):
    reprs = {}
    for t in ep.types:
        reprs[t] = [_repr(feats(s), s.keypoints[t], cfg) for s in ep.supports if s.visible[t]]
    return M.build_prototypes(reprs)
