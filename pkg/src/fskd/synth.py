"""Procedural articulated creatures: templates, rendering, datasets, episodes.

Creatures are seen from above: an elliptical torso, a head on a short
neck, a tail and four two-segment legs.  Twelve keypoint types are
annotated.  The knees are the natural "novel" types since they sit
between annotated body parts, much like knees and eyes on real animals.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

KEYPOINT_NAMES = (
    "nose", "neck", "tail_base", "tail_tip",
    "l_front_paw", "r_front_paw", "l_back_paw", "r_back_paw",
    "l_front_knee", "r_front_knee", "l_back_knee", "r_back_knee",
)
NUM_TYPES = len(KEYPOINT_NAMES)
FLIP_PAIRS = ((4, 5), (6, 7), (8, 9), (10, 11))
DEFAULT_BASE = tuple(range(8))
DEFAULT_NOVEL = (8, 9, 10, 11)

# internal (unannotated) joints, indexed after the keypoints
L_SHOULDER, R_SHOULDER, L_HIP, R_HIP, HEAD, TAIL_MID = range(NUM_TYPES, NUM_TYPES + 6)
JOINT_NAMES = KEYPOINT_NAMES + ("l_shoulder", "r_shoulder", "l_hip", "r_hip", "head", "tail_mid")

PARENTS = {
    1: None, 2: 1, HEAD: 1, 0: HEAD, TAIL_MID: 2, 3: TAIL_MID,
    L_SHOULDER: 1, R_SHOULDER: 1, L_HIP: 2, R_HIP: 2,
    8: L_SHOULDER, 4: 8, 9: R_SHOULDER, 5: 9,
    10: L_HIP, 6: 10, 11: R_HIP, 7: 11,
}

# limb paths between annotated keypoints used for auxiliary interpolation
DEFAULT_LIMB_PATHS = ((1, 4), (1, 5), (2, 6), (2, 7), (0, 1), (1, 2))

ROTATION_CHAIN = [1, 2, HEAD, 0, TAIL_MID, 3, L_SHOULDER, R_SHOULDER, L_HIP, R_HIP,
                  8, 4, 9, 5, 10, 6, 11, 7]


def _rng(*keys):
    """Deterministic generator keyed by a tuple of ints/strings."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class SpeciesTemplate:
    species: int
    rest: np.ndarray  # (num joints, 2) canonical positions, body axis along -y
    parents: dict
    limb_paths: tuple
    widths: dict  # part name -> thickness / radii
    colors: dict  # part name -> RGB in [0, 1]

    @property
    def num_keypoints(self):
        return NUM_TYPES


def make_template(seed):
    """Deterministic species template from ``seed``."""
    rng = _rng("template", seed)
    torso = rng.uniform(16, 24)
    neck_len = rng.uniform(4, 8)
    head_len = rng.uniform(5, 9)
    tail_len = rng.uniform(8, 18)
    shoulder_w = rng.uniform(4, 7)
    hip_w = rng.uniform(4, 7)
    thigh_f, shin_f = rng.uniform(7, 12), rng.uniform(6, 11)
    thigh_b, shin_b = rng.uniform(7, 13), rng.uniform(6, 12)
    splay_f, splay_b = rng.uniform(0.5, 1.1), rng.uniform(0.5, 1.1)
    bend = rng.uniform(0.5, 1.0)

    j = np.zeros((len(JOINT_NAMES), 2))
    j[1] = (0, -torso / 2)
    j[2] = (0, torso / 2)
    j[HEAD] = (0, -torso / 2 - neck_len)
    j[0] = (0, -torso / 2 - neck_len - head_len)
    j[TAIL_MID] = (rng.uniform(-3, 3), torso / 2 + tail_len / 2)
    j[3] = (rng.uniform(-5, 5), torso / 2 + tail_len)
    j[L_SHOULDER] = (-shoulder_w, -torso / 2 + 2)
    j[R_SHOULDER] = (shoulder_w, -torso / 2 + 2)
    j[L_HIP] = (-hip_w, torso / 2 - 2)
    j[R_HIP] = (hip_w, torso / 2 - 2)

    def leg(root, side, splay, thigh, shin, forward):
        # thigh points outward (and forward/backward), shin bends back toward the body axis
        ang = (-forward) * splay
        d1 = np.array([side * math.cos(ang), math.sin(ang)])
        knee = j[root] + thigh * d1
        ang2 = ang + side * forward * bend
        d2 = np.array([side * math.cos(ang2), math.sin(ang2)])
        return knee, knee + shin * d2

    j[8], j[4] = leg(L_SHOULDER, -1, splay_f, thigh_f, shin_f, 1)
    j[9], j[5] = leg(R_SHOULDER, 1, splay_f, thigh_f, shin_f, 1)
    j[10], j[6] = leg(L_HIP, -1, splay_b, thigh_b, shin_b, -1)
    j[11], j[7] = leg(R_HIP, 1, splay_b, thigh_b, shin_b, -1)

    base_hue = rng.uniform(0, 1)
    leg_hue = base_hue + rng.uniform(0.1, 0.2)
    colors = {
        "torso": _hsv(base_hue, rng.uniform(0.4, 0.8), rng.uniform(0.5, 0.9)),
        "head": _hsv(base_hue + rng.uniform(-0.1, 0.1), rng.uniform(0.3, 0.8), rng.uniform(0.6, 1.0)),
        # per-leg shades (l_front, r_front, l_back, r_back) so limbs are tellable apart
        "legs": [_hsv(leg_hue + 0.25 * i, rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9)) for i in range(4)],
        "tail": _hsv(base_hue + rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.8), rng.uniform(0.4, 0.8)),
        "paw": _hsv(rng.uniform(0, 1), rng.uniform(0.0, 0.4), rng.uniform(0.05, 0.3)),
        "knee": _hsv(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.8, 1.0)),
        "nose": _hsv(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.1, 0.4)),
    }
    widths = {
        "torso": rng.uniform(6, 10), "head": rng.uniform(3.5, 5.5), "neck": rng.uniform(2, 3.5),
        "leg": rng.uniform(1.6, 2.6), "tail": rng.uniform(1.0, 2.2), "paw": rng.uniform(3.0, 4.0),
        "knee": rng.uniform(2.8, 3.6), "nose": rng.uniform(2.2, 3.0),
    }
    return SpeciesTemplate(seed, j, dict(PARENTS), DEFAULT_LIMB_PATHS, widths, colors)


def _hsv(h, s, v):
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0), 1), min(max(v, 0), 1)))


@dataclass
class AnnotatedImage:
    image: np.ndarray  # (l0, l0, 3) uint8
    keypoints: np.ndarray  # (NUM_TYPES, 2) float, (x, y) pixels
    visible: np.ndarray  # (NUM_TYPES,) bool
    bbox: tuple  # (x0, y0, w, h)
    mask: np.ndarray  # (l0, l0) bool
    species: int
    name: str = ""

    @property
    def l0(self):
        return self.image.shape[0]

    @property
    def bbox_size(self):
        return self.bbox[2], self.bbox[3]


def _pose(template, rng, l0, fill=(0.7, 0.9), max_turn=0.5):
    """Articulate the template: per-joint rotations, then a similarity
    that turns the body by at most ``max_turn`` radians and scales it so
    its larger extent covers a ``fill`` fraction of the frame, as in
    object-centred crops."""
    rest = template.rest
    pos = rest.copy()
    offsets = {}
    for jt in ROTATION_CHAIN:
        parent = template.parents[jt]
        if parent is None:
            continue
        offsets[jt] = rest[jt] - rest[parent]
    angles = dict.fromkeys(range(len(rest)), 0.0)
    limb_range = {8: 0.45, 9: 0.45, 10: 0.45, 11: 0.45, 4: 0.5, 5: 0.5, 6: 0.5, 7: 0.5,
                  0: 0.3, HEAD: 0.35, TAIL_MID: 0.5, 3: 0.6}
    for jt in ROTATION_CHAIN:
        parent = template.parents[jt]
        if parent is None:
            continue
        inherited = angles[parent]
        own = rng.uniform(-1, 1) * limb_range.get(jt, 0.0)
        angles[jt] = inherited + own
        c, s = math.cos(angles[jt]), math.sin(angles[jt])
        stretch = rng.uniform(0.9, 1.1) if jt in limb_range else 1.0
        off = offsets[jt] * stretch
        pos[jt] = pos[parent] + (c * off[0] - s * off[1], s * off[0] + c * off[1])
    theta = rng.uniform(-max_turn, max_turn)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    pos = (pos - pos.mean(0)) @ rot.T
    margin = 4.0 * l0 / 96.0
    extent = max(float(np.ptp(pos[:, 0])), float(np.ptp(pos[:, 1])), 1e-6)
    scale = rng.uniform(*fill) * (l0 - 2 * margin) / extent
    pos = pos * scale
    lo, hi = pos.min(0), pos.max(0)
    span_lo = margin - lo
    span_hi = l0 - margin - hi
    shift = np.array([rng.uniform(min(a, b), max(a, b)) for a, b in zip(span_lo, span_hi)])
    return pos + shift, scale


def _segment_d2(px, py, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    dx, dy = px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1])
    return dx * dx + dy * dy


def _ellipse_in(px, py, a, b, half_width):
    center = 0.5 * (a + b)
    axis = b - a
    length = max(float(np.hypot(*axis)), 1e-9)
    ux, uy = axis / length
    dx, dy = px - center[0], py - center[1]
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return (along / (0.5 * length + half_width * 0.3)) ** 2 + (across / half_width) ** 2 <= 1.0


def _collinear(pts):
    centered = pts - pts.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return sv[1] < 1e-3 * max(sv[0], 1e-9)


def render_instance(template, pose_seed, l0=96, occlusion=0.14, max_retries=10, fill=(0.7, 0.9)):
    """Draw one posed creature with keypoints, mask and bbox."""
    if l0 < 64:
        raise ValueError(f"render_instance: l0 must be >= 64, got {l0}")
    rng = _rng("pose", template.species, pose_seed)
    for _ in range(max_retries):
        joints, scale = _pose(template, rng, l0, fill)
        if not _collinear(joints[:NUM_TYPES]):
            break
    else:
        raise RuntimeError("render_instance: could not sample a non-degenerate pose")

    ys, xs = np.mgrid[0:l0, 0:l0]
    px, py = xs + 0.5, ys + 0.5

    # background: smooth colour gradient plus texture noise
    bg_a, bg_b = rng.uniform(0.35, 0.65, 3), rng.uniform(0.35, 0.65, 3)
    ang = rng.uniform(0, 2 * math.pi)
    ramp = ((px * math.cos(ang) + py * math.sin(ang)) / l0 + 1) / 2
    img = bg_a * (1 - ramp[..., None]) + bg_b * ramp[..., None]
    img += rng.normal(0, 0.04, img.shape)

    w = {k: v * scale for k, v in template.widths.items()}
    col = template.colors
    parts = []  # (name, mask, colour, owned keypoint ids)

    def capsule(a, b, r):
        return _segment_d2(px, py, joints[a], joints[b]) <= r * r

    def disc(a, r):
        return (px - joints[a][0]) ** 2 + (py - joints[a][1]) ** 2 <= r * r

    for leg, (hip, knee, paw) in ((2, (L_HIP, 10, 6)), (3, (R_HIP, 11, 7)),
                                  (0, (L_SHOULDER, 8, 4)), (1, (R_SHOULDER, 9, 5))):
        parts.append(("leg", capsule(hip, knee, w["leg"]) | capsule(knee, paw, w["leg"]),
                      col["legs"][leg], {knee, paw}))
        # joint markers carry a tint of their own leg
        shade = col["legs"][leg]
        parts.append(("knee", disc(knee, w["knee"]), 0.5 * col["knee"] + 0.5 * shade, {knee}))
        parts.append(("paw", disc(paw, w["paw"]), 0.6 * col["paw"] + 0.4 * shade, {paw}))
    parts.append(("tail", capsule(2, TAIL_MID, w["tail"]) | capsule(TAIL_MID, 3, w["tail"] * 0.7),
                  col["tail"], {2, 3}))
    parts.append(("tuft", disc(3, w["tail"] * 1.8), col["tail"], {3}))
    parts.append(("torso", _ellipse_in(px, py, joints[1], joints[2], w["torso"]), col["torso"], {1, 2}))
    parts.append(("neck", capsule(1, HEAD, w["neck"]), col["head"], {1}))
    parts.append(("head", _ellipse_in(px, py, joints[HEAD], joints[0], w["head"]), col["head"], {0, 1}))
    parts.append(("nose", disc(0, w["nose"]), col["nose"], {0}))

    kp = joints[:NUM_TYPES].copy()
    covered = np.zeros(NUM_TYPES, dtype=bool)
    mask = np.zeros((l0, l0), dtype=bool)
    stripe = 0.08 * np.sin((px + py) * rng.uniform(0.6, 1.2))[..., None]
    for name, m, c, owns in parts:
        img[m] = (c + stripe)[m] if name in ("torso", "tail") else c
        mask |= m
        for k in range(NUM_TYPES):
            if k in owns:
                covered[k] = False
                continue
            xi, yi = int(kp[k, 0]), int(kp[k, 1])
            if 0 <= xi < l0 and 0 <= yi < l0 and m[yi, xi]:
                covered[k] = True

    # occluders: background-coloured blobs laid over random joints
    n_occ = rng.poisson(occlusion * 8)
    for _ in range(n_occ):
        target = kp[rng.integers(NUM_TYPES)]
        r = rng.uniform(4, 9) * scale
        centre = target + rng.normal(0, 3, 2)
        occ = (px - centre[0]) ** 2 + (py - centre[1]) ** 2 <= r * r
        img[occ] = rng.uniform(0.2, 0.8, 3)
        mask &= ~occ
        for k in range(NUM_TYPES):
            xi, yi = int(kp[k, 0]), int(kp[k, 1])
            if 0 <= xi < l0 and 0 <= yi < l0 and occ[yi, xi]:
                covered[k] = True

    inside = (kp[:, 0] >= 0) & (kp[:, 0] < l0) & (kp[:, 1] >= 0) & (kp[:, 1] < l0)
    visible = inside & ~covered
    for k in np.flatnonzero(visible):
        if not mask[int(kp[k, 1]), int(kp[k, 0])]:
            visible[k] = False

    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    raster = np.round(img * 255).astype(np.uint8)
    bbox = _bbox(mask, kp[visible])
    return AnnotatedImage(raster, kp, visible, bbox, mask, template.species)


def _bbox(mask, pts):
    ys, xs = np.nonzero(mask)
    x0, x1 = float(xs.min()), float(xs.max() + 1)
    y0, y1 = float(ys.min()), float(ys.max() + 1)
    if len(pts):
        x0, y0 = min(x0, pts[:, 0].min()), min(y0, pts[:, 1].min())
        x1, y1 = max(x1, pts[:, 0].max()), max(y1, pts[:, 1].max())
    return (x0, y0, x1 - x0, y1 - y0)


def flip_instance(ai):
    """Horizontal flip: x -> l0 - x, left/right keypoint types swapped."""
    l0 = ai.l0
    kp = ai.keypoints.copy()
    kp[:, 0] = l0 - kp[:, 0]
    vis = ai.visible.copy()
    for a, b in FLIP_PAIRS:
        kp[[a, b]] = kp[[b, a]]
        vis[[a, b]] = vis[[b, a]]
    x0, y0, w, h = ai.bbox
    return AnnotatedImage(ai.image[:, ::-1].copy(), kp, vis, (l0 - x0 - w, y0, w, h),
                          ai.mask[:, ::-1].copy(), ai.species, ai.name)


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    num_species: int = 10
    test_species: int = 2
    val_species: int = 0
    train_images: int = 2000
    test_images_per_species: int = 100
    l0: int = 96
    base_types: tuple = DEFAULT_BASE
    novel_types: tuple = DEFAULT_NOVEL
    setting: str = "unseen"  # unseen | seen
    leave_one_out: bool = False
    occlusion: float = 0.14


@dataclass
class DatasetSplit:
    train_species: list
    val_species: list
    test_species: list
    base_types: list
    novel_types: list
    limb_paths: list

    def check(self):
        if set(self.base_types) & set(self.novel_types):
            raise ValueError("split: base and novel keypoint types overlap")
        if sorted(self.base_types + self.novel_types) != list(range(NUM_TYPES)):
            raise ValueError("split: every keypoint type must be base or novel exactly once")

    def to_dict(self):
        return {"species_partition": {"train": self.train_species, "val": self.val_species,
                                      "test": self.test_species},
                "base_types": self.base_types, "novel_types": self.novel_types,
                "limb_paths": [list(p) for p in self.limb_paths],
                "type_names": list(KEYPOINT_NAMES)}

    @classmethod
    def from_dict(cls, d):
        sp = d["species_partition"]
        split = cls(sp["train"], sp.get("val", []), sp["test"], list(d["base_types"]),
                    list(d["novel_types"]), [tuple(p) for p in d["limb_paths"]])
        split.check()
        return split


@dataclass
class Dataset:
    images: list
    split: DatasetSplit
    train_ids: list
    test_ids: list
    val_ids: list = field(default_factory=list)
    templates: dict = field(default_factory=dict)

    def pool(self, role):
        return {"train": self.train_ids, "test": self.test_ids, "val": self.val_ids}[role]


def _species_partition(cfg):
    species = list(range(cfg.num_species))
    if cfg.setting == "seen":
        return species, [], species
    n_test, n_val = cfg.test_species, cfg.val_species
    test = species[-n_test:]
    val = species[-n_test - n_val:-n_test] if n_val else []
    train = species[: cfg.num_species - n_test - n_val]
    return train, val, test


def build_dataset(cfg, seed, out_dir=None):
    """Generate all images; optionally persist them under ``out_dir``."""
    if set(cfg.base_types) & set(cfg.novel_types):
        raise ValueError("build_dataset: base and novel keypoint types overlap")
    train_sp, val_sp, test_sp = _species_partition(cfg)
    split = DatasetSplit(train_sp, val_sp, test_sp, list(cfg.base_types), list(cfg.novel_types),
                         list(DEFAULT_LIMB_PATHS))
    split.check()
    templates = {s: make_template(_species_seed(seed, s)) for s in range(cfg.num_species)}
    for s, t in templates.items():
        t.species = s
    images, train_ids, test_ids, val_ids = [], [], [], []

    def add(species, k, role_list):
        ai = render_instance(templates[species], _instance_seed(seed, species, k), cfg.l0, cfg.occlusion)
        ai.name = f"s{species:02d}_{k:05d}"
        role_list.append(len(images))
        images.append(ai)

    if cfg.setting == "seen":
        per = int(math.ceil((cfg.train_images / 0.7) / cfg.num_species))
        for s in range(cfg.num_species):
            n_train = int(round(0.7 * per))
            for k in range(per):
                add(s, k, train_ids if k < n_train else test_ids)
    else:
        per = int(math.ceil(cfg.train_images / max(len(train_sp), 1)))
        for s in train_sp:
            for k in range(per):
                add(s, k, train_ids)
        for s in val_sp:
            for k in range(cfg.test_images_per_species):
                add(s, k, val_ids)
        for s in test_sp:
            for k in range(cfg.test_images_per_species):
                add(s, k, test_ids)
    ds = Dataset(images, split, train_ids, test_ids, val_ids, templates)
    if out_dir is not None:
        save_dataset(ds, out_dir, cfg, seed)
    return ds


def _species_seed(seed, s):
    return int.from_bytes(hashlib.sha256(f"species:{seed}:{s}".encode()).digest()[:4], "little")


def _instance_seed(seed, s, k):
    return int.from_bytes(hashlib.sha256(f"inst:{seed}:{s}:{k}".encode()).digest()[:4], "little")


def _record(ai, role):
    return {"file": f"images/{ai.name}.ppm", "mask": f"masks/{ai.name}.pgm", "species": ai.species,
            "role": role, "bbox": [float(v) for v in ai.bbox],
            "keypoints": [{"type": k, "x": float(ai.keypoints[k, 0]), "y": float(ai.keypoints[k, 1]),
                           "visible": bool(ai.visible[k])} for k in range(len(ai.keypoints))]}


def _dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_dataset(ds, out_dir, cfg=None, seed=None):
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    roles = {}
    for role in ("train", "val", "test"):
        for i in ds.pool(role):
            roles[i] = role
    records = []
    for i, ai in enumerate(ds.images):
        write_ppm(os.path.join(out_dir, "images", f"{ai.name}.ppm"), ai.image)
        write_pgm(os.path.join(out_dir, "masks", f"{ai.name}.pgm"), ai.mask.astype(np.uint8) * 255)
        records.append(_record(ai, roles.get(i, "unused")))
    manifest = {"images": records}
    if cfg is not None:
        manifest["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
        manifest["seed"] = seed
    _dump(manifest, os.path.join(out_dir, "manifest.json"))
    _dump(ds.split.to_dict(), os.path.join(out_dir, "split.json"))
    if cfg is not None and cfg.leave_one_out:
        write_leave_one_out(ds, out_dir)


def write_leave_one_out(ds, out_dir):
    """One manifest per held-out species (train on the rest)."""
    sub = os.path.join(out_dir, "subproblems")
    os.makedirs(sub, exist_ok=True)
    species = sorted({ai.species for ai in ds.images})
    paths = []
    for held in species:
        split = DatasetSplit([s for s in species if s != held], [], [held], ds.split.base_types,
                             ds.split.novel_types, ds.split.limb_paths)
        recs = [_record(ai, "test" if ai.species == held else "train") for ai in ds.images]
        path = os.path.join(sub, f"loo_{held:02d}.json")
        _dump({"split": split.to_dict(), "images": recs}, path)
        paths.append(path)
    return paths


def load_dataset(root, manifest="manifest.json"):
    with open(os.path.join(root, manifest), encoding="utf-8") as fh:
        doc = json.load(fh)
    split_doc = doc.get("split")
    if split_doc is None:
        with open(os.path.join(root, "split.json"), encoding="utf-8") as fh:
            split_doc = json.load(fh)
    split = DatasetSplit.from_dict(split_doc)
    images, ids = [], {"train": [], "val": [], "test": []}
    for rec in doc["images"]:
        kps = rec["keypoints"]
        for k in kps:
            if not 0 <= k["type"] < NUM_TYPES:
                raise ValueError(f"manifest: unknown keypoint type {k['type']}")
        ai = AnnotatedImage(
            read_ppm(os.path.join(root, rec["file"])),
            np.array([[k["x"], k["y"]] for k in kps]),
            np.array([k["visible"] for k in kps], dtype=bool),
            tuple(rec["bbox"]),
            read_pgm(os.path.join(root, rec["mask"])) > 127,
            rec["species"],
            os.path.splitext(os.path.basename(rec["file"]))[0],
        )
        if rec["role"] in ids:
            ids[rec["role"]].append(len(images))
        images.append(ai)
    return Dataset(images, split, ids["train"], ids["test"], ids["val"])


# netpbm I/O -------------------------------------------------------------------

def write_ppm(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path, format="PPM")


def write_pgm(path, gray):
    Image.fromarray(np.asarray(gray, dtype=np.uint8), "L").save(path, format="PPM")


def read_ppm(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_pgm(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


# episodes ---------------------------------------------------------------------

@dataclass
class Episode:
    supports: list
    query: AnnotatedImage
    types: list  # active keypoint types
    mode: str = "same"


def sample_episode(ds, types, k_shot=1, mode="same", rng=None, role="train", n_way=None):
    """Draw K supports and one query without replacement from ``role``.

    ``types`` is the requested type set; ``n_way`` optionally subsamples
    it.  Active types are those visible in at least one support.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    pool = ds.pool(role)
    if mode == "same":
        by_species = {}
        for i in pool:
            by_species.setdefault(ds.images[i].species, []).append(i)
        eligible = sorted(s for s, ids in by_species.items() if len(ids) >= k_shot + 1)
        if not eligible:
            raise ValueError(f"sample_episode: no species with {k_shot + 1} images in '{role}'")
        species = eligible[rng.integers(len(eligible))]
        chosen = rng.choice(by_species[species], size=k_shot + 1, replace=False)
    elif mode == "mix":
        if len(pool) < k_shot + 1:
            raise ValueError(f"sample_episode: need {k_shot + 1} images in '{role}', have {len(pool)}")
        chosen = rng.choice(pool, size=k_shot + 1, replace=False)
    else:
        raise ValueError(f"sample_episode: unknown mode {mode!r}")
    types = list(types)
    if n_way is not None and n_way < len(types):
        types = sorted(rng.choice(types, size=n_way, replace=False).tolist())
    supports = [ds.images[i] for i in chosen[:-1]]
    query = ds.images[chosen[-1]]
    active = [t for t in types if any(s.visible[t] for s in supports)]
    return Episode(supports, query, active, mode)
