"""Command-line front end: ``fskd <command> [options]``.

Every failure prints one line ``error: E_CODE: message`` to stderr and
exits nonzero.  Every artifact embeds the resolved configuration and
seeds; nothing time-dependent is written, so identical inputs give
identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import figures
from . import pipeline as P
from . import synth as S
from . import train as T
from . import tps
from .config import RunConfig, dataset_config, load_config

log = logging.getLogger("fskd")

LOSS_NAMES = {"main": "L_ms", "aux": "L_ms_aux", "group": "L_ms_mk", "total": "total"}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


# helpers ---------------------------------------------------------------------------

def out_root(cfg):
    return os.environ.get("FSKD_OUT_ROOT") or cfg.out_dir


def out_dir(args, cfg, command):
    path = args.out or os.path.join(out_root(cfg), command)
    os.makedirs(path, exist_ok=True)
    return path


def resolve_config(args, base=None):
    cfg = base or RunConfig()
    try:
        if getattr(args, "config", None):
            cfg = load_config(args.config, cfg)
        overrides = {}
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v.strip()
        return cfg.replace(**overrides)
    except OSError as e:
        raise CliError("E_IO", f"cannot read config: {e}") from e
    except (KeyError, ValueError) as e:
        raise CliError("E_CONFIG", str(e).strip("'\"")) from e


def provenance(cfg, command, **extra):
    doc = {"command": command, "config": cfg.to_dict(),
           "seeds": {"data_seed": cfg.data_seed, "model_seed": cfg.model_seed,
                     "train_seed": cfg.train_seed, "eval_seed": cfg.eval_seed}}
    doc.update(extra)
    return doc


def write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise CliError("E_IO", f"cannot read {what}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError("E_JSON", f"{what} {path}: {e.msg} at line {e.lineno} column {e.colno} "
                                 f"(char {e.pos})") from e


def write_ppm_with_comment(path, rgb, comment):
    """Binary PPM with a one-line ``#`` comment after the magic number."""
    rgb = np.ascontiguousarray(np.asarray(rgb, dtype=np.uint8))
    h, w = rgb.shape[:2]
    text = comment.replace("\n", " ").replace("\r", " ")
    with open(path, "wb") as fh:
        fh.write(f"P6\n# {text}\n{w} {h}\n255\n".encode("utf-8"))
        fh.write(rgb.tobytes())


def load_state(path):
    if not path:
        raise CliError("E_USAGE", "a --checkpoint is required")
    doc = read_json(path, "checkpoint")
    try:
        return T.state_from_document(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise CliError("E_CHECKPOINT", f"malformed checkpoint {path}: {e}") from e


def load_data(args, cfg):
    if getattr(args, "data", None):
        try:
            return S.load_dataset(args.data)
        except OSError as e:
            raise CliError("E_IO", f"cannot read dataset: {e}") from e
        except (KeyError, ValueError) as e:
            raise CliError("E_DATA", f"malformed dataset {args.data}: {e}") from e
    return S.build_dataset(dataset_config(cfg), cfg.data_seed)


def read_image(path):
    try:
        return S.read_ppm(path)
    except OSError as e:
        raise CliError("E_IO", f"cannot read image {path}: {e}") from e


def load_annotated(path, l0):
    """Support document: {"image": ppm path, "keypoints": [{type, x, y,
    visible}], optional "bbox" and "query_keypoints" (ground truth for
    the query, used by the gt warp)."""
    doc = read_json(path, "support")
    try:
        img_path = os.path.join(os.path.dirname(path), doc["image"]) if "image" in doc else None
        kps, vis = _keypoint_array(doc["keypoints"])
        query_gt = _keypoint_array(doc["query_keypoints"]) if "query_keypoints" in doc else None
    except (KeyError, TypeError, ValueError) as e:
        raise CliError("E_JSON", f"support {path}: {e}") from e
    image = read_image(img_path) if img_path else np.zeros((l0, l0, 3), np.uint8)
    bbox = tuple(doc.get("bbox", (0, 0, image.shape[1], image.shape[0])))
    ai = S.AnnotatedImage(image, kps, vis, bbox, np.ones(image.shape[:2], bool), -1, "support")
    return ai, query_gt


def _keypoint_array(items):
    kps = np.zeros((S.NUM_TYPES, 2))
    vis = np.zeros(S.NUM_TYPES, bool)
    for k in items:
        t = int(k["type"])
        if not 0 <= t < S.NUM_TYPES:
            raise ValueError(f"unknown keypoint type {t}")
        kps[t] = (float(k["x"]), float(k["y"]))
        vis[t] = bool(k.get("visible", True))
    return kps, vis


# commands --------------------------------------------------------------------------

def cmd_gen_data(args):
    if not args.out:
        raise CliError("E_USAGE", "gen-data needs an output directory (--out)")
    cfg = resolve_config(args)
    try:
        S.build_dataset(dataset_config(cfg), cfg.data_seed, out_dir=args.out)
    except OSError as e:
        raise CliError("E_IO", f"cannot write dataset: {e}") from e
    except ValueError as e:
        raise CliError("E_CONFIG", str(e)) from e
    print(args.out)


def cmd_train(args):
    if args.resume:
        state = load_state(args.resume)
        cfg = resolve_config(args, state.cfg)
        state.cfg = cfg
    else:
        cfg = resolve_config(args)
        state = T.init_state(cfg)
    ds = load_data(args, cfg)
    out = out_dir(args, cfg, "train")
    ckpt = os.path.join(out, "checkpoint.json")
    steps = cfg.episodes if args.steps is None else args.steps

    def on_log(entry):
        log.info("step %d %s", entry["step"],
                 " ".join(f"{LOSS_NAMES.get(k, k)}={v:.4f}" for k, v in entry.items() if k != "step"))

    try:
        state = T.train(ds, cfg, state, steps=steps, on_log=on_log, checkpoint_path=ckpt)
    except T.NonFiniteLoss as e:
        raise CliError("E_NONFINITE", f"{e}; last good parameters saved to {ckpt}") from e
    T.save_checkpoint(state, ckpt)
    history = [{LOSS_NAMES.get(k, k): v for k, v in h.items()} for h in state.history]
    write_json(os.path.join(out, "train_log.json"),
               {"provenance": provenance(cfg, "train", steps=state.step), "terms": LOSS_NAMES,
                "history": history})
    print(ckpt)


def cmd_eval(args):
    state = load_state(args.checkpoint)
    cfg = resolve_config(args, state.cfg)
    if cfg.eval_episodes <= 0:
        raise CliError("E_EPISODES", f"eval needs at least one episode, got {cfg.eval_episodes}")
    ds = load_data(args, cfg)
    out = out_dir(args, cfg, "eval")
    ev = P.evaluate(state.params, cfg, ds)
    if ev["episodes"] == 0:
        raise CliError("E_EPISODES", "no evaluable episode was sampled")
    from .ablation import calibration

    cal = calibration(ev["records"])
    names = S.KEYPOINT_NAMES
    doc = {
        "provenance": provenance(cfg, "eval", checkpoint_step=state.step),
        "pck": ev["pck"],
        "pck_ci95": ev["pck_ci95"],
        "episodes": ev["episodes"],
        "tau": cfg.tau,
        "per_type": {names[int(t)]: v for t, v in ev["per_type"].items()},
        "binned_d_J": cal["d_J"],
        "binned_d_w": cal["d_w"],
        "spearman_d_J": cal["spearman_d_J"],
        "spearman_d_w": cal["spearman_d_w"],
    }
    write_json(os.path.join(out, "metrics.json"), doc)
    _episode_figures(state.params, cfg, ds, out, args.figures)
    print(f"PCK@{cfg.tau:g} = {100 * ev['pck']:.2f} ± {100 * ev['pck_ci95']:.2f} over {ev['episodes']} episodes")


def _episode_figures(params, cfg, ds, out, count):
    rng = np.random.default_rng([cfg.eval_seed, 1])
    types = P.eval_types(cfg, ds.split)
    for i in range(count):
        ep = S.sample_episode(ds, types, 1, cfg.episode_mode, rng, role="test")
        est = [e for e in P.detect(params, cfg, ep.supports, ep.query, ep.types) if e is not None]
        prov = provenance(cfg, "eval", figure=i, support=ep.supports[0].name, query=ep.query.name)
        svg = figures.episode_overlay(ep.supports[0], ep.query, est, prov, names=S.KEYPOINT_NAMES)
        with open(os.path.join(out, f"episode_{i:03d}.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg)


def cmd_detect(args):
    state = load_state(args.checkpoint)
    cfg = resolve_config(args, state.cfg)
    support, _ = load_annotated(args.support, cfg.l0)
    query = read_image(args.query)
    types = [t for t in range(S.NUM_TYPES) if support.visible[t]]
    est = _detect(state.params, cfg, support, query, types)
    out = out_dir(args, cfg, "detect")
    doc = {"provenance": provenance(cfg, "detect", support=args.support, query=args.query),
           "keypoints": [_estimate_doc(e) for e in est]}
    write_json(os.path.join(out, "detections.json"), doc)
    q = S.AnnotatedImage(query, np.zeros((S.NUM_TYPES, 2)), np.zeros(S.NUM_TYPES, bool),
                         (0, 0, cfg.l0, cfg.l0), np.ones(query.shape[:2], bool), -1, "query")
    with open(os.path.join(out, "detections.svg"), "w", encoding="utf-8") as fh:
        fh.write(figures.episode_overlay(support, q, est, doc["provenance"], names=S.KEYPOINT_NAMES))
    print(os.path.join(out, "detections.json"))


def _detect(params, cfg, support, query, types):
    if query.shape[:2] != (cfg.l0, cfg.l0):
        raise CliError("E_DATA", f"query image is {query.shape[1]}x{query.shape[0]}, model expects "
                                 f"{cfg.l0}x{cfg.l0}")
    return [e for e in P.detect(params, cfg, [support], query, types) if e is not None]


def _estimate_doc(e):
    ell = e.ellipse
    return {"type": int(e.type), "name": S.KEYPOINT_NAMES[int(e.type)],
            "x": float(e.position[0]), "y": float(e.position[1]),
            "cov": e.cov.tolist(), "J": float(ell.strength),
            "ellipse_axes": [float(a) for a in ell.axes], "ellipse_angle": float(ell.angle)}


WARP_MODES = ("gt", "identical-uc", "uncertainty")


def cmd_warp(args):
    if bool(args.checkpoint) == bool(args.correspondences):
        raise CliError("E_USAGE", "warp needs exactly one of --checkpoint or --correspondences")
    query = read_image(args.query)
    modes = WARP_MODES if args.mode == "all" else (args.mode,)
    if args.checkpoint:
        state = load_state(args.checkpoint)
        cfg = resolve_config(args, state.cfg)
        if not args.support:
            raise CliError("E_USAGE", "warp with --checkpoint needs --support")
        support, query_gt = load_annotated(args.support, cfg.l0)
        types = [t for t in range(S.NUM_TYPES) if support.visible[t]]
        est = _detect(state.params, cfg, support, query, types)
        types = [int(e.type) for e in est]
        src = support.keypoints[types]
        pred = np.array([e.position for e in est]).reshape(-1, 2)
        strength = np.array([e.ellipse.strength for e in est])
        lam = cfg.tps_lambda
        support_img = support.image
    else:
        cfg = resolve_config(args)
        path = args.correspondences
        try:
            with open(path, encoding="utf-8") as fh:
                corr, lam = tps.Correspondences.from_json(fh.read())
        except OSError as e:
            raise CliError("E_IO", f"cannot read correspondences: {e}") from e
        except json.JSONDecodeError as e:
            raise CliError("E_JSON", f"correspondences {path}: {e.msg} at line {e.lineno} column {e.colno} "
                                     f"(char {e.pos})") from e
        except tps.TpsError as e:
            raise CliError("E_TPS", str(e)) from e
        src, pred, strength = corr.src, corr.dst, corr.strength
        support_img, query_gt, types = None, None, None
        if args.support:
            support, query_gt = load_annotated(args.support, cfg.l0)
            support_img = support.image
    out = out_dir(args, cfg, "warp")
    panels, points, written = [], {}, []
    if support_img is not None:
        panels.append(("support", support_img))
        points[0] = src.tolist()
    panels.append(("query", query))
    for mode in modes:
        if mode == "gt":
            if query_gt is None:
                if args.mode == "gt":
                    raise CliError("E_USAGE", "gt warp needs query_keypoints in the support document")
                continue
            gt_kps, gt_vis = query_gt
            keep = [i for i, t in enumerate(types if types is not None else range(len(src)))
                    if gt_vis[t]]
            sel = [types[i] if types is not None else i for i in keep]
            corr = tps.Correspondences(src[keep], gt_kps[sel], np.ones(len(keep)))
        elif mode == "identical-uc":
            corr = tps.Correspondences(src, pred, np.full(len(src), tps.IDENTICAL_UC))
        else:
            corr = tps.Correspondences(src, pred, strength)
        try:
            t = tps.solve_tps(corr, lam)
        except tps.TpsError as e:
            raise CliError("E_TPS", f"{mode}: {e}") from e
        warped = tps.warp_image(query, t, out_size=query.shape[:2])
        prov = provenance(cfg, "warp", mode=mode, tps_lambda=lam, correspondences=json.loads(corr.to_json(lam)))
        name = os.path.join(out, f"warped_{mode}.ppm")
        write_ppm_with_comment(name, warped, json.dumps(prov, sort_keys=True, separators=(",", ":")))
        written.append(name)
        panels.append((f"warp: {mode}", warped))
        points[len(panels) - 1] = corr.src.tolist()
    svg = figures.comparison(panels, provenance(cfg, "warp", modes=list(modes), tps_lambda=lam), points=points)
    with open(os.path.join(out, "comparison.svg"), "w", encoding="utf-8") as fh:
        fh.write(svg)
    for name in written:
        print(name)


def cmd_grad_check(args):
    from .gradcheck import format_table, run_suite

    cfg = resolve_config(args)
    report = run_suite(seeds=range(args.seeds))
    out = out_dir(args, cfg, "grad-check")
    doc = dict(report, provenance=provenance(cfg, "grad-check"))
    write_json(os.path.join(out, "gradcheck.json"), doc)
    print(format_table(report))
    if not report["passed"]:
        raise CliError("E_GRADCHECK", "at least one gradient check failed; see gradcheck.json")


def cmd_ukp(args):
    state = load_state(args.checkpoint)
    cfg = resolve_config(args, state.cfg)
    if args.episodes <= 0:
        raise CliError("E_EPISODES", f"ukp needs at least one episode, got {args.episodes}")
    ds = load_data(args, cfg)
    seed = cfg.eval_seed if args.seed is None else args.seed
    ukp = P.compute_ukp(state.params, cfg, ds, args.episodes, seed, role=args.role)
    out = out_dir(args, cfg, "ukp")
    doc = {"provenance": provenance(cfg, "ukp", episodes=args.episodes, ukp_seed=seed, role=args.role),
           "prototypes": {S.KEYPOINT_NAMES[t]: {"type": int(t), "vector": v.tolist()}
                          for t, v in sorted(ukp.items())}}
    path = os.path.join(out, "ukp.json")
    write_json(path, doc)
    print(path)


# parser ----------------------------------------------------------------------------

def build_parser():
    p = Parser(prog="fskd", description="Few-shot keypoint detection with uncertainty.")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    def command(name, fn, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="key = value config file")
        c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        c.add_argument("--out", help="output directory (default: $FSKD_OUT_ROOT/<command>)")
        c.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        c.set_defaults(fn=fn)
        return c

    c = command("gen-data", cmd_gen_data, "render the synthetic dataset")
    c = command("train", cmd_train, "episodic training")
    c.add_argument("--data", help="dataset directory (default: generate from config)")
    c.add_argument("--resume", help="checkpoint to continue from")
    c.add_argument("--steps", type=int, help="train until this step (default: episodes)")
    c = command("eval", cmd_eval, "PCK and calibration on test episodes")
    c.add_argument("--checkpoint")
    c.add_argument("--data")
    c.add_argument("--figures", type=int, default=4, help="episode overlays to draw")
    c = command("detect", cmd_detect, "detect keypoints on one query image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--support", required=True)
    c.add_argument("--query", required=True)
    c = command("warp", cmd_warp, "thin-plate-spline alignment of a query to a support")
    c.add_argument("--query", required=True)
    c.add_argument("--support")
    c.add_argument("--checkpoint")
    c.add_argument("--correspondences")
    c.add_argument("--mode", choices=("all",) + WARP_MODES, default="all")
    c = command("grad-check", cmd_grad_check, "finite-difference gradient suite")
    c.add_argument("--seeds", type=int, default=10)
    c = command("ukp", cmd_ukp, "universal keypoint prototypes")
    c.add_argument("--checkpoint")
    c.add_argument("--data")
    c.add_argument("--episodes", type=int, default=1000)
    c.add_argument("--seed", type=int)
    c.add_argument("--role", choices=("train", "test", "val"), default="train")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        args.fn(args)
    except CliError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 2 if e.code == "E_USAGE" else 1
    except (ValueError, RuntimeError) as e:
        print(f"error: E_RUNTIME: {str(e).splitlines()[0] if str(e) else type(e).__name__}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
