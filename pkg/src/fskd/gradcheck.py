"""Finite-difference checks for every registered op and the episode loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def _spd(rng, n, batch=()):
    a = rng.normal(size=batch + (n, n))
    return a @ np.swapaxes(a, -1, -2) + n * np.eye(n)


def _away_from_kinks(rng, shape, margin=0.05):
    """Values bounded away from 0 so relu/clip stay differentiable."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _sq(v):
    return ad.sum(v * v)


def op_cases(rng):
    """(name, f, x) triples; f maps a Var to a scalar Var."""
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    weights = rng.normal(size=(2, 3))
    pos = rng.uniform(0.5, 2.0, size=(2, 3))
    field = rng.normal(size=(3, 9, 2))
    cells = np.array([0, 4, 8])
    maps_pts = np.array([[0.3, 1.2], [2.6, 0.4]])
    other = rng.normal(size=(2, 3))
    m_sq = _spd(rng, 3)
    r_vec = rng.normal(size=(4, 3))
    return [
        ("add", lambda x: ad.sum(ad.add(x, b) * ad.add(x, b)), rng.normal(size=(3, 4))),
        ("sub", lambda x: ad.sum(ad.sub(x, b) * x), rng.normal(size=(3, 4))),
        ("mul", lambda x: ad.sum(ad.mul(x, weights) * x), rng.normal(size=(2, 3))),
        ("div", lambda x: ad.sum(ad.div(weights, x)), pos),
        ("matmul", lambda x: ad.sum(ad.matmul(x, w) * ad.matmul(x, w)), rng.normal(size=(2, 5, 3))),
        ("relu", lambda x: ad.sum(ad.relu(x) * weights), _away_from_kinks(rng, (2, 3))),
        ("tanh", lambda x: ad.sum(ad.tanh(x) * weights), rng.normal(size=(2, 3))),
        ("exp", lambda x: ad.sum(ad.exp(x) * weights), rng.normal(size=(2, 3))),
        ("log", lambda x: ad.sum(ad.log(x) * weights), pos),
        ("sqrt", lambda x: ad.sum(ad.sqrt(x) * weights), pos),
        ("clip", lambda x: ad.sum(ad.clip(x, -0.5, 0.5) * weights),
         np.array([[-1.0, -0.2, 0.1], [0.3, 0.8, -0.4]])),
        ("sum", lambda x: ad.sum(ad.sum(x, axis=1) * ad.sum(x, axis=1)), rng.normal(size=(2, 3))),
        ("mean", lambda x: ad.sum(ad.mean(x, axis=0) * ad.mean(x, axis=0)), rng.normal(size=(2, 3))),
        ("reshape", lambda x: ad.sum(ad.reshape(x, (3, 2)) * other.reshape(3, 2) * ad.reshape(x, (3, 2))),
         rng.normal(size=(2, 3))),
        ("transpose", lambda x: ad.sum(ad.transpose(x) * other.T * ad.transpose(x)), rng.normal(size=(2, 3))),
        ("concat", lambda x: ad.sum(ad.concat([x, x * x], axis=-1) * ad.const(np.ones((2, 6)))),
         rng.normal(size=(2, 3))),
        ("index_select", lambda x: _sq(ad.index_select(x, np.array([1, 1, 0]))),
         rng.normal(size=(2, 3))),
        ("gather_cell", lambda x: _sq(ad.gather_cell(x, cells)), field),
        ("block_average_pool", lambda x: _sq(ad.block_average_pool(x, 2)),
         rng.normal(size=(2, 4, 4, 3))),
        ("softmax", lambda x: ad.sum(ad.softmax(x, -1) * weights), rng.normal(size=(2, 3))),
        ("log_softmax", lambda x: ad.sum(ad.log_softmax(x, -1) * weights), rng.normal(size=(2, 3))),
        ("logdet", lambda x: ad.logdet(ad.matmul(x, ad.transpose(x)) + ad.const(3 * np.eye(3))),
         rng.normal(size=(3, 3))),
        ("quad_form", lambda x: ad.sum(ad.quad_form(x, ad.const(m_sq))), r_vec),
        ("bilinear_sample", lambda x: _sq(ad.bilinear_sample(x, maps_pts)),
         rng.normal(size=(2, 4, 4))),
    ]


def check_ops(seed, tol=1e-4):
    rng = np.random.default_rng(seed)
    rows = []
    for name, f, x in op_cases(rng):
        r = ad.grad_check(f, x, tol=tol)
        rows.append({"op": name, "seed": seed, "max_rel_err": r["max_rel_err"], "passed": bool(r["passed"])})
    return rows


def check_episode_loss(seed, tol=1e-3, sample=12):
    """Composed loss on a tiny synthetic episode; every trainable tensor
    is probed at ``sample`` random coordinates."""
    from . import model as M
    from . import synth as S
    from .config import RunConfig
    from .pipeline import FeatureCache, episode_loss, prepare_episode

    cfg = RunConfig(channels=8, descriptor_dim=6, latent_dim=4, sd_hidden=3, scales=(4, 6),
                    pool_side=2, proj_channels=3, model_seed=seed)
    params = M.init_params(cfg)
    template = S.make_template(seed)
    rng = np.random.default_rng(seed)
    images = [S.render_instance(template, k) for k in range(2)]
    types = [t for t in range(S.NUM_TYPES) if images[0].visible[t]]
    ep = S.Episode([images[0]], images[1], types)
    batch = prepare_episode(ep, FeatureCache(params, cfg), cfg, rng)
    rows = []
    for name in sorted(k for k in params if k not in M.FROZEN):
        def f(v, name=name):
            p = dict(params)
            p[name] = v
            return episode_loss(p, batch, cfg)[0]

        r = ad.grad_check(f, params[name], tol=tol, sample=sample, seed=seed)
        rows.append({"op": f"episode_loss[{name}]", "seed": seed, "max_rel_err": r["max_rel_err"],
                     "passed": bool(r["passed"])})
    return rows


def run_suite(seeds=range(10), op_tol=1e-4, loss_tol=1e-3, sample=12):
    rows = []
    for s in seeds:
        rows += check_ops(s, op_tol)
        rows += check_episode_loss(s, loss_tol, sample)
    worst = {}
    for r in rows:
        key = r["op"].split("[")[0]
        worst[key] = max(worst.get(key, 0.0), r["max_rel_err"])
    return {
        "passed": all(r["passed"] for r in rows),
        "op_tol": op_tol,
        "loss_tol": loss_tol,
        "seeds": list(seeds),
        "worst": worst,
        "rows": rows,
    }


def format_table(report):
    lines = [f"{'op':<20} {'max rel err':>12}  status"]
    for op, err in report["worst"].items():
        tol = report["loss_tol"] if op == "episode_loss" else report["op_tol"]
        lines.append(f"{op:<20} {err:>12.3e}  {'ok' if err < tol else 'FAIL'}")
    lines.append(f"overall: {'PASS' if report['passed'] else 'FAIL'}")
    return "\n".join(lines)
