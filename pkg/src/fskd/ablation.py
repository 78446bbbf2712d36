"""Ablation rows for the synthetic benchmark and the directional checks
the benchmark is judged by."""

from __future__ import annotations

import numpy as np

from . import pipeline as P
from . import synth as S
from . import train as T
from .config import RunConfig, dataset_config

# row -> overrides; rows 1-4 at S=8, 5-6 single coarse scales, 7 multi-scale
ROWS = {
    1: {"uncertainty": False, "aux": False, "scales": (8,)},
    2: {"aux": False, "group_size": 1, "scales": (8,)},
    3: {"aux": True, "group_size": 1, "scales": (8,)},
    4: {"aux": True, "scales": (8,)},
    5: {"aux": True, "scales": (4,)},
    6: {"aux": True, "scales": (6,)},
    7: {"aux": True, "scales": (4, 6, 8)},
}

ROW_NAMES = {
    1: "vanilla GBL, S=8",
    2: "UC-GBL, S=8",
    3: "UC-GBL + aux, S=8",
    4: "UC-GBL + aux + groups, S=8",
    5: "UC-GBL + aux + groups, S=4",
    6: "UC-GBL + aux + groups, S=6",
    7: "UC-GBL + aux + groups, S={4,6,8}",
}


def row_config(base, row, seed):
    return base.replace(data_seed=seed, model_seed=seed, train_seed=seed, log_every=0).replace(**ROWS[row])


def run_seed(base, seed, rows=tuple(ROWS), ds=None, on_row=None):
    """Train and evaluate every row for one seed.  Returns
    ({row: pck}, records of the full model row 7 if run)."""
    ds = ds or S.build_dataset(dataset_config(base), seed)
    pcks, records = {}, None
    for r in rows:
        cfg = row_config(base, r, seed)
        state = T.train(ds, cfg)
        ev = P.evaluate(state.params, cfg, ds)
        pcks[r] = ev["pck"]
        if r == max(rows):
            records = ev["records"]
        if on_row:
            on_row(seed, r, ev["pck"])
    return pcks, records


def trend_checks(per_seed):
    """Directional checks over {seed: {row: pck}} (PCK as fractions).

    aux: row 3 beats row 2 in every seed; multiscale: mean row 7 is at
    least the best single-scale mean (rows 4-6) minus 0.5 points;
    uncertainty: mean row 2 is at least mean row 1 minus 0.5 points.
    """
    seeds = sorted(per_seed)
    mean = {r: float(np.mean([per_seed[s][r] for s in seeds])) * 100 for r in per_seed[seeds[0]]}
    aux_gain = [100 * (per_seed[s][3] - per_seed[s][2]) for s in seeds]
    best_single = max(mean[r] for r in (4, 5, 6))
    return {
        "mean_pck": mean,
        "aux": {"gain_per_seed": aux_gain, "mean_gain": float(np.mean(aux_gain)),
                "passed": all(g > 0 for g in aux_gain)},
        "multiscale": {"multi": mean[7], "best_single": best_single,
                       "margin": mean[7] - best_single, "passed": mean[7] >= best_single - 0.5},
        "uncertainty": {"uc": mean[2], "vanilla": mean[1], "gain": mean[2] - mean[1],
                        "passed": mean[2] >= mean[1] - 0.5},
    }


def calibration(records, width=0.05):
    """Binned (d', J') and (d', w) trends with their Spearman correlations."""
    rec = np.asarray([r[1:] for r in records], dtype=np.float64).reshape(-1, 3)
    dj = P.binned_trend(rec[:, 0], rec[:, 1], width)
    dw = P.binned_trend(rec[:, 0], rec[:, 2], width)
    rho_j = P.spearman([b["d_mean"] for b in dj], [b["value_mean"] for b in dj])
    rho_w = P.spearman([b["d_mean"] for b in dw], [b["value_mean"] for b in dw])
    return {"d_J": dj, "d_w": dw, "spearman_d_J": rho_j, "spearman_d_w": rho_w,
            "passed": bool(rho_j > 0 and rho_w < 0)}


def default_base():
    return RunConfig()
