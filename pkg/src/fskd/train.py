"""Episodic training loop, Adam and JSON checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .config import RunConfig
from .pipeline import FeatureCache, FlipCache, episode_loss, evaluate, prepare_episode
from .synth import sample_episode

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads):
        self.step += 1
        b1t = 1 - self.beta1**self.step
        b2t = 1 - self.beta2**self.step
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


@dataclass
class ModelState:
    cfg: RunConfig
    params: dict
    optimizer: Adam
    step: int = 0
    history: list = field(default_factory=list)

    def trainable(self):
        return [k for k in self.params if k not in M.FROZEN]


def init_state(cfg):
    return ModelState(cfg, M.init_params(cfg), Adam(lr=cfg.learning_rate))


def episode_rng(cfg, step):
    return np.random.default_rng([cfg.train_seed, step])


def sample_training_batch(ds, cfg, step, feats, flips):
    rng = episode_rng(cfg, step)
    for _ in range(20):
        ep = sample_episode(ds, ds.split.base_types, cfg.k_shot, cfg.episode_mode, rng, role="train")
        # the whole episode flips together so left/right stay consistent
        if cfg.flip_aug and rng.uniform() < 0.5:
            ep.supports = [flips(s) for s in ep.supports]
            ep.query = flips(ep.query)
        batch = prepare_episode(ep, feats, cfg, rng, supervised=True, limb_paths=ds.split.limb_paths)
        if batch.size:
            return ep, batch
        log.debug("step %d: episode without supervisable keypoints skipped", step)
    raise RuntimeError(f"step {step}: could not sample a supervisable episode")


def train_step(state, batch):
    cfg = state.cfg
    leaves = {k: ad.Var(state.params[k]) for k in state.trainable()}
    params = dict(state.params)
    params.update(leaves)
    loss, report = episode_loss(params, batch, cfg)
    if not math.isfinite(report["total"]):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}")
    loss.backward()
    grads = {k: v.grad for k, v in leaves.items() if v.grad is not None}
    state.optimizer.update(state.params, grads)
    state.step += 1
    return report


def train(ds, cfg, state=None, steps=None, feats=None, on_log=None, checkpoint_path=None):
    """Run ``steps`` (default ``cfg.episodes``) episodes from ``state``.

    Returns the final state; on a non-finite loss the last good
    parameters are kept (and written to ``checkpoint_path``) before the
    error propagates.
    """
    state = state or init_state(cfg)
    total = cfg.episodes if steps is None else steps
    feats = feats or FeatureCache(state.params, cfg)
    flips = FlipCache()
    running = {}
    while state.step < total:
        _, batch = sample_training_batch(ds, cfg, state.step, feats, flips)
        backup = {k: state.params[k].copy() for k in state.trainable()}
        try:
            report = train_step(state, batch)
        except NonFiniteLoss:
            state.params.update(backup)
            if checkpoint_path:
                save_checkpoint(state, checkpoint_path)
            raise
        for k, v in report.items():
            running[k] = running.get(k, 0.0) + v
        if cfg.log_every and state.step % cfg.log_every == 0:
            entry = {"step": state.step, **{k: v / cfg.log_every for k, v in running.items()}}
            running = {}
            if cfg.val_every and state.step % cfg.val_every == 0 and ds.val_ids:
                entry["val_pck"] = evaluate(state.params, cfg, ds, cfg.val_episodes, cfg.eval_seed,
                                            role="val", feats=feats)["pck"]
            state.history.append(entry)
            if on_log:
                on_log(entry)
    return state


# checkpoints -------------------------------------------------------------------

def _tensors(d):
    return [{"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in sorted(d.items())]


def _untensors(items):
    return {it["name"]: np.asarray(it["values"], dtype=np.float64).reshape(it["shape"]) for it in items}


def checkpoint_document(state):
    opt = state.optimizer
    return {
        "format": "fskd-checkpoint-1",
        "config": state.cfg.to_dict(),
        "seeds": {"model_seed": state.cfg.model_seed, "train_seed": state.cfg.train_seed,
                  "data_seed": state.cfg.data_seed},
        "step": state.step,
        "params": _tensors(state.params),
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step": opt.step, "m": _tensors(opt.m), "v": _tensors(opt.v)},
        "history": state.history,
    }


def save_checkpoint(state, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_document(state), fh)


def state_from_document(doc):
    cfg = RunConfig.from_dict(doc["config"])
    o = doc["optimizer"]
    opt = Adam(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"], _untensors(o["m"]), _untensors(o["v"]))
    return ModelState(cfg, _untensors(doc["params"]), opt, doc["step"], list(doc.get("history", [])))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return state_from_document(json.load(fh))
