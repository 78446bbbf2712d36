"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields


@dataclass
class RunConfig:
    # data
    data_dir: str = "data"
    num_species: int = 10
    test_species: int = 2
    train_images: int = 2000
    test_images_per_species: int = 100
    l0: int = 96
    setting: str = "unseen"
    leave_one_out: bool = False
    occlusion: float = 0.14
    base_types: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    novel_types: tuple = (8, 9, 10, 11)
    data_seed: int = 0
    # model
    patch: int = 12
    channels: int = 32
    encoder_init: str = "smooth"  # raw | smooth
    feature_norm: str = "center_l2"  # none | center_l2
    scales: tuple = (4, 6, 8)
    descriptor_dim: int = 128
    pool_side: int = 8
    proj_channels: int = 1  # 0 disables the per-position channel layer
    latent_dim: int = 8
    eps: float = 1e-6
    sd_hidden: int = 16
    extraction: str = "gauss"  # index | bilinear | gauss
    xi_pixels: float = 5.25
    normalize_pooling: bool = False
    model_seed: int = 0
    # losses
    uncertainty: bool = True
    aux: bool = True
    group_size: int = 3
    path_mode: str = "default"  # default | rand | exhaust
    num_paths: int = 6
    nodes: tuple = (0.25, 0.5, 0.75)
    beta: float = 1.0
    alpha_uc: float = 1.0
    alpha_cls: float = 1.0
    gamma_main: float = 1.0
    gamma_aux: float = 1.0
    gamma_group: float = 1.0
    # episodes / training
    k_shot: int = 1
    episode_mode: str = "same"  # same | mix
    episodes: int = 3000
    learning_rate: float = 3e-3
    flip_aug: bool = True
    train_seed: int = 0
    log_every: int = 100
    val_every: int = 0
    val_episodes: int = 50
    # evaluation
    eval_episodes: int = 200
    eval_seed: int = 12345
    eval_types: str = "novel"  # novel | base | all
    tau: float = 0.1
    # warp
    tps_lambda: float = 1.0
    out_dir: str = "runs"

    def replace(self, **kw):
        d = asdict(self)
        for k, v in kw.items():
            if k not in d:
                raise KeyError(f"unknown config key: {k}")
            d[k] = _coerce(k, v)
        return RunConfig(**d)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls().replace(**d)

    def dump(self):
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(key, value):
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"config {key}: not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            items = [x.strip() for x in value.strip("[]() ").split(",") if x.strip()]
            value = [ast.literal_eval(x) for x in items]
        elem = type(default[0]) if default else float
        return tuple(elem(x) for x in value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value).strip()


def parse_config(text, base=None):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise KeyError(f"unknown config key: {key} (line {lineno})")
        overrides[key] = value
    return (base or RunConfig()).replace(**overrides)


def dataset_config(cfg):
    """The synthetic-dataset slice of a RunConfig."""
    from .synth import DatasetConfig

    return DatasetConfig(num_species=cfg.num_species, test_species=cfg.test_species,
                         train_images=cfg.train_images, test_images_per_species=cfg.test_images_per_species,
                         l0=cfg.l0, base_types=tuple(cfg.base_types), novel_types=tuple(cfg.novel_types),
                         setting=cfg.setting, leave_one_out=cfg.leave_one_out, occlusion=cfg.occlusion)


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)
