"""Run configuration: bundled YAML defaults merged with a user file."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources

import yaml

from .cohort import CohortConfig, EffectSpec, PhantomSpec
from .forest import ForestParams
from .vae import VaeConfig

DATASET_IDS = ("LE", "RE", "BE", "MTDT", "LE-MTDT", "RE-MTDT", "BE-MTDT")
EXPLAIN_MODES = ("multiply", "add")
EXPLAIN_TARGETS = ("reconstruction", "original")
_PER_EYE = ("left", "right")


class ConfigError(ValueError):
    pass


def default_text():
    return (resources.files("octcvd") / "data" / "default_config.yaml").read_text(encoding="utf-8")


def default_tree():
    return yaml.safe_load(default_text())


def merge(base, override, path=""):
    """Overlay ``override`` onto ``base``; keys absent from ``base`` are errors."""
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("left", "right", "rfe_k_overrides"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = merge(base[key], val, where)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass(frozen=True)
class ExplainConfig:
    window: int = 15
    tau: float = 1e-4
    mode: str = "multiply"
    target: str = "reconstruction"
    overlay_subjects: int = 5


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    cohort: CohortConfig
    qi_fraction: float
    split_ratios: tuple
    pretrain_pool: int
    vae_split: tuple
    vae_left: VaeConfig
    vae_right: VaeConfig
    forest_grid: dict
    forest_base: ForestParams
    folds: int
    rfe_trees: int
    rfe_k: dict
    threshold: float
    baseline_weights: str | None
    explain: ExplainConfig
    tree: dict

    def vae(self, eye):
        return self.vae_left if eye == "left" else self.vae_right

    def dump(self):
        return yaml.safe_dump(self.tree, sort_keys=True)


def _vae_config(section, eye, seed, shape):
    common = {k: v for k, v in section.items()
              if k not in ("pretrain_pool", "split_ratios") + _PER_EYE}
    override = section.get(eye) or {}
    unknown = sorted(set(override) - set(common))
    if unknown:
        raise ConfigError(f"unknown config key 'vae.{eye}.{unknown[0]}'")
    merged = {**common, **override}
    return VaeConfig(input_shape=tuple(shape), encoder_channels=tuple(merged["encoder_channels"]),
                     decoder_channels=tuple(merged["decoder_channels"]),
                     latent_dim=int(merged["latent_dim"]), beta=float(merged["beta"]),
                     lr=float(merged["lr"]), epochs=int(merged["epochs"]),
                     batch_size=int(merged["batch_size"]),
                     seed=seed + (0 if eye == "left" else 1))


def build(tree):
    """Typed configuration from a fully merged tree."""
    try:
        seed = int(tree["seed"])
        c = tree["cohort"]
        phantom = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in c["phantom"].items()})
        cohort = CohortConfig(n_cases=int(c["n_cases"]), n_controls=int(c["n_controls"]),
                              oversample=float(c["oversample"]), effect=EffectSpec(**c["effect"]),
                              phantom=phantom, p_event_before_imaging=float(c["p_event_before_imaging"]),
                              p_diabetes=float(c["p_diabetes"]),
                              p_cardiomyopathy=float(c["p_cardiomyopathy"]), seed=seed)
        v = tree["vae"]
        f = tree["forest"]
        grid = {k: tuple(vals) for k, vals in f["grid"].items()}
        unknown = sorted(set(grid) - {"n_trees", "max_depth", "min_samples_leaf", "max_features"})
        if unknown:
            raise ConfigError(f"unknown config key 'forest.grid.{unknown[0]}'")
        bad_ids = sorted(set(f["rfe_k_overrides"] or {}) - set(DATASET_IDS))
        if bad_ids:
            raise ConfigError(f"unknown dataset id {bad_ids[0]!r} in forest.rfe_k_overrides")
        rfe_k = {i: int((f["rfe_k_overrides"] or {}).get(i, f["rfe_k"])) for i in DATASET_IDS}
        base = ForestParams(class_weight=f["class_weight"], max_features=f["max_features"], seed=seed)
        ex = ExplainConfig(**tree["explain"])
        if ex.mode not in EXPLAIN_MODES:
            raise ConfigError(f"explain.mode must be one of {EXPLAIN_MODES}")
        if ex.target not in EXPLAIN_TARGETS:
            raise ConfigError(f"explain.target must be one of {EXPLAIN_TARGETS}")
        ratios = tuple(float(r) for r in tree["split_ratios"])
        vae_split = tuple(float(r) for r in v["split_ratios"])
        if len(ratios) != 3 or len(vae_split) != 3 or min(ratios + vae_split) <= 0:
            raise ConfigError("split ratios need three positive entries")
        qi_fraction = float(c["qi_fraction"])
        if not 0.0 < qi_fraction < 1.0:
            raise ConfigError("cohort.qi_fraction must be in (0, 1)")
        if int(f["folds"]) < 2:
            raise ConfigError("forest.folds must be >= 2")
        return PipelineConfig(
            seed=seed, cohort=cohort, qi_fraction=qi_fraction, split_ratios=ratios,
            pretrain_pool=int(v["pretrain_pool"]), vae_split=vae_split,
            vae_left=_vae_config(v, "left", seed, phantom.shape),
            vae_right=_vae_config(v, "right", seed, phantom.shape),
            forest_grid=grid, forest_base=base, folds=int(f["folds"]),
            rfe_trees=int(f["rfe_trees"]), rfe_k=rfe_k, threshold=float(f["threshold"]),
            baseline_weights=tree["baseline"]["weights"], explain=ex, tree=tree)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load(path=None, seed=None, overrides=None):
    """Defaults, then the YAML file at ``path``, then ``overrides``, then ``seed``."""
    tree = default_tree()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = merge(tree, user)
    if overrides:
        tree = merge(tree, overrides)
    if seed is not None:
        tree["seed"] = int(seed)
    return build(tree)
