"""
Configuration module for catch-prolong.

The run configuration is a YAML file with one capitalised section per
component (Detector, Generation, Search_window, Model, Loss, Training,
Follow) and a scalar Seed. Keys inside a section are case-insensitive.
Every section has a *_DEFAULTS dict; unknown sections or keys are errors.
"""

import os
import logging
import yaml
from dataclasses import asdict, dataclass
from typing import Dict, Any, Iterable, Optional

from catch_prolong.detector import DetectorConfig, GenerationConfig
from catch_prolong.follower import FollowConfig
from catch_prolong.loss import LossConfig
from catch_prolong.model import ModelConfig
from catch_prolong.seed_search import SearchWindow
from catch_prolong.trainer import TrainConfig

logger = logging.getLogger("CatchProlong")


class ConfigError(ValueError):
    """Unknown section or key, or a value the component rejects."""


SEED_DEFAULT = 0

DETECTOR_DEFAULTS = {
    "n_stations": 5,
    "station_z": [30.0, 50.0, 70.0, 90.0, 110.0],
    # Station 0 is 64 x 41 cm; later stations scale with z unless listed.
    "station0_half_x": 32.0,
    "station0_half_y": 20.5,
    "half_extent_x": None,
    "half_extent_y": None,
    "smear_sigma": 0.05,
    "fake_mode": "strip-crossing",
}

GENERATION_DEFAULTS = {
    "n_tracks_min": 20,
    "n_tracks_max": 30,
    "kappa_min": 0.0,
    "kappa_max": 0.002,
    "phi0_max": 0.5,
    "ty_max": 0.5,
    "fake_fraction": 0.25,
    "max_turn": 0.7853981633974483,
}

SEARCH_WINDOW_DEFAULTS = {
    "dy": 0.6,
    "dtheta_max": 0.08,
}

# Station planes and normalisation come from the Detector section.
MODEL_DEFAULTS = {
    "conv_filters": 32,
    "kernel_size": 3,
    "hidden_sizes": [32, 32],
    "input_frame": "track",
    "frame_scale_cm": 2.0,
    "center_anchor": "extrapolation",
    "center_scale_cm": 5.0,
    "semiaxis_scale_cm": 1.0,
    "initial_semiaxis_cm": 2.0,
}

LOSS_DEFAULTS = {
    "lambda1": 0.5,
    "lambda2": 0.35,
    "lambda3": 0.15,
    "alpha": 0.95,
    "gamma": 2.0,
    "prob_clamp": 1e-7,
    "sqrt_eps": 1e-12,
    "reduction": "mean",
}

TRAINING_DEFAULTS = {
    "epochs": 50,
    "batch_size": 128,
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "clip_norm": 5.0,
    "split": 0.7,
    "threshold": 0.5,
    "ghost_ratio": 10.0,
    "max_candidates": None,
    "eval_batch_size": 1024,
}

FOLLOW_DEFAULTS = {
    "prune_threshold": 0.2,
    "accept_threshold": 0.5,
    "max_branches": None,
    "ellipse_inflate": 1.0,
    "allow_early_stop": False,
}

SECTIONS = {
    "Detector": DETECTOR_DEFAULTS,
    "Generation": GENERATION_DEFAULTS,
    "Search_window": SEARCH_WINDOW_DEFAULTS,
    "Model": MODEL_DEFAULTS,
    "Loss": LOSS_DEFAULTS,
    "Training": TRAINING_DEFAULTS,
    "Follow": FOLLOW_DEFAULTS,
}

_TUPLE_KEYS = {"station_z", "half_extent_x", "half_extent_y", "hidden_sizes"}


def load_config(config_path: str = "config.yaml") -> Dict[str, Any]:
    """
    Load configuration from a YAML file.

    Args:
        config_path: Path to the configuration file.

    Returns:
        A dictionary containing the configuration, or {} when the file is
        missing or does not hold a mapping.
    """
    if not os.path.exists(config_path):
        logger.warning(f"Config file not found: {config_path}")
        return {}

    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {config_path}: {e}") from e

    if config is None:
        return {}
    if not isinstance(config, dict):
        logger.warning(f"Invalid configuration format in {config_path}")
        return {}

    logger.info(f"Loaded configuration from {config_path}")
    return config


def _canonical_section(name: str) -> str:
    for section in list(SECTIONS) + ["Seed"]:
        if section.lower() == str(name).lower():
            return section
    raise ConfigError(f"Unknown config section '{name}' (expected one of {list(SECTIONS) + ['Seed']})")


def get_section(config: Dict[str, Any], section: str) -> Dict[str, Any]:
    """
    One section merged over its defaults, keys normalised to lower case.

    Raises:
        ConfigError: if the section is not a mapping or has unknown keys.
    """
    defaults = SECTIONS[section]
    merged = dict(defaults)
    raw = None
    for key, value in config.items():
        if str(key).lower() == section.lower():
            raw = value
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"Config section '{section}' must be a mapping")
    for key, value in (raw or {}).items():
        normalised = str(key).lower()
        if normalised not in defaults:
            raise ConfigError(f"Unknown key '{key}' in section '{section}'")
        merged[normalised] = value
    for key in _TUPLE_KEYS & set(merged):
        if merged[key] is not None:
            merged[key] = tuple(merged[key])
    return merged


def _build(section: str, factory, values: Dict[str, Any]):
    try:
        return factory(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def get_detector_config(config: Dict[str, Any]) -> DetectorConfig:
    return _build("Detector", DetectorConfig, get_section(config, "Detector"))


def get_generation_config(config: Dict[str, Any]) -> GenerationConfig:
    return _build("Generation", GenerationConfig, get_section(config, "Generation"))


def get_search_window(config: Dict[str, Any]) -> SearchWindow:
    return _build("Search_window", SearchWindow, get_section(config, "Search_window"))


def get_model_config(config: Dict[str, Any], detector: DetectorConfig) -> ModelConfig:
    return _build("Model", lambda **kw: ModelConfig.for_detector(detector, **kw), get_section(config, "Model"))


def get_loss_config(config: Dict[str, Any]) -> LossConfig:
    return _build("Loss", LossConfig, get_section(config, "Loss"))


def get_train_config(config: Dict[str, Any]) -> TrainConfig:
    return _build("Training", TrainConfig, get_section(config, "Training"))


def get_follow_config(config: Dict[str, Any]) -> FollowConfig:
    return _build("Follow", FollowConfig, get_section(config, "Follow"))


def get_seed(config: Dict[str, Any]) -> int:
    for key, value in config.items():
        if str(key).lower() == "seed":
            try:
                return int(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Seed must be an integer, got {value!r}") from e
    return SEED_DEFAULT


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply `Section.Key=value` (or `Seed=value`) overrides to a raw config.
    Values are parsed as YAML, so numbers, lists, booleans and null keep
    their types. Returns a new dict.
    """
    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in config.items()}
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override '{override}' is not of the form Section.Key=value")
        path, text = override.split("=", 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"Override '{override}': {e}") from e

        if "." not in path:
            if _canonical_section(path) != "Seed":
                raise ConfigError(f"Override '{override}' needs a Section.Key path")
            merged = {k: v for k, v in merged.items() if str(k).lower() != "seed"}
            merged["Seed"] = value
            continue

        section_name, key = path.split(".", 1)
        section = _canonical_section(section_name)
        if section == "Seed":
            raise ConfigError("Seed is a scalar; use Seed=value")
        if key.lower() not in SECTIONS[section]:
            raise ConfigError(f"Unknown key '{key}' in section '{section}'")
        existing = None
        for k in list(merged):
            if str(k).lower() == section.lower():
                existing = merged.pop(k)
        section_values = dict(existing or {})
        section_values = {k: v for k, v in section_values.items() if str(k).lower() != key.lower()}
        section_values[key.lower()] = value
        merged[section] = section_values
    return merged


@dataclass(frozen=True)
class RunConfig:
    seed: int
    detector: DetectorConfig
    generation: GenerationConfig
    window: SearchWindow
    model: ModelConfig
    loss: LossConfig
    training: TrainConfig
    follow: FollowConfig

    def to_mapping(self) -> Dict[str, Any]:
        """Effective configuration, readable back by build_run_config."""
        model = self.model.to_mapping()
        return {
            "Seed": self.seed,
            "Detector": self.detector.to_mapping(),
            "Generation": asdict(self.generation),
            "Search_window": asdict(self.window),
            "Model": {k: model[k] for k in MODEL_DEFAULTS},
            "Loss": asdict(self.loss),
            "Training": asdict(self.training),
            "Follow": asdict(self.follow),
        }


def build_run_config(config: Dict[str, Any]) -> RunConfig:
    """Validate a raw config mapping into a RunConfig."""
    for key in config:
        _canonical_section(key)
    detector = get_detector_config(config)
    generation = get_generation_config(config)
    try:
        generation.validate(detector)
    except ValueError as e:
        raise ConfigError(f"Generation: {e}") from e
    return RunConfig(
        seed=get_seed(config),
        detector=detector,
        generation=generation,
        window=get_search_window(config),
        model=get_model_config(config, detector),
        loss=get_loss_config(config),
        training=get_train_config(config),
        follow=get_follow_config(config),
    )


def load_run_config(config_path: Optional[str] = "config.yaml", overrides: Iterable[str] = (),
                    seed: Optional[int] = None) -> RunConfig:
    """File, then --set overrides, then an explicit --seed."""
    raw = load_config(config_path) if config_path else {}
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw = apply_overrides(raw, [f"Seed={int(seed)}"])
    return build_run_config(raw)
