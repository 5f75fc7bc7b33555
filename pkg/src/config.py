# Experiment configuration for apcir
import copy
from pathlib import Path

import yaml

from src.errors import ConfigError


DEFAULT_CONFIG = {
    "name": None,
    "paths": {
        "corpus": None,
        "sessions": None,
        "qrels": None,
        "work_dir": "runs",
        "cache_dir": None,
    },
    "retrieval": {
        "k1": 0.9,
        "b": 0.4,
        "top_k": 1000,
        "stopwords": False,
        "query_max_tokens": 64,
        "response_max_tokens": 256,
        "passage_max_tokens": 256,
        "truncate_passages": False,
        "workers": 1,
    },
    "reformulation": {
        "backend": "echo",
        "model": "gpt-4o",
        "fixtures": None,
        "mock_default": False,
        "template": "full",
        "max_retries": 2,
        "max_in_flight": 4,
        "temperature": 0.0,
    },
    "fusion": {
        "strategy": "linear",
        "rrf_k": 60.0,
        "depth": 1000,
    },
    "weights": {
        "metric": "ndcg@3",
        "step": 0.01,
        "fit_on": "self",
        "weights_file": None,
        "other_config": None,
        "fitted_on": None,
        "group_by": "level",
        "workers": 1,
    },
    "estimators": {
        "method": "entropy",
        "seed": 0,
        "embed_dim": 256,
        "deps_top_k": 10,
    },
    "evaluation": {
        "metrics": ["mrr", "ndcg@3", "recall@10", "recall@100"],
        "rel_threshold": 1,
        "mrr_cutoff": None,
        "gain": "linear",
    },
    "synthetic": {
        "seed": 13,
        "n_sessions": 6,
        "n_passages": 1000,
        "turns_per_session": 5,
    },
}


def _merge(base, override, section=None):
    for key, value in override.items():
        if section is None and key not in base:
            raise ConfigError(f"Unknown config section: {key!r}")
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, section=key)
        else:
            base[key] = value
    return base


FILE_OPTIONS = (("reformulation", "fixtures"), ("weights", "weights_file"), ("weights", "other_config"))


def _path_keys(config):
    return [("paths", key) for key in config["paths"]] + list(FILE_OPTIONS)


def default_config():
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(config_path):
    """
    Load an experiment configuration from a YAML file and merge it over the defaults.

    Relative paths in the ``paths`` section, and the fixture, weights and
    other-config files, are resolved against the directory holding the
    config file. ``name`` defaults to that directory's name.

    Args:
        config_path (Path | str): Path to the config.yaml file

    Returns:
        dict: Complete configuration

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: If the file has an unknown section
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, "r", encoding="utf-8") as f:
        loaded = yaml.safe_load(f) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"Config file must hold a mapping: {config_path}")

    config = _merge(default_config(), loaded)
    config["name"] = config["name"] or config_path.resolve().parent.name
    for section, key in _path_keys(config):
        value = config[section][key]
        if value is not None and not Path(value).is_absolute():
            config[section][key] = str(config_path.parent / value)
    return config


def apply_overrides(config, overrides):
    """
    Apply ``{"section.key": value}`` overrides from CLI flags; None values are skipped.
    """
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if section not in config:
            raise ConfigError(f"Unknown config section: {section!r}")
        config[section][key] = value
    return config
