"""Config file handling for the CLI: TOML sections per module, built-in
defaults, and dotted-path --set overrides (highest precedence)."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bias_tokens import TaggerConfig
from .corpus import SyntheticSpec
from .encoder import EncoderConfig
from .model import ModelConfig
from .training import TrainConfig

TAGGER_ENDPOINT_ENV = "EVENTDEBIAS_TAGGER_ENDPOINT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "corpus": {
        "path": "",
        "task_kind": "multi-class",
        "labels": [],
        "domains": [],
        "split_counts": [],
        "merge_map": {},
        "drop_labels": [],
        "min_posts_per_event": 0,
        "split_dir": "",
    },
    "synthetic": {
        "enabled": False,
        "seed": 0,
        "n_labels": 4,
        "n_domains": 4,
        "events_per_split": [12, 3, 4],
        "posts_per_event": 100,
        "rho_train": 0.9,
        "rho_test": 0.0,
        "vocab_size": 200,
    },
    "bias_tokens": {
        "entities": True,
        "hashtags": True,
        "numerals": True,
        "mentions": False,
        "endpoint": "",
        "timeout": 2.0,
    },
    "model": {
        "encoder": "tiny",
        "d": 64,
        "layers": 2,
        "heads": 2,
        "ffn_dim": 0,          # 0 -> 4*d
        "max_len": 128,
        "encoder_dropout": 0.1,
        "hidden": 384,
        "dropout": 0.2,
        "alpha": 0.1,
        "cnn_layers": 5,
        "cnn_channels": 64,
        "mask_prob": 0.5,
        "detach_bias_encoder": False,
        "use_experts": True,
        "use_bias_branch": True,
        "include_cls_in_attention": True,
        "unknown_domain_fallback": False,
    },
    "training": {
        "lambda": 0.2,
        "epochs": 30,
        "batch_size": 32,
        "lr_encoder": 1e-5,
        "lr_heads": 1e-4,
        "scheduler": "cosine",
        "seeds": [0, 42, 64, 86, 128],
        "patience": 0,         # 0 -> no early stopping
        "sequential_bias": False,
        "validate_with_masking": False,
        "vocab_size": 30000,
    },
    "strategy": {
        "name": "debias",
        "params": {},
    },
    "probing": {
        "fraction": 0.05,
        "n_seeds": 25,
        "targets": ["domain", "event", "information-type"],
        "components": ["baseline", "bias", "main"],
    },
    "run": {
        "dir": "runs",
    },
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in merged:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(merged[key], dict) and isinstance(value, dict):
            # free-form tables pass through untouched
            if key in ("params", "merge_map"):
                merged[key] = copy.deepcopy(value)
            else:
                merged[key] = _deep_merge(merged[key], value, here)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"--set has an empty key in {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def _apply_override(cfg: dict, parts: list[str], value: object) -> None:
    node = cfg
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section {'.'.join(parts)!r}")
        node = node[part]
    leaf = parts[-1]
    free_form = len(parts) >= 2 and parts[-2] in ("params", "merge_map")
    if leaf not in node and not free_form:
        raise ConfigError(f"unknown config key {'.'.join(parts)!r}")
    node[leaf] = value


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> dict:
    """Resolve config: --set overrides > config file > built-in defaults."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        try:
            with path.open("rb") as fh:
                file_cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        cfg = _deep_merge(cfg, file_cfg)
    for item in overrides or []:
        parts, value = parse_override(item)
        _apply_override(cfg, parts, value)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    encoder = EncoderConfig(name=m["encoder"], d=m["d"], layers=m["layers"],
                            heads=m["heads"],
                            ffn_dim=m["ffn_dim"] or None,
                            max_len=m["max_len"], dropout=m["encoder_dropout"])
    return ModelConfig(encoder=encoder, hidden=m["hidden"], dropout=m["dropout"],
                       alpha=m["alpha"], cnn_layers=m["cnn_layers"],
                       cnn_channels=m["cnn_channels"], mask_prob=m["mask_prob"],
                       detach_bias_encoder=m["detach_bias_encoder"],
                       use_experts=m["use_experts"],
                       use_bias_branch=m["use_bias_branch"],
                       include_cls_in_attention=m["include_cls_in_attention"],
                       unknown_domain_fallback=m["unknown_domain_fallback"])


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(lam=t["lambda"], epochs=t["epochs"], batch_size=t["batch_size"],
                       lr_encoder=t["lr_encoder"], lr_heads=t["lr_heads"],
                       scheduler=t["scheduler"], seed=seed,
                       patience=t["patience"] or None,
                       sequential_bias=t["sequential_bias"],
                       validate_with_masking=t["validate_with_masking"])


def tagger_config(cfg: dict) -> TaggerConfig:
    b = cfg["bias_tokens"]
    endpoint = b["endpoint"] or os.environ.get(TAGGER_ENDPOINT_ENV, "")
    return TaggerConfig(entities=b["entities"], hashtags=b["hashtags"],
                        numerals=b["numerals"], mentions=b["mentions"],
                        endpoint=endpoint or None, timeout=b["timeout"])


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    s = cfg["synthetic"]
    n_domains = s["n_domains"]
    defaults = SyntheticSpec()
    weights = defaults.domain_weights if n_domains == len(defaults.domain_weights or ()) else None
    return SyntheticSpec(n_labels=s["n_labels"], n_domains=n_domains,
                         events_per_split=tuple(s["events_per_split"]),
                         posts_per_event=s["posts_per_event"],
                         rho_train=s["rho_train"], rho_test=s["rho_test"],
                         vocab_size=s["vocab_size"], domain_weights=weights)
