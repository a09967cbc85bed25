"""Single self-describing JSON config with dotted-key overrides.

Precedence: CLI --set overrides > config file > built-in defaults. The
hash of the resolved config is stamped into every output file.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import RelinkError

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "corpus": "corpus.jsonl",
        "catalog": "catalog.jsonl",
        "store_dir": "stores",
        "out_dir": "out",
        "templates_dir": None,
    },
    "pool": {
        "tau_c": 0.0,
        "alpha": 0.5,
        "max_contexts_per_pair": 3,
        "clamp_at_zero": False,
    },
    "space": {
        "dim": 64,
        "tau": 0.07,
    },
    "train": {
        "margin": 0.2,
        "lr_ranker": 0.01,
        "lr_adapter": 0.01,
        "batch_size": 32,
        "patience": 3,
        "max_cycles": 20,
        "negatives_per_positive": 4,
        "val_fraction": 0.2,
    },
    "explore": {
        "beam_width": 4,
        "shortlist_size": 8,
        "max_hops": 4,
        "completeness_check": True,
        "completeness_min_ds": 0.5,
    },
    "eval": {
        "sample_size": None,
    },
    "gateway": {
        "backend": "http",
        "base_url": "http://localhost:8000/v1",
        "api_key_env": "RELINK_API_KEY",
        "chat_model": "deepseek-chat",
        "embed_model": "text-embedding",
        "max_retries": 2,
        "timeout": 60.0,
        "max_in_flight": 4,
        "retry_backoff": 0.5,
        "transcript_mode": "off",
        "transcript_path": None,
        "mock_seed": 0,
        "mock_embed_dim": 64,
    },
}

_RANGES = {
    "pool.alpha": (0.0, float("inf")),
    "pool.max_contexts_per_pair": (1, float("inf")),
    "space.dim": (1, float("inf")),
    "space.tau": (1e-12, float("inf")),
    "train.margin": (1e-12, float("inf")),
    "train.lr_ranker": (0.0, float("inf")),
    "train.lr_adapter": (0.0, float("inf")),
    "train.batch_size": (2, float("inf")),
    "train.patience": (0, float("inf")),
    "train.max_cycles": (0, float("inf")),
    "train.val_fraction": (0.0, 1.0),
    "explore.beam_width": (1, float("inf")),
    "explore.shortlist_size": (1, float("inf")),
    "explore.max_hops": (0, float("inf")),
    "explore.completeness_min_ds": (0.0, 1.0),
    "gateway.max_retries": (0, float("inf")),
    "gateway.max_in_flight": (1, float("inf")),
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _get(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        node = node[part]
    return node


def set_dotted(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise RelinkError(f"unknown config section {part!r} in {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise RelinkError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise RelinkError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def validate(config: dict) -> None:
    for dotted, (lo, hi) in _RANGES.items():
        value = _get(config, dotted)
        if value is None:
            continue
        if not (lo <= value <= hi):
            raise RelinkError(
                f"config {dotted} = {value!r} outside valid range [{lo}, {hi}]"
            )


def load_config(path=None, overrides: list[str] = ()) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            config = _deep_merge(config, json.load(fh))
    for text in overrides:
        key, value = parse_override(text)
        set_dotted(config, key, value)
    validate(config)
    return config


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
