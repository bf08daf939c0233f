import json
import logging
from typing import Any, Optional

from cachetools import LRUCache

logger = logging.getLogger(__name__)

# ERM baselines keyed by (spec, seed, labeled size, training config)
baseline_cache: LRUCache = LRUCache(maxsize=256)


def baseline_key(spec_params: dict, seed: int, labeled_size: int, config_json: str) -> str:
    """Stable key for an ERM baseline run"""
    return json.dumps(
        {"spec": spec_params, "seed": seed, "m": labeled_size, "config": config_json},
        sort_keys=True,
    )


def get_cached_baseline(key: str) -> Optional[Any]:
    """Get a trained ERM baseline if one is cached"""
    value = baseline_cache.get(key)
    if value is not None:
        logger.debug(f"Cache hit for baseline key: {key[:80]}")
        return value
    logger.debug(f"Cache miss for baseline key: {key[:80]}")
    return None


def set_cached_baseline(key: str, value: Any) -> None:
    baseline_cache[key] = value
    logger.debug(f"Cache set for baseline key: {key[:80]} ({len(baseline_cache)} entries)")


def clear_cache() -> int:
    """Drop every cached baseline, returning how many were removed"""
    count = len(baseline_cache)
    baseline_cache.clear()
    logger.debug(f"Cleared {count} cached baselines")
    return count
