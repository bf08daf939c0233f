import copy
import logging
from typing import Any, Dict, Optional

import yaml

from config import settings

logger = logging.getLogger(__name__)


class PresetLoader:
    _instance = None
    _presets = None

    def __new__(cls):
        """Singleton so experiments.yml is parsed once per process"""
        if cls._instance is None:
            cls._instance = super(PresetLoader, cls).__new__(cls)
            cls._instance._load_presets()
        return cls._instance

    def _load_presets(self, path: Optional[str] = None):
        """Load scenario presets from YAML file"""
        presets_path = path or settings.RSS_PRESETS_FILE
        try:
            with open(presets_path, 'r', encoding='utf-8') as file:
                self._presets = yaml.safe_load(file) or {}
            logger.info(f"Loaded presets from {presets_path}")
        except Exception as e:
            logger.error(f"Error loading presets: {str(e)}")
            self._presets = {}

    def reload(self, path: Optional[str] = None):
        self._load_presets(path)

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Get a preset value by its dotted key path, e.g. get('isotropic.scenario.d').
        Returns a deep copy so callers can merge overrides freely.
        """
        current = self._presets or {}
        for part in key_path.split('.'):
            if isinstance(current, dict) and part in current:
                current = current[part]
            else:
                logger.warning(f"Preset key not found: {key_path}")
                return default
        return copy.deepcopy(current)

    def scenario(self, name: str) -> Dict[str, Any]:
        """Scenario dict for a named preset, ready for Scenario.model_validate after overrides"""
        data = self.get(f"{name}.scenario")
        if not isinstance(data, dict):
            raise KeyError(f"no scenario preset named {name!r}")
        return data


# Singleton instance
preset_loader = PresetLoader()
