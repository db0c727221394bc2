"""
Configuration Loader

Centralized access to the defaults in app_config.json: material, per-case
settings, solver and verification tolerances, profile sampling.

DDEC_CONFIG may point at a replacement JSON file; DDEC_OUTPUT_DIR overrides
the default output directory.
"""

import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger("ddec-config")


class ConfigLoader:
    """
    Centralized configuration loader.

    Loads settings from app_config.json and provides dot-notation access.
    """

    CONFIG_FILE = "app_config.json"
    CONFIG_ENV = "DDEC_CONFIG"

    def __init__(self, config_path: Optional[Path] = None):
        """
        Initialize config loader.

        Args:
            config_path: Optional custom path to config file
        """
        if config_path:
            self._config_path = Path(config_path)
        elif os.environ.get(self.CONFIG_ENV):
            self._config_path = Path(os.environ[self.CONFIG_ENV])
        else:
            self._config_path = Path(__file__).parent / self.CONFIG_FILE

        self._config: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self) -> None:
        """Load configuration from JSON file."""
        try:
            if self._config_path.exists():
                with open(self._config_path, "r", encoding="utf-8") as f:
                    self._config = json.load(f)
            else:
                logger.warning("Config file %s not found, using built-in defaults", self._config_path)
                self._config = {}
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Could not load config %s: %s", self._config_path, e)
            self._config = {}

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a configuration value by dot-notation key.

        Args:
            key: Dot-notation key (e.g., "cases.d2.alphas")
            default: Default value if not found

        Returns:
            Configuration value or default
        """
        value = self._config
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def get_section(self, section: str) -> Dict[str, Any]:
        """Top-level section or an empty dict."""
        return self._config.get(section, {})

    @property
    def app_version(self) -> str:
        return self.get("app.version", "0.0.0")

    @property
    def output_dir(self) -> str:
        """DDEC_OUTPUT_DIR if set, otherwise output.default_dir."""
        env = self.get("output.env_var", "DDEC_OUTPUT_DIR")
        return os.environ.get(env) or self.get("output.default_dir", "ddec_output")

    @property
    def material(self) -> Dict[str, Any]:
        return self.get_section("material")

    @property
    def available_cases(self) -> List[str]:
        return list(self.get_section("cases").keys())

    def case_settings(self, case: str) -> Dict[str, Any]:
        """
        Settings of one case.

        Raises:
            ValueError: If the case is not configured.
        """
        settings = self.get(f"cases.{case}")
        if settings is None:
            raise ValueError(f"Unknown case '{case}', configured: {self.available_cases}")
        return settings

    @property
    def newton_maxit(self) -> int:
        return self.get("solver.newton_maxit", 50)

    @property
    def relative_tolerance(self) -> float:
        """Newton tolerance relative to 1 + ||rhs||."""
        return self.get("solver.relative_tolerance", 1e-12)

    @property
    def verification_tolerances(self) -> Dict[str, float]:
        return self.get_section("verification")

    def reload(self) -> None:
        """Reload configuration from file."""
        self._load_config()


@lru_cache(maxsize=1)
def get_config() -> ConfigLoader:
    """
    Get the global configuration loader instance.

    Returns:
        ConfigLoader instance
    """
    return ConfigLoader()


def get_app_version() -> str:
    return get_config().app_version


def get_output_dir() -> str:
    return get_config().output_dir


def get_case_settings(case: str) -> Dict[str, Any]:
    return get_config().case_settings(case)


def get_profile_line() -> Dict[str, Any]:
    """Profile height and sample count."""
    return {"y": get_config().get("profile.y", 0.5), "samples": get_config().get("profile.samples", 200)}
