"""
Configuration settings for HandScaleFK.

Values come from environment variables, optionally loaded from a `.env` file
at the project root. Command-line flags override everything read here.
"""

import os
from functools import lru_cache
from pathlib import Path
from typing import Optional

from .errors import ValidationError

project_root = Path(__file__).resolve().parent.parent
package_data = Path(__file__).resolve().parent / 'data'

try:
    from dotenv import load_dotenv
    load_dotenv(project_root / '.env')
except ImportError:
    pass

DEFAULT_TREE_PATH = package_data / 'default_tree.json'
TREE_SCHEMA_PATH = package_data / 'tree_schema.json'
JOINT_MAPS_DIR = package_data / 'joint_maps'


class Settings:
    """Application settings loaded from environment variables."""

    def __init__(self):
        self.tree_config: Path = Path(os.getenv('HANDFK_TREE_CONFIG', str(DEFAULT_TREE_PATH)))
        self.log_level: str = os.getenv('HANDFK_LOG_LEVEL', 'INFO').upper()
        self.log_file: Optional[str] = os.getenv('HANDFK_LOG_FILE') or None
        seed = os.getenv('HANDFK_SEED', '0')
        try:
            self.seed: int = int(seed)
        except ValueError:
            raise ValidationError(f'HANDFK_SEED must be an integer, got {seed!r}', 'config') from None


@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Tests that patch the environment must call `get_settings.cache_clear()`.
    """
    return Settings()
