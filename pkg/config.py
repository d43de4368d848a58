import os
import json
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from utils.logger import get_logger
from utils.seeding import parse_seed

# Load environment variables (ASYNCNET_SEED may come from a local .env)
load_dotenv()

SEED_ENV_VAR = "ASYNCNET_SEED"


class Config:
    """Run settings for asyncnet"""

    def __init__(self, config_file: Optional[Path] = None):
        self.config_dir = Path.home() / ".asyncnet"
        self.config_file = Path(config_file) if config_file else self.config_dir / "config.json"
        self.default_config = {
            "threads": os.cpu_count() or 1,
            "tolerance": 0.2,
            "rate_tolerance": 0.25,
            "log_level": "WARNING",
            "log_file": None,
            "divergence_threshold": 1e12,
        }
        self.config = self.load_config()

    def load_config(self):
        """Load settings from file merged over the defaults"""
        merged_config = self.default_config.copy()
        if not self.config_file.exists():
            return merged_config
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                user_config = json.load(f)
            if not isinstance(user_config, dict):
                raise ValueError("settings file must hold a JSON object")
            merged_config.update({k: v for k, v in user_config.items() if k in self.default_config})
        except (OSError, ValueError) as e:
            get_logger("config").warning("SETTINGS_IGNORED: %s (%s)", self.config_file, e)
        return merged_config

    def get(self, key, default=None):
        """Get setting value"""
        return self.config.get(key, default)

    def set(self, key, value):
        """Set setting value for this process"""
        self.config[key] = value

    def get_threads(self) -> int:
        return max(1, int(self.get("threads", 1)))

    def seed_fallback(self) -> Optional[int]:
        """Seed from the environment, or None when unset"""
        return parse_seed(os.environ.get(SEED_ENV_VAR), SEED_ENV_VAR)


# Global config instance
config = Config()
