import os
import logging
from dotenv import load_dotenv

from services.errors import ConfigurationError

load_dotenv()

# Pillow logs every plugin it probes at DEBUG
logging.getLogger('PIL').setLevel(logging.WARNING)

logger = logging.getLogger(__name__)


class CrowdkitConfig:
    def __init__(self):
        self.threads = self._read_int('CROWDKIT_THREADS', 1)
        self.log_level = os.getenv('CROWDKIT_LOG_LEVEL', 'INFO').upper()
        self.seed = self._read_int('CROWDKIT_SEED', 0)
        self.progress = os.getenv('CROWDKIT_PROGRESS', '0') not in ('0', '', 'false', 'False')
        self.sigma = self._read_float('CROWDKIT_SIGMA', 15.0)
        self.adaptive_beta = self._read_float('CROWDKIT_ADAPTIVE_BETA', 0.3)
        self.adaptive_k = self._read_int('CROWDKIT_ADAPTIVE_K', 3)
        self.attention_cap = self._read_int('CROWDKIT_ATTENTION_CAP', 4096)

    @staticmethod
    def _read_int(name, default):
        raw = os.getenv(name)
        if raw is None or raw == '':
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{name} must be an integer, got {raw!r}")

    @staticmethod
    def _read_float(name, default):
        raw = os.getenv(name)
        if raw is None or raw == '':
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{name} must be a number, got {raw!r}")

    def validate(self):
        """Reject settings no command can run with"""
        if self.threads < 1:
            raise ConfigurationError(f"CROWDKIT_THREADS must be >= 1, got {self.threads}")
        if self.log_level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigurationError(f"CROWDKIT_LOG_LEVEL not recognised: {self.log_level}")
        if self.sigma <= 0 or self.adaptive_beta <= 0:
            raise ConfigurationError("CROWDKIT_SIGMA and CROWDKIT_ADAPTIVE_BETA must be positive")
        if self.adaptive_k < 1:
            raise ConfigurationError("CROWDKIT_ADAPTIVE_K must be >= 1")
        if self.attention_cap < 1:
            raise ConfigurationError("CROWDKIT_ATTENTION_CAP must be >= 1")
        return self


# Shared instance, read once per process
crowdkit_config = CrowdkitConfig()
