import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


class Config:
    # Output
    UTAP_OUTPUT_DIR = os.getenv('UTAP_OUTPUT_DIR', 'runs')

    # Logging
    UTAP_LOG_LEVEL = os.getenv('UTAP_LOG_LEVEL', 'INFO').upper()

    # Threads for per-member work (pool training, crafting, evaluation)
    UTAP_WORKERS = int(os.getenv('UTAP_WORKERS', 4))

    # Long acceptance tests
    UTAP_RUN_SLOW = os.getenv('UTAP_RUN_SLOW', '0').lower() in ('1', 'true', 'yes')

    @classmethod
    def output_root(cls):
        return Path(cls.UTAP_OUTPUT_DIR)
