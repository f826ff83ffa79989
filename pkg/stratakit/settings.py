# stratakit/settings.py
from __future__ import annotations
import os
from dataclasses import dataclass
from pathlib import Path

try:
    from dotenv import load_dotenv  # optional
    load_dotenv()
except Exception:
    pass

ROOT_DIR = Path(__file__).resolve().parent.parent


def _env_seed() -> int | None:
    raw = os.getenv("STRATAKIT_SEED", "").strip()
    return int(raw) if raw else None


@dataclass(frozen=True)
class Settings:
    SEED: int | None = _env_seed()
    THREADS: int = int(os.getenv("STRATAKIT_THREADS", str(os.cpu_count() or 1)))
    VERBOSE: bool = bool(int(os.getenv("STRATAKIT_VERBOSE", "0")))
    # pair_min_weight enumerates every perfect matching up to this many entities
    BRUTE_FORCE_LIMIT: int = int(os.getenv("STRATAKIT_BRUTE_FORCE_LIMIT", "10"))
    # strata larger than this are matched inside PCA folds; 0 disables folding
    FOLD_SIZE: int = int(os.getenv("STRATAKIT_FOLD_SIZE", "200"))
    KMAX: int = int(os.getenv("STRATAKIT_KMAX", "8"))
    LEVELS: int = int(os.getenv("STRATAKIT_LEVELS", "3"))
    ALPHA: float = float(os.getenv("STRATAKIT_ALPHA", "0.05"))
    VARIANCE_FLOOR: float = float(os.getenv("STRATAKIT_VARIANCE_FLOOR", "0.01"))

settings = Settings()
