import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np


def get_appdata_folder(app_name: str = "tissuebench") -> Path:
    """Returns the per-user data folder, creating it if needed.

    ``TISSUEBENCH_HOME`` overrides the platform default.
    """
    override = os.getenv("TISSUEBENCH_HOME")
    if override:
        path = Path(override).expanduser()
    elif sys.platform == "win32":
        appdata = os.getenv("APPDATA")
        if not appdata:
            raise EnvironmentError("APPDATA environment variable is not set.")
        path = Path(appdata) / app_name
    elif sys.platform == "darwin":
        path = Path(os.path.expanduser("~")) / "Library" / "Application Support" / app_name
    else:
        path = Path(os.path.expanduser("~")) / ".local" / "share" / app_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def default_output_root() -> Path:
    return get_appdata_folder() / "runs"


def human_readable_duration(seconds: float) -> str:
    """Formats a duration, e.g. "42 seconds", "3 minutes", "2 hours"."""
    seconds = max(0, int(round(seconds)))
    if seconds < 60:
        return f"{seconds} seconds"
    elif seconds < 3600:
        return f"{seconds // 60} minutes"
    elif seconds < 86400:
        return f"{seconds // 3600} hours"
    else:
        return f"{seconds // 86400} days"


def derive_seed(base_seed: int, *keys: int) -> int:
    """Derives an independent 31-bit seed from a base seed and integer keys."""
    sequence = np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint32)[0] & 0x7FFFFFFF)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: Path, payload: Any) -> Path:
    """Writes ``payload`` as indented JSON with sorted keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")
    return path
