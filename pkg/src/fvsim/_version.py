"""Version string, refined by ``git describe`` when the package runs from a checkout."""

from __future__ import annotations

import subprocess
from pathlib import Path

__version__ = "0.1.0"


def describe() -> str:
    """``__version__`` plus the git description of the source tree, if any."""
    root = Path(__file__).resolve().parents[2]
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root, capture_output=True,
                             text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    tag = out.stdout.strip()
    return f"{__version__}+{tag}" if out.returncode == 0 and tag else __version__
