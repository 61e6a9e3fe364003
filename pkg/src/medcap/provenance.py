"""Run provenance written next to primary outputs.

Timestamps, git revision and package versions change between otherwise
identical runs, so they live in ``metadata.json`` and never in reports,
captions or checkpoints' metric records.
"""

import json
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Any, Optional

import git

from medcap.__version__ import __version__
from medcap.errors import IoError

logger = logging.getLogger(__name__)

METADATA_FILENAME = "metadata.json"

TRACKED_PACKAGES = ("torch", "torchvision", "numpy", "Pillow", "scikit-learn", "pandas")


def get_git_revision(path: Optional[Path] = None) -> Optional[str]:
    """Commit of the enclosing git work tree, suffixed "-dirty" with local changes.

    Returns:
        Hex revision, or None outside a repository or without git installed
    """
    try:
        repo = git.Repo(path or Path.cwd(), search_parent_directories=True)
    except (git.InvalidGitRepositoryError, git.NoSuchPathError) as e:
        logger.debug(f"Not inside a git repository: {e}")
        return None
    except git.GitCommandNotFound:
        logger.warning("Git not found in PATH")
        return None
    try:
        revision = repo.head.commit.hexsha
        if repo.is_dirty(untracked_files=False):
            revision += "-dirty"
        return revision
    except (ValueError, git.GitCommandError) as e:
        # Fresh repository without commits.
        logger.debug(f"Cannot resolve HEAD: {e}")
        return None
    finally:
        repo.close()


def package_versions() -> dict[str, Optional[str]]:
    versions: dict[str, Optional[str]] = {"medcap": __version__}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = importlib_metadata.version(name)
        except importlib_metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def build_metadata(
    command: str, config: dict[str, Any], extra: Optional[dict[str, Any]] = None
) -> dict[str, Any]:
    """Collect provenance for one CLI invocation."""
    return {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "git_revision": get_git_revision(),
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "packages": package_versions(),
        "config": config,
        **(extra or {}),
    }


def write_metadata(out_dir: Path, metadata: dict[str, Any]) -> Path:
    path = out_dir / METADATA_FILENAME
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}") from None
    logger.debug(f"Wrote run metadata to {path}")
    return path
