"""Shared plumbing for the pafa tool handlers."""

import functools
import logging
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, Optional, Union

from ..config import resolve_cache_dir
from ..datamodel import Manifest, read_manifest
from ..errors import PafaError
from ..features import FeatureCache

logger = logging.getLogger("pafa.tools")

Handler = Callable[..., Awaitable[Dict[str, Any]]]


def reports_errors(handler: Handler) -> Handler:
    """Turn PafaError into a failure dict carrying the exit code."""
    @functools.wraps(handler)
    async def wrapper(**kwargs) -> Dict[str, Any]:
        try:
            return await handler(**kwargs)
        except PafaError as e:
            logger.error(f"{handler.__name__}: {e}")
            return {
                "success": False,
                "error": str(e),
                "error_type": type(e).__name__,
                "exit_code": e.exit_code,
            }

    return wrapper


def open_cache(cache_dir: Optional[Union[str, Path]], normalization: str) -> FeatureCache:
    return FeatureCache(resolve_cache_dir(cache_dir), normalization)


def load_manifest(path: Union[str, Path]) -> Manifest:
    manifest = read_manifest(path)
    logger.info(f"Loaded {len(manifest)} samples ({manifest.provenance}) from {path}")
    return manifest


def manifest_base_dir(manifest_path: Union[str, Path], base_dir: Optional[Union[str, Path]] = None) -> Path:
    """Audio paths in a manifest are relative to its own directory unless told otherwise."""
    return Path(base_dir) if base_dir is not None else Path(manifest_path).resolve().parent
