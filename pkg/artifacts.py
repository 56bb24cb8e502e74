"""
VoiceShield Artifacts
Atomic file writes and the CSV conventions shared by labels, features,
manifests, logs and reports.
"""

import os
import logging
import tempfile
import traceback
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Union

import pandas as pd

from errors import IoError

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = '%.9g'

PathLike = Union[str, Path]


@contextmanager
def atomic_write(path: PathLike) -> Iterator[Path]:
    """
    Yield a temporary path next to `path`; rename it into place on success.

    The temporary file is removed if the body raises, so a failed write never
    leaves a partial file at the destination.
    """
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f'.{target.name}.', suffix='.tmp', dir=target.parent)
        os.close(fd)
    except OSError as e:
        raise IoError(f"Cannot write {target}: {e}")

    tmp_path = Path(tmp_name)
    try:
        yield tmp_path
        os.replace(tmp_path, target)
    except OSError as e:
        logger.error(f"Failed to write {target}: {str(e)}")
        logger.debug(traceback.format_exc())
        raise IoError(f"Cannot write {target}: {e}")
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def write_csv(df: pd.DataFrame, path: PathLike):
    """Write a DataFrame as CSV with 9 significant digits, atomically."""
    with atomic_write(path) as tmp:
        df.to_csv(tmp, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.debug(f"Wrote {len(df)} rows to {path}")


def read_csv(path: PathLike) -> pd.DataFrame:
    """Read a toolkit CSV, mapping filesystem failures to IoError."""
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IoError(f"Cannot read {path}: {e}")
