"""
Versioned JSON and CSV artifacts.

Every JSON artifact starts with ``schema`` and ``version``. Files are written
to a temporary name in the target directory and renamed into place, and JSON
keys are sorted so equal inputs give byte-identical files.
"""

import hashlib
import json
import os
import tempfile
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd

from errors import ArtifactError

logger = getLogger(__name__)

__all__ = ['SCHEMA_VERSION', 'write_json', 'read_json', 'write_csv', 'file_sha256']

SCHEMA_VERSION = "1.0"
CSV_FLOAT_FORMAT = "%.10g"


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, 'w', encoding='utf-8', newline='') as stream:
            stream.write(text)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise


def write_json(path: Union[str, Path], kind: str, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    document = {'schema': kind, 'version': SCHEMA_VERSION}
    document.update(payload)
    _atomic_write(path, json.dumps(document, sort_keys=True, indent=2) + "\n")
    logger.info("wrote %s (%s)", path, kind)
    return path


def read_json(path: Union[str, Path], kind: str) -> Dict[str, Any]:
    """Load an artifact, checking its schema tag and major version."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing artifact {path.name}; run the producing subcommand first",
                            {'path': str(path), 'schema': kind})
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ArtifactError("artifact is not valid JSON", {'path': str(path), 'line': exc.lineno})
    if document.get('schema') != kind:
        raise ArtifactError("artifact has the wrong schema",
                            {'path': str(path), 'expected': kind, 'found': document.get('schema')})
    major = str(document.get('version', '')).split('.')[0]
    if major != SCHEMA_VERSION.split('.')[0]:
        raise ArtifactError("unsupported artifact version",
                            {'path': str(path), 'version': document.get('version')})
    return document


def write_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    path = Path(path)
    _atomic_write(path, frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT))
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as stream:
        for chunk in iter(lambda: stream.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()
