"""
Exporters module.

This module handles writing experiment results: headered CSV tables with
full-precision floats and LF line endings, and JSON summaries.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Sequence

import numpy as np

from common.errors import InvalidInputError


def _plain(value: Any) -> Any:
    """Convert numpy scalars and arrays to JSON-friendly Python values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        # JSON has no inf/nan literals
        return str(value)
    return value


def write_csv(path, columns: Dict[str, Sequence]) -> Path:
    """Write equal-length columns under a one-line header, in the given order."""
    path = Path(path)
    names = list(columns)
    data = [np.asarray(columns[name]).tolist() for name in names]
    lengths = {len(col) for col in data}
    if len(lengths) > 1:
        raise InvalidInputError(f"CSV columns for {path.name} have unequal lengths: {sorted(lengths)}")

    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(names)
        writer.writerows(zip(*data))
    return path


def write_json(path, payload: Dict[str, Any]) -> Path:
    """Write a JSON summary with sorted keys."""
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(_plain(payload), f, indent=2, sort_keys=True)
        f.write('\n')
    return path
