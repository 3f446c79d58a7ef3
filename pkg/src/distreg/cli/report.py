"""Versioned JSON report document.

Reports embed the resolved configuration, its hash, the master seed, and all
row-drop accounting, so a run can be reproduced from the report alone. No
timestamps: identical config and seed give byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

REPORT_VERSION = 1

__all__ = ["REPORT_VERSION", "new_report", "write_report", "jsonify"]


def jsonify(value):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(value, dict):
        return {str(k): jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonify(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonify(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, float) and (np.isnan(value) or np.isinf(value)):
        return None
    return value


def new_report(subcommand: str, config_digest: str, config_raw: dict, seed: int,
               accounting: dict) -> dict:
    return {
        "version": REPORT_VERSION,
        "subcommand": subcommand,
        "provenance": {
            "config_hash": config_digest,
            "seed": seed,
            "config": config_raw,
            "rows": accounting,
        },
    }


def write_report(doc: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonify(doc), sort_keys=True, indent=2) + "\n")
    return path
