"""Flat-file outputs.  Column names and JSON keys are part of the public contract."""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Iterable, Sequence

import numpy as np

IMPRESSION_COLUMNS = ("instance_id", "advertiser", "slot", "layout", "bid", "click_prob")
CLICK_COLUMNS = ("instance_id", "advertiser", "slot", "bid", "click_prob")
CHARGE_COLUMNS = ("instance_id", "scheme", "advertiser", "slot", "bid", "charge", "rebate")
TRAJECTORY_COLUMNS = ("epoch", "advertiser", "category", "bid", "ctr", "residual", "V")
TRACE_COLUMNS = ("iteration", "V", "max_residual")
AUDIT_COLUMNS = ("instance_id", "advertiser", "slot", "bid", "vcg_rebate", "leonard",
                 "randomized_exact", "randomized_mean", "randomized_se")


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    ensure_dir(os.path.dirname(path) or ".")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
    return path


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if math.isnan(x) or math.isinf(x) else x
    return obj


def write_json(path: str, obj) -> str:
    ensure_dir(os.path.dirname(path) or ".")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False))
        fh.write("\n")
    return path


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
