"""Line-delimited JSON run logs and their replay."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


class RunLog:
    """Collects records in memory and, optionally, appends them to a JSONL file."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.records: List[Dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: Dict) -> None:
        record = _clean(record)
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def of_kind(self, kind: str) -> List[Dict]:
        return [r for r in self.records if r.get("kind") == kind]


def read_log(path: Union[str, Path]) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def curves(records: Iterable[Dict], kind: str = "epoch") -> Dict[str, List]:
    """Column-wise view of all numeric fields of the records of one kind."""
    out: Dict[str, List] = {}
    for r in records:
        if r.get("kind") != kind:
            continue
        flat = {}
        for k, v in r.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        for k, v in flat.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                out.setdefault(k, []).append(v)
    return out
