"""Logging setup and the append-only JSON-lines training log."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Union[int, str] = logging.INFO) -> None:
    root = logging.getLogger()
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
    root.setLevel(level)
    if not any(getattr(h, "_doc2lora", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._doc2lora = True
        root.addHandler(handler)


class JsonlLog:
    """Append-only record of training steps: {step, stage, loss, lr, wall_ms, ...}.

    With no path the records are only kept in memory, which is what tests use.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record: Any) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, stage: Optional[int] = None) -> List[float]:
        return [
            r["loss"]
            for r in self.records
            if "loss" in r and (stage is None or r.get("stage") == stage)
        ]
