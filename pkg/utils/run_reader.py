"""
Run Reader Module

Reads finished run directories (config.json, metrics.csv, checkpoint header)
back into summaries for result tables.
"""

import csv
import json
import logging
from dataclasses import dataclass
from io import StringIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from core.checkpoint import describe_checkpoint
from core.errors import FormatError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy", "macro_f1", "lr")


@dataclass
class RunSummary:
    run_dir: Path
    task: str
    arch: str
    modulation: str
    heads: int
    layers: int
    latents: int
    parameters: Optional[int]
    epochs_run: int
    val_loss: Optional[float]
    val_accuracy: Optional[float]
    macro_f1: Optional[float]

    @property
    def model_name(self) -> str:
        if self.arch == "standard":
            return "Transformer"
        return "Co4" if self.modulation == "cooperation" else f"Co4 ({self.modulation.upper()})"

    def as_row(self) -> Dict[str, Any]:
        return {"task": self.task, "model": self.model_name, "heads": self.heads,
                "layers": self.layers, "latents": self.latents, "parameters": self.parameters,
                "epochs": self.epochs_run, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "macro_f1": self.macro_f1}


def parse_metrics(data: str, source: str = "<metrics>") -> List[Dict[str, float]]:
    """Parse metrics.csv text into one dict of floats per epoch."""
    reader = csv.DictReader(StringIO(data))
    missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise FormatError(f"{source}: metrics columns missing: {', '.join(missing)}")
    rows = []
    for line, record in enumerate(reader, start=2):
        try:
            rows.append({k: float(record[k]) for k in REQUIRED_COLUMNS})
        except (TypeError, ValueError):
            raise FormatError(f"{source}: line {line} is not numeric") from None
    return rows


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    path = Path(path)
    return parse_metrics(path.read_text(encoding="utf-8"), str(path))


def summarize_run(run_dir: Union[str, Path]) -> RunSummary:
    run_dir = Path(run_dir)
    config_path = run_dir / "config.json"
    if not config_path.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no config.json)")
    with open(config_path, encoding="utf-8") as f:
        config = json.load(f)

    rows = read_metrics(run_dir / "metrics.csv") if (run_dir / "metrics.csv").exists() else []
    last = rows[-1] if rows else {}

    parameters = None
    checkpoint = run_dir / "checkpoint.co4"
    if checkpoint.exists():
        try:
            parameters = describe_checkpoint(checkpoint)["parameters"]
        except FormatError as e:
            logger.warning("ignoring unreadable checkpoint in %s: %s", run_dir, e)

    return RunSummary(
        run_dir=run_dir,
        task=config.get("task", "?"),
        arch=config.get("arch", "?"),
        modulation=config.get("modulation", "cooperation"),
        heads=int(config.get("heads", 1)),
        layers=int(config.get("layers", 1)),
        latents=int(config.get("latents", 0)),
        parameters=parameters,
        epochs_run=len(rows),
        val_loss=last.get("val_loss"),
        val_accuracy=last.get("val_accuracy"),
        macro_f1=last.get("macro_f1"),
    )


def summarize_runs(run_dirs: List[Union[str, Path]]) -> List[RunSummary]:
    return [summarize_run(d) for d in run_dirs]
