from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from utils.run_reader import RunSummary


@dataclass
class Cell:
    content: str = ""
    alignment: str = "c"  # l, c, r
    is_bold: bool = False


@dataclass
class Column:
    key: str
    title: str
    alignment: str = "c"
    higher_is_better: Optional[bool] = None   # None: never highlighted


DEFAULT_COLUMNS = [
    Column("task", "Task", "l"),
    Column("model", "Model", "l"),
    Column("heads", "H"),
    Column("layers", "L"),
    Column("parameters", "Params"),
    Column("val_accuracy", "Acc. (%)", "r", higher_is_better=True),
    Column("macro_f1", "Macro F1", "r", higher_is_better=True),
]


class ResultsTable:
    """A header row plus one row per run; the best value of each scored column is bolded per task."""

    def __init__(self, columns: Sequence[Column] = tuple(DEFAULT_COLUMNS)):
        self.columns: List[Column] = list(columns)
        self.header: List[Cell] = [Cell(c.title, c.alignment) for c in self.columns]
        self._rows: List[List[Cell]] = []
        self._raw: List[Dict[str, object]] = []

    @property
    def rows(self) -> int:
        return len(self._rows) + 1

    @property
    def cols(self) -> int:
        return len(self.columns)

    def get_cell(self, row: int, col: int) -> Optional[Cell]:
        if not 0 <= col < self.cols:
            return None
        if row == 0:
            return self.header[col]
        if 1 <= row <= len(self._rows):
            return self._rows[row - 1][col]
        return None

    def task_of(self, row: int) -> Optional[object]:
        """Task of a data row; None for the header."""
        if 1 <= row <= len(self._raw):
            return self._raw[row - 1].get("task")
        return None

    def column_spec(self) -> str:
        return "".join(c.alignment for c in self.columns)

    def add_run(self, run: RunSummary) -> None:
        raw = run.as_row()
        self._raw.append(raw)
        self._rows.append([Cell(format_value(c.key, raw.get(c.key)), c.alignment) for c in self.columns])

    def highlight_best(self) -> None:
        for col, column in enumerate(self.columns):
            if column.higher_is_better is None:
                continue
            best: Dict[object, float] = {}
            for raw in self._raw:
                value = raw.get(column.key)
                if value is None:
                    continue
                task = raw.get("task")
                if task not in best or (value > best[task] if column.higher_is_better else value < best[task]):
                    best[task] = value
            for raw, row in zip(self._raw, self._rows):
                value = raw.get(column.key)
                row[col].is_bold = value is not None and value == best.get(raw.get("task"))

    @classmethod
    def from_runs(cls, runs: Sequence[RunSummary], highlight: bool = True) -> "ResultsTable":
        table = cls()
        for run in runs:
            table.add_run(run)
        if highlight:
            table.highlight_best()
        return table


def format_value(key: str, value) -> str:
    if value is None:
        return "--"
    if key == "parameters":
        return f"{value / 1e6:.3f}M"
    if key == "val_accuracy":
        return f"{100.0 * value:.1f}"
    if key == "macro_f1":
        return f"{value:.3f}"
    return str(value)
