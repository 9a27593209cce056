from typing import Dict, List, Optional, Sequence

from core.results_table import ResultsTable

# top, below header, between task groups, bottom
RULES: Dict[str, Sequence[str]] = {
    "booktabs": ("\\toprule", "\\midrule", "\\midrule", "\\bottomrule"),
    "tabular": ("\\hline", "\\hline", "\\hline", "\\hline"),
}

_LATEX_SPECIAL = {
    "\\": "\\textbackslash{}",
    "&": "\\&",
    "%": "\\%",
    "$": "\\$",
    "#": "\\#",
    "^": "\\textasciicircum{}",
    "_": "\\_",
    "{": "\\{",
    "}": "\\}",
    "~": "\\textasciitilde{}",
}


class LaTeXGenerator:
    """Renders a ResultsTable; runs of different tasks are separated by a rule."""

    def __init__(self, table: ResultsTable):
        self.table = table

    def generate(self, style: str = "booktabs") -> str:
        top, header_rule, group_rule, bottom = RULES.get(style, RULES["tabular"])
        out = ["\\begin{tabular}{" + self.table.column_spec() + "}", top]
        previous_task = None
        for row in range(self.table.rows):
            task = self.table.task_of(row)
            if row > 1 and task != previous_task:
                out.append(group_rule)
            out.append(self._row(row) + " \\\\")
            if row == 0 and self.table.rows > 1:
                out.append(header_rule)
            previous_task = task
        out += [bottom, "\\end{tabular}"]
        return "\n".join(out)

    def _row(self, row: int) -> str:
        rendered = []
        for col in range(self.table.cols):
            cell = self.table.get_cell(row, col)
            text = self._escape_latex(cell.content) if cell else ""
            rendered.append(f"\\textbf{{{text}}}" if cell is not None and cell.is_bold else text)
        return " & ".join(rendered)

    @staticmethod
    def _escape_latex(text: str) -> str:
        # one pass, so inserted backslashes are not escaped again
        return "".join(_LATEX_SPECIAL.get(ch, ch) for ch in text or "")

    def generate_with_caption(self, style: str = "booktabs", caption: str = "",
                              label: str = "", position: str = "htbp") -> str:
        return "\n".join([
            f"\\begin{{table}}[{position}]",
            "\\centering",
            f"\\caption{{{caption or 'Comparison of attention variants'}}}",
            f"\\label{{{label or 'tab:co4-results'}}}",
            self.generate(style),
            "\\end{table}",
        ])

    def generate_complete_document(self, style: str = "booktabs", caption: str = "",
                                   label: str = "", packages: Optional[List[str]] = None) -> str:
        preamble = ["\\documentclass{article}"]
        wanted = list(packages or [])
        if style == "booktabs" and "booktabs" not in wanted:
            wanted.append("booktabs")
        preamble += [f"\\usepackage{{{name}}}" for name in wanted]
        body = self.generate_with_caption(style, caption, label)
        return "\n".join(preamble + ["", "\\begin{document}", "", body, "", "\\end{document}"])
