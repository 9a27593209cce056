import json

import pytest

import main
from core.checkpoint import save_checkpoint
from core.co4_block import Co4BlockConfig, build_model
from core.errors import FormatError
from core.latex_generator import LaTeXGenerator
from core.results_table import ResultsTable, format_value
from utils import clipboard
from utils.run_reader import parse_metrics, summarize_run, summarize_runs

METRICS = """epoch,train_loss,val_loss,val_accuracy,macro_f1,lr
0,1.700000,1.600000,0.300000,0.250000,0.001
1,1.200000,1.100000,{acc},{f1},0.001
"""


def _run_dir(root, name, arch="co4", modulation="cooperation", acc=0.84, f1=0.8, task="babi"):
    run = root / name
    run.mkdir()
    config = {"task": task, "arch": arch, "modulation": modulation, "heads": 1, "layers": 1,
              "latents": 4}
    (run / "config.json").write_text(json.dumps(config))
    (run / "metrics.csv").write_text(METRICS.format(acc=acc, f1=f1))
    return run


def test_parse_metrics_rejects_missing_columns():
    with pytest.raises(FormatError, match="macro_f1"):
        parse_metrics("epoch,train_loss,val_loss,val_accuracy,lr\n0,1,1,0.5,0.1\n")
    with pytest.raises(FormatError, match="line 2"):
        parse_metrics("epoch,train_loss,val_loss,val_accuracy,macro_f1,lr\n0,x,1,0.5,0.5,0.1\n")


def test_summarize_run_reads_last_epoch_and_checkpoint(tmp_path):
    run = _run_dir(tmp_path, "co4")
    model = build_model("co4", Co4BlockConfig(embed_dim=8, latents=2, num_classes=6),
                        vocab_size=20, num_tokens=10)
    save_checkpoint(model, run / "checkpoint.co4")
    summary = summarize_run(run)
    assert summary.epochs_run == 2
    assert summary.val_accuracy == 0.84
    assert summary.parameters == model.parameter_count()
    assert summary.model_name == "Co4"


def test_summarize_run_without_config(tmp_path):
    with pytest.raises(FileNotFoundError):
        summarize_run(tmp_path)


def test_model_names(tmp_path):
    runs = summarize_runs([_run_dir(tmp_path, "std", arch="standard"),
                           _run_dir(tmp_path, "tm3", modulation="tm3")])
    assert [r.model_name for r in runs] == ["Transformer", "Co4 (TM3)"]


def test_table_bolds_best_per_task(tmp_path):
    runs = summarize_runs([
        _run_dir(tmp_path, "a", acc=0.84, f1=0.80),
        _run_dir(tmp_path, "b", arch="standard", acc=0.60, f1=0.85),
        _run_dir(tmp_path, "c", modulation="tm2", acc=0.55, f1=0.5, task="cifar"),
    ])
    table = ResultsTable.from_runs(runs)
    acc_col = [c.key for c in table.columns].index("val_accuracy")
    f1_col = [c.key for c in table.columns].index("macro_f1")
    assert table.rows == 4
    assert table.get_cell(1, acc_col).is_bold and not table.get_cell(2, acc_col).is_bold
    assert table.get_cell(2, f1_col).is_bold and not table.get_cell(1, f1_col).is_bold
    assert table.get_cell(3, acc_col).is_bold
    assert table.get_cell(2, 1).content == "Transformer"
    assert table.get_cell(3, 1).content == "Co4 (TM2)"
    assert table.get_cell(9, 0) is None


def test_format_value():
    assert format_value("parameters", 215_050) == "0.215M"
    assert format_value("val_accuracy", 0.8412) == "84.1"
    assert format_value("macro_f1", None) == "--"


def test_latex_booktabs_output(tmp_path):
    table = ResultsTable.from_runs(summarize_runs([_run_dir(tmp_path, "a")]))
    text = LaTeXGenerator(table).generate("booktabs")
    lines = text.splitlines()
    assert lines[0] == "\\begin{tabular}{llccrrr}"
    assert lines[1] == "\\toprule" and lines[3] == "\\midrule"
    assert "Acc. (\\%)" in lines[2]
    assert "\\textbf{84.0}" in lines[4]
    assert lines[-2:] == ["\\bottomrule", "\\end{tabular}"]


def test_task_groups_are_separated(tmp_path):
    runs = summarize_runs([_run_dir(tmp_path, "a"), _run_dir(tmp_path, "b", arch="standard"),
                           _run_dir(tmp_path, "c", task="cifar")])
    lines = LaTeXGenerator(ResultsTable.from_runs(runs)).generate("tabular").splitlines()
    assert lines.count("\\hline") == 4
    assert lines[4].startswith("babi") and lines[5].startswith("babi")
    assert lines[6] == "\\hline" and lines[7].startswith("cifar")


def test_latex_escapes_in_one_pass():
    generator = LaTeXGenerator(ResultsTable())
    assert generator._escape_latex("a_b & 50%") == "a\\_b \\& 50\\%"
    assert generator._escape_latex("\\{") == "\\textbackslash{}\\{"


def test_complete_document(tmp_path):
    table = ResultsTable.from_runs(summarize_runs([_run_dir(tmp_path, "a")]))
    doc = LaTeXGenerator(table).generate_complete_document("booktabs", caption="bAbI")
    assert "\\usepackage{booktabs}" in doc
    assert "\\caption{bAbI}" in doc and "\\label{tab:co4-results}" in doc
    assert doc.rstrip().endswith("\\end{document}")


def test_export_uses_clipboard(monkeypatch):
    copied = []
    monkeypatch.setattr(clipboard.pyperclip, "copy", copied.append)
    result = clipboard.export_text("table")
    assert result["success"] and result["method"] == "pyperclip"
    assert copied == ["table"]


def test_export_falls_back_to_temp_file(monkeypatch, tmp_path):
    def broken(text):
        raise RuntimeError("no clipboard")

    monkeypatch.setattr(clipboard.pyperclip, "copy", broken)
    monkeypatch.setattr(clipboard, "_check_command", lambda name: False)
    monkeypatch.setattr(clipboard.tempfile, "gettempdir", lambda: str(tmp_path))
    result = clipboard.export_text("table")
    assert not result["success"]
    assert (tmp_path / "co4_results.tex").read_text() == "table"
    assert result["temp_file"] == str(tmp_path / "co4_results.tex")


def test_cli_report_writes_file(tmp_path):
    run = _run_dir(tmp_path, "a")
    out = tmp_path / "table.tex"
    assert main.main(["-q", "report", str(run), "--out", str(out)]) == 0
    assert "\\begin{table}" in out.read_text()


def test_cli_missing_run_dir_exits_with_one(tmp_path):
    assert main.main(["-q", "report", str(tmp_path / "nope")]) == 1


def test_cli_field_and_macs(tmp_path, capsys):
    out = tmp_path / "field.csv"
    assert main.main(["-q", "field", "--kind", "tm2", "--steps", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 26
    assert main.main(["-q", "macs", "--arch", "standard", "--n", "64", "--e", "256"]) == 0
    assert json.loads(capsys.readouterr().out)["closed_form"] == 5_242_880


def test_cli_parameter_error_exits_with_two(tmp_path):
    assert main.main(["-q", "field", "--steps", "1", "--out", str(tmp_path / "f.csv")]) == 2


def test_cli_gen_babi_and_inspect(tmp_path, capsys):
    out = tmp_path / "stories.jsonl"
    assert main.main(["-q", "gen-babi", "--count", "3", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3

    model = build_model("co4", Co4BlockConfig(embed_dim=8, latents=2), patch_dim=48, num_tokens=4)
    save_checkpoint(model, tmp_path / "m.co4")
    capsys.readouterr()
    assert main.main(["-q", "inspect", str(tmp_path)]) == 0
    entries = json.loads(capsys.readouterr().out)
    assert [e["name"] for e in entries] == ["m"]
    assert entries[0]["parameters"] == model.parameter_count()
