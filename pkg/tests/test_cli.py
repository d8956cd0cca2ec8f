import json

import pandas as pd
import pytest

from main import build_parser, main
from tests.conftest import corpus_config, direct_config


def _files(root):
    """Every artifact under root except logs, keyed by relative path; manifests lose created_at."""
    out = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file() or path.suffix == ".log":
            continue
        key = path.relative_to(root).as_posix()
        if path.name == "manifest.json":
            payload = json.loads(path.read_text(encoding="utf-8"))
            payload.pop("created_at")
            out[key] = payload
        else:
            out[key] = path.read_bytes()
    return out


class TestParser:
    def test_subcommands(self):
        parser = build_parser()
        for command in ["ingest", "score", "panel", "estimate", "event-study", "synth", "mc", "report"]:
            args = parser.parse_args([command, "--seed", "3", "--threads", "2"])
            assert (args.command, args.seed, args.threads) == (command, 3, 2)

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestExitCodes:
    def test_missing_upstream(self, tmp_path, config_file, capsys):
        path = config_file(direct_config(tmp_path / "out"))
        assert main(["score", "--config", str(path)]) == 3
        assert "run the `ingest` subcommand first" in capsys.readouterr().out

    def test_report_before_estimate(self, tmp_path, config_file):
        path = config_file(direct_config(tmp_path / "out"))
        assert main(["synth", "--config", str(path)]) == 0
        assert main(["report", "--config", str(path)]) == 3

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"seed": -1}', encoding="utf-8")
        assert main(["synth", "--config", str(path)]) == 2

    def test_bad_thread_count(self, tmp_path, config_file):
        path = config_file(direct_config(tmp_path / "out"))
        assert main(["synth", "--config", str(path), "--threads", "0"]) == 2

    def test_mc_needs_direct_mode(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        assert main(["mc", "--config", str(path)]) == 2


class TestDirectStudy:
    COMMANDS = ["synth", "estimate", "event-study", "report"]

    def _run(self, path):
        for command in self.COMMANDS:
            assert main([command, "--config", str(path), "--threads", "2"]) == 0, command

    def test_end_to_end(self, tmp_path, config_file, capsys):
        out = tmp_path / "out"
        self._run(config_file(direct_config(out)))
        assert "[OK] panel/panel.csv" in capsys.readouterr().out

        did = json.loads((out / "estimates" / "did.json").read_text(encoding="utf-8"))
        assert set(did) == {"all", "interaction"}
        assert set(did["all"]) == {"avg_slant", "n_proR_tweets"}
        assert did["all"]["avg_slant"]["terms"] == ["eu_x_ban"]
        weekly = json.loads((out / "estimates" / "weekly.json").read_text(encoding="utf-8"))
        assert weekly["all"]["avg_slant"]["terms"] == ["eu_x_week1", "eu_x_week2"]
        imputation = json.loads((out / "estimates" / "imputation.json").read_text(encoding="utf-8"))
        assert imputation["all"]["avg_slant"]["n_boot"] == 19

        daily = pd.read_csv(out / "event_study" / "all_avg_slant_daily.csv")
        assert len(daily) == 25
        binned = pd.read_csv(out / "event_study" / "all_avg_slant_binned.csv")
        assert binned["label"].tolist()[0] == "eu_x_2022-02-19_2022-02-28"

        report = out / "report"
        table = pd.read_csv(report / "table_did_all.csv", index_col=0, keep_default_na=False)
        assert table.index.tolist()[-4:] == ["Observations", "R2 (within)", "Pre-period mean of DV", "% of mean"]
        assert (report / "table_weekly_interaction.csv").exists()
        assert (report / "imputation.csv").exists()
        plot = pd.read_csv(report / "plot_all_avg_slant_daily.csv")
        assert list(plot.columns) == ["day", "coef", "lo", "hi"]

        manifest = json.loads((out / "estimates" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["subcommand"] == "estimate"
        assert manifest["seed"] == 7
        assert "estimates/did.json" in manifest["outputs"]

    def test_rerun_is_identical(self, tmp_path, config_file):
        out = tmp_path / "out"
        path = config_file(direct_config(out))
        self._run(path)
        first = _files(out)
        self._run(path)
        assert _files(out) == first

    def test_seed_flag_changes_results(self, tmp_path, config_file):
        out = tmp_path / "out"
        path = config_file(direct_config(out))
        assert main(["synth", "--config", str(path)]) == 0
        first = (out / "panel" / "panel.csv").read_bytes()
        assert main(["synth", "--config", str(path), "--seed", "8"]) == 0
        assert (out / "panel" / "panel.csv").read_bytes() != first

    @pytest.mark.slow
    def test_monte_carlo(self, tmp_path, config_file):
        out = tmp_path / "out"
        path = config_file(direct_config(out))
        assert main(["mc", "--config", str(path), "--threads", "4"]) == 0
        summary = json.loads((out / "mc" / "summary.json").read_text(encoding="utf-8"))
        assert summary["twfe"]["reps"] == 50
        assert "mean_runtime" not in summary["twfe"]
        manifest = json.loads((out / "mc" / "manifest.json").read_text(encoding="utf-8"))
        assert "twfe" in manifest["timing"]


class TestCorpusStudy:
    def test_end_to_end(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        for command in ["synth", "score", "panel", "estimate", "report"]:
            assert main([command, "--config", str(path)]) == 0, command

        out = tmp_path / "out"
        for relative in ["corpus/corpus.jsonl", "corpus/profiles.csv", "scores/scores.csv", "scores/stats.json",
                         "panel/flags.csv", "panel/supplier_share.csv", "report/table_did_all.csv"]:
            assert (out / relative).exists(), relative
        scores = pd.read_csv(out / "scores" / "scores.csv")
        assert abs(scores["z"].mean()) < 1e-9

    def test_score_reuses_frozen_statistics(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        assert main(["synth", "--config", str(path)]) == 0
        assert main(["score", "--config", str(path)]) == 0
        stats = (tmp_path / "out" / "scores" / "stats.json").read_bytes()
        assert main(["score", "--config", str(path)]) == 0
        assert (tmp_path / "out" / "scores" / "stats.json").read_bytes() == stats

    def test_panel_before_score(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        assert main(["synth", "--config", str(path)]) == 0
        assert main(["panel", "--config", str(path)]) == 3

    def test_new_corpus_gets_fresh_statistics(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        stats_path = tmp_path / "out" / "scores" / "stats.json"
        assert main(["synth", "--config", str(path)]) == 0
        assert main(["score", "--config", str(path)]) == 0
        first = json.loads(stats_path.read_text(encoding="utf-8"))

        assert main(["synth", "--config", str(path), "--seed", "99"]) == 0
        assert main(["score", "--config", str(path), "--seed", "99"]) == 0
        second = json.loads(stats_path.read_text(encoding="utf-8"))
        scores = pd.read_csv(tmp_path / "out" / "scores" / "scores.csv")

        assert second["inputs_hash"] != first["inputs_hash"]
        assert second["n"] == len(scores)
        assert abs(scores["z"].mean()) < 1e-9
        assert scores["z"].std(ddof=1) == pytest.approx(1.0, abs=1e-9)

    def test_missing_embeddings_is_a_config_error(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        assert main(["synth", "--config", str(path)]) == 0
        (tmp_path / "data" / "embeddings.csv").unlink()
        assert main(["score", "--config", str(path)]) == 2

    def test_stem_frequency_is_written_and_recorded(self, tmp_path, config_file):
        path = config_file(corpus_config(tmp_path))
        assert main(["synth", "--config", str(path)]) == 0
        out = tmp_path / "out"
        table = pd.read_csv(out / "corpus" / "stem_frequency.csv", index_col="stem")
        assert list(table.columns) == ["corpus", "R", "U"]
        assert table.index.tolist() == ["nazi", "invas", "aggress", "donbass", "genocid"]
        assert ((table >= 0.0) & (table <= 1.0)).all().all()
        manifest = json.loads((out / "corpus" / "manifest.json").read_text(encoding="utf-8"))
        assert "corpus/stem_frequency.csv" in manifest["outputs"]

    def test_rerun_is_identical(self, tmp_path, config_file):
        out = tmp_path / "out"
        path = config_file(corpus_config(tmp_path))
        commands = ["synth", "ingest", "score", "panel", "estimate"]
        for command in commands:
            assert main([command, "--config", str(path)]) == 0, command
        first = _files(out)
        for command in commands:
            assert main([command, "--config", str(path)]) == 0, command
        assert _files(out) == first
