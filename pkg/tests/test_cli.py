"""Command-line interface: exit codes, printed output, artifact layout."""

import json

from helpers import plan_json, reply, scorer_json
from tooldebate.cli import EXIT_ABORTED, EXIT_CONFIG, EXIT_OK, main


def base_config(mock_scripts, *, with_ocr=False, run_seed=7):
    endpoint_ids = ["a1", "a2", "a3", "recruiter", "scorer", "aggregator"]
    if with_ocr:
        endpoint_ids.append("tool-ocr")
    data = {
        "endpoints": [
            {
                "endpoint_id": endpoint_id,
                "base_url": "mock://cli",
                "model_name": f"{endpoint_id}-model",
                "max_retries": 0,
            }
            for endpoint_id in endpoint_ids
        ],
        "answerer_ids": ["a1", "a2", "a3"],
        "recruiter_id": "recruiter",
        "scorer_id": "scorer",
        "aggregator_id": "aggregator",
        "run_seed": run_seed,
        "mock_scripts": mock_scripts,
    }
    if with_ocr:
        data["tools"] = [{"name": "ocr", "endpoint_id": "tool-ocr"}]
    return data


def write_config(path, data):
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return str(path)


def unanimous_scripts(*answers):
    scripts = {"a1": [], "a2": [], "a3": [], "aggregator": []}
    for answer in answers:
        for agent in ("a1", "a2", "a3"):
            scripts[agent].append(reply(answer))
        scripts["aggregator"].append(reply(answer, "all agreed", 0.9))
    return scripts


def flip_scripts():
    return {
        "a1": [reply("cat", "fur and whiskers", 0.8), reply("cat", "sign confirms", 0.9)],
        "a2": [reply("dog", "floppy ears", 0.6), reply("cat", "the sign says cat", 0.7)],
        "a3": [reply("cat", "cat-like ears", 0.7), reply("cat", "unchanged", 0.8)],
        "recruiter": [
            plan_json(
                {
                    "ocr": {
                        "disagreement": "cat or dog",
                        "justification": "read the sign",
                        "arguments": [],
                    }
                }
            )
        ],
        "tool-ocr": ["The sign reads cat crossing."],
        "scorer": [scorer_json(1), scorer_json(0), scorer_json(1)] + [scorer_json(1)] * 3,
        "aggregator": [reply("cat", "evidence and majority", 0.9)],
    }


def mc_record(question_id="mc-1", **overrides):
    record = {
        "question_id": question_id,
        "question": "What animal is shown?",
        "image": None,
        "kind": "multiple_choice",
        "choices": ["cat", "dog"],
        "gold": 0,
        "category": "animal",
    }
    record.update(overrides)
    return record


def write_dataset(path, records):
    path.write_text(
        "\n".join(json.dumps(record) for record in records) + "\n", encoding="utf-8"
    )
    return str(path)


class TestValidateConfig:
    def test_valid_config(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", base_config({}))
        assert main(["validate-config", "--config", config]) == EXIT_OK
        out = capsys.readouterr().out
        assert "config ok" in out
        assert "endpoints: 6" in out

    def test_invalid_config_names_the_field(self, tmp_path, capsys):
        data = base_config({})
        data["recruiter_id"] = "ghost"
        config = write_config(tmp_path / "run.json", data)
        assert main(["validate-config", "--config", config]) == EXIT_CONFIG
        assert "recruiter_id" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        missing = str(tmp_path / "absent.json")
        assert main(["validate-config", "--config", missing]) == EXIT_CONFIG
        assert "no such file" in capsys.readouterr().err


class TestAsk:
    def test_prints_the_answer(self, tmp_path, capsys):
        config = write_config(
            tmp_path / "run.json", base_config(unanimous_scripts("cat"))
        )
        code = main(["ask", "--config", config, "--question", "What animal is shown?"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "answer: cat" in out
        assert "confidence: 0.9000" in out
        assert "method: aggregator" in out

    def test_writes_a_transcript_when_asked(self, tmp_path):
        config = write_config(
            tmp_path / "run.json", base_config(unanimous_scripts("cat"))
        )
        run_dir = tmp_path / "run-out"
        code = main(
            [
                "ask", "--config", config,
                "--question", "What animal is shown?",
                "--question-id", "q-7",
                "--run-dir", str(run_dir),
            ]
        )
        assert code == EXIT_OK
        transcript = run_dir / "transcripts" / "q-7.jsonl"
        assert transcript.exists()
        events = [json.loads(line) for line in transcript.read_text().splitlines()]
        assert events[-1]["kind"] == "final"
        assert (run_dir / "config.json").exists()

    def test_tool_flip_through_the_cli(self, tmp_path, capsys):
        config = write_config(
            tmp_path / "run.json", base_config(flip_scripts(), with_ocr=True)
        )
        code = main(["ask", "--config", config, "--question", "What animal is shown?"])
        assert code == EXIT_OK
        assert "answer: cat" in capsys.readouterr().out

    def test_endpoint_failure_exits_one(self, tmp_path, capsys):
        scripts = {"a1": [{"fail": "endpoint down"}]}
        config = write_config(tmp_path / "run.json", base_config(scripts))
        code = main(["ask", "--config", config, "--question", "Q?"])
        assert code == EXIT_ABORTED
        err = capsys.readouterr().err
        assert "aborted at stage initial" in err

    def test_bad_config_exits_two(self, tmp_path, capsys):
        data = base_config({})
        data["rounds"] = 0
        config = write_config(tmp_path / "run.json", data)
        assert main(["ask", "--config", config, "--question", "Q?"]) == EXIT_CONFIG
        assert "rounds" in capsys.readouterr().err


class TestEval:
    def test_full_run_writes_artifacts(self, tmp_path, capsys):
        config = write_config(
            tmp_path / "run.json", base_config(unanimous_scripts("cat", "dog"))
        )
        dataset = write_dataset(
            tmp_path / "data.jsonl",
            [mc_record(), mc_record("mc-2", gold=1, category="breed")],
        )
        run_dir = tmp_path / "out"
        code = main(
            ["eval", "--config", config, "--dataset", dataset, "--run-dir", str(run_dir)]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "examples: 2" in out
        assert "aggregate: 1.0000" in out
        assert "animal: 1.0000" in out
        assert (run_dir / "reports" / "results.jsonl").exists()
        assert (run_dir / "reports" / "summary.json").exists()
        assert (run_dir / "checkpoints" / "completed.jsonl").exists()
        assert (run_dir / "transcripts" / "mc-1.jsonl").exists()
        assert (run_dir / "config.json").exists()

    def test_default_run_dir_is_timestamped(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = write_config(
            tmp_path / "run.json", base_config(unanimous_scripts("cat"), run_seed=42)
        )
        dataset = write_dataset(tmp_path / "data.jsonl", [mc_record()])
        assert main(["eval", "--config", config, "--dataset", dataset]) == EXIT_OK
        created = list((tmp_path / "runs").iterdir())
        assert len(created) == 1
        assert created[0].name.endswith("_42")

    def test_invalid_dataset_exits_two(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", base_config({}))
        dataset = write_dataset(tmp_path / "data.jsonl", [mc_record(gold=9)])
        code = main(
            ["eval", "--config", config, "--dataset", dataset,
             "--run-dir", str(tmp_path / "out")]
        )
        assert code == EXIT_CONFIG
        assert "line 1" in capsys.readouterr().err

    def test_missing_dataset_exits_two(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", base_config({}))
        code = main(
            ["eval", "--config", config, "--dataset", str(tmp_path / "absent.jsonl"),
             "--run-dir", str(tmp_path / "out")]
        )
        assert code == EXIT_CONFIG

    def test_abort_preserves_partials_and_exits_one(self, tmp_path, capsys):
        scripts = unanimous_scripts("cat")
        scripts["a1"].append({"fail": "endpoint down"})
        config = write_config(tmp_path / "run.json", base_config(scripts))
        dataset = write_dataset(tmp_path / "data.jsonl", [mc_record(), mc_record("mc-2")])
        run_dir = tmp_path / "out"
        code = main(
            ["eval", "--config", config, "--dataset", dataset, "--run-dir", str(run_dir)]
        )
        assert code == EXIT_ABORTED
        err = capsys.readouterr().err
        assert "aborted on question mc-2" in err
        assert "partial results preserved" in err
        completed = (run_dir / "checkpoints" / "completed.jsonl").read_text().splitlines()
        assert len(completed) == 1

    def test_resume_completes_an_interrupted_run(self, tmp_path, capsys):
        run_dir = tmp_path / "out"
        scripts = unanimous_scripts("cat")
        scripts["a1"].append({"fail": "endpoint down"})
        broken = write_config(tmp_path / "broken.json", base_config(scripts))
        dataset = write_dataset(tmp_path / "data.jsonl", [mc_record(), mc_record("mc-2", gold=1)])
        assert main(
            ["eval", "--config", broken, "--dataset", dataset, "--run-dir", str(run_dir)]
        ) == EXIT_ABORTED

        healthy = write_config(
            tmp_path / "healthy.json", base_config(unanimous_scripts("dog"))
        )
        code = main(
            ["eval", "--config", healthy, "--dataset", dataset,
             "--run-dir", str(run_dir), "--resume"]
        )
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "examples: 2" in out
        completed = (run_dir / "checkpoints" / "completed.jsonl").read_text().splitlines()
        assert len(completed) == 2


class TestAnalyze:
    def finished_run(self, tmp_path):
        config = write_config(
            tmp_path / "run.json", base_config(flip_scripts(), with_ocr=True)
        )
        dataset = write_dataset(tmp_path / "data.jsonl", [mc_record()])
        run_dir = tmp_path / "out"
        assert main(
            ["eval", "--config", config, "--dataset", dataset, "--run-dir", str(run_dir)]
        ) == EXIT_OK
        return run_dir

    def test_writes_the_analysis_bundle(self, tmp_path, capsys):
        run_dir = self.finished_run(tmp_path)
        capsys.readouterr()
        assert main(["analyze", "--run-dir", str(run_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "analysis written to" in out
        assert "ece:" in out
        assert "disagreement rate: 1.0000" in out
        analysis = run_dir / "reports" / "analysis"
        summary = json.loads((analysis / "summary.json").read_text())
        assert summary["examples"] == 1
        assert summary["tool_distribution"]["per_tool"] == {"ocr": 1.0}
        calibration = (analysis / "calibration.csv").read_text().splitlines()
        assert calibration[0] == "question_id,confidence,correct"
        assert len(calibration) == 2
        tools = (analysis / "tools.csv").read_text().splitlines()
        assert tools[1].startswith("ocr,")
        overlap = (analysis / "overlap.csv").read_text().splitlines()
        assert len(overlap) == 4
        assert overlap[1].startswith("mc-1,agent-1,")

    def test_missing_run_dir_exits_two(self, tmp_path, capsys):
        assert main(["analyze", "--run-dir", str(tmp_path / "ghost")]) == EXIT_CONFIG
        assert "run dir not found" in capsys.readouterr().err

    def test_empty_run_dir_exits_two(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["analyze", "--run-dir", str(empty)]) == EXIT_CONFIG
        assert "no results or transcripts" in capsys.readouterr().err
