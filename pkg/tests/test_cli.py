"""CLI subcommands: generate, train, eval, and config handling."""

import csv
import json

import pytest

from ccpo.cli import build_configs, main, parse_config_file
from ccpo.traces import read_trace_file


def write_config(path, text):
    path.write_text(text)
    return str(path)


SMOKE_CONFIG = """
# smoke training setup
alpha = 0.1
iterations = 8
batch_size = 4
seed = 3
price_guide_in = 1e-5
price_guide_out = 4e-5
synthetic_num_traces = 320
synthetic_seed = 12
calibration_traces = 120
"""


class TestConfigParsing:
    def test_flat_key_value_with_comments(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "alpha = 0.2  # target\n\nbatch_size=7\n")
        entries = parse_config_file(path)
        assert entries == {"alpha": "0.2", "batch_size": "7"}

    def test_bad_line_reports_location(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "alpha 0.2\n")
        with pytest.raises(ValueError, match="c.cfg:1"):
            parse_config_file(path)

    def test_build_configs_types(self):
        run, syn, rest = build_configs(
            {
                "alpha": "0.2",
                "iterations": "77",
                "hidden": "8,8",
                "price_guide_in": "0.5",
                "synthetic_num_traces": "100",
                "synthetic_unsolvable_fraction": "0.3",
                "calibration_traces": "50",
            }
        )
        assert run.alpha == 0.2
        assert run.iterations == 77
        assert run.hidden == (8, 8)
        assert run.prices.guide_in == 0.5
        assert syn.num_traces == 100
        assert syn.unsolvable_fraction == 0.3
        assert syn.horizon == run.horizon and syn.seed == run.seed
        assert rest == {"calibration_traces": "50"}


class TestGenerate:
    def test_generate_writes_parseable_file(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "g.cfg", "synthetic_num_traces = 25\nsynthetic_seed = 4\n")
        out = tmp_path / "corpus.ndjson"
        assert main(["generate", "--config", cfg, "--output", str(out)]) == 0
        tf = read_trace_file(out)
        assert len(tf.traces) == 25
        assert "wrote 25 traces" in capsys.readouterr().out

    def test_generate_same_seed_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "g.cfg", "synthetic_num_traces = 25\nsynthetic_seed = 4\n")
        out1, out2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        main(["generate", "--config", cfg, "--output", str(out1)])
        main(["generate", "--config", cfg, "--output", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_generate_bad_output_path_nonzero(self, tmp_path):
        cfg = write_config(tmp_path / "g.cfg", "synthetic_num_traces = 5\n")
        assert main(["generate", "--config", cfg, "--output", str(tmp_path / "no" / "dir.ndjson")]) != 0

    def test_generate_without_synthetic_keys_nonzero(self, tmp_path):
        cfg = write_config(tmp_path / "g.cfg", "alpha = 0.1\n")
        assert main(["generate", "--config", cfg, "--output", str(tmp_path / "x.ndjson")]) != 0


class TestTrain:
    def test_smoke_train_and_eval_roundtrip(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "t.cfg", SMOKE_CONFIG)
        ckpt, log = tmp_path / "ckpt.json", tmp_path / "log.ndjson"
        assert main(["train", "--config", cfg, "--checkpoint", str(ckpt), "--log", str(log)]) == 0
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 9  # 8 iterations + calibration record
        assert "calibration_kappa" in records[-1]

        # Evaluate the checkpoint on a fresh corpus through the CLI.
        gen_cfg = write_config(tmp_path / "g.cfg", "synthetic_num_traces = 40\nsynthetic_seed = 99\n")
        test_path = tmp_path / "test.ndjson"
        main(["generate", "--config", gen_cfg, "--output", str(test_path)])
        out_csv = tmp_path / "metrics.csv"
        assert (
            main(
                [
                    "eval",
                    "--config",
                    cfg,
                    "--checkpoint",
                    str(ckpt),
                    "--traces",
                    str(test_path),
                    "--output",
                    str(out_csv),
                ]
            )
            == 0
        )
        with open(out_csv) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["method"] == "ccpo"
        assert set(rows[0]) == {
            "method",
            "alpha",
            "lam",
            "seed",
            "cost_cents",
            "coverage",
            "avg_len",
            "set_size",
            "n_episodes",
        }
        assert 0.0 <= float(rows[0]["coverage"]) <= 1.0

    def test_missing_trace_file_nonzero(self, tmp_path):
        cfg = write_config(tmp_path / "t.cfg", "trace_path = /nonexistent/file.ndjson\n")
        code = main(
            ["train", "--config", cfg, "--checkpoint", str(tmp_path / "c.json"), "--log", str(tmp_path / "l")]
        )
        assert code != 0

    def test_resume_reproduces_identical_tail_logs(self, tmp_path):
        full_cfg = write_config(tmp_path / "full.cfg", SMOKE_CONFIG)
        half_cfg = write_config(tmp_path / "half.cfg", SMOKE_CONFIG.replace("iterations = 8", "iterations = 4"))
        ck1, lg1, st1 = tmp_path / "c1.json", tmp_path / "l1", tmp_path / "s1.json"
        main(["train", "--config", full_cfg, "--checkpoint", str(ck1), "--log", str(lg1)])
        ck2, lg2 = tmp_path / "c2.json", tmp_path / "l2"
        main(["train", "--config", half_cfg, "--checkpoint", str(ck2), "--log", str(lg2), "--state", str(st1)])
        ck3, lg3 = tmp_path / "c3.json", tmp_path / "l3"
        main(
            [
                "train",
                "--config",
                full_cfg,
                "--checkpoint",
                str(ck3),
                "--log",
                str(lg3),
                "--resume",
                str(st1),
            ]
        )
        full_lines = lg1.read_text().splitlines()
        resumed_lines = lg3.read_text().splitlines()
        assert resumed_lines[:4] == full_lines[4:8]
        assert ck3.read_bytes() == ck1.read_bytes()

    def test_baseline_checkpoints_evaluate(self, tmp_path):
        for kind in ("random", "cpo"):
            cfg = write_config(
                tmp_path / f"{kind}.cfg", SMOKE_CONFIG + f"baseline = {kind}\niterations = 3\n"
            )
            ckpt, log = tmp_path / f"{kind}.json", tmp_path / f"{kind}.log"
            assert main(["train", "--config", cfg, "--checkpoint", str(ckpt), "--log", str(log)]) == 0
            gen_cfg = write_config(tmp_path / "g.cfg", "synthetic_num_traces = 30\nsynthetic_seed = 5\n")
            test_path = tmp_path / "test.ndjson"
            main(["generate", "--config", gen_cfg, "--output", str(test_path)])
            out_csv = tmp_path / f"{kind}.csv"
            assert (
                main(
                    [
                        "eval",
                        "--config",
                        cfg,
                        "--checkpoint",
                        str(ckpt),
                        "--traces",
                        str(test_path),
                        "--output",
                        str(out_csv),
                    ]
                )
                == 0
            )
            with open(out_csv) as fh:
                rows = list(csv.DictReader(fh))
            assert rows[0]["method"] == kind


class TestEvalErrors:
    def test_empty_test_set_nonzero(self, tmp_path):
        empty = tmp_path / "empty.ndjson"
        empty.write_text('{"kind":"header","version":1,"horizon":4,"answer_vocab_size":10}\n')
        code = main(
            [
                "eval",
                "--checkpoint",
                "whatever.json",
                "--traces",
                str(empty),
                "--output",
                str(tmp_path / "o.csv"),
            ]
        )
        assert code != 0

    def test_horizon_mismatch_nonzero(self, tmp_path):
        cfg = write_config(tmp_path / "t.cfg", SMOKE_CONFIG)
        ckpt, log = tmp_path / "c.json", tmp_path / "l"
        main(["train", "--config", cfg, "--checkpoint", str(ckpt), "--log", str(log)])
        gen_cfg = write_config(
            tmp_path / "g.cfg", "synthetic_num_traces = 10\nhorizon = 3\nsynthetic_horizon = 3\n"
        )
        test_path = tmp_path / "t3.ndjson"
        main(["generate", "--config", gen_cfg, "--output", str(test_path)])
        code = main(
            ["eval", "--checkpoint", str(ckpt), "--traces", str(test_path), "--output", str(tmp_path / "o.csv")]
        )
        assert code != 0


class TestCollectCommand:
    def test_collect_via_mock_server(self, tmp_path):
        import threading
        from http.server import HTTPServer

        from tests.test_collector import _MockHandler, completion

        _MockHandler.script = [
            completion("Answer: Paris", 80, 15),
            completion("Yes", 40, 1),
        ]
        server = HTTPServer(("127.0.0.1", 0), _MockHandler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            url = f"http://127.0.0.1:{server.server_address[1]}/v1"
            cfg = write_config(
                tmp_path / "col.cfg",
                f"base_url = {url}\nguide_url = {url}\nbase_model = b\nguide_model = g\n"
                "horizon = 1\nretries = 0\nretry_backoff = 0\n",
            )
            questions = tmp_path / "q.ndjson"
            questions.write_text('{"question": "Capital of France?", "answer": "Paris"}\n')
            out = tmp_path / "collected.ndjson"
            assert (
                main(["collect", "--config", cfg, "--questions", str(questions), "--output", str(out)]) == 0
            )
            tf = read_trace_file(out)
            assert len(tf.traces) == 1
            assert tf.horizon == 1
        finally:
            server.shutdown()
            thread.join(timeout=2)
