#!/usr/bin/env python3
"""End-to-end checks of the rcmp command-line tool.

usage: cli_smoke.py <rcmp binary> <source dir>
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

import jsonschema
from referencing import Registry, Resource

RCMP = Path(sys.argv.pop(1)).resolve()
SOURCE = Path(sys.argv.pop(1)).resolve()
SCHEMAS = SOURCE / "schemas"


def run(*args, env=None, check=True):
    p = subprocess.run([str(RCMP), *map(str, args)], capture_output=True, text=True, env=env)
    if check and p.returncode != 0:
        raise AssertionError(f"rcmp {' '.join(map(str, args))} exited {p.returncode}\n{p.stderr}")
    return p


def load(path):
    with open(path) as f:
        return json.load(f)


def validate(instance, schema_name):
    schemas = {f.name: load(f) for f in SCHEMAS.glob("*.schema.json")}
    registry = Registry().with_resources((s["$id"], Resource.from_contents(s)) for s in schemas.values())
    jsonschema.Draft202012Validator(schemas[schema_name], registry=registry).validate(instance)


class Pipeline(unittest.TestCase):
    """One small desk run shared by the tests below."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp(prefix="rcmp_cli_"))
        cls.work = cls.tmp / "desk"
        env = dict(os.environ, GROUPS_PER_CLASS="10", EPOCHS="1", FINETUNE_EPOCHS="1", BENCH_REPEATS="5")
        cls.script = subprocess.run(["bash", str(SOURCE / "scripts" / "reproduce_desk.sh"), str(RCMP), str(cls.work)],
                                    capture_output=True, text=True, env=env)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def test_script_succeeds_with_every_artifact(self):
        self.assertEqual(self.script.returncode, 0, self.script.stderr)
        w = self.work
        expected = [
            "data/labels.json", "data/dataset_manifest.json", "data/Green/g00_frontal_on.ppm",
            "dense.rcmp", "dense.rcmp.history.json", "dense.rcmp.config.json", "dense.rcmp.timing.json",
            "dense.rcmp.log.jsonl", "pruned.rcmp", "pruned.rcmp.sparsity.json", "finetuned.rcmp",
            "finetuned.rcmp.history.json", "quantized.rcmp", "quantized.rcmp.calibration.json",
            "eval_dense.json", "eval_dense.json.logits.json", "eval_pruned.json", "eval_finetuned.json",
            "eval_quantized.json", "curves/dense/Green_roc.csv", "curves/quantized/Red_pr.csv", "bench.json",
            "bench.json.config.json",
        ]
        missing = [p for p in expected if not (w / p).exists()]
        self.assertEqual(missing, [])
        self.assertEqual(len(list((w / "data").rglob("*.ppm"))), 720)

    def test_reports_match_schemas(self):
        for name in ["eval_dense.json", "eval_pruned.json", "eval_finetuned.json", "eval_quantized.json"]:
            validate(load(self.work / name), "eval_report.schema.json")
        validate(load(self.work / "pruned.rcmp.sparsity.json"), "sparsity_report.schema.json")
        bench = load(self.work / "bench.json")
        validate(bench, "bench_report.schema.json")
        self.assertEqual([r["variant"] for r in bench["reports"]], ["dense", "pruned_finetuned", "quantized"])
        self.assertTrue(all(r["measured_count"] == 5 for r in bench["reports"]))
        self.assertTrue(all(r["pipeline_time_ms"] > 0 for r in bench["reports"]))

    def test_provenance_chain(self):
        pruned = run("--json", "inspect", "--model", self.work / "pruned.rcmp")
        sparsity = load(self.work / "pruned.rcmp.sparsity.json")
        dense = json.loads(run("--json", "inspect", "--model", self.work / "dense.rcmp").stdout)
        self.assertEqual(sparsity["provenance"]["input_model_hash"], dense["model_hash"])
        self.assertEqual(json.loads(pruned.stdout)["variant"], "pruned_finetuned")
        ev = load(self.work / "eval_quantized.json")
        q = json.loads(run("--json", "inspect", "--model", self.work / "quantized.rcmp").stdout)
        self.assertEqual(ev["provenance"]["input_model_hash"], q["model_hash"])
        self.assertEqual(q["variant"], "quantized")

    def test_zero_quantile_prune_keeps_hash(self):
        out = self.tmp / "noop.rcmp"
        r = json.loads(run("--json", "prune", "--model", self.work / "dense.rcmp", "--out", out,
                           "--retain-quantile", "0").stdout)
        before = json.loads(run("--json", "inspect", "--model", self.work / "dense.rcmp").stdout)["model_hash"]
        self.assertEqual(r["model_hash"], before)

    def test_eval_replay_from_logits(self):
        out = self.tmp / "replay.json"
        run("eval", "--from-logits", self.work / "eval_dense.json.logits.json", "--out", out)
        self.assertEqual(load(out)["report"], load(self.work / "eval_dense.json")["report"])

    def test_identical_config_gives_identical_bytes(self):
        out = self.tmp / "repeat" / "m.rcmp"
        artifacts = []
        for _ in range(2):
            run("--seed", "3", "train", "--data", self.work / "data", "--out", out, "--epochs", "1",
                "--input-size", "32")
            artifacts.append((out.read_bytes(), Path(f"{out}.history.json").read_bytes()))
        self.assertEqual(artifacts[0], artifacts[1])


class Commands(unittest.TestCase):
    def test_inspect_full_preset(self):
        p = run("inspect", "--preset", "resnet18-full", "--num-classes", "6")
        self.assertIn("parameters: 11,179,590", p.stdout)
        j = json.loads(run("--json", "inspect", "--preset", "resnet18-full", "--input-size", "224").stdout)
        self.assertEqual(j["parameters"], 11179590)
        self.assertEqual(j["flops"], 1814317056)

    def test_exit_codes(self):
        self.assertEqual(run(check=False).returncode, 1)
        self.assertEqual(run("inspect", "--bogus", check=False).returncode, 1)
        self.assertEqual(run("inspect", check=False).returncode, 1)
        self.assertEqual(run("inspect", "--model", "/nonexistent/m.rcmp", check=False).returncode, 2)

    def test_json_errors_are_one_line(self):
        for args, code in [(["inspect", "--model", "/nonexistent/m.rcmp"], 2), (["prune", "--model", "x"], 1)]:
            p = run("--json", *args, check=False)
            self.assertEqual(p.returncode, code)
            lines = p.stderr.strip().splitlines()
            self.assertEqual(len(lines), 1, p.stderr)
            err = json.loads(lines[0])
            validate(err, "error.schema.json")
            self.assertEqual(err["error"]["exit_code"], code)

    def test_seed_from_environment_and_config_file(self):
        with tempfile.TemporaryDirectory() as d:
            d = Path(d)
            env = dict(os.environ, RCMP_SEED="11")
            a = json.loads(run("--json", "inspect", "--preset", "resnet-desk", env=env).stdout)["model_hash"]
            b = json.loads(run("--json", "--seed", "11", "inspect", "--preset", "resnet-desk").stdout)["model_hash"]
            c = json.loads(run("--json", "--seed", "12", "inspect", "--preset", "resnet-desk", env=env).stdout)
            self.assertEqual(a, b)
            self.assertNotEqual(a, c["model_hash"])
            cfg = d / "cfg.json"
            cfg.write_text(json.dumps({"num-classes": 3, "input-size": 32}))
            j = json.loads(run("--json", "--config", cfg, "inspect", "--preset", "resnet-desk", "--num-classes", "4")
                           .stdout)
            self.assertEqual((j["num_classes"], j["input_size"]), (4, 32))

    def test_gen_data_rejects_split_without_groups(self):
        with tempfile.TemporaryDirectory() as d:
            run("gen-data", "--out", Path(d) / "data", "--groups-per-class", "2", "--image-size", "8")
            p = run("train", "--data", Path(d) / "data", "--out", Path(d) / "m.rcmp", "--epochs", "0", check=False)
            self.assertEqual(p.returncode, 1, p.stderr)


if __name__ == "__main__":
    unittest.main(verbosity=2)
