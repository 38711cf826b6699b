"""CLI surface: help snapshots, exit codes, config plumbing, and the
thin-adapter guarantee (command output == module-op output)."""

import io
import logging
import os
import subprocess
import sys
from contextlib import redirect_stdout

import numpy as np
import pytest

from smearssl.cli import main
from smearssl.config import (RunConfig, apply_overrides, load_config,
                             parse_config_text)
from smearssl.data import load_manifest
from smearssl.embeddings import EmbeddingSet, read_embeddings, write_embeddings
from smearssl.errors import InputError, NumericError
from smearssl.netpbm import read_ppm
from smearssl.probes import knn
from smearssl.protocols import (EvalReport, SplitRecord, kfold,
                                leave_one_source_out, write_report_csv)
from smearssl.trainer import init_train_state, load_encoder

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

COMMANDS = ["gen-synthetic", "patchify", "extract-cells", "train", "embed",
            "eval-linear", "eval-knn", "eval-loso", "eval-kfold", "pca-map"]

# flags every command's help must enumerate (subset; goldens pin the rest)
REQUIRED_FLAGS = {
    "gen-synthetic": ["--out", "--n-images", "--sources", "--classes", "--seed",
                      "--no-masks"],
    "patchify": ["--image", "--out", "--patch", "--source-id", "--label"],
    "extract-cells": ["--image", "--mask", "--out", "--cell-size"],
    "train": ["--manifest", "--out", "--iterations", "--batch-size", "--seed",
              "--resume"],
    "embed": ["--checkpoint", "--manifest", "--out", "--batch-size"],
    "eval-linear": ["--train-emb", "--test-emb", "--reg-lambda", "--max-epochs",
                    "--tol", "--report"],
    "eval-knn": ["--train-emb", "--test-emb", "--k", "--metric", "--report"],
    "eval-loso": ["--emb", "--classifier", "--k", "--report"],
    "eval-kfold": ["--emb", "--classifier", "--k", "--folds", "--seed",
                   "--report"],
    "pca-map": ["--checkpoint", "--image", "--out", "--components", "--seed"],
}

TINY_SETS = [
    "vit.embed_dim=16", "vit.depth=1", "vit.heads=2", "vit.patch_size=16",
    "ssl.head_hidden=16", "ssl.bottleneck=8", "ssl.num_prototypes=8",
]


@pytest.fixture(scope="module", autouse=True)
def _pin_log_stream():
    # Bind the root handler to the real stderr before any main() call so
    # log records never land on a capsys buffer that pytest later discards.
    logging.basicConfig(stream=sys.__stderr__, level=logging.WARNING)


def run_cli(argv, capsys):
    rc = main(argv)
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


def tiny_args(extra=()):
    args = []
    for kv in TINY_SETS:
        args += ["--set", kv]
    return args + list(extra)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    rc = main(["gen-synthetic", "--out", str(out), "--n-images", "6",
               "--seed", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--manifest", str(dataset / "manifest.csv"),
               "--out", str(out), "--iterations", "2", "--batch-size", "2",
               "--seed", "1"] + tiny_args())
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def emb_files(tmp_path_factory):
    """Two separable classes, two sources; 24 train rows and 10 test rows."""
    rng = np.random.Generator(np.random.PCG64(77))

    def build(n_per_class):
        vecs, labels, sources = [], [], []
        for ci, cls in enumerate(("a", "b")):
            center = np.zeros(8)
            center[ci] = 4.0
            for j in range(n_per_class):
                vecs.append(center + 0.05 * rng.standard_normal(8))
                labels.append(cls)
                sources.append(f"src{j % 2}")
        ids = [f"r{i}" for i in range(len(vecs))]
        return EmbeddingSet(vectors=np.array(vecs, dtype=np.float32),
                            ids=ids, sources=sources, labels=labels)

    d = tmp_path_factory.mktemp("emb")
    tr_path, te_path = str(d / "train.emb1"), str(d / "test.emb1")
    write_embeddings(tr_path, build(12))
    write_embeddings(te_path, build(5))
    return tr_path, te_path


class TestHelp:
    def _capture(self, argv):
        buf = io.StringIO()
        with redirect_stdout(buf):
            rc = main(argv)
        assert rc == 0
        return buf.getvalue()

    def test_top_help_matches_golden(self):
        with open(os.path.join(GOLDEN_DIR, "help_top.txt")) as fh:
            assert self._capture(["--help"]) == fh.read()

    @pytest.mark.parametrize("name", COMMANDS)
    def test_subcommand_help_matches_golden(self, name):
        with open(os.path.join(GOLDEN_DIR, f"help_{name}.txt")) as fh:
            assert self._capture([name, "--help"]) == fh.read()

    def test_top_help_lists_every_command(self):
        text = self._capture(["--help"])
        for name in COMMANDS:
            assert name in text

    @pytest.mark.parametrize("name", COMMANDS)
    def test_help_enumerates_flags(self, name):
        text = self._capture([name, "--help"])
        for flag in ["--config", "--set"] + REQUIRED_FLAGS[name]:
            assert flag in text, f"{name} help is missing {flag}"


class TestExitCodes:
    def test_missing_required_flag_is_usage_error(self, capsys):
        rc, _, err = run_cli(["eval-knn", "--k", "3"], capsys)
        assert rc == 1
        assert "smearssl eval-knn:" in err

    def test_unknown_command(self, capsys):
        rc, _, err = run_cli(["transmogrify"], capsys)
        assert rc == 1
        assert "smearssl:" in err

    def test_no_arguments(self, capsys):
        rc, _, _ = run_cli([], capsys)
        assert rc == 1

    def test_unknown_config_key_is_validation_error(self, tmp_path, capsys):
        rc, _, err = run_cli(["gen-synthetic", "--out", str(tmp_path / "d"),
                              "--set", "synth.banana=1"], capsys)
        assert rc == 1
        assert "error:" in err and "unknown config key" in err

    def test_malformed_set_pair(self, tmp_path, capsys):
        rc, _, err = run_cli(["gen-synthetic", "--out", str(tmp_path / "d"),
                              "--set", "synth.n_images"], capsys)
        assert rc == 1
        assert "key=value" in err

    def test_missing_config_file(self, tmp_path, capsys):
        rc, _, err = run_cli(["gen-synthetic", "--out", str(tmp_path / "d"),
                              "--config", str(tmp_path / "nope.cfg")], capsys)
        assert rc == 1
        assert "config file not found" in err

    def test_missing_input_file_is_io_error(self, tmp_path, capsys):
        rc, _, err = run_cli(["eval-knn",
                              "--train-emb", str(tmp_path / "a.emb1"),
                              "--test-emb", str(tmp_path / "b.emb1")], capsys)
        assert rc == 2
        assert "io error:" in err

    def test_numeric_error_maps_to_exit_2(self, emb_files, capsys, monkeypatch):
        tr, te = emb_files

        def explode(*args, **kwargs):
            raise NumericError("loss is not finite")

        monkeypatch.setattr("smearssl.cli.knn", explode)
        rc, _, err = run_cli(["eval-knn", "--train-emb", tr, "--test-emb", te],
                             capsys)
        assert rc == 2
        assert "runtime error:" in err

    def test_single_source_loso_is_validation_error(self, tmp_path, capsys):
        one = EmbeddingSet(vectors=np.eye(4, dtype=np.float32),
                           ids=[f"r{i}" for i in range(4)],
                           sources=["src0"] * 4,
                           labels=["a", "a", "b", "b"])
        path = str(tmp_path / "one.emb1")
        write_embeddings(path, one)
        rc, _, err = run_cli(["eval-loso", "--emb", path, "--k", "1"], capsys)
        assert rc == 1
        assert "error:" in err and "source" in err


class TestConfigPlumbing:
    def test_defaults_roundtrip_through_text(self):
        cfg = RunConfig()
        back = parse_config_text(cfg.resolved_text())
        assert back.values == cfg.values

    def test_resolved_text_groups_sections(self):
        text = RunConfig().resolved_text()
        lines = text.splitlines()
        assert lines[0].startswith("#")
        assert "" in lines  # at least one section separator
        assert "run.seed = 0" in lines

    def test_set_parses_booleans(self):
        cfg = RunConfig()
        cfg.set("train.deterministic", "no")
        assert cfg.get("train.deterministic") is False
        cfg.set("ssl.koleo_enabled", "TRUE")
        assert cfg.get("ssl.koleo_enabled") is True
        with pytest.raises(InputError):
            cfg.set("train.deterministic", "maybe")

    def test_get_unknown_key(self):
        with pytest.raises(InputError):
            RunConfig().get("train.rocket_boost")

    def test_apply_overrides_in_order(self):
        cfg = RunConfig()
        apply_overrides(cfg, ["run.seed=3", "run.seed=9"])
        assert cfg.get("run.seed") == 9

    def test_flag_beats_set_beats_file(self, tmp_path, capsys):
        cfg_file = tmp_path / "base.cfg"
        cfg_file.write_text("# base\nsynth.n_images = 3\nrun.seed = 2\n")

        d1 = tmp_path / "d1"
        rc, _, _ = run_cli(["gen-synthetic", "--config", str(cfg_file),
                            "--out", str(d1)], capsys)
        assert rc == 0
        assert len(load_manifest(str(d1 / "manifest.csv"))) == 3

        d2 = tmp_path / "d2"
        rc, _, _ = run_cli(["gen-synthetic", "--config", str(cfg_file),
                            "--set", "synth.n_images=4", "--out", str(d2)],
                           capsys)
        assert rc == 0
        assert len(load_manifest(str(d2 / "manifest.csv"))) == 4

        d3 = tmp_path / "d3"
        rc, _, _ = run_cli(["gen-synthetic", "--config", str(cfg_file),
                            "--set", "synth.n_images=4", "--n-images", "5",
                            "--out", str(d3)], capsys)
        assert rc == 0
        assert len(load_manifest(str(d3 / "manifest.csv"))) == 5

        resolved = load_config(str(d3 / "config.resolved"))
        assert resolved.get("synth.n_images") == 5
        assert resolved.get("run.seed") == 2

    def test_unknown_key_in_config_file(self, tmp_path, capsys):
        cfg_file = tmp_path / "bad.cfg"
        cfg_file.write_text("synth.n_images = 3\nnot.a_key = 1\n")
        rc, _, err = run_cli(["gen-synthetic", "--config", str(cfg_file),
                              "--out", str(tmp_path / "d")], capsys)
        assert rc == 1
        assert "unknown config key" in err and "bad.cfg:2" in err

    def test_resolved_config_reproduces_run(self, dataset, tmp_path, capsys):
        # spec'd guarantee: a run is reproducible from its resolved dump alone
        resolved = str(dataset / "config.resolved")
        d2 = tmp_path / "again"
        rc, _, _ = run_cli(["gen-synthetic", "--config", resolved,
                            "--out", str(d2)], capsys)
        assert rc == 0
        for rec in load_manifest(str(dataset / "manifest.csv")):
            a = (dataset / os.path.basename(rec.path)).read_bytes()
            b = (d2 / os.path.basename(rec.path)).read_bytes()
            assert a == b


class TestDataCommands:
    def test_gen_synthetic_artifacts(self, dataset):
        records = load_manifest(str(dataset / "manifest.csv"))
        assert len(records) == 6
        assert all(r.kind == "patch" for r in records)
        assert (dataset / "config.resolved").is_file()
        first = read_ppm(records[0].path)
        assert first.shape == (64, 64, 3)
        mask_name = os.path.basename(records[0].path).replace(".ppm", "_mask.pgm")
        assert (dataset / mask_name).is_file()

    def test_gen_synthetic_no_masks(self, tmp_path, capsys):
        rc, _, _ = run_cli(["gen-synthetic", "--out", str(tmp_path / "nm"),
                            "--n-images", "2", "--no-masks"], capsys)
        assert rc == 0
        names = os.listdir(tmp_path / "nm")
        assert not any(n.endswith("_mask.pgm") for n in names)

    def test_patchify(self, dataset, tmp_path, capsys):
        records = load_manifest(str(dataset / "manifest.csv"))
        out = tmp_path / "patches"
        rc, _, _ = run_cli(["patchify", "--image", records[0].path,
                            "--out", str(out), "--patch", "32",
                            "--source-id", "srcX", "--label", "disc"], capsys)
        assert rc == 0
        made = load_manifest(str(out / "manifest.csv"))
        assert len(made) == 4  # 64x64 image, 32px tiles
        assert made[0].source_id == "srcX" and made[0].label == "disc"
        patch = read_ppm(made[0].path)
        assert patch.shape == (32, 32, 3)
        assert (out / "config.resolved").is_file()

    def test_extract_cells(self, dataset, tmp_path, capsys):
        records = load_manifest(str(dataset / "manifest.csv"))
        image = records[0].path
        mask = image.replace(".ppm", "_mask.pgm")
        out = tmp_path / "cells"
        rc, _, _ = run_cli(["extract-cells", "--image", image, "--mask", mask,
                            "--out", str(out), "--cell-size", "32"], capsys)
        assert rc == 0
        made = load_manifest(str(out / "manifest.csv"))
        assert len(made) >= 1
        assert all(r.kind == "cell" for r in made)
        crop = read_ppm(made[0].path)
        assert crop.shape == (32, 32, 3)


class TestTrainCommands:
    def test_train_writes_artifacts(self, trained):
        for name in ("checkpoint.rdck", "state.rdck", "loss_log.csv",
                     "config.resolved"):
            assert (trained / name).is_file(), name

    def test_train_zero_iterations_checkpoint_equals_init(self, dataset,
                                                          tmp_path, capsys):
        out = tmp_path / "zero"
        rc, _, _ = run_cli(["train", "--manifest",
                            str(dataset / "manifest.csv"), "--out", str(out),
                            "--iterations", "0", "--seed", "5"]
                           + tiny_args(), capsys)
        assert rc == 0

        cfg = RunConfig()
        apply_overrides(cfg, list(TINY_SETS))
        cfg.set_typed("run.seed", 5)
        cfg.set_typed("train.iterations", 0)
        ref = init_train_state(cfg.vit_config(), cfg.ssl_config(),
                               cfg.train_config())
        enc = load_encoder(str(out / "checkpoint.rdck"))
        assert enc.params.keys() == ref.teacher_enc.params.keys()
        for name, p in enc.params.items():
            assert np.array_equal(p.data, ref.teacher_enc.params[name].data)

    def test_train_missing_manifest_is_validation_error(self, tmp_path, capsys):
        rc, _, err = run_cli(["train", "--manifest",
                              str(tmp_path / "ghost.csv"),
                              "--out", str(tmp_path / "o")], capsys)
        assert rc == 1
        assert "manifest not found" in err

    def test_embed_from_checkpoint(self, dataset, trained, tmp_path, capsys):
        out = str(tmp_path / "cells.emb1")
        rc, _, _ = run_cli(["embed", "--checkpoint",
                            str(trained / "checkpoint.rdck"),
                            "--manifest", str(dataset / "manifest.csv"),
                            "--out", out], capsys)
        assert rc == 0
        emb = read_embeddings(out)
        assert len(emb) == 6
        assert emb.dim == 16
        assert os.path.isfile(out + ".csv")
        assert os.path.isfile(out + ".config")

    def test_pca_map_output(self, dataset, trained, tmp_path, capsys):
        records = load_manifest(str(dataset / "manifest.csv"))
        out = str(tmp_path / "map.ppm")
        rc, _, err = run_cli(["pca-map", "--checkpoint",
                              str(trained / "checkpoint.rdck"),
                              "--image", records[0].path, "--out", out],
                             capsys)
        assert rc == 0
        rgb = read_ppm(out)
        assert rgb.shape == (64, 64, 3)
        assert os.path.isfile(out + ".config")


class TestAdapterTransparency:
    def test_eval_knn_matches_module_op(self, emb_files, tmp_path, capsys):
        tr_path, te_path = emb_files
        report_path = str(tmp_path / "cli.csv")
        rc, _, err = run_cli(["eval-knn", "--train-emb", tr_path,
                              "--test-emb", te_path, "--k", "20",
                              "--report", report_path], capsys)
        assert rc == 0
        assert "knn" in err  # text summary goes to stderr

        tr, te = read_embeddings(tr_path), read_embeddings(te_path)
        result = knn(tr, te, k=20, metric="cosine")
        expected = EvalReport(protocol="knn")
        expected.records.append(SplitRecord(
            train_tag=tr_path, test_tag=te_path,
            n_train=len(tr), n_test=len(te), metrics=result.metrics))
        expected_path = str(tmp_path / "direct.csv")
        write_report_csv(expected_path, expected)

        with open(report_path) as fh:
            got = fh.read()
        with open(expected_path) as fh:
            want = fh.read()
        assert got == want

    def test_eval_linear_smoke(self, emb_files, tmp_path, capsys):
        tr_path, te_path = emb_files
        report_path = str(tmp_path / "lin.csv")
        rc, _, _ = run_cli(["eval-linear", "--train-emb", tr_path,
                            "--test-emb", te_path, "--report", report_path],
                           capsys)
        assert rc == 0
        with open(report_path) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "protocol,train,test,n_train,n_test,acc,bacc,wf1"
        acc = float(lines[1].split(",")[5])
        assert acc == 1.0  # classes are linearly separable by construction

    def test_eval_loso_matches_module_op(self, emb_files, tmp_path, capsys):
        tr_path, _ = emb_files
        report_path = str(tmp_path / "loso.csv")
        rc, _, _ = run_cli(["eval-loso", "--emb", tr_path, "--k", "3",
                            "--report", report_path], capsys)
        assert rc == 0

        cfg = RunConfig()
        cfg.set_typed("eval.k", 3)
        expected = leave_one_source_out(read_embeddings(tr_path),
                                        cfg.classifier_spec())
        expected_path = str(tmp_path / "loso_direct.csv")
        write_report_csv(expected_path, expected)
        with open(report_path) as fh:
            got = fh.read()
        with open(expected_path) as fh:
            want = fh.read()
        assert got == want

    def test_eval_kfold_matches_module_op(self, emb_files, tmp_path, capsys):
        tr_path, _ = emb_files
        report_path = str(tmp_path / "kf.csv")
        rc, _, _ = run_cli(["eval-kfold", "--emb", tr_path, "--k", "3",
                            "--folds", "3", "--seed", "0",
                            "--report", report_path], capsys)
        assert rc == 0

        cfg = RunConfig()
        cfg.set_typed("eval.k", 3)
        expected = kfold(read_embeddings(tr_path), cfg.classifier_spec(),
                         k=3, seed=0)
        expected_path = str(tmp_path / "kf_direct.csv")
        write_report_csv(expected_path, expected)
        with open(report_path) as fh:
            got = fh.read()
        with open(expected_path) as fh:
            want = fh.read()
        assert got == want


def test_module_entrypoint_runs():
    proc = subprocess.run([sys.executable, "-m", "smearssl.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("usage: smearssl")


def test_console_script_runs():
    proc = subprocess.run(["smearssl", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("usage: smearssl")
