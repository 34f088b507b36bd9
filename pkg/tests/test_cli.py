import json
import os

import numpy as np
import pytest

from glandseg.cli import main


def run_cli(*argv):
    return main(list(argv))


PROTOCOL_TEXT = """\
seed 11
batch_size 4
normalize_loss true

stage region
  lr 0.005
  epochs 1
  groups w w_r
  init w=xavier w_r=xavier

stage edge
  lr 0.01
  epochs 1
  groups w_e
  init w_e=xavier

stage fusion
  lr 0.01
  epochs 1
  groups w_f
  init w_f=xavier

stage finetune
  lr 0.005
  epochs 1
  groups w w_r w_e w_f
  lambda_e 0.25
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny corpus + one tiny training run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert run_cli("synth", "--out", str(corpus), "--n", "6", "--size", "32",
                   "--seed", "3") == 0
    protocol = root / "protocol.txt"
    protocol.write_text(PROTOCOL_TEXT)
    run_dir = root / "run"
    assert run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                   "--protocol", str(protocol), "--out", str(run_dir),
                   "--scale", "0.05") == 0
    return root, corpus, protocol, run_dir


class TestSynth:
    def test_counts_and_manifest(self, workspace):
        _, corpus, _, _ = workspace
        images = sorted((corpus / "images").glob("*.png"))
        annotations = sorted((corpus / "annotations").glob("*.png"))
        assert len(images) == len(annotations) == 6
        rows = (corpus / "manifest.tsv").read_text().splitlines()
        assert len(rows) == 6
        assert (corpus / "config.json").is_file()

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("synth", "--out", str(a), "--n", "3", "--size", "32",
                       "--seed", "9") == 0
        assert run_cli("synth", "--out", str(b), "--n", "3", "--size", "32",
                       "--seed", "9") == 0
        for img in sorted((a / "images").glob("*.png")):
            twin = b / "images" / img.name
            assert img.read_bytes() == twin.read_bytes()

    def test_generated_corpus_reloads_with_valid_samples(self, workspace):
        from glandseg import dataio
        from glandseg.core import instance_to_edges, instance_to_semantic

        _, corpus, _, _ = workspace
        samples = dataio.load_dataset(dataio.read_manifest(corpus / "manifest.tsv"))
        assert len(samples) == 6
        for s in samples:
            assert (s.labels.data == instance_to_semantic(s.instances).data).all()
            assert (s.edges.data == instance_to_edges(s.instances, 2).data).all()


class TestTrain:
    def test_stage_checkpoints_and_logs(self, workspace):
        _, _, _, run_dir = workspace
        stages = sorted(d.name for d in (run_dir / "checkpoints").glob("stage_*"))
        assert stages == ["stage_01_region", "stage_02_edge",
                          "stage_03_fusion", "stage_04_finetune"]
        assert (run_dir / "log.tsv").is_file()
        assert (run_dir / "channel_means.txt").is_file()
        assert (run_dir / "config.json").is_file()
        config = json.loads((run_dir / "config.json").read_text())
        assert config["seed"] == 11

    def test_zero_stage_protocol_initialization_only(self, workspace, tmp_path):
        _, corpus, _, _ = workspace
        proto = tmp_path / "empty.txt"
        proto.write_text("seed 2\n")
        out = tmp_path / "out"
        assert run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(proto), "--out", str(out),
                       "--scale", "0.05") == 0
        dirs = sorted(d.name for d in (out / "checkpoints").iterdir())
        assert dirs == ["init"]

    def test_rerun_reproduces_checkpoint_bytes(self, workspace, tmp_path):
        _, corpus, protocol, run_dir = workspace
        again = tmp_path / "again"
        assert run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(protocol), "--out", str(again),
                       "--scale", "0.05") == 0
        for name in ("stage_04_finetune",):
            first = run_dir / "checkpoints" / name
            second = again / "checkpoints" / name
            for f in sorted(first.glob("*.bin")):
                assert f.read_bytes() == (second / f.name).read_bytes()

    def test_resume_matches_uninterrupted_run(self, workspace, tmp_path):
        _, corpus, protocol, run_dir = workspace
        resumed = tmp_path / "resumed"
        assert run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(protocol), "--out", str(resumed),
                       "--scale", "0.05", "--resume",
                       str(run_dir / "checkpoints" / "stage_02_edge")) == 0
        first = run_dir / "checkpoints" / "stage_04_finetune"
        second = resumed / "checkpoints" / "stage_04_finetune"
        for f in sorted(first.glob("*.bin")):
            assert f.read_bytes() == (second / f.name).read_bytes()

    def test_augment_flag_multiplies_samples(self, workspace, tmp_path):
        _, corpus, _, _ = workspace
        proto = tmp_path / "one_stage.txt"
        proto.write_text("seed 2\nbatch_size 8\nnormalize_loss true\n"
                         "stage region\n  lr 0.001\n  epochs 1\n  groups w w_r\n"
                         "  init w=xavier w_r=xavier\n")
        out = tmp_path / "aug"
        assert run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(proto), "--out", str(out),
                       "--scale", "0.05", "--augment") == 0
        rows = (out / "log.tsv").read_text().splitlines()[1:]
        # 6 samples x (2 flips x 4 rotations x 5 shift slots) = 240 -> 30 batches
        assert len(rows) == 30

    def test_bad_protocol_reports_line(self, workspace, tmp_path, capsys):
        _, corpus, _, _ = workspace
        proto = tmp_path / "bad.txt"
        proto.write_text("seed 2\nstage region\n  lr oops\n")
        code = run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(proto), "--out", str(tmp_path / "x"))
        assert code == 2
        assert ":3" in capsys.readouterr().err


class TestPredictEvalReport:
    @pytest.fixture(scope="class")
    def predictions(self, workspace, tmp_path_factory):
        _, corpus, _, run_dir = workspace
        out = tmp_path_factory.mktemp("pred")
        ckpt = run_dir / "checkpoints" / "stage_04_finetune"
        assert run_cli("predict", "--manifest", str(corpus / "manifest.tsv"),
                       "--checkpoint", str(ckpt), "--out", str(out)) == 0
        return out

    def test_one_instance_map_per_input(self, predictions):
        assert len(list((predictions / "instances").glob("*.png"))) == 6
        assert len(list((predictions / "overlays").glob("*.png"))) == 6

    def test_probability_maps_normalized(self, predictions):
        for f in (predictions / "probmaps").glob("*_prob.npy"):
            probs = np.load(f)
            dev = np.abs(probs.sum(axis=2) - 1.0).max()
            assert dev < 1e-6

    def test_empty_manifest_clean_exit(self, workspace, tmp_path):
        _, _, _, run_dir = workspace
        empty = tmp_path / "empty.tsv"
        empty.write_text("")
        out = tmp_path / "out"
        ckpt = run_dir / "checkpoints" / "stage_04_finetune"
        assert run_cli("predict", "--manifest", str(empty),
                       "--checkpoint", str(ckpt), "--out", str(out)) == 0
        assert list((out / "instances").glob("*.png")) == []

    def test_eval_gt_vs_itself_perfect(self, workspace, tmp_path):
        _, corpus, _, _ = workspace
        out = tmp_path / "eval"
        assert run_cli("eval", "--pred", str(corpus / "annotations"),
                       "--gt", str(corpus / "annotations"), "--out", str(out)) == 0
        lines = (out / "report.tsv").read_text().splitlines()
        assert len(lines) == 1 + 6 + 1
        agg = lines[-1].split("\t")
        assert float(agg[6]) == 1.0          # F1
        assert float(agg[7]) == 1.0          # dice
        assert float(agg[8]) == 0.0          # hausdorff

    def test_eval_aggregate_matches_rows(self, workspace, predictions, tmp_path):
        _, corpus, _, _ = workspace
        out = tmp_path / "eval2"
        assert run_cli("eval", "--pred", str(predictions / "instances"),
                       "--gt", str(corpus / "annotations"), "--out", str(out)) == 0
        lines = (out / "report.tsv").read_text().splitlines()[1:]
        rows, agg = lines[:-1], lines[-1].split("\t")
        tp = sum(int(r.split("\t")[3]) for r in rows)
        fp = sum(int(r.split("\t")[4]) for r in rows)
        fn = sum(int(r.split("\t")[5]) for r in rows)
        assert (int(agg[3]), int(agg[4]), int(agg[5])) == (tp, fp, fn)

    def test_report_rank_table_and_plots(self, workspace, tmp_path):
        _, _, _, run_dir = workspace
        scores = tmp_path / "scores.tsv"
        scores.write_text(
            "method\tf1_a\tf1_b\tdice_a\tdice_b\thausdorff_a\thausdorff_b\n"
            "ours\t0.9\t0.8\t0.9\t0.8\t50\t120\n"
            "other\t0.8\t0.8\t0.8\t0.7\t60\t130\n"
        )
        out = tmp_path / "report"
        assert run_cli("report", "--out", str(out), "--scores", str(scores),
                       "--log", str(run_dir / "log.tsv")) == 0
        ranked = (out / "ranked.tsv").read_text().splitlines()
        assert ranked[1].startswith("ours")
        header = ranked[0].split("\t")
        ours = dict(zip(header, ranked[1].split("\t")))
        assert ours["rank_f1_a"] == "1"
        assert ours["rank_f1_b"] == "1"      # tie shares the lower rank
        for stage in ("region", "edge", "fusion", "finetune"):
            assert (out / f"loss_{stage}.png").is_file()

    def test_report_single_method_warns_without_ranks(self, tmp_path, capsys):
        scores = tmp_path / "one.tsv"
        scores.write_text(
            "method\tf1_a\tf1_b\tdice_a\tdice_b\thausdorff_a\thausdorff_b\n"
            "only\t0.9\t0.8\t0.9\t0.8\t50\t120\n"
        )
        out = tmp_path / "rep"
        assert run_cli("report", "--out", str(out), "--scores", str(scores)) == 0
        assert "without ranks" in capsys.readouterr().err
        assert "rank_sum" not in (out / "ranked.tsv").read_text().splitlines()[0]

    def test_overlay_sheet(self, workspace, predictions, tmp_path):
        _, corpus, _, _ = workspace
        out = tmp_path / "sheet"
        assert run_cli("report", "--out", str(out),
                       "--manifest", str(corpus / "manifest.tsv"),
                       "--pred", str(predictions / "instances"),
                       "--sheet-size", "3") == 0
        assert (out / "overlay_sheet.png").is_file()


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert run_cli("train") == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_command_usage_error(self):
        assert run_cli("frobnicate") == 1

    def test_data_error_missing_manifest(self, tmp_path):
        assert run_cli("train", "--manifest", str(tmp_path / "none.tsv"),
                       "--out", str(tmp_path / "o")) == 2

    def test_checkpoint_arch_mismatch_is_data_error(self, workspace, tmp_path):
        import shutil

        _, corpus, _, run_dir = workspace
        ckpt = tmp_path / "tampered"
        shutil.copytree(run_dir / "checkpoints" / "stage_04_finetune", ckpt)
        manifest_file = ckpt / "manifest.json"
        payload = json.loads(manifest_file.read_text())
        payload["arch_hash"] = "0" * 16
        manifest_file.write_text(json.dumps(payload))
        code = run_cli("predict", "--manifest", str(corpus / "manifest.tsv"),
                       "--checkpoint", str(ckpt), "--out", str(tmp_path / "out"))
        assert code == 2

    def test_numeric_failure_exit_code(self, workspace, tmp_path):
        _, corpus, _, _ = workspace
        proto = tmp_path / "diverge.txt"
        proto.write_text(
            "seed 2\nbatch_size 3\nnormalize_loss false\n"
            "stage region\n  lr 1e12\n  epochs 2\n  groups w w_r\n"
            "  init w=xavier w_r=xavier\n"
        )
        code = run_cli("train", "--manifest", str(corpus / "manifest.tsv"),
                       "--protocol", str(proto), "--out", str(tmp_path / "x"),
                       "--scale", "0.05")
        assert code == 3

    def test_data_root_env_resolution(self, workspace, tmp_path, monkeypatch):
        root, corpus, _, _ = workspace
        monkeypatch.setenv("GLANDSEG_DATA_ROOT", str(corpus))
        monkeypatch.chdir(tmp_path)
        out = tmp_path / "eval"
        assert run_cli("eval", "--pred", "annotations", "--gt", "annotations",
                       "--out", str(out)) == 0
