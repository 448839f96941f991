import csv
import json

import numpy as np
import pytest
import yaml

from nodule3d.checkpoint import load_tensors
from nodule3d.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from nodule3d.config import ConfigError, PROFILES, load_config, parse_override
from nodule3d.data import Volume, preprocess_hu, read_dataset, write_dataset
from nodule3d.inference import detect
from nodule3d.io import read_detections, write_annotations, write_detections
from nodule3d.models import build_rpn

TINY = {
    "data": {"n_volumes": 2, "synth": {"size": 32, "nodules": [1, 1], "tubes": [0, 1]}},
    "rpn": {
        "stem_channels": 2, "widths": [4, 4, 4, 4], "units": [1, 1, 1, 1], "decoder_widths": [4, 4],
        "decoder_units": [1, 1], "groups": 2, "attention": "none", "patch": 32, "dropout": 0.0,
    },
    "fpr": {"stem_channels": [2, 2, 2], "widths": [4, 4, 4, 4], "units": [1, 1, 1, 1], "groups": 2, "fc": [8, 4], "reduction": 2},
    "rpn_train": {
        "epochs": 6, "batch_size": 2, "steps_per_epoch": 4, "lr": 0.01, "milestones": [],
        "p_nodule": 1.0, "augment": False, "grad_clip": 5.0, "val_batches": 0,
    },
    "fpr_train": {"epochs": 1, "batch_size": 4, "steps_per_epoch": 1},
    "pipeline": {"patch": 32, "overlap": 8, "candidate_threshold": 0.0},
}


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def trained(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--stage", "rpn", "--config", str(tiny_cfg), "--seed", "3", "--out", str(out)])
    return code, out


@pytest.fixture(scope="module")
def dataset(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth-gen", "--config", str(tiny_cfg), "--seed", "5", "--n", "2", "--out", str(out)]) == EXIT_OK
    return out


def _files(root):
    """Dataset bytes; config.yaml records the output path, so it is left out."""
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file() and p.name != "config.yaml"}


class TestConfig:
    def test_paper_defaults(self):
        cfg = load_config()
        assert cfg.rpn.patch == 128 and cfg.rpn_train.batch_size == 7 and cfg.fpr_train.batch_size == 64
        assert cfg.rpn_train.milestones == ((50, 0.001), (100, 0.0005), (150, 0.0001))

    def test_desk_profile(self):
        cfg = load_config(profile="desk")
        assert cfg.rpn.patch == 64 and cfg.pipeline.patch == 64

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("rpn:\n  patch: 64\nseed: 4\n")
        cfg = load_config(p, "paper", ["seed=9"])
        assert cfg.rpn.patch == 64 and cfg.seed == 9

    @pytest.mark.parametrize(
        "override",
        ["rpn.bogus=1", "rpn.patch=abc", "rpn.patch=48", "rpn_train.milestones=[[1]]", "stage=xyz", "rpn.skips=1"],
    )
    def test_schema_errors(self, override):
        with pytest.raises(ConfigError):
            load_config(overrides=[override])

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            load_config(profile="huge")

    def test_parse_override(self):
        assert parse_override("a.b=[1, 2]") == {"a": {"b": [1, 2]}}

    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(profile="desk")
        p = tmp_path / "d.yaml"
        p.write_text(cfg.dump())
        assert load_config(p).to_dict() == cfg.to_dict()

    def test_profiles_named(self):
        assert set(PROFILES) == {"paper", "desk"}


class TestSynthGen:
    def test_deterministic(self, tiny_cfg, tmp_path):
        for name in ("a", "b"):
            assert main(["synth-gen", "--config", str(tiny_cfg), "--seed", "7", "--n", "2", "--out", str(tmp_path / name)]) == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert len(manifest["volumes"]) == 2

    def test_seed_changes_bytes(self, tiny_cfg, tmp_path):
        for seed in ("7", "8"):
            main(["synth-gen", "--config", str(tiny_cfg), "--seed", seed, "--n", "1", "--out", str(tmp_path / seed)])
        assert (tmp_path / "7" / "synth0000.raw").read_bytes() != (tmp_path / "8" / "synth0000.raw").read_bytes()

    def test_workers_same_output(self, tiny_cfg, tmp_path):
        main(["synth-gen", "--config", str(tiny_cfg), "--seed", "7", "--n", "3", "--out", str(tmp_path / "one")])
        main(["synth-gen", "--config", str(tiny_cfg), "--seed", "7", "--n", "3", "--workers", "3", "--out", str(tmp_path / "three")])
        assert _files(tmp_path / "one") == _files(tmp_path / "three")

    def test_run_metadata(self, dataset):
        meta = json.loads((dataset / "run.json").read_text())
        assert meta["seed"] == 5 and meta["version"].startswith("0.1.0")
        assert yaml.safe_load((dataset / "config.yaml").read_text())["seed"] == 5


class TestTrain:
    def test_smoke(self, trained):
        code, out = trained
        assert code == EXIT_OK
        assert (out / "rpn.ckpt").is_file() and (out / "config.yaml").is_file()
        rows = list(csv.DictReader((out / "metrics.csv").open()))
        assert len(rows) == 6
        assert float(rows[0]["train_loss"]) > float(rows[-1]["train_loss"])

    def test_zero_lr(self, tiny_cfg, tmp_path):
        assert main(["train", "--config", str(tiny_cfg), "--epochs", "1", "--lr", "0", "--out", str(tmp_path)]) == 0
        init, final = load_tensors(tmp_path / "initial.ckpt"), load_tensors(tmp_path / "rpn.ckpt")
        learnable = {k for k, _ in build_rpn(load_config(tiny_cfg).rpn).named_parameters()}
        assert all(np.array_equal(init[k], final[k]) for k in learnable)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tiny_cfg, tmp_path):
        code = main(["train", "--config", str(tiny_cfg), "--epochs", "2", "--lr", "1e12", "--set", "rpn_train.grad_clip=0.0", "--out", str(tmp_path)])
        assert code == EXIT_NUMERIC

    def test_missing_dataset(self, tiny_cfg, tmp_path):
        code = main(["train", "--config", str(tiny_cfg), "--set", f"data.dir={tmp_path / 'nope'}", "--out", str(tmp_path)])
        assert code == EXIT_DATA

    def test_fpr_needs_candidates(self, tiny_cfg, tmp_path):
        assert main(["train", "--stage", "fpr", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_fpr_from_rpn(self, tiny_cfg, trained, tmp_path):
        _, rpn_dir = trained
        code = main(["train", "--stage", "fpr", "--config", str(tiny_cfg), "--rpn", str(rpn_dir / "rpn.ckpt"), "--out", str(tmp_path)])
        assert code == EXIT_OK and (tmp_path / "fpr.ckpt").is_file()


class TestDetect:
    def test_rpn_only_matches_pipeline(self, tiny_cfg, trained, dataset, tmp_path):
        _, rpn_dir = trained
        code = main(["detect", "--config", str(tiny_cfg), "--data", str(dataset), "--rpn", str(rpn_dir / "rpn.ckpt"), "--rpn-only", "--out", str(tmp_path)])
        assert code == EXIT_OK
        got = read_detections(tmp_path / "detections.csv")
        cfg = load_config(tiny_cfg)
        m = build_rpn(cfg.rpn)
        m.load(rpn_dir / "rpn.ckpt")
        for v in read_dataset(dataset):
            want = detect(m, preprocess_hu(v).intensities, None, cfg.pipeline).candidates
            assert got.get(v.series_id, []) == want

    def test_tta_pool_logged(self, tiny_cfg, trained, dataset, tmp_path, capsys):
        _, rpn_dir = trained
        args = ["detect", "--config", str(tiny_cfg), "--data", str(dataset), "--rpn", str(rpn_dir / "rpn.ckpt")]
        main(args + ["--out", str(tmp_path / "a")])
        plain = capsys.readouterr().out
        main(args + ["--tta", "--out", str(tmp_path / "b")])
        tta = capsys.readouterr().out
        pools = lambda text: [int(line.split("pool=")[1].split()[0]) for line in text.splitlines() if "pool=" in line]  # noqa: E731
        assert all(b >= a for a, b in zip(pools(plain), pools(tta)))
        assert "sagittal=" in tta

    def test_empty_volume(self, tiny_cfg, trained, tmp_path):
        _, rpn_dir = trained
        # -1200 HU preprocesses to an all-zero volume
        write_dataset(tmp_path / "z", [Volume(np.full((32, 32, 32), -1200.0, np.float32), series_id="zero")])
        args = ["--set", "pipeline.candidate_threshold=0.3", "--data", str(tmp_path / "z"), "--rpn", str(rpn_dir / "rpn.ckpt")]
        assert main(["detect", "--config", str(tiny_cfg), *args, "--out", str(tmp_path / "o")]) == EXIT_OK
        assert read_detections(tmp_path / "o" / "detections.csv").get("zero", []) == []

    def test_checkpoint_mismatch(self, tiny_cfg, trained, dataset, tmp_path):
        _, rpn_dir = trained
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((rpn_dir / "rpn.ckpt").read_bytes())
        code = main(["detect", "--config", str(tiny_cfg), "--set", "rpn.stem_channels=4", "--data", str(dataset), "--rpn", str(bad), "--out", str(tmp_path / "o")])
        assert code == EXIT_DATA

    def test_missing_inputs(self, tiny_cfg, trained, tmp_path):
        _, rpn_dir = trained
        assert main(["detect", "--config", str(tiny_cfg), "--rpn", str(rpn_dir / "rpn.ckpt"), "--out", str(tmp_path)]) == EXIT_USAGE


class TestEvaluate:
    def _run(self, tmp_path, dets, ann, capsys):
        write_detections(tmp_path / "d.csv", dets)
        write_annotations(tmp_path / "a.csv", ann)
        code = main(["evaluate", "--detections", str(tmp_path / "d.csv"), "--annotations", str(tmp_path / "a.csv"), "--out", str(tmp_path)])
        return code, capsys.readouterr().out

    def test_perfect(self, tmp_path, capsys):
        from nodule3d.boxes import DetectionBox

        ann = {"s": np.array([[10.0, 10, 10, 6], [30.0, 30, 30, 6]])}
        code, out = self._run(tmp_path, {"s": [DetectionBox(10, 10, 10, 6, 0.9), DetectionBox(30, 30, 30, 6, 0.8)]}, ann, capsys)
        assert code == 0 and "CPM=1.000000" in out
        assert (tmp_path / "froc.csv").is_file()

    def test_empty(self, tmp_path, capsys):
        code, out = self._run(tmp_path, {}, {"s": np.array([[10.0, 10, 10, 6]])}, capsys)
        assert code == 0 and "CPM=0.000000" in out

    def test_four_scan_fixture(self, tmp_path, capsys):
        from test_evaluation import brute_seven, four_scan_fixture

        scans = four_scan_fixture()
        dets = {f"s{i}": d for i, (d, _) in enumerate(scans)}
        ann = {f"s{i}": np.array(g, dtype=float) for i, (_, g) in enumerate(scans)}
        code, out = self._run(tmp_path, dets, ann, capsys)
        oracle = brute_seven(scans)
        assert code == 0 and f"CPM={oracle.mean():.6f}" in out

    def test_unknown_series(self, tmp_path, capsys):
        from nodule3d.boxes import DetectionBox

        code, _ = self._run(tmp_path, {"x": [DetectionBox(1, 1, 1, 2, 0.5)]}, {"s": np.array([[1.0, 1, 1, 2]])}, capsys)
        assert code == EXIT_DATA


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--block", "channel_attention", "--sizes", "1", "4", "6", "6", "6"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "conv.weight: max_rel_err=" in out and "PASS" in out

    def test_corrupt_fails(self, capsys):
        assert main(["gradcheck", "--corrupt"]) == EXIT_NUMERIC
        assert "FAIL" in capsys.readouterr().out

    @pytest.mark.parametrize("block", ["spatial_attention", "cbam_ca", "zoom_in"])
    def test_other_blocks(self, block):
        assert main(["gradcheck", "--block", block, "--sizes", "1", "4", "6", "6", "6"]) == EXIT_OK


class TestUsage:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--bogus"])
        assert exc.value.code == EXIT_USAGE

    def test_bad_override(self, tmp_path):
        assert main(["synth-gen", "--set", "rpn.nothing=1", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_sizes(self):
        assert main(["gradcheck", "--sizes", "1", "2"]) == EXIT_USAGE
