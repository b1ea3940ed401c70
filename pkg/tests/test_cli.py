import json

import numpy as np
import pytest

from plexkit import imgio
from plexkit.cli import main
from plexkit.tiling import SlideEntry, read_tile_index, write_manifest

FAST_SYNTH = [
    "--set", "synth.slides=10",
    "--set", "synth.width=256",
    "--set", "synth.height=256",
    "--set", "synth.dim=24",
    "--set", "synth.instances=6",
    "--set", "synth.bags_per_slide=12",
    "--set", "synth.seed=5",
]
FAST_TRAIN = [
    "--set", "head.dim=24",
    "--set", "train.epochs=4",
    "--set", "train.warmup_epochs=1",
    "--set", "train.batch_size=16",
]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    assert main(["synth", "--out", str(out)] + FAST_SYNTH) == 0
    return out


@pytest.fixture(scope="module")
def split_bags(synth_dir, tmp_path_factory):
    """Disjoint train/val bag files carved from the synthetic dataset."""
    from plexkit.embeddings import read_bags, write_bags
    from plexkit.synthetic import bags_by_slide_of

    out = tmp_path_factory.mktemp("split")
    by_slide = bags_by_slide_of(read_bags(synth_dir / "bags.kdve"))
    slides = sorted(by_slide)
    train = [b for s in slides[:7] for b in by_slide[s]]
    val = [b for s in slides[7:] for b in by_slide[s]]
    write_bags(train, out / "train.kdve")
    write_bags(val, out / "val.kdve")
    return out / "train.kdve", out / "val.kdve"


class TestVerifyMetrics:
    def test_exit_zero_and_prints_rows(self, capsys):
        assert main(["verify-metrics"]) == 0
        out = capsys.readouterr().out
        assert "QuiltNet" in out
        assert "VGG-19" in out
        assert "83.92" in out
        assert "FAIL" not in out


class TestExitCodes:
    def test_unknown_config_key_is_usage(self, capsys):
        assert main(["synth", "--out", "/tmp/x", "--set", "bogus.key=1"]) == 1

    def test_missing_file_is_data_error(self, capsys):
        assert main(["tile", "--manifest", "/nonexistent.json", "--out-index", "/tmp/t.jsonl"]) == 2

    def test_bad_flag_is_usage(self, capsys):
        assert main(["tile", "--nope"]) == 1

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["--version"])
        assert err.value.code == 0


class TestSynth(object):
    def test_writes_dataset(self, synth_dir):
        assert (synth_dir / "manifest.json").exists()
        assert (synth_dir / "bags.kdve").exists()
        assert (synth_dir / "concepts.kdve").exists()
        assert (synth_dir / "truth.json").exists()
        assert (synth_dir / "run_manifest.json").exists()
        manifest = json.loads((synth_dir / "run_manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seeds"]["synth"] == 5


class TestTile:
    def test_nine_tiles_on_448_slide(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 255, size=(448, 448, 3)).astype(np.uint8)
        mask = np.zeros((448, 448), dtype=np.uint8)
        mask[100, 100] = 255
        imgio.save_rgb(img, tmp_path / "s1.png")
        imgio.save_mask(mask, tmp_path / "s1_mask.png")
        write_manifest(
            [SlideEntry("s1", str(tmp_path / "s1.png"), str(tmp_path / "s1_mask.png"),
                        magnification=5.0)],
            tmp_path / "manifest.json",
        )
        index = tmp_path / "tiles.jsonl"
        code = main([
            "tile", "--manifest", str(tmp_path / "manifest.json"),
            "--out-index", str(index), "--no-sample",
        ])
        assert code == 0
        tiles = read_tile_index(index)
        assert len(tiles) == 9
        assert (index.parent / "tiles.manifest.json").exists()

    def test_downsamples_by_magnification(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 255, size=(896, 896, 3)).astype(np.uint8)
        mask = np.zeros((896, 896), dtype=np.uint8)
        imgio.save_rgb(img, tmp_path / "s.png")
        imgio.save_mask(mask, tmp_path / "s_mask.png")
        write_manifest(
            [SlideEntry("s", str(tmp_path / "s.png"), str(tmp_path / "s_mask.png"),
                        magnification=20.0)],
            tmp_path / "manifest.json",
        )
        index = tmp_path / "tiles.jsonl"
        assert main([
            "tile", "--manifest", str(tmp_path / "manifest.json"),
            "--out-index", str(index), "--no-sample",
        ]) == 0
        # 896 at 20x downsamples to 224 at 5x: exactly one tile
        assert len(read_tile_index(index)) == 1

    def test_dump_dir_writes_tile_pngs(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 255, size=(336, 336, 3)).astype(np.uint8)
        mask = np.zeros((336, 336), dtype=np.uint8)
        imgio.save_rgb(img, tmp_path / "s.png")
        imgio.save_mask(mask, tmp_path / "s_mask.png")
        write_manifest(
            [SlideEntry("s", str(tmp_path / "s.png"), str(tmp_path / "s_mask.png"),
                        magnification=5.0)],
            tmp_path / "manifest.json",
        )
        dump = tmp_path / "tiles"
        assert main([
            "tile", "--manifest", str(tmp_path / "manifest.json"),
            "--out-index", str(tmp_path / "tiles.jsonl"), "--no-sample",
            "--dump-dir", str(dump),
        ]) == 0
        dumped = sorted(dump.glob("*.png"))
        assert len(dumped) == 4  # 2x2 grid at 224/112 on a 336px slide
        assert np.array_equal(imgio.load_rgb(dump / "s_0_0.png"), img[:224, :224])

    def test_threads_flag_is_deterministic(self, synth_dir, tmp_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        common = ["tile", "--manifest", str(synth_dir / "manifest.json"), "--no-sample"]
        assert main(common + ["--out-index", str(a), "--threads", "1"]) == 0
        assert main(common + ["--out-index", str(b), "--threads", "4"]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_balanced_sampling_with_allow_short(self, synth_dir, tmp_path):
        index = tmp_path / "tiles.jsonl"
        code = main([
            "tile", "--manifest", str(synth_dir / "manifest.json"),
            "--out-index", str(index),
            "--set", "sample.per_class=3",
            "--set", "sample.allow_short=true",
        ])
        assert code == 0
        tiles = read_tile_index(index)
        assert tiles
        per_slide = {}
        for t in tiles:
            per_slide.setdefault(t.slide_id, []).append(t)
        for slide_tiles in per_slide.values():
            assert sum(1 for t in slide_tiles if t.label == 1) <= 3
            assert sum(1 for t in slide_tiles if t.label == 0) <= 3


class TestNormalize:
    def test_default_profile_applies(self, synth_dir, tmp_path):
        out = tmp_path / "normalized"
        code = main([
            "normalize", "--manifest", str(synth_dir / "manifest.json"),
            "--out", str(out),
        ])
        assert code == 0
        entries = json.loads((out / "manifest.json").read_text())["slides"]
        assert len(entries) == 10
        for entry in entries:
            assert (out / f"{entry['slide_id']}.png").exists()

    def test_reference_slide_fit_and_save(self, synth_dir, tmp_path):
        out = tmp_path / "normalized"
        profile_path = tmp_path / "profile.json"
        code = main([
            "normalize", "--manifest", str(synth_dir / "manifest.json"),
            "--out", str(out),
            "--reference-slide", "synth000",
            "--save-profile", str(profile_path),
        ])
        assert code == 0
        doc = json.loads(profile_path.read_text())
        assert len(doc["stain_matrix"]) == 6
        assert len(doc["max_concentrations"]) == 2

    def test_unknown_reference_slide_is_data_error(self, synth_dir, tmp_path):
        assert main([
            "normalize", "--manifest", str(synth_dir / "manifest.json"),
            "--out", str(tmp_path / "x"),
            "--reference-slide", "missing",
        ]) == 2


class TestTrainEvalCv:
    def test_train_and_eval_round_trip(self, synth_dir, split_bags, tmp_path):
        train_path, val_path = split_bags
        ck = tmp_path / "head.kdhp"
        history = tmp_path / "history.csv"
        code = main([
            "train",
            "--bags", str(train_path),
            "--val", str(val_path),
            "--concepts", str(synth_dir / "concepts.kdve"),
            "--out-checkpoint", str(ck),
            "--out-history", str(history),
        ] + FAST_TRAIN)
        assert code == 0
        assert ck.exists() and history.exists()
        assert (tmp_path / "head.manifest.json").exists()

        report = tmp_path / "eval.json"
        scores = tmp_path / "scores.csv"
        code = main([
            "eval",
            "--bags", str(val_path),
            "--concepts", str(synth_dir / "concepts.kdve"),
            "--checkpoint", str(ck),
            "--out-report", str(report),
            "--out-scores", str(scores),
        ] + FAST_TRAIN)
        assert code == 0
        doc = json.loads(report.read_text())
        assert "metrics" in doc
        assert doc["n_bags"] == 36
        lines = scores.read_text().splitlines()
        assert lines[0] == "tile_ref,label,score,pred"
        assert len(lines) == 37

    def test_cv_deterministic_rerun(self, synth_dir, tmp_path):
        args_common = [
            "--bags", str(synth_dir / "bags.kdve"),
            "--concepts", str(synth_dir / "concepts.kdve"),
        ] + FAST_TRAIN
        out1 = tmp_path / "cv1"
        out2 = tmp_path / "cv2"
        assert main(["cv", "--out-dir", str(out1)] + args_common) == 0
        assert main(["cv", "--out-dir", str(out2)] + args_common) == 0
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
        assert (out1 / "scores.csv").read_bytes() == (out2 / "scores.csv").read_bytes()
        doc = json.loads((out1 / "report.json").read_text())
        assert len(doc["folds"]) == 5

    def test_report_renders_table_csv_figures(self, synth_dir, tmp_path, capsys):
        out_cv = tmp_path / "cv"
        args_common = [
            "--bags", str(synth_dir / "bags.kdve"),
            "--concepts", str(synth_dir / "concepts.kdve"),
        ] + FAST_TRAIN
        assert main(["cv", "--out-dir", str(out_cv)] + args_common) == 0

        out_report = tmp_path / "rendered"
        code = main([
            "report",
            "--report", str(out_cv / "report.json"),
            "--out-dir", str(out_report),
            "--scores", str(out_cv / "scores.csv"),
        ])
        assert code == 0
        assert (out_report / "metrics_table.txt").exists()
        assert (out_report / "metrics.csv").exists()
        assert (out_report / "confusion_pooled.png").exists()
        assert (out_report / "fold_accuracy.png").exists()
        assert (out_report / "roc_curve.png").exists()
        table = (out_report / "metrics_table.txt").read_text()
        assert "pooled" in table
        csv_lines = (out_report / "metrics.csv").read_text().splitlines()
        assert csv_lines[0].startswith("row,accuracy")
        assert len(csv_lines) == 7  # header + 5 folds + pooled

    def test_report_on_eval_json_with_history(self, synth_dir, split_bags, tmp_path):
        train_path, val_path = split_bags
        ck = tmp_path / "head.kdhp"
        history = tmp_path / "history.csv"
        assert main([
            "train",
            "--bags", str(train_path),
            "--val", str(val_path),
            "--concepts", str(synth_dir / "concepts.kdve"),
            "--out-checkpoint", str(ck),
            "--out-history", str(history),
        ] + FAST_TRAIN) == 0
        report = tmp_path / "eval.json"
        assert main([
            "eval",
            "--bags", str(val_path),
            "--concepts", str(synth_dir / "concepts.kdve"),
            "--checkpoint", str(ck),
            "--out-report", str(report),
        ] + FAST_TRAIN) == 0
        out = tmp_path / "rendered"
        assert main([
            "report", "--report", str(report), "--out-dir", str(out),
            "--history", str(history),
        ]) == 0
        assert (out / "confusion.png").exists()
        assert (out / "history.png").exists()
