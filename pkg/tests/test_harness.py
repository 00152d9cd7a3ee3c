"""Harness tests: config files, dataset ingestion, sweeps, ablation,
loopback, and CSV round trips."""

import numpy as np
import pytest

from vqdisc.estimator import VqImageCodec
from vqdisc.harness import (RunConfig, ablate_codebook, estimator_from_config,
                            evaluate_loopback, load_dataset, loopback_run,
                            make_corpus, parse_config, read_csv, sweep_snr,
                            train_run, write_csv, write_ppm, write_sweep_csv,
                            SWEEP_COLUMNS)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_corpus(root, 8, 16, seed=3)
    return root


@pytest.fixture(scope="module")
def tiny_cfg(corpus, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("run") / "model.ckpt"
    return RunConfig(dataset=str(corpus), checkpoint=str(ckpt), seed=5,
                     epochs=3, batch_size=4, image_size=16,
                     enc_widths=(4, 6, 8), dec_widths=(8, 6, 4),
                     codebook_sizes=(8, 8, 8), snr_embed_dim=4, trials=2)


@pytest.fixture(scope="module")
def trained(tiny_cfg):
    return train_run(tiny_cfg)


class TestConfigFile:
    def test_parse_types_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# a comment\n"
            "epochs = 7\n"
            "alpha = 0.5   # trailing comment\n"
            "enc_widths = 8,16,32\n"
            "train_bit_flips = false\n"
            "channel = rayleigh\n"
            "\n")
        cfg = parse_config(path)
        assert cfg.epochs == 7
        assert cfg.alpha == 0.5
        assert cfg.enc_widths == (8, 16, 32)
        assert cfg.train_bit_flips is False
        assert cfg.channel == "rayleigh"
        # untouched keys keep defaults
        assert cfg.gamma == 0.99

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate = 1\n")
        with pytest.raises(ValueError, match="unknown key"):
            parse_config(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("epochs\n")
        with pytest.raises(ValueError, match="key = value"):
            parse_config(path)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            RunConfig(codebook_update="adam")

    def test_estimator_mirrors_config(self, tiny_cfg):
        est = estimator_from_config(tiny_cfg)
        assert est.epochs == tiny_cfg.epochs
        assert est.codebook_sizes == (8, 8, 8)


class TestDataset:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        write_ppm(tmp_path / "x.ppm", img)
        loaded = load_dataset(tmp_path, 16)
        assert loaded.shape == (1, 16, 16, 3)
        assert np.max(np.abs(loaded[0] - img)) <= 0.5 / 255 + 1e-6

    def test_all_white_normalizes_to_one(self, tmp_path):
        write_ppm(tmp_path / "w.ppm", np.ones((8, 8, 3)))
        loaded = load_dataset(tmp_path, 8)
        assert np.array_equal(loaded, np.ones((1, 8, 8, 3), dtype=np.float32))

    def test_ppm_header_is_p6(self, tmp_path):
        write_ppm(tmp_path / "x.ppm", np.zeros((4, 4, 3)))
        blob = (tmp_path / "x.ppm").read_bytes()
        assert blob.startswith(b"P6\n4 4\n255\n")
        assert len(blob) == len(b"P6\n4 4\n255\n") + 4 * 4 * 3

    def test_png_supported(self, tmp_path):
        from PIL import Image
        arr = (np.random.default_rng(1).random((16, 16, 3)) * 255).astype(
            np.uint8)
        Image.fromarray(arr).save(tmp_path / "img.png")
        loaded = load_dataset(tmp_path, 16)
        assert loaded.shape == (1, 16, 16, 3)

    def test_center_crop_and_resize(self, tmp_path):
        img = np.zeros((20, 32, 3))
        img[:, 6:26] = 1.0  # center 20x20 square is white
        write_ppm(tmp_path / "r.ppm", img)
        loaded = load_dataset(tmp_path, 16)
        assert np.allclose(loaded[0], 1.0)

    def test_deterministic_ordering(self, corpus):
        a = load_dataset(corpus, 16)
        b = load_dataset(corpus, 16)
        assert np.array_equal(a, b)

    def test_corrupt_file_skipped(self, tmp_path):
        write_ppm(tmp_path / "good.ppm", np.zeros((8, 8, 3)))
        (tmp_path / "bad.png").write_bytes(b"not an image")
        loaded = load_dataset(tmp_path, 8)
        assert loaded.shape[0] == 1

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no readable images"):
            load_dataset(tmp_path, 8)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope", 8)


class TestCsv:
    def test_exact_round_trip(self, tmp_path):
        rows = [[0.1 + 0.2, 1e-9, float("inf"), 3]]
        path = tmp_path / "t.csv"
        write_csv(path, ("a", "b", "c", "d"), rows, comments=("hello",))
        cols, parsed = read_csv(path)
        assert cols == ["a", "b", "c", "d"]
        assert float(parsed[0][0]) == 0.1 + 0.2
        assert float(parsed[0][1]) == 1e-9
        assert float(parsed[0][2]) == float("inf")
        assert int(parsed[0][3]) == 3

    def test_comments_preserved_as_hash_lines(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ("x",), [[1.0]], comments=("note a", "note b"))
        text = path.read_text()
        assert text.startswith("# note a\n# note b\nx\n")


class TestTrainRun:
    def test_writes_checkpoint(self, tiny_cfg, trained):
        loaded = VqImageCodec.load(tiny_cfg.checkpoint)
        assert loaded.config_hash_ == trained.config_hash_

    def test_repeat_run_byte_identical(self, tiny_cfg, tmp_path):
        from dataclasses import replace
        cfg2 = replace(tiny_cfg, checkpoint=str(tmp_path / "again.ckpt"))
        train_run(cfg2)
        a = open(tiny_cfg.checkpoint, "rb").read()
        b = open(cfg2.checkpoint, "rb").read()
        assert a == b


class TestSweep:
    def test_report_rows_and_csv(self, trained, corpus, tmp_path):
        images = load_dataset(corpus, 16)
        reports = sweep_snr(trained, images, [0.0, 12.0], trials=2, seed=1)
        assert [r.snr_db for r in reports] == [0.0, 12.0]
        out = tmp_path / "sweep.csv"
        write_sweep_csv(out, reports)
        cols, rows = read_csv(out)
        assert tuple(cols) == SWEEP_COLUMNS
        assert len(rows) == 2
        # exact round trip of written values
        assert float(rows[0][1]) == reports[0].psnr_db

    def test_high_snr_equals_loopback(self, trained, corpus):
        images = load_dataset(corpus, 16)
        report = sweep_snr(trained, images, [60.0], trials=2, seed=2)[0]
        loop = evaluate_loopback(trained, images, snr_db=60.0)
        assert report.ber == 0.0
        assert report.psnr_db == loop["psnr_db"]
        assert report.ms_ssim == loop["ms_ssim"]

    def test_deterministic_across_calls(self, trained, corpus):
        images = load_dataset(corpus, 16)
        a = sweep_snr(trained, images, [3.0], trials=2, seed=7)[0]
        b = sweep_snr(trained, images, [3.0], trials=2, seed=7)[0]
        assert a == b

    def test_threads_do_not_change_results(self, trained, corpus):
        images = load_dataset(corpus, 16)
        a = sweep_snr(trained, images, [3.0], trials=4, seed=7, threads=1)[0]
        b = sweep_snr(trained, images, [3.0], trials=4, seed=7, threads=4)[0]
        assert a == b

    def test_rayleigh_channel_runs(self, trained, corpus):
        images = load_dataset(corpus, 16)
        report = sweep_snr(trained, images, [10.0], channel_kind="rayleigh",
                           trials=2, seed=3)[0]
        assert np.isfinite(report.psnr_db)


class TestAblate:
    def test_modes_and_schema(self, tiny_cfg, tmp_path):
        from dataclasses import replace
        cfg = replace(tiny_cfg, epochs=2)
        out_dir = tmp_path / "ablate"
        results = ablate_codebook(cfg, out_dir)
        assert set(results) == {"kld-ema", "ema", "none"}
        schemas = []
        for mode in ("kld-ema", "ema", "none"):
            cols, rows = read_csv(out_dir / f"{mode}.csv")
            schemas.append(tuple(cols))
            assert rows[0][0] == mode
        assert len(set(schemas)) == 1
        cols, rows = read_csv(out_dir / "summary.csv")
        assert tuple(cols) == schemas[0]
        assert len(rows) == 3


class TestLoopbackRun:
    def test_exactness_and_frame_file(self, trained, corpus, tmp_path):
        images = load_dataset(corpus, 16)
        frame_path = tmp_path / "frame.bin"
        report = loopback_run(trained, images[0], snr_db=12.0,
                              frame_path=frame_path)
        assert report["indices_exact"]
        assert report["image_bit_exact"]
        assert report["ber"] == 0.0
        assert frame_path.exists()
        assert np.isfinite(report["psnr_db"])
