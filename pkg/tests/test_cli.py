"""End-to-end drives of the command-line interface via cli.main()."""

import json

import numpy as np
import pytest

from swincolor import checkpoint, cli, colorspace

TINY_FLAGS = [
    "--image_size", "32", "--base_width", "4", "--heads", "4",
    "--batch_size", "2", "--steps", "1", "--noise_std", "0.5",
]


def _write_corpus(root, count=6, size=40):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(77)
    for i in range(count):
        px = np.zeros((size, size, 3), dtype=np.uint8)
        left = rng.integers(60, 220, size=3)
        left[0] = 230
        right = rng.integers(60, 220, size=3)
        right[2] = 230
        px[:, : size // 2] = left
        px[:, size // 2:] = right
        ramp = np.linspace(0, 60, size, dtype=np.uint8)
        px[:, :, 1] = ramp[None, :] + px[:, :, 1] // 2
        colorspace.write_png(colorspace.RgbImage.from_array(px), root / f"img{i}.png")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    _write_corpus(root)
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("cli-run")
    rc = cli.main(["train", str(corpus), str(out), *TINY_FLAGS])
    assert rc == 0
    return out, out / "checkpoint_final.ckpt"


def test_train_smoke_writes_artifacts(trained):
    out, final = trained
    assert final.exists()
    assert (out / "losses.csv").exists()
    header = (out / "losses.csv").read_text().splitlines()[0]
    assert header == "step,Lg,Lp,L1,Lc,total,d_loss"


def test_train_missing_data_dir_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    rc = cli.main(["train", str(missing), str(tmp_path / "out"), *TINY_FLAGS])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_train_unknown_flag_is_usage_error(corpus, tmp_path, capsys):
    rc = cli.main(["train", str(corpus), str(tmp_path / "out"), "--momentum", "0.9"])
    assert rc == 2
    capsys.readouterr()


def test_train_bad_value_names_the_key(corpus, tmp_path, capsys):
    rc = cli.main(["train", str(corpus), str(tmp_path / "out"),
                   *TINY_FLAGS, "--image_size", "60"])
    assert rc == 2
    assert "image_size" in capsys.readouterr().err


def test_train_flags_override_config_file(corpus, tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "# tiny smoke settings\n"
        "image_size = 32\nbase_width = 4\nheads = 4\nbatch_size = 2\nsteps = 3\n"
    )
    out = tmp_path / "out"
    rc = cli.main(["train", str(corpus), str(out), "--config", str(cfg_file),
                   "--steps", "1"])
    assert rc == 0
    manifest = checkpoint.load_manifest(out / "checkpoint_final.ckpt")
    assert manifest["step"] == 1
    assert manifest["config"]["steps"] == 1
    assert manifest["config"]["image_size"] == 32


def test_train_ablation_override_lands_in_manifest(corpus, tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["train", str(corpus), str(out), *TINY_FLAGS, "--ablation", "unet"])
    assert rc == 0
    manifest = checkpoint.load_manifest(out / "checkpoint_final.ckpt")
    assert manifest["config"]["ablation"] == "unet"
    names = set(manifest["sections"]["generator"])
    assert not any("color_enc" in n or "swin" in n or "fuse" in n for n in names)


def test_colorize_matches_source_dimensions(trained, corpus, tmp_path):
    _, final = trained
    out_png = tmp_path / "colorized.png"
    rc = cli.main(["colorize", str(final), str(corpus / "img0.png"), str(out_png)])
    assert rc == 0
    source = colorspace.read_png(corpus / "img0.png")
    result = colorspace.read_png(out_png)
    assert (result.width, result.height) == (source.width, source.height)


def test_colorize_seed_determines_bytes(trained, corpus, tmp_path):
    _, final = trained
    paths = [tmp_path / name for name in ("a1.png", "a2.png", "b.png")]
    for path, seed in zip(paths, ("5", "5", "6")):
        rc = cli.main(["colorize", str(final), str(corpus / "img1.png"),
                       str(path), "--seed", seed])
        assert rc == 0
    first, again, other = (p.read_bytes() for p in paths)
    assert first == again
    assert first != other


def test_colorize_missing_checkpoint_is_runtime_error(corpus, tmp_path, capsys):
    rc = cli.main(["colorize", str(tmp_path / "ghost.ckpt"),
                   str(corpus / "img0.png"), str(tmp_path / "out.png")])
    assert rc == 1
    assert capsys.readouterr().err
    assert not (tmp_path / "out.png").exists()


def test_evaluate_writes_csv_and_summary(trained, corpus, tmp_path, capsys):
    _, final = trained
    report_dir = tmp_path / "reports"
    rc = cli.main(["evaluate", str(final), str(corpus), "--report-dir", str(report_dir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "psnr_db" in out and "delta_colorfulness" in out

    summary = json.loads((report_dir / "metrics.json").read_text())
    assert sorted(summary) == [
        "colorfulness_gt", "colorfulness_pred", "delta_colorfulness", "psnr_db", "ssim",
    ]
    first_csv = (report_dir / "metrics.csv").read_bytes()

    rc = cli.main(["evaluate", str(final), str(corpus), "--report-dir", str(report_dir)])
    assert rc == 0
    capsys.readouterr()
    assert (report_dir / "metrics.csv").read_bytes() == first_csv


def test_evaluate_empty_data_dir_is_usage_error(trained, tmp_path, capsys):
    _, final = trained
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = cli.main(["evaluate", str(final), str(empty)])
    assert rc == 2
    assert capsys.readouterr().err


def test_selftest_passes_and_lists_suites(capsys):
    rc = cli.main(["selftest"])
    out = capsys.readouterr().out
    assert rc == 0
    passed = [line for line in out.splitlines() if line.startswith("PASS ")]
    assert len(passed) >= 6


def test_selftest_fault_injection_names_gradient_check(capsys):
    rc = cli.main(["selftest", "--inject-fault"])
    out = capsys.readouterr().out
    assert rc == 1
    assert "FAIL gradients" in out
    assert "conv2d" in out


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    capsys.readouterr()
