import zipfile

import numpy as np
import pytest

from swincolor import checkpoint
from swincolor import tensor as T


def _random_sections(rng):
    return {
        "generator": {
            "enc1.w": rng.normal(size=(8, 1, 4, 4)).astype(np.float32),
            "enc1.b": rng.normal(size=(8,)).astype(np.float32),
        },
        "critic": {
            "stage1.w": rng.normal(size=(4, 3, 4, 4)).astype(np.float32),
        },
    }


def _adam_state(rng, names):
    return {
        "lr": 1e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "eps": 1e-8,
        "t": 7,
        "m": {name: rng.normal(size=(3,)).astype(np.float32) for name in names},
        "v": {name: rng.random(size=(3,)).astype(np.float32) for name in names},
    }


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    sections = _random_sections(rng)
    opt = _adam_state(rng, ["enc1.w", "enc1.b"])
    noise_rng = np.random.default_rng(5)
    noise_rng.normal(size=100)
    path = tmp_path / "state.ckpt"
    checkpoint.save_checkpoint(
        path,
        step=42,
        config={"image_size": 64, "ablation": "full"},
        sections=sections,
        optimizers={"adam_g": opt},
        rng_state=noise_rng.bit_generator.state,
    )
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.step == 42
    assert loaded.config["ablation"] == "full"
    for section, params in sections.items():
        for name, arr in params.items():
            np.testing.assert_array_equal(loaded.sections[section][name], arr)
    for slot in ("m", "v"):
        for name, arr in opt[slot].items():
            np.testing.assert_array_equal(loaded.optimizers["adam_g"][slot][name], arr)
    assert loaded.optimizers["adam_g"]["t"] == 7
    assert loaded.rng_state == noise_rng.bit_generator.state

    resumed = np.random.default_rng(0)
    resumed.bit_generator.state = loaded.rng_state
    np.testing.assert_array_equal(resumed.normal(size=10), noise_rng.normal(size=10))


def test_save_is_atomic_and_reproducible(tmp_path):
    rng = np.random.default_rng(1)
    sections = _random_sections(rng)
    path = tmp_path / "state.ckpt"
    checkpoint.save_checkpoint(path, step=0, config={}, sections=sections)
    assert not (tmp_path / "state.ckpt.tmp").exists()
    first = path.read_bytes()
    checkpoint.save_checkpoint(path, step=0, config={}, sections=sections)
    assert path.read_bytes() == first  # identical state -> identical bytes


def test_manifest_only_load(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "state.ckpt"
    checkpoint.save_checkpoint(path, step=3, config={"seed": 9}, sections=_random_sections(rng))
    manifest = checkpoint.load_manifest(path)
    assert manifest["step"] == 3
    assert manifest["sections"]["generator"]["enc1.w"]["shape"] == [8, 1, 4, 4]
    assert manifest["sections"]["generator"]["enc1.w"]["dtype"] == "float32"


def test_unreadable_and_foreign_files_rejected(tmp_path):
    garbage = tmp_path / "garbage.ckpt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(checkpoint.CheckpointError, match="unreadable"):
        checkpoint.load_manifest(garbage)

    foreign = tmp_path / "foreign.zip"
    with zipfile.ZipFile(foreign, "w") as archive:
        archive.writestr("manifest.json", '{"format": "other", "version": 1}')
    with pytest.raises(checkpoint.CheckpointError, match="not a"):
        checkpoint.load_manifest(foreign)

    future = tmp_path / "future.zip"
    with zipfile.ZipFile(future, "w") as archive:
        archive.writestr(
            "manifest.json", '{"format": "swincolor-checkpoint", "version": 99}'
        )
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.load_manifest(future)


def test_restore_params_checks_names_and_shapes(tmp_path):
    live = {
        "enc1.w": T.Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True),
        "enc1.b": T.Tensor(np.zeros((2,), dtype=np.float32), requires_grad=True),
    }
    arrays = {
        "enc1.w": np.arange(4, dtype=np.float32).reshape(2, 2),
        "enc1.b": np.array([5.0, 6.0], dtype=np.float32),
    }
    checkpoint.restore_params(live, arrays, "generator")
    np.testing.assert_array_equal(live["enc1.w"].data, arrays["enc1.w"])

    with pytest.raises(checkpoint.CheckpointError, match="missing.*enc1.b"):
        checkpoint.restore_params(live, {"enc1.w": arrays["enc1.w"]}, "generator")
    with pytest.raises(checkpoint.CheckpointError, match="unknown.*extra"):
        checkpoint.restore_params(live, dict(arrays, extra=arrays["enc1.b"]), "generator")
    with pytest.raises(checkpoint.CheckpointError, match="shape"):
        checkpoint.restore_params(
            live, dict(arrays, **{"enc1.w": np.zeros((3, 3), dtype=np.float32)}), "generator"
        )
