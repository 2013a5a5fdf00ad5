import hashlib
import json
import subprocess
import sys

import numpy as np
import torch
import yaml

from guidedpurify import cli
from guidedpurify.config import bundled_path, load_config
from guidedpurify.toy import ToyClassifier, load_module, make_toy_dataset, save_module

TOY = "pkg://toy.yaml"


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stub_config(tmp_path, **extra):
    doc = {
        "schedule": {"T": 10, "beta_start": 0.001, "beta_end": 0.2},
        "codec": {"type": "identity"},
        "caption": {"provider": "constant", "encoder": "hash", "max_tokens": 16},
        "diffusion": {"t_frac": 0.0},
        "denoiser": {"type": "stub"},
        **extra,
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def _image_folder(path, n=4):
    from PIL import Image

    path.mkdir()
    rng = np.random.default_rng(0)
    rows = ["filename,label"]
    for i in range(n):
        Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(path / f"im{i}.png")
        rows.append(f"im{i}.png,{i % 2}")
    (path / "labels.csv").write_text("\n".join(rows) + "\n")
    return path


def _check_output_dir(out, command):
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == command
    for name, digest in manifest["files"].items():
        assert sha256(out / name) == digest
    assert "config.yaml" in manifest["files"]
    load_config(out / "config.yaml")  # the resolved config re-validates
    assert not [p for p in out.parent.iterdir() if p.name.startswith(f".{out.name}.")]
    return manifest


def test_purify_t0_identity_is_byte_identical(tmp_path):
    src = _image_folder(tmp_path / "in")
    out = tmp_path / "out"
    assert cli.main(["purify", "-c", _stub_config(tmp_path), "-i", str(src), "-o", str(out)]) == 0
    from PIL import Image

    for i in range(4):
        a = np.asarray(Image.open(src / f"im{i}.png"))
        b = np.asarray(Image.open(out / f"im{i}.png"))
        assert a.dtype == b.dtype and np.array_equal(a, b)
    loaded = np.load(out / "images.npy")
    assert np.array_equal(loaded[0], np.asarray(Image.open(src / "im0.png")).transpose(2, 0, 1) / np.float32(255))
    _check_output_dir(out, "purify")


def test_purify_npy_input_round_trip(tmp_path):
    images = np.random.default_rng(1).random((3, 1, 6, 6)).astype(np.float32)
    np.save(tmp_path / "x.npy", images)
    out = tmp_path / "out"
    assert cli.main(["purify", "-c", _stub_config(tmp_path), "-i", str(tmp_path / "x.npy"), "-o", str(out)]) == 0
    assert np.array_equal(np.load(out / "images.npy"), images)
    assert not (out / "labels.npy").exists()


def test_purify_missing_input_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["purify", "-c", _stub_config(tmp_path), "-i", str(tmp_path / "nope.npz"), "-o", str(out)])
    assert code != 0
    assert not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["run.yaml"]
    assert "not found" in capsys.readouterr().err


def test_purify_toy_stack_matches_golden_checksums(tmp_path):
    golden = json.loads(bundled_path("golden.json").read_text())
    assert sha256(bundled_path("sample_batch.npz")) == golden["sample_batch.npz"]
    assert sha256(bundled_path("toy_denoiser.pt")) == golden["toy_denoiser.pt"]
    out = tmp_path / "out"
    assert cli.main(["purify", "-c", TOY, "-i", "pkg://sample_batch.npz", "-o", str(out)]) == 0
    assert sha256(out / "images.npy") == golden["purified/images.npy"]
    assert sha256(out / "labels.npy") == golden["purified/labels.npy"]


def test_existing_output_needs_force(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    np.save(tmp_path / "x.npy", np.zeros((1, 1, 2, 2), np.float32))
    args = ["purify", "-c", _stub_config(tmp_path), "-i", str(tmp_path / "x.npy"), "-o", str(out)]
    assert cli.main(args) == 2
    assert (out / "keep.txt").exists()
    assert cli.main(args + ["--force"]) == 0
    assert not (out / "keep.txt").exists()


def test_evaluate_without_attack_is_natural_only(tmp_path, capsys):
    out = tmp_path / "ev"
    code = cli.main(["evaluate", "-c", TOY, "--set", "attack=[]", "--set", "harness.subset_size=32", "-o", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["robust_accuracy"] == {} and report["n_evaluated"] == 32
    assert report["config"]["attacks"] == []
    assert "Natural" in capsys.readouterr().out
    _check_output_dir(out, "evaluate")


def test_invalid_epsilon_fails_before_compute(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("compute started")

    monkeypatch.setattr(cli, "build_purifier_config", boom)
    monkeypatch.setattr(cli, "build_classifier", boom)
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "-c", TOY, "--set", "attack.epsilon=8/2x55", "-o", str(out)]) == 2
    assert not out.exists()


def test_unknown_key_exit_code(tmp_path):
    assert cli.main(["evaluate", "-c", TOY, "--set", "harness.subsetsize=3"]) == 2


def test_attack_with_zero_epsilon_returns_clean_set(tmp_path):
    out = tmp_path / "atk"
    code = cli.main(["attack", "-c", TOY, "-i", "pkg://sample_batch.npz", "-o", str(out),
                     "--set", "attack=[{mode: bpda, epsilon: 0, steps: 3}, {mode: preprocessor_blind, epsilon: 0}]"])
    assert code == 0
    clean = np.load(bundled_path("sample_batch.npz"))
    for name in ("bpda", "preprocessor_blind"):
        assert np.array_equal(np.load(out / name / "images.npy"), clean["images"])
        assert np.array_equal(np.load(out / name / "labels.npy"), clean["labels"])
    manifest = _check_output_dir(out, "attack")
    assert manifest["attacks"]["bpda"]["epsilon"] == 0.0


def test_attack_needs_an_attack(tmp_path):
    assert cli.main(["attack", "-c", TOY, "--set", "attack=[]", "-o", str(tmp_path / "a")]) == 2


def test_attack_contained_in_ball(tmp_path):
    out = tmp_path / "atk"
    assert cli.main(["attack", "-c", TOY, "-i", "pkg://sample_batch.npz", "-o", str(out),
                     "--set", "attack=[{mode: preprocessor_blind, epsilon: 8/255, steps: 5}]",
                     "--set", "denoiser.type=none"]) == 0
    clean = np.load(bundled_path("sample_batch.npz"))["images"]
    adv = np.load(out / "preprocessor_blind" / "images.npy")
    assert np.abs(adv - clean).max() <= 8 / 255 + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1


def _toy_classifier_ckpt(path):
    torch.manual_seed(0)
    save_module(ToyClassifier(), path)
    return str(path)


def test_build_dataset_then_finetune(tmp_path):
    ds = tmp_path / "ds"
    src = tmp_path / "train.npz"
    data = make_toy_dataset(64, seed=0)
    np.savez(src, images=data.data.numpy(), labels=data.labels.numpy())
    assert cli.main(["build-dataset", "-c", TOY, "-i", str(src), "-o", str(ds)]) == 0
    _check_output_dir(ds, "build-dataset")
    ckpt = _toy_classifier_ckpt(tmp_path / "clf.pt")
    out = tmp_path / "ft"
    assert cli.main(["finetune", "-c", TOY, "-d", str(ds), "--classifier", ckpt, "-o", str(out),
                     "--set", "finetune.epochs=2", "--set", "finetune.batch_size=16"]) == 0
    manifest = _check_output_dir(out, "finetune")
    assert len(manifest["history"]) == 2
    assert manifest["sample_count"] > 0
    assert manifest["state_checksum"] != manifest["input_state_checksum"]


def test_finetune_zero_epochs_keeps_checkpoint(tmp_path):
    ds = tmp_path / "ds"
    assert cli.main(["build-dataset", "-c", TOY, "-i", "pkg://sample_batch.npz", "-o", str(ds)]) == 0
    ckpt = _toy_classifier_ckpt(tmp_path / "clf.pt")
    out = tmp_path / "ft"
    assert cli.main(["finetune", "-c", TOY, "-d", str(ds), "--classifier", ckpt, "-o", str(out),
                     "--set", "finetune.epochs=0"]) == 0
    before, after = load_module(ckpt), load_module(out / "classifier.pt")
    for (ka, va), (kb, vb) in zip(before.state_dict().items(), after.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert sha256(out / "classifier.pt") == sha256(tmp_path / "clf.pt")


def test_finetune_missing_dataset(tmp_path):
    ckpt = _toy_classifier_ckpt(tmp_path / "clf.pt")
    out = tmp_path / "ft"
    assert cli.main(["finetune", "-c", TOY, "-d", str(tmp_path / "nope"), "--classifier", ckpt, "-o", str(out)]) == 1
    assert not out.exists()


def test_train_toy_is_reproducible(tmp_path):
    small = ["--set", "toy.n_train=512", "--set", "toy.n_test=64", "--set", "toy.denoiser_epochs=2",
             "--set", "toy.classifier_epochs=2", "--set", "toy.hidden=32", "--set", "toy.finetune_samples=128",
             "--set", "finetune.epochs=1"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train-toy", "-c", TOY, "-o", str(a), *small]) == 0
    assert cli.main(["train-toy", "-c", TOY, "-o", str(b), *small]) == 0
    ma, mb = _check_output_dir(a, "train-toy"), _check_output_dir(b, "train-toy")
    assert ma["checksums"] == mb["checksums"]
    for name in ("denoiser.pt", "classifier_base.pt", "classifier.pt"):
        assert sha256(a / name) == sha256(b / name)
    eval_cfg = load_config(a / "eval.yaml")
    assert eval_cfg.denoiser.checkpoint == str((a / "denoiser.pt").resolve())
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "-c", str(a / "eval.yaml"), "--set", "attack=[]", "--set", "harness.subset_size=16",
                     "-o", str(out)]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "guidedpurify.cli", "evaluate", "-c", TOY,
                           "--set", "attack.epsilon=bad"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "epsilon" in proc.stderr


def test_home_env_resolves_checkpoints(tmp_path, monkeypatch):
    ckpt_dir = tmp_path / "home"
    ckpt_dir.mkdir()
    _toy_classifier_ckpt(ckpt_dir / "clf.pt")
    monkeypatch.setenv("GUIDEDPURIFY_HOME", str(ckpt_dir))
    code = cli.main(["evaluate", "-c", TOY, "--set", "attack=[]", "--set", "classifier.checkpoint=clf.pt",
                     "--set", "harness.subset_size=8", "--set", "denoiser.type=none"])
    assert code == 0
