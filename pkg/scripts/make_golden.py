"""Regenerate the bundled toy checkpoints, sample batch and golden purify checksum.

Run from the repository root: ``python3 scripts/make_golden.py``. The files land
in ``src/guidedpurify/data``.
"""

import hashlib
import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from guidedpurify.cli import main
from guidedpurify.toy import make_toy_dataset

DATA = Path(__file__).resolve().parents[1] / "src" / "guidedpurify" / "data"
SAMPLE_SIZE = 16


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run():
    work = Path(tempfile.mkdtemp())
    try:
        assert main(["train-toy", "--config", str(DATA / "toy.yaml"), "--output", str(work / "toy")]) == 0
        for name in ("denoiser", "classifier"):
            shutil.copyfile(work / "toy" / f"{name}.pt", DATA / f"toy_{name}.pt")

        test = make_toy_dataset(SAMPLE_SIZE, seed=1234)
        np.savez(DATA / "sample_batch.npz", images=test.data.numpy(), labels=test.labels.numpy(),
                 label_names=np.array(["horizontal", "vertical"]))
        out = work / "purified"
        assert main(["purify", "--config", str(DATA / "toy.yaml"), "--input", str(DATA / "sample_batch.npz"),
                     "--output", str(out)]) == 0
        golden = {
            "sample_batch.npz": sha256(DATA / "sample_batch.npz"),
            "toy_denoiser.pt": sha256(DATA / "toy_denoiser.pt"),
            "purified/images.npy": sha256(out / "images.npy"),
            "purified/labels.npy": sha256(out / "labels.npy"),
        }
        (DATA / "golden.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
        print(json.dumps(golden, indent=2))
    finally:
        shutil.rmtree(work, ignore_errors=True)


if __name__ == "__main__":
    run()
