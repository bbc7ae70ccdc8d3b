"""Session fixtures: the default toy checkpoint is trained once through the
command line and cached under pytest's cache directory, keyed by the source
of every module that influences training."""

import hashlib
import json
from pathlib import Path

import pytest
import torch

import masafusion
from masafusion.cli import TRAIN_DEFAULTS, main

torch.set_num_threads(1)

_TRAINING_SOURCES = ("adapter.py", "denoiser.py", "numeric.py", "schedule.py", "text.py", "trainer.py")


def _training_key() -> str:
    pkg = Path(masafusion.__file__).parent
    h = hashlib.sha256(json.dumps(TRAIN_DEFAULTS, sort_keys=True).encode())
    for name in _TRAINING_SOURCES:
        h.update((pkg / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_checkpoint(request) -> Path:
    root = Path(request.config.cache.mkdir("masafusion-checkpoints"))
    path = root / _training_key()
    if not (path / "manifest.json").exists():
        assert main(["train", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="session")
def trained_model(trained_checkpoint):
    from masafusion.denoiser import Denoiser

    return Denoiser.load(trained_checkpoint)
