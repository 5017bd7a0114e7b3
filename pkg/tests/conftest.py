import numpy as np
import pytest

from cdspix import training as tr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Eight 64x64 synthetic image/label pairs shared across test modules."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = tr.make_synthetic_dataset(8, 64, seed=7, out_dir=str(root))
    return manifest


@pytest.fixture(scope="session")
def smoke_checkpoint(tmp_path_factory, tiny_corpus):
    """A 10-iteration desk-preset training run (checkpoint + loss CSV)."""
    out = tmp_path_factory.mktemp("smokerun")
    cfg = tr.apply_preset(tr.TrainConfig(out_dir=str(out), seed=5), "desk")
    cfg = tr.TrainConfig(**{**cfg.__dict__, "iters": 10, "checkpoint_every": 1000})
    ckpt, csv = tr.train_loop(tiny_corpus, cfg)
    return ckpt, csv
