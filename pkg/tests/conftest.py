import numpy as np
import pytest

from hrlcap.agent import HRLCaptioner
from hrlcap.config import ModelConfig, TrainConfig
from hrlcap.data import CaptionDataset, SynthTaskSpec, Vocabulary, gen_synth, load_manifest


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(feat_dim=6, proj_dim=6, enc_low=5, enc_high=6, worker_hidden=10, word_emb=6,
                manager_hidden=7, goal_dim=4, critic_hidden=6, critic_emb=5, dropout=0.0, max_len=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset on disk (6 activities, 80 / 30 / 30 videos)."""
    root = tmp_path_factory.mktemp("synth")
    spec = SynthTaskSpec(n_activities=6, feat_dim=6, segments=(2, 3),
                         sizes={"train": 80, "val": 30, "test": 30}, seed=3)
    gen_synth(spec, root)
    return root


@pytest.fixture(scope="session")
def small_data(small_synth):
    vocab = Vocabulary.load(small_synth / "vocab.json")
    load = lambda s: CaptionDataset(load_manifest(small_synth / f"{s}.jsonl"), vocab, max_len=12)
    return vocab, load("train"), load("val"), load("test")


@pytest.fixture
def tiny_model(small_data):
    vocab = small_data[0]
    return HRLCaptioner(tiny_model_config(), len(vocab), seed=0)


@pytest.fixture
def train_cfg():
    return TrainConfig(batch=16, xe_epochs=1, rl_epochs=2, critic_epochs=2, eps=1e-4, val_batch=50)


@pytest.fixture(scope="session")
def trained_tiny(small_data):
    """A tiny model whose critic and XE decoder have been fit to the small dataset."""
    from hrlcap.training import Trainer, train_critic

    vocab, train, val, _ = small_data
    model = HRLCaptioner(tiny_model_config(), len(vocab), seed=1)
    cfg = TrainConfig(batch=16, xe_epochs=25, rl_epochs=0, critic_epochs=15, eps=1e-4,
                      ss_max=0.0, val_batch=50)
    train_critic(model, train, cfg, val)
    trainer = Trainer(model, train, val, cfg)
    trainer.fit()
    model.params.load(trainer.best_xe[1])
    return model


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
