import numpy as np
import pytest
import torch

from timealign.config import ExperimentConfig, GenConfig, ModelConfig
from timealign.synth import generate
from timealign.timeline import FeatureSequence, VideoMeta


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(in_channels=6, num_classes=3, dim=8, num_levels=3, enc_layers=1, dec_layers=2,
                heads=2, points=2, ffn_dim=16, t_sector=16, select_k=3, fixed_n=6)
    base.update(kw)
    return ModelConfig(**base)


def random_video(num_features=40, channels=6, seed=0, fps=25.0, stride=8, video_id="v0", dtype=np.float32):
    rng = np.random.default_rng(seed)
    meta = VideoMeta(video_id, fps, stride, num_features, channels, num_features * stride / fps)
    return FeatureSequence(meta, rng.standard_normal((num_features, channels)).astype(dtype))


def small_gen(**kw) -> GenConfig:
    base = dict(num_videos=8, val_videos=2, min_sec=20, max_sec=90, channels=8, class_signature_dim=8,
                num_classes=3)
    base.update(kw)
    return GenConfig(**base)


@pytest.fixture
def small_dataset():
    return generate(small_gen())


@pytest.fixture
def small_experiment():
    cfg = ExperimentConfig()
    cfg.gen = small_gen()
    cfg.model = tiny_model_config(in_channels=8)
    cfg.train.epochs = 2
    cfg.train.learning_rate = 1e-3
    return cfg


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
