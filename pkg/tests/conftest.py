import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tipsynth.corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from tipsynth.keyboard import build_standard_keyboard

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def geom():
    return build_standard_keyboard()


@pytest.fixture(scope="session")
def small_corpus(geom):
    return generate_synthetic_corpus(SyntheticCorpusSpec(n_pieces=6, length_range=(8.0, 10.0), seed=3), geom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_MODELS = dict(refine_d_model=8, refine_depth=1, refine_heads=2, wrist_channels=8, wrist_blocks=1,
                   wrist_kernel=3, smoother_channels=4, smoother_blocks=1, stgcn_channels=(8, 16),
                   stgcn_blocks=1, pose_refine_channels=8)
TINY_TRAINING = dict(steps_refine=3, steps_smoother=3, steps_wrist=3, steps_pose=3, steps_pose_refine=3,
                     batch_size=2)


@pytest.fixture(scope="session")
def tiny_cfg():
    from tipsynth.pipeline import PipelineConfig
    return PipelineConfig(models=dict(TINY_MODELS), training=dict(TINY_TRAINING))


@pytest.fixture(scope="session")
def tiny_bundle(small_corpus, tiny_cfg, geom):
    from tipsynth.pipeline import train_all
    return train_all(small_corpus.split("train"), tiny_cfg, geom)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
