import numpy as np
import pytest
import torch

from ookd.config import RunConfig
from ookd.model import ModelConfig, VISModel
from ookd.synthetic_video import ClipSpec, generate_dataset


@pytest.fixture(scope="session")
def small_spec():
    return ClipSpec(num_frames=6, height=32, width=32, radius_range=(4.0, 8.0), max_translation=1.5)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate_dataset(small_spec, 12, seed=3)


@pytest.fixture
def small_model_config():
    return ModelConfig(num_queries=8, hidden_dim=32, num_classes=8, image_size=(32, 32),
                       backbone_channels=(16, 16, 32), embed_hidden=32, ffn_dim=64)


@pytest.fixture
def small_model(small_model_config):
    torch.manual_seed(0)
    return VISModel(small_model_config).eval()


def small_run_config(steps=20) -> RunConfig:
    cfg = RunConfig()
    cfg.model = ModelConfig(num_queries=8, hidden_dim=32, num_classes=8, image_size=(32, 32),
                            backbone_channels=(16, 16, 32), embed_hidden=32, ffn_dim=64)
    cfg.optim.steps = steps
    cfg.optim.lr = 1e-3
    cfg.optim.clips_per_batch = 4
    cfg.teacher.steps = steps
    cfg.teacher.clips_per_batch = 2
    cfg.teacher.lr = 1e-3
    return cfg


@pytest.fixture(scope="session")
def smoke_trained(small_dataset):
    """A briefly trained baseline + teacher on the small dataset, shared by the 'trained model' checks."""
    from ookd.train import train_baseline, train_teacher

    cfg = small_run_config(steps=250)
    state = train_baseline(cfg, small_dataset)
    import copy

    teacher, history = train_teacher(cfg, small_dataset, copy.deepcopy(state.model))
    return cfg, state, teacher, history


_ACCEPTANCE: list[tuple[str, bool, str]] = []


def record_acceptance(num, ok: bool, detail: str) -> None:
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    _ACCEPTANCE.append((str(num), ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
