import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brushpaint.config import ModelConfig, RunConfig
from brushpaint.tensor import Rng

settings.register_profile(
    "repo", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def tiny_model_cfg():
    # small enough for finite differences through the whole network
    return ModelConfig(widths=[4, 8, 8], heads=2, text_dim=8, temb_dim=8, sin_dim=8, style_widths=[2, 2, 2, 2, 2], max_kv_tokens=16)


@pytest.fixture
def tiny_run_cfg(tmp_path):
    return RunConfig().with_overrides(
        {
            "corpus.size": 12,
            "corpus.eval_size": 3,
            "schedule.T": 10,
            "model.widths": [4, 8, 8],
            "model.text_dim": 8,
            "model.temb_dim": 8,
            "model.sin_dim": 8,
            "model.style_widths": [2, 2, 2, 2, 2],
            "optim.batch_size": 2,
            "optim.pretrain_steps": 3,
            "optim.train_steps": 3,
            "optim.audit_every": 1,
            "optim.checkpoint_every": 2,
            "io.workdir": str(tmp_path),
        }
    )


def close(a, b, tol=1e-12):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) <= tol


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.VERDICTS):
            terminalreporter.write_line(mod.VERDICTS[n])
