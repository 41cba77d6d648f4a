import os

import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CARL_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"
