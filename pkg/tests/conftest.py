import sys

import numpy as np
import pytest
import torch

from waterlog.config import AdaptationConfig, AugmentationConfig, BackboneConfig, RunConfig, config_from_dict
from waterlog.data import generate_toy_dataset


def tiny_backbone(**kw) -> BackboneConfig:
    base = dict(stage_depths=(1, 1, 1, 1), stage_channels=(4, 6, 8, 10), neck_channels=4, patch_stride=2,
                attention_heads=1, input_size=(16, 16), mlp_ratio=1.0)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_adaptation(**kw) -> AdaptationConfig:
    base = dict(lora_rank=2, adapter_hidden=2)
    base.update(kw)
    return AdaptationConfig(**base)


def small_run_config(root, **sections) -> RunConfig:
    """Fast config on a 32x32 toy dataset."""
    d = {
        "backbone": {"stage_depths": [1, 1, 1, 1], "stage_channels": [8, 12, 16, 20], "neck_channels": 8,
                     "patch_stride": 4, "attention_heads": 1, "input_size": [32, 32]},
        "adaptation": {"lora_rank": 2, "adapter_hidden": 4},
        "augment": {"crop_size": [32, 32]},
        "s2match": {"epochs": 2, "lr0": 1e-3},
        "data": {"root": str(root)},
        "output": {"root": str(root) + "_runs", "run_name": "test"},
    }
    for k, v in sections.items():
        d.setdefault(k, {}).update(v)
    return config_from_dict(d)


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy") / "data"
    generate_toy_dataset(4, 6, (32, 32), seed=3, out_path=root, n_val=3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not getattr(module, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    seen = set()
    for line in module.RESULTS:
        terminalreporter.write_line(line)
        seen.add(int(line.split("criterion", 1)[1].split(":", 1)[0]))
    for report in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", []):
        name = report.nodeid.rsplit("::", 1)[-1]
        if name.startswith("test_criterion_") and int(name.split("_")[2]) not in seen:
            terminalreporter.write_line(f"[FAIL] criterion {int(name.split('_')[2]):>2}: raised before completing")
