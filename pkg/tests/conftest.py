"""Test configuration and shared fixtures."""

import json
import subprocess
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import pytest
import torch

from app.config import ExperimentConfig
from app.services.core import Episode, Mask, RngStream, SupportSample
from app.services.episodes import EpisodeSampler, build_sampler
from app.services.model import AMFormer
from app.storage.local import LocalStorage

# =============================================================================
# TEST OUTPUT MANAGER
# =============================================================================


class TestOutputManager:
    """Manages saving test outputs to JSON files for human review.

    Creates timestamped directories for each test run and saves study tables,
    metric histories and metadata for later analysis.
    """

    _instance = None
    _run_dir = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self._initialized = True
        self._run_dir = None
        self._outputs_base = Path(__file__).parent / "outputs"

    def _ensure_run_dir(self) -> Path:
        """Create and return the timestamped run directory."""
        if self._run_dir is None:
            timestamp = datetime.now(timezone.utc).strftime("%Y-%m-%d_%H-%M-%S")
            self._run_dir = self._outputs_base / timestamp
            self._run_dir.mkdir(parents=True, exist_ok=True)
            self._write_run_metadata()
        return self._run_dir

    def _write_run_metadata(self):
        metadata = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "git_commit": self._get_git_commit(),
            "torch_version": torch.__version__,
        }
        with open(self._run_dir / "run_metadata.json", "w") as f:
            json.dump(metadata, f, indent=2)

    def _get_git_commit(self) -> str:
        try:
            result = subprocess.run(
                ["git", "rev-parse", "HEAD"],
                capture_output=True,
                text=True,
                cwd=Path(__file__).parent.parent,
            )
            return result.stdout.strip() if result.returncode == 0 else "unknown"
        except Exception:
            return "unknown"

    def save_output(self, test_name: str, category: str, data: dict[str, Any]) -> Path:
        """Save test output to ``<run>/<category>/<test_name>.json``."""
        category_dir = self._ensure_run_dir() / category
        category_dir.mkdir(parents=True, exist_ok=True)
        output_data = {
            "test_name": test_name,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            **data,
        }
        output_path = category_dir / f"{test_name}.json"
        with open(output_path, "w") as f:
            json.dump(output_data, f, indent=2, ensure_ascii=False, default=str)
        return output_path


_output_manager = TestOutputManager()


@pytest.fixture
def save_output(request) -> Callable[[dict[str, Any]], Path]:
    """Fixture providing a function to save test outputs for human review.

    Usage:
        def test_something(save_output):
            save_output({"table": table.to_dict(), "notes": "Review: ..."})
    """
    category = Path(request.fspath).stem.replace("test_", "")

    def _save(data: dict[str, Any]) -> Path:
        return _output_manager.save_output(
            test_name=request.node.name,
            category=category,
            data=data,
        )

    return _save


# =============================================================================
# CONFIG FIXTURES
# =============================================================================


def tiny_config(**overrides) -> ExperimentConfig:
    """Smallest valid configuration: 32x32 scenes, 4x4 features, 3 scales."""
    values = {
        "scene": {"image_size": 32},
        "encoder": {"stage_channels": [8, 16, 16, 16], "out_channels": 16},
        "detail": {"num_proxies": 4, "attn_layers": 1},
        "train": {
            "epochs": 1,
            "iters_per_epoch": 2,
            "batch_size": 2,
            "val_episodes": 2,
            "seed": 3,
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(values.get(key), dict):
            values[key] = {**values[key], **value}
        else:
            values[key] = value
    return ExperimentConfig(**values)


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def storage(tmp_path) -> LocalStorage:
    return LocalStorage(base_path=str(tmp_path / "store"))


# =============================================================================
# EPISODE FIXTURES
# =============================================================================


@pytest.fixture
def sampler(config) -> EpisodeSampler:
    return build_sampler(config, augment=False)


@pytest.fixture
def episode(sampler, config) -> Episode:
    return sampler.sample_episode(1, "test", RngStream(11))


@pytest.fixture
def model(config) -> AMFormer:
    torch.manual_seed(0)
    return AMFormer(config)


def square_mask(size: int, top: int, left: int, side: int) -> Mask:
    data = torch.zeros(size, size)
    data[top : top + side, left : left + side] = 1.0
    return Mask.binary(data)


def constant_episode(size: int = 32, k_shot: int = 1, seed: int = 0) -> Episode:
    """Episode of plain colour squares, identical across supports."""
    image = torch.full((size, size, 3), 0.2)
    image[8:24, 8:24] = torch.tensor([0.9, 0.3, 0.1])
    mask = square_mask(size, 8, 8, 16)
    supports = tuple(
        SupportSample(image=image.clone(), label=mask, scene_id=f"sup{k}") for k in range(k_shot)
    )
    return Episode(
        supports=supports,
        query_image=image.clone(),
        query_mask=mask,
        class_id=1,
        query_id="query",
        seed=seed,
    )


# =============================================================================
# PYTEST MARKERS
# =============================================================================


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers",
        "slow: acceptance-scale runs (training to convergence); deselected by default",
    )
