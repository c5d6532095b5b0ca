"""Episodic sampling and episode manifests.

Each episode is drawn from its own seed, derived from the caller's stream, so
``episode_from_seed`` can rebuild any episode listed in a manifest.
"""

from collections.abc import Iterable
from enum import Enum

import numpy as np
import torch
from tenacity import RetryError

from app.config import ExperimentConfig, SyntheticSceneConfig
from app.constants import MAX_SAMPLE_ATTEMPTS
from app.errors import EmptyMaskError, SamplerError
from app.logging_config import get_logger
from app.retry import retry_empty_mask
from app.services.core import Episode, Mask, RngStream, SupportSample
from app.services.splits import SplitSpec, build_split
from app.services.synthetic import (
    FolderSceneSource,
    Scene,
    SceneSource,
    SyntheticSceneSource,
    rescale_scene,
)
from app.storage.base import StorageBackend
from app.utils.records import format_record, read_records

logger = get_logger("services.episodes")

MANIFEST_LIST_KEYS = ("support_ids",)


class Phase(str, Enum):
    TRAIN = "train"
    TEST = "test"


class EpisodeSampler:
    """Draws episodes of one split from a scene source.

    Args:
        split: Class partition; the phase picks which side classes come from
        source: Scene source (synthetic or folder-backed)
        hflip: Randomly mirror training-phase scenes
        scale_range: Random zoom range for training-phase scenes; None keeps scale
    """

    def __init__(
        self,
        split: SplitSpec,
        source: SceneSource,
        hflip: bool = False,
        scale_range: tuple[float, float] | None = None,
    ):
        self.split = split
        self.source = source
        self.hflip = hflip
        if scale_range is not None and tuple(scale_range) == (1.0, 1.0):
            scale_range = None
        self.scale_range = scale_range

    def sample_episode(
        self,
        k_shot: int,
        phase: Phase | str,
        rng: RngStream,
        episode_id: int = 0,
    ) -> Episode:
        """Draw one episode using a fresh seed taken from ``rng``.

        Raises:
            ValueError: If ``k_shot`` < 1 or the phase has no classes
            SamplerError: If a non-empty scene could not be drawn
        """
        return self.episode_from_seed(rng.derive_seed(), k_shot, phase, episode_id)

    def episode_from_seed(
        self,
        seed: int,
        k_shot: int,
        phase: Phase | str,
        episode_id: int = 0,
    ) -> Episode:
        if k_shot < 1:
            raise ValueError(f"k_shot must be >= 1, got {k_shot}")
        phase = Phase(phase)
        classes = sorted(self.split.classes_for(phase.value))
        if not classes:
            raise ValueError(f"split {self.split.name} has no {phase.value} classes")

        rng = RngStream(seed)
        class_id = classes[int(rng.integers(len(classes)))]
        augment = phase is Phase.TRAIN

        scenes: list[Scene] = []
        seen: set[str] = set()
        duplicates = 0
        while len(scenes) < k_shot + 1:
            scene = self._draw_scene(class_id, rng, augment)
            # Supports and query must be distinct scene instances.
            if scene.scene_id in seen:
                duplicates += 1
                if duplicates >= MAX_SAMPLE_ATTEMPTS:
                    raise SamplerError(f"too few distinct scenes of class {class_id}")
                continue
            seen.add(scene.scene_id)
            scenes.append(scene)

        *support_scenes, query = scenes
        supports = tuple(
            SupportSample(
                image=torch.from_numpy(s.image),
                label=Mask.binary(s.mask.astype(np.float32)),
                scene_id=s.scene_id,
            )
            for s in support_scenes
        )
        return Episode(
            supports=supports,
            query_image=torch.from_numpy(query.image),
            query_mask=Mask.binary(query.mask.astype(np.float32)),
            class_id=class_id,
            episode_id=episode_id,
            query_id=query.scene_id,
            seed=seed,
        )

    def _draw_scene(self, class_id: int, rng: RngStream, augment: bool) -> Scene:
        try:
            scene = self._draw_nonempty(class_id, rng)
        except RetryError as e:
            raise SamplerError(
                f"no non-empty scene for class {class_id} after "
                f"{e.last_attempt.attempt_number} attempts"
            ) from e
        if not augment:
            return scene
        if self.scale_range is not None:
            scene = rescale_scene(scene, float(rng.uniform(*self.scale_range)), rng)
        if self.hflip and rng.uniform() < 0.5:
            scene = Scene(
                image=np.ascontiguousarray(scene.image[:, ::-1]),
                mask=np.ascontiguousarray(scene.mask[:, ::-1]),
                scene_id=scene.scene_id,
            )
        return scene

    @retry_empty_mask
    def _draw_nonempty(self, class_id: int, rng: RngStream) -> Scene:
        scene = self.source.draw(class_id, rng)
        if not scene.mask.any():
            raise EmptyMaskError(f"scene {scene.scene_id} has no class {class_id} pixels")
        return scene

    def sample_many(
        self,
        count: int,
        k_shot: int,
        phase: Phase | str,
        rng: RngStream,
    ) -> list[Episode]:
        return [self.sample_episode(k_shot, phase, rng, episode_id=i) for i in range(count)]


def build_source(config: ExperimentConfig) -> SceneSource:
    if config.dataset == "synthetic":
        return SyntheticSceneSource(config.scene)
    if config.data_root is None:
        raise ValueError(f"dataset {config.dataset} needs data_root")
    return FolderSceneSource(config.data_root, config.scene.image_size)


def build_sampler(config: ExperimentConfig, augment: bool = True) -> EpisodeSampler:
    """Sampler for the configured split; ``augment=False`` turns off training jitter."""
    split = build_split(config.dataset, config.fold, config.scene.shape_classes)
    if not augment:
        return EpisodeSampler(split, build_source(config))
    return EpisodeSampler(
        split, build_source(config), hflip=config.train.hflip, scale_range=config.train.scale_range
    )


def sample_episode(
    split: SplitSpec,
    k_shot: int,
    phase: Phase | str,
    rng: RngStream,
    source: SceneSource | None = None,
) -> Episode:
    """Draw one episode; uses the default synthetic scenes when no source is given."""
    if source is None:
        source = SyntheticSceneSource(SyntheticSceneConfig())
    return EpisodeSampler(split, source).sample_episode(k_shot, phase, rng)


# =============================================================================
# MANIFEST
# =============================================================================


def write_manifest(episodes: Iterable[Episode], storage: StorageBackend, path: str) -> str:
    lines = [format_record(episode.to_record()) for episode in episodes]
    return storage.save_text(path, "\n".join(lines) + "\n")


def read_manifest(storage: StorageBackend, path: str) -> list[dict]:
    records = read_records(storage.load_text(path), list_keys=MANIFEST_LIST_KEYS)
    for record in records:
        record["support_ids"] = [str(s) for s in record["support_ids"]]
        record["query_id"] = str(record["query_id"])
    return records
