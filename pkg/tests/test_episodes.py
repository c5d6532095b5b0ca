"""Tests for class splits, synthetic scenes and the episode sampler."""

import numpy as np
import pytest
from skimage import io

from app.config import SHAPE_KINDS, SyntheticSceneConfig
from app.errors import SamplerError, UnknownDatasetError
from app.services.core import RngStream
from app.services.episodes import EpisodeSampler, Phase, read_manifest, write_manifest
from app.services.splits import PASCAL_CLASSES, build_split
from app.services.synthetic import (
    FolderSceneSource,
    Scene,
    SyntheticSceneSource,
    rasterize_shape,
    rescale_scene,
    scene_seed_from_id,
)

# =============================================================================
# SPLITS
# =============================================================================


def test_pascal_fold_0_test_classes():
    split = build_split("pascal-5i", 0)
    names = {split.class_names[c] for c in split.test_classes}
    assert names == {"aeroplane", "bicycle", "bird", "boat", "bottle"}


def test_pascal_fold_3_test_classes():
    split = build_split("pascal-5i", 3)
    names = {split.class_names[c] for c in split.test_classes}
    assert split.test_classes == frozenset(range(16, 21))
    assert names == set(PASCAL_CLASSES[15:20])


def test_synthetic_fold_partition():
    split = build_split("synthetic", 0)
    assert len(split.test_classes) == 2
    assert len(split.train_classes) == 6
    assert not split.test_classes & split.train_classes


def test_fixture_sampler_draws_several_test_classes(sampler):
    assert len(SHAPE_KINDS) == 8
    assert len(sampler.split.test_classes) == 2
    episodes = sampler.sample_many(40, 1, Phase.TEST, RngStream(8))
    assert {e.class_id for e in episodes} == set(sampler.split.test_classes)


@pytest.mark.parametrize("dataset", ["pascal-5i", "coco-20i", "synthetic"])
def test_folds_partition_all_classes(dataset):
    """Every class is held out in exactly one fold."""
    splits = [build_split(dataset, fold) for fold in range(4)]
    held_out = [c for s in splits for c in s.test_classes]
    assert len(held_out) == len(set(held_out))
    assert set(held_out) == set(splits[0].all_classes)
    for split in splits:
        assert not split.train_classes & split.test_classes


def test_coco_folds_have_20_test_classes():
    assert all(len(build_split("coco-20i", f).test_classes) == 20 for f in range(4))


def coco_held_out_names(fold: int) -> set[str]:
    split = build_split("coco-20i", fold)
    return {split.class_names[c] for c in split.test_classes}


def test_coco_fold_0_test_classes():
    assert coco_held_out_names(0) == {
        "person", "airplane", "boat", "parking meter", "dog", "elephant", "backpack",
        "suitcase", "sports ball", "skateboard", "wine glass", "spoon", "sandwich",
        "hot dog", "chair", "dining table", "mouse", "microwave", "refrigerator", "scissors",
    }  # fmt: skip


def test_coco_fold_1_test_classes():
    assert coco_held_out_names(1) == {
        "bicycle", "bus", "traffic light", "bench", "horse", "bear", "umbrella", "frisbee",
        "kite", "surfboard", "cup", "bowl", "orange", "pizza", "couch", "toilet", "remote",
        "oven", "book", "teddy bear",
    }  # fmt: skip


def test_coco_fold_2_test_classes():
    assert coco_held_out_names(2) == {
        "car", "train", "fire hydrant", "bird", "sheep", "zebra", "handbag", "skis",
        "baseball bat", "tennis racket", "fork", "banana", "broccoli", "donut",
        "potted plant", "tv", "keyboard", "toaster", "clock", "hair drier",
    }  # fmt: skip


def test_coco_fold_3_test_classes():
    assert coco_held_out_names(3) == {
        "motorcycle", "truck", "stop sign", "cat", "cow", "giraffe", "tie", "snowboard",
        "baseball glove", "bottle", "knife", "apple", "carrot", "cake", "bed", "laptop",
        "cell phone", "sink", "vase", "toothbrush",
    }  # fmt: skip


def test_unknown_dataset_raises():
    with pytest.raises(UnknownDatasetError):
        build_split("imagenet", 0)


def test_fold_out_of_range_raises():
    with pytest.raises(ValueError):
        build_split("synthetic", 4)


# =============================================================================
# SYNTHETIC SCENES
# =============================================================================


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_every_shape_kind_rasterises(kind):
    mask = rasterize_shape(kind, (32.0, 32.0), 12.0, 0.3, (64, 64))
    assert mask.dtype == bool
    assert 20 < mask.sum() < 64 * 64


def test_scene_is_reproducible_from_its_id():
    source = SyntheticSceneSource(SyntheticSceneConfig())
    scene = source.draw(3, RngStream(9))
    again = source.render(3, scene_seed_from_id(scene.scene_id))
    assert np.array_equal(scene.image, again.image)
    assert np.array_equal(scene.mask, again.mask)


def test_scene_has_target_and_valid_range():
    source = SyntheticSceneSource(SyntheticSceneConfig(image_size=48))
    scene = source.draw(1, RngStream(1))
    assert scene.image.shape == (48, 48, 3)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
    assert scene.mask.any()


def test_folder_source_reads_label_maps(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    image = np.zeros((40, 40, 3), dtype=np.uint8)
    labels = np.zeros((40, 40), dtype=np.uint8)
    labels[10:30, 10:30] = 7
    labels[0:2, :] = 255
    io.imsave(tmp_path / "images" / "a.png", image, check_contrast=False)
    io.imsave(tmp_path / "masks" / "a.png", labels, check_contrast=False)

    source = FolderSceneSource(tmp_path, image_size=32)
    scene = source.draw(7, RngStream(0))
    assert scene.image.shape == (32, 32, 3)
    assert scene.mask.any()
    with pytest.raises(SamplerError):
        source.draw(3, RngStream(0))


# =============================================================================
# EPISODE SAMPLER
# =============================================================================


def test_one_shot_episode_contract(sampler):
    episode = sampler.sample_episode(1, Phase.TEST, RngStream(0))
    assert episode.k_shot == 1
    assert episode.class_id in sampler.split.test_classes
    assert episode.supports[0].scene_id != episode.query_id
    assert episode.query_mask.foreground_count > 0


def test_five_shot_supports_are_distinct(sampler):
    episode = sampler.sample_episode(5, Phase.TRAIN, RngStream(1))
    ids = [s.scene_id for s in episode.supports] + [episode.query_id]
    assert episode.k_shot == 5
    assert len(set(ids)) == 6
    assert episode.class_id in sampler.split.train_classes
    assert all(s.label.foreground_count > 0 for s in episode.supports)


def test_fixed_seed_gives_identical_class_sequence(sampler):
    first = [e.class_id for e in sampler.sample_many(200, 1, Phase.TEST, RngStream(7))]
    second = [e.class_id for e in sampler.sample_many(200, 1, Phase.TEST, RngStream(7))]
    assert first == second


def test_episode_rebuilds_from_its_seed(sampler):
    episode = sampler.sample_episode(2, Phase.TEST, RngStream(3))
    rebuilt = sampler.episode_from_seed(episode.seed, 2, Phase.TEST)
    assert rebuilt.query_id == episode.query_id
    assert [s.scene_id for s in rebuilt.supports] == [s.scene_id for s in episode.supports]


def test_k_shot_below_one_raises(sampler):
    with pytest.raises(ValueError):
        sampler.sample_episode(0, Phase.TEST, RngStream(0))


def test_hflip_only_applies_in_training(config):
    split = build_split("synthetic", 0)
    source = SyntheticSceneSource(config.scene)
    plain = EpisodeSampler(split, source, hflip=False)
    flipping = EpisodeSampler(split, source, hflip=True)
    a = plain.sample_episode(1, Phase.TEST, RngStream(2))
    b = flipping.sample_episode(1, Phase.TEST, RngStream(2))
    assert np.array_equal(a.query_image.numpy(), b.query_image.numpy())


def centered_scene(size: int = 32, side: int = 8) -> Scene:
    image = np.random.default_rng(0).random((size, size, 3), dtype=np.float32)
    mask = np.zeros((size, size), dtype=bool)
    lo = (size - side) // 2
    mask[lo : lo + side, lo : lo + side] = True
    return Scene(image=image, mask=mask, scene_id="centered")


@pytest.mark.parametrize("scale", [0.5, 0.8, 1.25, 1.5])
def test_rescale_keeps_extent_and_object(scale):
    scene = centered_scene()
    out = rescale_scene(scene, scale, RngStream(1))
    assert out.image.shape == scene.image.shape
    assert out.image.dtype == np.float32
    assert out.mask.shape == scene.mask.shape
    assert out.mask.any()


def test_rescale_zoom_changes_object_area():
    scene = centered_scene()
    smaller = rescale_scene(scene, 0.5, RngStream(1))
    larger = rescale_scene(scene, 1.5, RngStream(1))
    assert smaller.mask.sum() < scene.mask.sum() < larger.mask.sum()


def test_rescale_identity_returns_same_scene():
    scene = centered_scene()
    assert rescale_scene(scene, 1.0, RngStream(1)) is scene


def test_rescale_only_applies_in_training(config):
    split = build_split("synthetic", 0)
    source = SyntheticSceneSource(config.scene)
    plain = EpisodeSampler(split, source)
    zooming = EpisodeSampler(split, source, scale_range=(0.5, 0.6))
    a = plain.sample_episode(1, Phase.TEST, RngStream(2))
    b = zooming.sample_episode(1, Phase.TEST, RngStream(2))
    assert np.array_equal(a.query_image.numpy(), b.query_image.numpy())

    c = plain.sample_episode(1, Phase.TRAIN, RngStream(2))
    d = zooming.sample_episode(1, Phase.TRAIN, RngStream(2))
    first, zoomed = c.supports[0], d.supports[0]
    assert first.scene_id == zoomed.scene_id
    assert not np.array_equal(first.label.data.numpy(), zoomed.label.data.numpy())


def test_manifest_records_survive_storage(sampler, storage):
    episodes = sampler.sample_many(3, 2, Phase.TEST, RngStream(4))
    write_manifest(episodes, storage, "episodes.records")
    records = read_manifest(storage, "episodes.records")
    assert [r["seed"] for r in records] == [e.seed for e in episodes]
    assert records[0]["support_ids"] == [s.scene_id for s in episodes[0].supports]
    assert records[1]["query_id"] == episodes[1].query_id
