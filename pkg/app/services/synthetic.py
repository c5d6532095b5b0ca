"""Scene sources that feed the episode sampler.

A scene is an RGB image plus the binary mask of one requested class. The
synthetic source paints textured shapes (one target plus distractors of other
classes) and is fully determined by a scene seed, so episode manifests can
re-render every scene from ``(class_id, scene_seed)``. ``FolderSceneSource``
plugs real images with semantic label maps into the same interface.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from matplotlib.colors import hsv_to_rgb
from skimage import draw, io
from skimage.transform import resize

from app.config import SyntheticSceneConfig
from app.errors import EmptyMaskError, SamplerError
from app.logging_config import get_logger
from app.services.core import RngStream

logger = get_logger("services.synthetic")

IGNORE_LABEL = 255


@dataclass(frozen=True)
class Scene:
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    mask: np.ndarray  # [H, W] bool, foreground of the requested class
    scene_id: str


class SceneSource(Protocol):
    image_size: int

    def draw(self, class_id: int, rng: RngStream) -> Scene: ...


def rescale_scene(scene: Scene, scale: float, rng: RngStream) -> Scene:
    """Zoom a scene by ``scale`` and bring it back to its original extent.

    Zooming in takes a random crop; zooming out pads with edge pixels and an
    empty mask at a random offset. A crop that loses the whole object returns
    the scene unchanged.
    """
    size = scene.mask.shape[0]
    new = max(1, round(size * scale))
    if new == size:
        return scene
    image = resize(scene.image, (new, new), order=1, anti_aliasing=new < size)
    mask = resize(
        scene.mask.astype(np.float32), (new, new), order=0, preserve_range=True, anti_aliasing=False
    ) > 0.5

    offset = int(rng.integers(abs(new - size) + 1)), int(rng.integers(abs(new - size) + 1))
    if new > size:
        rows, cols = slice(offset[0], offset[0] + size), slice(offset[1], offset[1] + size)
        image, mask = image[rows, cols], mask[rows, cols]
    else:
        pad = ((offset[0], size - new - offset[0]), (offset[1], size - new - offset[1]))
        image = np.pad(image, (*pad, (0, 0)), mode="edge")
        mask = np.pad(mask, pad, constant_values=False)
    if not mask.any():
        return scene
    return Scene(
        image=np.ascontiguousarray(image, dtype=np.float32),
        mask=np.ascontiguousarray(mask),
        scene_id=scene.scene_id,
    )


# =============================================================================
# SHAPE RASTERISATION
# =============================================================================


def _polygon(center, radii, rotation, extent) -> np.ndarray:
    radii = np.asarray(radii, dtype=np.float64)
    angles = rotation + 2 * np.pi * np.arange(len(radii)) / len(radii)
    rows = center[0] + radii * np.sin(angles)
    cols = center[1] + radii * np.cos(angles)
    mask = np.zeros(extent, dtype=bool)
    rr, cc = draw.polygon(rows, cols, shape=extent)
    mask[rr, cc] = True
    return mask


def _disk(center, radius, extent) -> np.ndarray:
    mask = np.zeros(extent, dtype=bool)
    rr, cc = draw.disk(center, radius, shape=extent)
    mask[rr, cc] = True
    return mask


def _bar(center, length, width, angle, extent) -> np.ndarray:
    along = np.array([np.sin(angle), np.cos(angle)]) * length / 2
    across = np.array([np.cos(angle), -np.sin(angle)]) * width / 2
    c = np.asarray(center, dtype=np.float64)
    corners = np.stack(
        [c + along + across, c + along - across, c - along - across, c - along + across]
    )
    mask = np.zeros(extent, dtype=bool)
    rr, cc = draw.polygon(corners[:, 0], corners[:, 1], shape=extent)
    mask[rr, cc] = True
    return mask


def rasterize_shape(
    kind: str,
    center: tuple[float, float],
    radius: float,
    rotation: float,
    extent: tuple[int, int],
) -> np.ndarray:
    """Boolean mask of one shape of the given kind."""
    if kind == "disc":
        return _disk(center, radius, extent)
    if kind == "annulus":
        return _disk(center, radius, extent) & ~_disk(center, radius * 0.5, extent)
    if kind == "square":
        return _polygon(center, [radius] * 4, rotation + np.pi / 4, extent)
    if kind == "diamond":
        return _polygon(center, [radius, radius * 0.55] * 2, rotation, extent)
    if kind == "triangle":
        return _polygon(center, [radius] * 3, rotation, extent)
    if kind == "hexagon":
        return _polygon(center, [radius] * 6, rotation, extent)
    if kind == "star":
        return _polygon(center, [radius, radius * 0.45] * 5, rotation, extent)
    if kind == "cross":
        width = radius * 0.6
        return _bar(center, 2 * radius, width, rotation, extent) | _bar(
            center, 2 * radius, width, rotation + np.pi / 2, extent
        )
    raise ValueError(f"Unknown shape kind: {kind}")


# =============================================================================
# SYNTHETIC SOURCE
# =============================================================================


class SyntheticSceneSource:
    """Procedural shape scenes; class id ``i`` is ``cfg.shape_classes[i - 1]``.

    Every class has its own hue. Instances vary in size, rotation, position,
    hue jitter and pixel noise; distractor shapes of other classes share the
    canvas so background features are not trivially separable.
    """

    def __init__(self, cfg: SyntheticSceneConfig):
        self.cfg = cfg
        self.image_size = cfg.image_size
        self.num_classes = len(cfg.shape_classes)

    def class_hue(self, class_id: int) -> float:
        return (class_id - 1) / self.num_classes

    def draw(self, class_id: int, rng: RngStream) -> Scene:
        return self.render(class_id, rng.derive_seed())

    def render(self, class_id: int, scene_seed: int) -> Scene:
        """Render the scene identified by ``(class_id, scene_seed)``.

        Raises:
            ValueError: If ``class_id`` is not a configured class
            EmptyMaskError: If the target ended up with no visible pixels
        """
        if not 1 <= class_id <= self.num_classes:
            raise ValueError(f"class_id {class_id} outside 1..{self.num_classes}")
        cfg = self.cfg
        size = cfg.image_size
        extent = (size, size)
        rng = RngStream(scene_seed)

        background_rgb = hsv_to_rgb(
            [rng.uniform(), rng.uniform(0.05, 0.25), rng.uniform(0.25, 0.55)]
        )
        image = np.broadcast_to(background_rgb, (size, size, 3)).copy()

        low, high = cfg.shapes_per_image
        n_shapes = int(rng.integers(low, high + 1))
        others = [c for c in range(1, self.num_classes + 1) if c != class_id]
        # Distractors are painted first; the target is painted last and never occluded.
        shape_classes = [int(rng.choice(others)) for _ in range(n_shapes - 1)] + [class_id]

        target = np.zeros(extent, dtype=bool)
        for shape_class in shape_classes:
            radius = rng.uniform(0.14, 0.26) * size
            center = (rng.uniform(radius, size - radius), rng.uniform(radius, size - radius))
            kind = cfg.shape_classes[shape_class - 1]
            shape = rasterize_shape(kind, center, radius, rng.uniform(0, 2 * np.pi), extent)

            jitter = rng.uniform(-cfg.color_jitter, cfg.color_jitter)
            hue = (self.class_hue(shape_class) + jitter) % 1.0
            rgb = hsv_to_rgb([hue, rng.uniform(0.6, 0.9), rng.uniform(0.7, 0.95)])
            image[shape] = rgb
            if shape_class == class_id:
                target = shape

        if cfg.texture_noise > 0:
            image = image + rng.normal(0.0, cfg.texture_noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)

        if not target.any():
            raise EmptyMaskError(f"scene {scene_seed} has no visible target pixels")
        return Scene(image=image, mask=target, scene_id=f"s{scene_seed:016x}")


def scene_seed_from_id(scene_id: str) -> int:
    if not scene_id.startswith("s"):
        raise ValueError(f"not a synthetic scene id: {scene_id}")
    return int(scene_id[1:], 16)


# =============================================================================
# FOLDER SOURCE
# =============================================================================


class FolderSceneSource:
    """Real images from ``<root>/images/<id>.(png|jpg)`` with label maps in
    ``<root>/masks/<id>.png`` whose pixel values are class ids (255 ignored).
    Images and masks are resized to ``image_size``.
    """

    IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

    def __init__(self, root: str | Path, image_size: int):
        self.root = Path(root)
        self.image_size = image_size
        image_dir = self.root / "images"
        mask_dir = self.root / "masks"
        if not image_dir.is_dir() or not mask_dir.is_dir():
            raise FileNotFoundError(f"{self.root} must contain images/ and masks/")

        self.images: dict[str, Path] = {}
        self.by_class: dict[int, list[str]] = {}
        for mask_path in sorted(mask_dir.glob("*.png")):
            scene_id = mask_path.stem
            image_path = next(
                (image_dir / f"{scene_id}{s}" for s in self.IMAGE_SUFFIXES
                 if (image_dir / f"{scene_id}{s}").exists()),
                None,
            )  # fmt: skip
            if image_path is None:
                logger.warning("Mask without image, skipping", extra={"scene_id": scene_id})
                continue
            self.images[scene_id] = image_path
            for class_id in np.unique(io.imread(mask_path)):
                if class_id not in (0, IGNORE_LABEL):
                    self.by_class.setdefault(int(class_id), []).append(scene_id)

        logger.info(
            "Indexed scene folder",
            extra={
                "root": str(self.root),
                "scenes": len(self.images),
                "classes": len(self.by_class),
            },
        )

    def draw(self, class_id: int, rng: RngStream) -> Scene:
        candidates = self.by_class.get(class_id)
        if not candidates:
            raise SamplerError(f"no scene in {self.root} contains class {class_id}")
        return self.load(candidates[int(rng.integers(len(candidates)))], class_id)

    def load(self, scene_id: str, class_id: int) -> Scene:
        size = (self.image_size, self.image_size)
        image = io.imread(self.images[scene_id])
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=-1)
        image = resize(image[..., :3], size, order=1, anti_aliasing=True)
        labels = resize(
            io.imread(self.root / "masks" / f"{scene_id}.png"),
            size,
            order=0,
            preserve_range=True,
            anti_aliasing=False,
        )
        mask = labels == class_id
        if not mask.any():
            raise EmptyMaskError(f"class {class_id} vanished from {scene_id} after resizing")
        return Scene(image=image.astype(np.float32), mask=mask, scene_id=scene_id)
