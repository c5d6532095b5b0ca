"""Dataset split registry: which classes train and which are held out per fold."""

from dataclasses import dataclass

from app.config import SHAPE_KINDS
from app.errors import UnknownDatasetError
from app.logging_config import get_logger

logger = get_logger("services.splits")

NUM_FOLDS = 4

# Class ids are 1-based and follow these orders.
PASCAL_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "potted plant", "sheep", "sofa", "train", "tv/monitor",
)  # fmt: skip

COCO_CLASSES = (
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "traffic light", "fire hydrant", "stop sign", "parking meter", "bench",
    "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee",
    "skis", "snowboard", "sports ball", "kite", "baseball bat", "baseball glove",
    "skateboard", "surfboard", "tennis racket", "bottle", "wine glass", "cup",
    "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "cell phone", "microwave", "oven", "toaster", "sink",
    "refrigerator", "book", "clock", "vase", "scissors", "teddy bear",
    "hair drier", "toothbrush",
)  # fmt: skip


@dataclass(frozen=True)
class SplitSpec:
    name: str
    fold: int
    train_classes: frozenset[int]
    test_classes: frozenset[int]
    class_names: dict[int, str]

    def __post_init__(self):
        overlap = self.train_classes & self.test_classes
        if overlap:
            raise ValueError(f"train and test classes overlap: {sorted(overlap)}")

    @property
    def all_classes(self) -> frozenset[int]:
        return self.train_classes | self.test_classes

    def classes_for(self, phase: str) -> frozenset[int]:
        if phase == "train":
            return self.train_classes
        if phase == "test":
            return self.test_classes
        raise ValueError(f"Unknown phase: {phase}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fold": self.fold,
            "train_classes": sorted(self.train_classes),
            "test_classes": sorted(self.test_classes),
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
        }


def _pascal_split(fold: int) -> SplitSpec:
    names = {i + 1: name for i, name in enumerate(PASCAL_CLASSES)}
    test = frozenset(range(5 * fold + 1, 5 * fold + 6))
    return SplitSpec("pascal-5i", fold, frozenset(names) - test, test, names)


def _coco_split(fold: int) -> SplitSpec:
    # Classes are interleaved across folds: class c belongs to fold (c - 1) % 4.
    names = {i + 1: name for i, name in enumerate(COCO_CLASSES)}
    test = frozenset(c for c in names if (c - 1) % NUM_FOLDS == fold)
    return SplitSpec("coco-20i", fold, frozenset(names) - test, test, names)


def _synthetic_split(fold: int, shape_classes: list[str] | tuple[str, ...]) -> SplitSpec:
    names = {i + 1: name for i, name in enumerate(shape_classes)}
    per_fold = len(names) // NUM_FOLDS
    if per_fold < 1:
        raise ValueError("synthetic splits need at least 4 shape classes")
    ids = sorted(names)
    test = frozenset(ids[fold * per_fold : (fold + 1) * per_fold])
    return SplitSpec("synthetic", fold, frozenset(ids) - test, test, names)


def build_split(
    dataset: str,
    fold: int,
    shape_classes: list[str] | tuple[str, ...] = SHAPE_KINDS,
) -> SplitSpec:
    """Return the class partition of ``dataset`` for ``fold``.

    Args:
        dataset: "pascal-5i", "coco-20i" or "synthetic"
        fold: Held-out fold in [0, 3]
        shape_classes: Synthetic shape classes (ignored for real datasets)

    Raises:
        UnknownDatasetError: For an unregistered dataset name
        ValueError: For a fold outside [0, 3]
    """
    if not 0 <= fold < NUM_FOLDS:
        raise ValueError(f"fold must be in [0, {NUM_FOLDS - 1}], got {fold}")
    if dataset == "pascal-5i":
        split = _pascal_split(fold)
    elif dataset == "coco-20i":
        split = _coco_split(fold)
    elif dataset == "synthetic":
        split = _synthetic_split(fold, shape_classes)
    else:
        raise UnknownDatasetError(f"Unknown dataset: {dataset}")

    logger.debug(
        "Built split",
        extra={"dataset": dataset, "fold": fold, "test_classes": sorted(split.test_classes)},
    )
    return split
