"""Checkpoint archives: namespaced named arrays plus a run manifest."""

import io

import torch

from app.config import ExperimentConfig, config_hash
from app.errors import CheckpointMismatchError
from app.logging_config import get_logger
from app.services.model import AMFormer
from app.storage.base import StorageBackend

logger = get_logger("services.checkpoint")

# Generator attention layers live under their own namespace.
_ATTENTION_PREFIXES = ("miner.self_attn.", "miner.aggregate.")


def _archive_key(state_key: str) -> str:
    for prefix in _ATTENTION_PREFIXES:
        if state_key.startswith(prefix):
            return "attn/" + state_key[len("miner.") :]
    namespace, _, rest = state_key.partition(".")
    return f"{namespace}/{rest}"


def _state_key(archive_key: str) -> str:
    namespace, _, rest = archive_key.partition("/")
    if namespace == "attn":
        return "miner." + rest
    return f"{namespace}.{rest}"


def model_arrays(model: AMFormer) -> dict[str, torch.Tensor]:
    return {_archive_key(k): v.detach().cpu().clone() for k, v in model.state_dict().items()}


def save_checkpoint(
    model: AMFormer,
    storage: StorageBackend,
    path: str,
    epoch: int,
    seed: int,
) -> str:
    """Serialise the model to ``path``; backends write atomically."""
    manifest = {
        "config_hash": config_hash(model.config),
        "epoch": epoch,
        "seed": seed,
        "config": model.config.model_dump(mode="json"),
    }
    buffer = io.BytesIO()
    torch.save({"arrays": model_arrays(model), "manifest": manifest}, buffer)
    location = storage.save(path, buffer.getvalue())
    logger.info("Saved checkpoint", extra={"path": location, "epoch": epoch})
    return location


def read_checkpoint(storage: StorageBackend, path: str) -> dict:
    payload = torch.load(io.BytesIO(storage.load(path)), map_location="cpu", weights_only=True)
    if "arrays" not in payload or "manifest" not in payload:
        raise CheckpointMismatchError(f"{path} is not a checkpoint archive")
    return payload


def load_checkpoint(
    storage: StorageBackend,
    path: str,
    config: ExperimentConfig | None = None,
) -> tuple[AMFormer, dict]:
    """Rebuild a model from a checkpoint.

    Args:
        storage: Backend holding the archive
        path: Archive path within the backend
        config: Config to build the model from; defaults to the stored one

    Raises:
        CheckpointMismatchError: If arrays are missing, unexpected or misshaped
    """
    payload = read_checkpoint(storage, path)
    manifest = payload["manifest"]
    if config is None:
        config = ExperimentConfig(**manifest["config"])
    elif manifest.get("config_hash") != config_hash(config):
        logger.warning(
            "Checkpoint was trained with a different config",
            extra={"path": path, "checkpoint_hash": manifest.get("config_hash")},
        )

    model = AMFormer(config)
    expected = model.state_dict()
    arrays = payload["arrays"]
    # Discriminator arrays are optional when loading for inference.
    state = {}
    for archive_key, array in arrays.items():
        key = _state_key(archive_key)
        if key not in expected:
            if archive_key.startswith("detail/"):
                continue
            raise CheckpointMismatchError(f"unexpected array {archive_key} in {path}")
        if tuple(array.shape) != tuple(expected[key].shape):
            raise CheckpointMismatchError(
                f"{archive_key}: checkpoint shape {tuple(array.shape)} "
                f"!= model shape {tuple(expected[key].shape)}"
            )
        state[key] = array
    missing = sorted(_archive_key(k) for k in expected if k not in state)
    if missing:
        raise CheckpointMismatchError(f"{path} lacks arrays: {missing[:5]}")

    model.load_state_dict(state)
    model.eval()
    return model, manifest
