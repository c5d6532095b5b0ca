"""Per-episode diagnostic dumps: intermediate maps as arrays and image panels."""

import io
from collections.abc import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from app.logging_config import get_logger  # noqa: E402
from app.services.backbone import downsample_masks, images_to_batch  # noqa: E402
from app.services.core import Episode, flatten_nchw  # noqa: E402
from app.services.losses import attention_mass  # noqa: E402
from app.services.model import AMFormer, EpisodeBatch, EpisodePrediction, infer  # noqa: E402
from app.services.object_miner import support_tokens  # noqa: E402
from app.storage.base import StorageBackend  # noqa: E402

logger = get_logger("services.diagnostics")

DIAGNOSTICS_DIR = "diagnostics"


@torch.no_grad()
def episode_arrays(
    model: AMFormer, episode: Episode
) -> tuple[dict[str, np.ndarray], EpisodePrediction]:
    """Intermediate maps of one episode, keyed by name.

    Includes the raw and normalised similarity per support, the seed
    activation and its size, the fallback flag, the generator's soft mask,
    attention mass per scale, how strongly query positions attend to the
    support object versus the pseudo support, and each local proxy's attention
    map when the model has a discriminator.
    """
    prediction = infer(model, episode)
    loc = prediction.localization
    arrays = {
        "image": episode.query_image.cpu().numpy(),
        "ground_truth": episode.query_mask.data.cpu().numpy(),
        "raw_similarity": loc.raw_similarity[0].cpu().numpy(),
        "similarity": loc.similarity[0].cpu().numpy(),
        "seed_activation": prediction.seed_activation.data.cpu().numpy(),
        "activation_count": np.asarray(int(prediction.seed_activation.data.sum())),
        "fallback": np.asarray(prediction.fallback),
        "soft_mask": prediction.soft.data.cpu().numpy(),
        "prediction": prediction.binary.data.cpu().numpy(),
        "episode_seed": np.asarray(episode.seed, dtype=np.uint64),
    }
    pyramid = prediction.pyramid
    for level, (attn, extent) in enumerate(zip(pyramid.attention, pyramid.extents)):
        arrays[f"attention_mass_{level}"] = attention_mass(attn, extent)[0].cpu().numpy()
    arrays.update(activation_split(model, episode, prediction))

    if model.detail is not None:
        encoded_query = model.backbone(images_to_batch(episode.query_image))
        soft = prediction.soft.data[None].to(encoded_query.dtype)
        arrays["proxy_maps"] = model.detail.proxy_attention_maps(encoded_query, soft)[0].numpy()
    return arrays, prediction


def foreground_activation(
    attn: torch.Tensor, source_mask: torch.Tensor, extent: tuple[int, int]
) -> torch.Tensor:
    """Mean weight each query position gives to foreground source tokens.

    Args:
        attn: [B, heads, N_q, N_s] attention, query tokens as targets
        source_mask: [B, N_s] foreground weight of each source token
        extent: Query extent (H, W) with H * W == N_q

    Returns:
        [B, H, W] activation map
    """
    weights = source_mask.to(attn.dtype).unsqueeze(1)
    received = (attn.mean(dim=1) * weights).sum(dim=-1) / weights.sum(dim=-1).clamp_min(1.0)
    return received.reshape(attn.shape[0], *extent)


@torch.no_grad()
def activation_split(
    model: AMFormer, episode: Episode, prediction: EpisodePrediction
) -> dict[str, np.ndarray]:
    """Finest-level activation of the query from the support object and from
    the pseudo support, both through the model's first aggregation layer.
    """
    encoded = model.encode(EpisodeBatch.from_episodes([episode]))
    f_q, extent = prediction.pyramid.query[0], prediction.pyramid.extents[0]
    tokens, support_mask = support_tokens(encoded.support_feats, encoded.support_masks, extent)
    seed = downsample_masks(prediction.localization.activation, extent)
    pseudo = flatten_nchw(f_q * seed.unsqueeze(1))

    miner = model.miner
    from_support = miner.first_layer_attention(0, f_q, tokens)
    from_pseudo = miner.first_layer_attention(0, f_q, pseudo)
    support = foreground_activation(from_support, support_mask, extent)
    pseudo_support = foreground_activation(from_pseudo, seed.flatten(1), extent)
    return {
        "support_activation": support[0].cpu().numpy(),
        "pseudo_support_activation": pseudo_support[0].cpu().numpy(),
    }


def _png(fig) -> bytes:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", bbox_inches="tight")
    plt.close(fig)
    return buffer.getvalue()


def _row_panel(panels: list[tuple[str, np.ndarray, str | None]], title: str) -> bytes:
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (name, data, cmap) in zip(axes, panels):
        ax.imshow(data, cmap=cmap, interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    return _png(fig)


def render_stage_panel(arrays: dict[str, np.ndarray], title: str = "") -> bytes:
    """Image, ground truth, seed activation, expanded mask and final prediction."""
    panels = [
        ("query", np.clip(arrays["image"], 0.0, 1.0), None),
        ("ground truth", arrays["ground_truth"], "gray"),
        ("seed activation", arrays["seed_activation"], "gray"),
        ("expanded", arrays["soft_mask"], "viridis"),
        ("prediction", arrays["prediction"], "gray"),
    ]
    return _row_panel(panels, title)


def render_activation_panel(arrays: dict[str, np.ndarray], title: str = "") -> bytes:
    panels = [
        ("query", np.clip(arrays["image"], 0.0, 1.0), None),
        ("ground truth", arrays["ground_truth"], "gray"),
        ("support target", arrays["support_activation"], "inferno"),
        ("pseudo support", arrays["pseudo_support_activation"], "inferno"),
    ]
    return _row_panel(panels, title)


def render_proxy_panel(proxy_maps: np.ndarray, columns: int = 5) -> bytes:
    """Grid of per-proxy attention maps [N, H, W]."""
    count = proxy_maps.shape[0]
    rows = -(-count // columns)
    fig, axes = plt.subplots(rows, columns, figsize=(2 * columns, 2 * rows), squeeze=False)
    for index, ax in enumerate(axes.flat):
        ax.axis("off")
        if index < count:
            ax.imshow(proxy_maps[index], cmap="magma", interpolation="nearest")
            ax.set_title(f"proxy {index}")
    return _png(fig)


def dump_diagnostics(
    model: AMFormer,
    episodes: Sequence[Episode],
    storage: StorageBackend,
    prefix: str = DIAGNOSTICS_DIR,
    panels: bool = True,
) -> list[str]:
    """Write ``episode_<id>.npz`` (and PNG panels) for each episode.

    Returns:
        Storage locations of the written archives
    """
    written = []
    for episode in episodes:
        arrays, prediction = episode_arrays(model, episode)
        stem = f"{prefix}/episode_{episode.episode_id:05d}"
        buffer = io.BytesIO()
        np.savez_compressed(buffer, **arrays)
        written.append(storage.save(f"{stem}.npz", buffer.getvalue()))

        if panels:
            title = f"class {episode.class_id} | fallback {prediction.fallback}"
            storage.save(f"{stem}_stages.png", render_stage_panel(arrays, title))
            storage.save(f"{stem}_activation.png", render_activation_panel(arrays, title))
            if "proxy_maps" in arrays:
                storage.save(f"{stem}_proxies.png", render_proxy_panel(arrays["proxy_maps"]))
    logger.info("Wrote diagnostics", extra={"episodes": len(episodes), "prefix": prefix})
    return written
