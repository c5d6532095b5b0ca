"""gen-data: export an episode manifest and optionally the rendered scenes."""

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.commands.base import EpisodeArgs, held_out_episodes, start_run  # noqa: E402
from app.logging_config import get_logger  # noqa: E402
from app.services.episodes import Phase, write_manifest  # noqa: E402

logger = get_logger("commands.data")

MANIFEST_PATH = "episodes.records"


class GenDataArgs(EpisodeArgs):
    phase: Phase = Phase.TEST
    render: bool = False


def _png(array: np.ndarray, cmap: str | None = None) -> bytes:
    buffer = io.BytesIO()
    plt.imsave(buffer, array, cmap=cmap, format="png")
    return buffer.getvalue()


def run_gen_data(args: GenDataArgs) -> dict:
    ctx = start_run("gen-data", args)
    episodes = held_out_episodes(ctx.config, args.episodes, args.phase)
    write_manifest(episodes, ctx.storage, MANIFEST_PATH)
    ctx.outputs.append(MANIFEST_PATH)

    if args.render:
        for episode in episodes:
            scenes = [(s.scene_id, s.image, s.label) for s in episode.supports]
            scenes.append((episode.query_id, episode.query_image, episode.query_mask))
            for scene_id, image, mask in scenes:
                ctx.storage.save(
                    f"scenes/{scene_id}.png", _png(np.clip(image.numpy(), 0.0, 1.0))
                )
                ctx.storage.save(f"scenes/{scene_id}_mask.png", _png(mask.data.numpy(), "gray"))
        ctx.outputs.append("scenes/")

    summary = {"episodes": len(episodes), "phase": args.phase.value}
    ctx.write_manifest(summary=summary)
    logger.info("Episodes exported", extra=summary)
    return summary
