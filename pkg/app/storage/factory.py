from pathlib import Path

from app.config import Settings, get_settings
from app.storage.base import StorageBackend
from app.storage.local import LocalStorage
from app.storage.s3 import S3Storage


def get_storage(
    out_dir: str | Path | None = None,
    settings: Settings | None = None,
) -> StorageBackend:
    """Get the configured storage backend rooted at a run's output directory.

    Local runs write to ``out_dir`` (default ``settings.local_data_path``); S3
    runs use ``out_dir`` as a key prefix below ``settings.s3_prefix``.
    """
    settings = settings or get_settings()
    if settings.storage_backend == "s3":
        parts = (settings.s3_prefix.strip("/"), str(out_dir or "").strip("/"))
        return S3Storage(
            bucket_name=settings.s3_bucket_name,
            aws_access_key_id=settings.aws_access_key_id,
            aws_secret_access_key=settings.aws_secret_access_key,
            region=settings.aws_region,
            prefix="/".join(p for p in parts if p),
        )
    if settings.storage_backend != "local":
        raise ValueError(f"Unknown storage backend: {settings.storage_backend}")
    return LocalStorage(base_path=str(out_dir or settings.local_data_path))
