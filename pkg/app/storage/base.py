from abc import ABC, abstractmethod


class StorageBackend(ABC):
    """Artifact store for checkpoints, histories, manifests and study outputs."""

    @abstractmethod
    def save(self, path: str, content: bytes) -> str:
        """Save content to storage. Returns the storage path."""
        pass

    @abstractmethod
    def load(self, path: str) -> bytes:
        """Load content from storage."""
        pass

    @abstractmethod
    def delete(self, path: str) -> None:
        """Delete content from storage."""
        pass

    @abstractmethod
    def exists(self, path: str) -> bool:
        """Check if path exists in storage."""
        pass

    @abstractmethod
    def list_files(self, prefix: str = "") -> list[str]:
        """List files in storage with optional prefix filter."""
        pass

    def append_line(self, path: str, line: str) -> str:
        """Append one text line to a file, creating it when missing."""
        existing = self.load(path) if self.exists(path) else b""
        return self.save(path, existing + line.rstrip("\n").encode("utf-8") + b"\n")

    def save_text(self, path: str, text: str) -> str:
        return self.save(path, text.encode("utf-8"))

    def load_text(self, path: str) -> str:
        return self.load(path).decode("utf-8")
