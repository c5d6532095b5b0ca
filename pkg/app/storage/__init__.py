"""Artifact storage backends: local disk and S3."""
