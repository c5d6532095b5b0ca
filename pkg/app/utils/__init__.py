"""Utility functions for the AMFormer desk implementation."""

from app.utils.records import format_record, parse_record, read_records

__all__ = ["format_record", "parse_record", "read_records"]
