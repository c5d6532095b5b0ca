"""Retry policies for storage I/O and bounded episode re-draws."""

import logging
from collections.abc import Callable
from typing import Any

from tenacity import (
    RetryCallState,
    retry,
    retry_if_exception_type,
    retry_if_not_exception_type,
    stop_after_attempt,
    wait_exponential,
    wait_none,
)

from app.constants import MAX_SAMPLE_ATTEMPTS
from app.errors import EmptyMaskError

logger = logging.getLogger("app.retry")


def log_retry(retry_state: RetryCallState) -> None:
    """Log retry attempts."""
    exception = retry_state.outcome.exception() if retry_state.outcome else None
    logger.warning(
        "Retrying %s (attempt %d/%d) after error: %s",
        retry_state.fn.__name__ if retry_state.fn else "unknown",
        retry_state.attempt_number,
        retry_state.retry_object.stop.max_attempt_number,  # type: ignore
        str(exception),
    )


def log_redraw(retry_state: RetryCallState) -> None:
    logger.debug(
        "Re-drawing %s (attempt %d)",
        retry_state.fn.__name__ if retry_state.fn else "unknown",
        retry_state.attempt_number,
    )


# Exceptions that indicate transient storage failures worth retrying.
# A missing file is never retried.
RETRYABLE_IO_EXCEPTIONS = (
    ConnectionError,
    TimeoutError,
    OSError,
)


def with_retry(
    max_attempts: int = 3,
    max_wait: int = 10,
    retry_on: tuple[type[BaseException], ...] = RETRYABLE_IO_EXCEPTIONS,
    reraise: bool = True,
) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """Decorator for retrying functions on the given exception types.

    Args:
        max_attempts: Maximum number of attempts
        max_wait: Maximum wait between attempts in seconds; 0 disables waiting
        retry_on: Exception types that trigger another attempt
        reraise: Re-raise the last exception instead of ``tenacity.RetryError``

    Usage:
        @with_retry(max_attempts=3)
        def write_checkpoint():
            ...
    """
    if max_wait > 0:
        wait = wait_exponential(multiplier=1, min=1, max=max_wait)
        before_sleep = log_retry
    else:
        wait = wait_none()
        before_sleep = log_redraw
    return retry(
        stop=stop_after_attempt(max_attempts),
        wait=wait,
        retry=retry_if_exception_type(retry_on) & retry_if_not_exception_type(FileNotFoundError),
        before_sleep=before_sleep,
        reraise=reraise,
    )


# Pre-configured policies
retry_storage = with_retry(max_attempts=3, max_wait=5)

# Re-draw a random scene until its target mask is non-empty. Raises
# tenacity.RetryError on exhaustion so callers can map it to SamplerError.
retry_empty_mask = with_retry(
    max_attempts=MAX_SAMPLE_ATTEMPTS,
    max_wait=0,
    retry_on=(EmptyMaskError,),
    reraise=False,
)
