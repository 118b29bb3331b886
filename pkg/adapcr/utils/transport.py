import time

import httpx

from .exceptions import ContractError, RetryableError
from .logger import logger


def post_json_with_retry(
    client: httpx.Client,
    url: str,
    payload: dict,
    attempts: int = 3,
    backoff_seconds: float = 0.5,
) -> dict:
    """
    POST a JSON payload, retrying transport failures with exponential backoff.

    Params:
    -------
    client: httpx.Client
        Client carrying timeout and transport settings.
    url: str
        Full endpoint URL.
    payload: dict
        JSON body.
    attempts: int
        Total tries before giving up.
    backoff_seconds: float
        First wait; doubles after every failed try.

    Returns:
    --------
    dict
        Decoded JSON body of the first successful response.
    """
    last_error: Exception | None = None
    for attempt in range(1, attempts + 1):
        try:
            response = client.post(url, json=payload)
            response.raise_for_status()
        except (httpx.TransportError, httpx.HTTPStatusError) as e:
            last_error = e
            logger.warning(f"Request to {url} failed.", extra={"fields": {
                "attempt": attempt, "attempts": attempts, "error": str(e)}})
            if attempt < attempts:
                time.sleep(backoff_seconds * (2 ** (attempt - 1)))
            continue
        try:
            body = response.json()
        except ValueError as e:
            raise ContractError(f"Response from {url} is not JSON: {e}")
        if not isinstance(body, dict):
            raise ContractError(f"Response from {url} is not a JSON object")
        return body
    raise RetryableError(
        f"Request to {url} failed after {attempts} attempts: {last_error}", attempts=attempts)
