import asyncio
import logging
import os
from pathlib import Path
from urllib.parse import urlparse

import backoff
import httpx

from ..checkpoint import MANIFEST_FILE, WEIGHTS_FILE
from ..exceptions import CheckpointError, InfoGatherError
from ..utils import url_key

log = logging.getLogger(__name__)


class ServerError(Exception):
    def __init__(self, response):
        self.response = response


def backoff_hdlr(details):
    log.warning(
        "Fetching weights failed (try %d). Retrying in %.1fs.", details["tries"], details["wait"]
    )


def giveup_hdlr(details):
    log.error("Fetching weights failed after %d tries. Giving up.", details["tries"])


class CheckpointClient:
    """Downloads remote checkpoints into a local cache keyed by the SHA-256 of their URL"""

    def __init__(self, cache_dir, timeout=60.0, max_tries=3, backoff_factor=1.0):
        self.cache_dir = Path(os.path.expanduser(cache_dir))
        self.timeout = timeout
        self.max_tries = max_tries
        self.backoff_factor = backoff_factor

    @classmethod
    def from_config(cls, config) -> "CheckpointClient":
        return cls(
            config["clients.cache_dir"],
            timeout=config["clients.timeout"],
            max_tries=config["clients.max_tries"],
        )

    def cache_path(self, url: str) -> Path:
        return self.cache_dir / url_key(url)

    async def _get(self, url, **kwargs):
        kwargs["follow_redirects"] = True
        async with httpx.AsyncClient(timeout=self.timeout) as client:
            response = await client.get(url, **kwargs)
        if response.status_code >= 500:
            raise ServerError(response)
        return response

    def _check_errors(self, url, response):
        if response.status_code == 404:
            raise InfoGatherError(f"Checkpoint not found: {url}")
        elif response.status_code != 200:
            raise InfoGatherError(
                f"Issue fetching checkpoint {url}: {response.status_code}: "
                f"{response.reason_phrase}"
            )

    async def _download(self, url: str, target: Path) -> None:
        retrying = backoff.on_exception(
            backoff.expo,
            (httpx.TransportError, ServerError),
            max_tries=self.max_tries,
            on_backoff=backoff_hdlr,
            on_giveup=giveup_hdlr,
            factor=self.backoff_factor,
        )(self._get)
        try:
            response = await retrying(url)
        except ServerError as e:
            response = e.response
        except httpx.TransportError as e:
            raise InfoGatherError(f"Could not reach {url}: {e}") from e
        self._check_errors(url, response)
        target.parent.mkdir(parents=True, exist_ok=True)
        partial = target.with_name(target.name + ".part")
        partial.write_bytes(response.content)
        partial.replace(target)

    async def fetch(self, url: str) -> Path:
        """
        Local path of a remote checkpoint, downloading it on first use.

        URLs ending in ``.pt`` are single weight files; any other URL is a checkpoint directory
        holding the manifest and the weights.
        """
        cached = self.cache_path(url)
        single = urlparse(url).path.endswith(".pt")
        wanted = [cached / WEIGHTS_FILE]
        if not single:
            wanted.append(cached / MANIFEST_FILE)
        if all(path.exists() for path in wanted):
            log.debug("Using cached checkpoint for %s", url)
        elif single:
            await self._download(url, cached / WEIGHTS_FILE)
        else:
            base = url.rstrip("/")
            await self._download(f"{base}/{MANIFEST_FILE}", cached / MANIFEST_FILE)
            await self._download(f"{base}/{WEIGHTS_FILE}", cached / WEIGHTS_FILE)
        if single:
            return cached / WEIGHTS_FILE
        log.info(f"Checkpoint {url} available at {cached}")
        return cached


def resolve_weights(ref: str | None, config) -> str | None:
    """A local path for a weights reference, which may be a path or an http(s) URL"""
    if not ref:
        return None
    if urlparse(ref).scheme in ("http", "https"):
        return str(asyncio.run(CheckpointClient.from_config(config).fetch(ref)))
    if not Path(ref).exists():
        raise CheckpointError(f"Weights not found: {ref}")
    return ref
