import httpx
import pytest

from gt360.clients import CheckpointClient, resolve_weights
from gt360.clients.checkpoints import ServerError
from gt360.config import load_config
from gt360.exceptions import CheckpointError, InfoGatherError
from gt360.utils import url_key

BASE = "http://weights.example.com/gt360"


@pytest.fixture
def client(tmp_path):
    return CheckpointClient(tmp_path.joinpath("cache"), timeout=5.0, backoff_factor=0.001)


async def test_fetch_single_file(client, respx_mock, tmp_path):
    url = f"{BASE}/ec.pt"
    route = respx_mock.get(url).mock(return_value=httpx.Response(200, content=b"weights"))
    path = await client.fetch(url)
    assert path == tmp_path.joinpath("cache", url_key(url), "weights.pt")
    assert path.read_bytes() == b"weights"
    assert route.call_count == 1


async def test_fetch_directory(client, respx_mock):
    url = f"{BASE}/gaze/"
    respx_mock.get(f"{BASE}/gaze/manifest.json").mock(
        return_value=httpx.Response(200, content=b'{"kind": "gaze"}')
    )
    respx_mock.get(f"{BASE}/gaze/weights.pt").mock(
        return_value=httpx.Response(200, content=b"weights")
    )
    path = await client.fetch(url)
    assert path == client.cache_path(url)
    assert path.joinpath("manifest.json").read_text() == '{"kind": "gaze"}'
    assert path.joinpath("weights.pt").read_bytes() == b"weights"
    assert not list(path.glob("*.part"))


async def test_cached_checkpoint_is_reused(client, respx_mock):
    url = f"{BASE}/ec.pt"
    route = respx_mock.get(url).mock(return_value=httpx.Response(200, content=b"weights"))
    first = await client.fetch(url)
    second = await client.fetch(url)
    assert first == second
    assert route.call_count == 1


async def test_retries_server_errors(client, respx_mock):
    url = f"{BASE}/ec.pt"
    route = respx_mock.get(url).mock(
        side_effect=[httpx.Response(502), httpx.Response(200, content=b"weights")]
    )
    path = await client.fetch(url)
    assert path.read_bytes() == b"weights"
    assert route.call_count == 2


@pytest.mark.parametrize(
    "errorcode,expected_result",
    [
        (404, "Checkpoint not found: http://weights.example.com/gt360/ec.pt"),
        (403, "Issue fetching checkpoint .*: 403: Forbidden"),
        (503, "Issue fetching checkpoint .*: 503: Service Unavailable"),
    ],
)
async def test_errors(client, respx_mock, errorcode, expected_result):
    url = f"{BASE}/ec.pt"
    respx_mock.get(url).mock(return_value=httpx.Response(errorcode))
    with pytest.raises(InfoGatherError, match=expected_result):
        await client.fetch(url)
    assert not client.cache_path(url).joinpath("weights.pt").exists()


async def test_server_keeps_failing(client, respx_mock):
    url = f"{BASE}/ec.pt"
    route = respx_mock.get(url).mock(return_value=httpx.Response(500))
    with pytest.raises(InfoGatherError, match="500"):
        await client.fetch(url)
    assert route.call_count == client.max_tries


async def test_unreachable(client, respx_mock):
    url = f"{BASE}/ec.pt"
    respx_mock.get(url).mock(side_effect=httpx.ConnectError("connection refused"))
    with pytest.raises(InfoGatherError, match="Could not reach"):
        await client.fetch(url)


async def test_get_raises_on_server_error(client, respx_mock):
    respx_mock.get(BASE).mock(return_value=httpx.Response(500))
    with pytest.raises(ServerError):
        await client._get(BASE)


def test_from_config(tmp_path):
    environ = {"GT360_CLIENTS__CACHE_DIR": str(tmp_path), "GT360_CLIENTS__MAX_TRIES": "5"}
    config = load_config(environ=environ)
    client = CheckpointClient.from_config(config)
    assert client.cache_dir == tmp_path
    assert client.max_tries == 5
    assert client.timeout == 60.0


class TestResolveWeights:
    def test_nothing(self):
        assert resolve_weights(None, load_config()) is None
        assert resolve_weights("", load_config()) is None

    def test_local_path(self, tmp_path):
        assert resolve_weights(str(tmp_path), load_config()) == str(tmp_path)

    def test_missing_local_path(self, tmp_path):
        with pytest.raises(CheckpointError, match="Weights not found"):
            resolve_weights(str(tmp_path.joinpath("nope")), load_config())

    def test_url(self, respx_mock, tmp_path):
        url = f"{BASE}/ec.pt"
        respx_mock.get(url).mock(return_value=httpx.Response(200, content=b"weights"))
        config = load_config(environ={"GT360_CLIENTS__CACHE_DIR": str(tmp_path)})
        assert resolve_weights(url, config) == str(tmp_path.joinpath(url_key(url), "weights.pt"))
