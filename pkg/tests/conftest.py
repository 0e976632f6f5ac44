import json

import pytest
import requests

from fault_service import build_fixture
from interposer import InterposerServer, create_interposer
from invariant_model import parse_config
from plugin_manager import PluginManager


@pytest.fixture(scope="session")
def plugins():
    manager = PluginManager()
    manager.discover_plugins()
    return manager


@pytest.fixture
def fixture_server():
    """A fault fixture on an ephemeral port, served from a background thread."""
    server = build_fixture(("127.0.0.1", 0))
    server.serve_in_thread()
    yield server
    if not server.crashed.is_set():
        server.shutdown()
        server.server_close()


def fixture_url(server, path: str) -> str:
    return f"http://127.0.0.1:{server.port}{path}"


def set_fault(server, kind: str, params: dict | None = None, seed: int = 0):
    response = requests.post(fixture_url(server, "/ctl/fault"),
                             data=json.dumps({"kind": kind, "params": params or {}, "seed": seed}), timeout=2)
    assert response.status_code == 200, response.text
    return response


def fixture_hits(server) -> int:
    return int(requests.get(fixture_url(server, "/ctl/hits"), timeout=2).text)


@pytest.fixture
def guarded(fixture_server):
    """
    Factory that puts an interposer in front of fixture_server for a config
    document. Returns (interposer, base_url).
    """
    started = []

    def start(config: dict, **kwargs):
        kwargs.setdefault("usage_poll", False)
        spec = parse_config(json.dumps(config))
        interposer = create_interposer(spec, ("127.0.0.1", fixture_server.port), **kwargs)
        server = InterposerServer(("127.0.0.1", 0), interposer)
        interposer.start()
        server.serve_in_thread()
        started.append((interposer, server))
        return interposer, f"http://127.0.0.1:{server.port}"

    yield start
    for interposer, server in started:
        server.shutdown()
        server.server_close()
        interposer.stop()
