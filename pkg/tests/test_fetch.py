"""Hub fetch against a local HTTP server: cache hits, single-download
coordination, redirects, and the error kinds the CLI maps to exit codes."""

import threading
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from encbench.checkpoint import (
    DownloadIntegrityError,
    HubError,
    HubLocation,
    OfflineCacheMissError,
    cache_path,
    fetch,
)

PAYLOAD = b"tensor bytes " * 64


class Handler(BaseHTTPRequestHandler):
    requests: list[str] = []
    lock = threading.Lock()

    def do_GET(self):
        with Handler.lock:
            Handler.requests.append(self.path)
        if self.path.endswith("missing.bin"):
            self.send_error(404)
            return
        if self.path.endswith("moved.bin"):
            self.send_response(302)
            self.send_header("Location", self.path.replace("moved.bin", "model.bin"))
            self.end_headers()
            return
        if self.path.endswith("short.bin"):
            self.send_response(200)
            self.send_header("Content-Length", str(len(PAYLOAD) + 100))
            self.end_headers()
            self.wfile.write(PAYLOAD)
            return
        self.send_response(200)
        self.send_header("Content-Length", str(len(PAYLOAD)))
        self.send_header("ETag", '"abc123"')
        self.end_headers()
        self.wfile.write(PAYLOAD)

    def log_message(self, *args):
        pass


@pytest.fixture()
def hub(monkeypatch):
    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    Handler.requests = []
    monkeypatch.setenv("ENCBENCH_HUB_URL", f"http://127.0.0.1:{server.server_port}")
    monkeypatch.delenv("ENCBENCH_OFFLINE", raising=False)
    yield server
    server.shutdown()


def test_fetch_downloads_and_caches(hub, tmp_path):
    loc = HubLocation("owner/model", "main", "model.bin")
    path = fetch(loc, cache_dir=tmp_path)
    assert path.read_bytes() == PAYLOAD
    assert path == cache_path(loc, tmp_path)
    assert len(Handler.requests) == 1

    again = fetch(loc, cache_dir=tmp_path)
    assert again == path
    assert len(Handler.requests) == 1  # cache hit makes zero network calls


def test_fetch_records_etag(hub, tmp_path):
    loc = HubLocation("owner/model", "main", "model.bin")
    path = fetch(loc, cache_dir=tmp_path)
    assert path.with_name("model.bin.etag").read_text() == '"abc123"'


def test_concurrent_fetch_downloads_once(hub, tmp_path):
    loc = HubLocation("owner/model", "v2", "model.bin")
    with ThreadPoolExecutor(max_workers=8) as pool:
        paths = list(pool.map(lambda _: fetch(loc, cache_dir=tmp_path), range(8)))
    assert all(p.read_bytes() == PAYLOAD for p in paths)
    assert len(Handler.requests) == 1


def test_fetch_follows_redirect(hub, tmp_path):
    loc = HubLocation("owner/model", "main", "moved.bin")
    path = fetch(loc, cache_dir=tmp_path)
    assert path.read_bytes() == PAYLOAD
    assert len(Handler.requests) == 2


def test_404_carries_status(hub, tmp_path):
    with pytest.raises(HubError) as err:
        fetch(HubLocation("owner/model", "main", "missing.bin"), cache_dir=tmp_path)
    assert err.value.status == 404
    assert "missing.bin" in err.value.url


def test_length_mismatch_rejected_and_nothing_cached(hub, tmp_path):
    loc = HubLocation("owner/model", "main", "short.bin")
    with pytest.raises(DownloadIntegrityError):
        fetch(loc, cache_dir=tmp_path)
    assert not cache_path(loc, tmp_path).exists()


def test_offline_cache_miss(hub, tmp_path):
    with pytest.raises(OfflineCacheMissError):
        fetch(HubLocation("owner/model", "main", "model.bin"), cache_dir=tmp_path,
              offline=True)
    assert len(Handler.requests) == 0


def test_offline_cache_hit(hub, tmp_path, monkeypatch):
    loc = HubLocation("owner/model", "main", "model.bin")
    fetch(loc, cache_dir=tmp_path)
    monkeypatch.setenv("ENCBENCH_OFFLINE", "1")
    path = fetch(loc, cache_dir=tmp_path)
    assert path.read_bytes() == PAYLOAD
    assert len(Handler.requests) == 1


def test_hub_location_rejects_traversal():
    with pytest.raises(ValueError):
        HubLocation("owner/../etc", "main", "model.bin")
    with pytest.raises(ValueError):
        HubLocation("owner/model", "main", "../secrets")
    with pytest.raises(ValueError):
        HubLocation("", "main", "model.bin")
