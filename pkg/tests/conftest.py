import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from smilegeo.agents import AgentId, AgentProfile, ImageRef, SimWorld, SimulatedAgent, corpus_from_gazetteer

from helpers import city_gazetteer



@pytest.fixture
def gazetteer():
    return city_gazetteer()


@pytest.fixture
def world(gazetteer):
    return SimWorld(gazetteer, th=50.0, corpus=corpus_from_gazetteer(gazetteer), retrieval_bonus=0.15)


@pytest.fixture
def make_agent(world):
    def make(index=0, home=("fr",), home_acc=0.9, away_acc=0.2, seed=1, persuadability=0.5, name=None):
        profile = AgentProfile(tuple(home), home_acc, away_acc, seed, persuadability)
        return SimulatedAgent(AgentId(index, name or f"agent{index}"), profile, world)
    return make


@pytest.fixture
def paris_image():
    return ImageRef("img-1", seed=11, region_key="fr", truth_text="Eiffel Tower, Paris", caption="tower by the river")


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        self.server.requests.append((self.path, body))
        status, payload = self.server.reply(body)
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    """A local agent server; set ``server.reply = lambda body: (status, payload)``."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.requests = []
    server.reply = lambda body: (200, {"location": "Paris, France", "confidence": 80, "explanation": "tower"})
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    server.url = f"http://127.0.0.1:{server.server_address[1]}"
    yield server
    server.shutdown()
    server.server_close()
