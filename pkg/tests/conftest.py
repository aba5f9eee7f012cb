import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from s2index.graph import TextualAttributedGraph

BRIDGE_EDGES = [("a", "b"), ("b", "c"), ("c", "a"), ("d", "e"), ("e", "f"), ("f", "d"), ("c", "d")]


@pytest.fixture
def triangle():
    return TextualAttributedGraph(
        [("a", "red apple"), ("b", "green pear"), ("c", "yellow lemon")],
        [("a", "b", "next to"), ("b", "c", None), ("c", "a", "rivals")],
    )


@pytest.fixture
def bridge():
    nodes = [(v, f"text {v}") for v in "abcdef"]
    return TextualAttributedGraph(nodes, [(u, v, f"{u}{v} link") for u, v in BRIDGE_EDGES])


@pytest.fixture
def bridge_emb():
    return np.eye(6)


class MockModelServer:
    """Scripted JSON embedding / chat server on localhost.

    ``script`` holds (status, body) pairs served in order; once it is empty
    embeddings are deterministic per text and chat echoes the prompt.
    """

    def __init__(self, dim=4):
        self.dim = dim
        self.script = []
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.requests.append((self.path, body, self.headers.get("Authorization")))
                if outer.script:
                    status, payload = outer.script.pop(0)
                else:
                    status, payload = 200, outer.default(self.path, body)
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def default(self, path, body):
        if path.endswith("/embeddings"):
            rows = []
            for i, text in enumerate(body["input"]):
                vec = [float(len(text) + 1)] + [float((sum(map(ord, text)) * (k + 3)) % 7) for k in range(self.dim - 1)]
                rows.append({"index": i, "embedding": vec})
            return {"data": rows}
        prompt = body["messages"][-1]["content"]
        return {"choices": [{"message": {"role": "assistant", "content": f"ECHO {prompt}"}}]}


@pytest.fixture
def mock_server():
    server = MockModelServer()
    server.thread.start()
    yield server
    server.httpd.shutdown()
    server.httpd.server_close()
