"""A local HTTP server implementing the /embed protocol, for client tests."""
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

FIXTURE = {"doctor": [3.0, 4.0, 0.0], "pedestrian": [0.0, 0.0, 2.0], "hospital": [1.0, 1.0, 1.0]}


class StubServer:
    """Local HTTP server implementing the /embed protocol with scripted faults."""

    def __init__(self, mode="ok"):
        self.mode = mode
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((self.path, body))
                if stub.mode == "5xx":
                    self.send_response(503)
                    self.end_headers()
                    return
                if stub.mode == "slow":
                    time.sleep(1.0)
                vecs = {lab: FIXTURE[lab] for lab in body["labels"] if lab in FIXTURE}
                if stub.mode == "missing":
                    vecs.pop(body["labels"][-1])
                payload = b"{not json" if stub.mode == "garbage" else json.dumps({"dim": 3, "vectors": vecs}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                try:
                    self.wfile.write(payload)
                except (BrokenPipeError, ConnectionResetError):
                    pass

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
