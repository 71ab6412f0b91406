"""Black-box access to the victim with strict query-budget accounting.

Two interchangeable handles expose ``query``/``remaining``/``info``:
:class:`InProcessOracle` wraps a victim module directly, :class:`RemoteOracle`
talks to :func:`serve` over HTTP.

Wire protocol (version 1)::

    POST /v1/predict   body: .npz archive holding ``images`` (float32, B x H x W x C, values in [0, 1])
                       200 -> {"protocol", "detections": [{"probs": [...], "box": [...]}, ...], "remaining"}
                       400 -> malformed payload, budget untouched
                       429 -> {"error": "budget_exhausted", "remaining", "requested"}
                       every response carries the header X-Remaining-Budget
    GET  /v1/budget    -> {"allowed", "consumed", "remaining"}
    GET  /v1/info      -> {"protocol", "victim", "class_count", "input_shape"}
"""
from __future__ import annotations

import io
import json
import logging
import threading
import urllib.error
import urllib.request
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import torch

from .models import Detection

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
BUDGET_HEADER = "X-Remaining-Budget"


class OracleError(RuntimeError):
    pass


class BudgetExhausted(OracleError):
    def __init__(self, requested: int, remaining: int):
        super().__init__(f"query of {requested} images exceeds remaining budget {remaining}")
        self.requested = requested
        self.remaining = remaining


class TransportError(OracleError):
    """The oracle could not be reached or answered outside the protocol."""


class ProtocolError(OracleError):
    pass


class InvalidQuery(OracleError, ValueError):
    pass


class QueryBudget:
    """Linearizable counter of image-queries: ``0 <= consumed <= allowed``."""

    def __init__(self, allowed: int, consumed: int = 0):
        if allowed < 0 or not 0 <= consumed <= allowed:
            raise ValueError(f"invalid budget allowed={allowed} consumed={consumed}")
        self.allowed = int(allowed)
        self._consumed = int(consumed)
        self._lock = threading.Lock()

    @property
    def consumed(self) -> int:
        return self._consumed

    @property
    def remaining(self) -> int:
        with self._lock:
            return self.allowed - self._consumed

    def charge(self, n: int) -> int:
        """Atomically consume ``n`` queries or raise without consuming any."""
        with self._lock:
            left = self.allowed - self._consumed
            if n > left:
                raise BudgetExhausted(n, left)
            self._consumed += n
            return left - n

    def refund(self, n: int) -> None:
        with self._lock:
            self._consumed -= n


def validate_batch(batch, input_shape) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(input_shape):
        raise InvalidQuery(f"expected batch of shape (B, {', '.join(map(str, input_shape))}), got {x.shape}")
    if x.shape[0] == 0:
        raise InvalidQuery("empty batch")
    if x.dtype.kind != "f":
        raise InvalidQuery(f"expected floating-point pixels, got {x.dtype}")
    x = x.astype(np.float32, copy=False)
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise InvalidQuery("pixel values must be finite and within [0, 1]")
    return x


class InProcessOracle:
    """Prediction-only wrapper around a frozen victim living in this process."""

    transport = "in-process"

    def __init__(self, victim: torch.nn.Module, budget: int | QueryBudget, identity: str = "victim"):
        self._victim = victim.eval()
        for p in self._victim.parameters():
            p.requires_grad_(False)
        self.budget = budget if isinstance(budget, QueryBudget) else QueryBudget(budget)
        self.identity = identity
        spec = victim.spec
        self._info = {
            "protocol": PROTOCOL_VERSION,
            "victim": identity,
            "class_count": spec.class_count,
            "input_shape": [spec.image_side, spec.image_side, spec.image_channels],
        }

    def info(self) -> dict:
        return dict(self._info)

    def remaining(self) -> int:
        return self.budget.remaining

    @torch.no_grad()
    def _predict(self, x: np.ndarray) -> Detection:
        det = self._victim.detect(torch.from_numpy(np.ascontiguousarray(x)))
        return Detection(det.probs.detach().clone(), det.box.detach().clone())

    def query(self, batch, charge: bool = True) -> Detection:
        """Predict on ``batch``; charges one query per image unless ``charge`` is False.

        ``charge=False`` is for the experimenter's own evaluation and is not
        reachable over the wire.
        """
        if isinstance(batch, torch.Tensor):
            batch = batch.detach().cpu().numpy()
        x = validate_batch(batch, self._info["input_shape"])
        n = x.shape[0]
        if charge:
            self.budget.charge(n)
        try:
            return self._predict(x)
        except Exception:
            if charge:
                self.budget.refund(n)
            raise


# ---------------------------------------------------------------------------
# HTTP service

def encode_batch(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.savez_compressed(buf, images=np.ascontiguousarray(x, dtype=np.float32))
    return buf.getvalue()


def decode_batch(payload: bytes) -> np.ndarray:
    try:
        with np.load(io.BytesIO(payload), allow_pickle=False) as z:
            return z["images"]
    except Exception as exc:
        raise InvalidQuery(f"cannot decode image payload: {exc}") from exc


def _make_handler(oracle: InProcessOracle):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s - " + fmt, self.address_string(), *args)

        def _send(self, status: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.send_header(BUDGET_HEADER, str(oracle.remaining()))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/v1/info":
                self._send(200, oracle.info())
            elif self.path == "/v1/budget":
                b = oracle.budget
                with b._lock:
                    body = {"allowed": b.allowed, "consumed": b.consumed, "remaining": b.allowed - b.consumed}
                self._send(200, body)
            else:
                self._send(404, {"error": "not_found"})

        def do_POST(self):
            length = int(self.headers.get("Content-Length") or 0)
            payload = self.rfile.read(length)
            if self.path != "/v1/predict":
                self._send(404, {"error": "not_found"})
                return
            try:
                det = oracle.query(decode_batch(payload))
            except InvalidQuery as exc:
                self._send(400, {"error": "malformed_request", "detail": str(exc)})
                return
            except BudgetExhausted as exc:
                self._send(429, {"error": "budget_exhausted", "remaining": exc.remaining, "requested": exc.requested})
                return
            except Exception as exc:  # victim failure
                log.exception("prediction failed")
                self._send(500, {"error": "internal", "detail": str(exc)})
                return
            probs = det.probs.double().tolist()
            boxes = det.box.double().tolist()
            self._send(200, {
                "protocol": PROTOCOL_VERSION,
                "detections": [{"probs": p, "box": b} for p, b in zip(probs, boxes)],
                "remaining": oracle.remaining(),
            })

    return Handler


class OracleServer:
    """A running prediction service; ``url`` is its base address."""

    def __init__(self, oracle: InProcessOracle, host: str = "127.0.0.1", port: int = 0):
        self.oracle = oracle
        try:
            self.httpd = ThreadingHTTPServer((host, port), _make_handler(oracle))
        except OSError as exc:
            raise OracleError(f"cannot bind {host}:{port}: {exc}") from exc
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "OracleServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start() if self._thread is None else self

    def __exit__(self, *exc):
        self.shutdown()


def serve(victim, bind: str = "127.0.0.1:0", budget: int = 5_000_000, identity: str | None = None) -> OracleServer:
    """Build (but do not start) a service for a victim module or checkpoint path."""
    from .models import load_network

    if not isinstance(victim, torch.nn.Module):
        identity = identity or str(victim)
        victim = load_network(victim)
    host, _, port = bind.rpartition(":")
    return OracleServer(InProcessOracle(victim, budget, identity or "victim"), host or "127.0.0.1", int(port or 0))


class RemoteOracle:
    """Client handle speaking the v1 wire protocol; safe to share across threads."""

    transport = "remote"

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self._info = self._get("/v1/info")
        if self._info.get("protocol") != PROTOCOL_VERSION:
            raise ProtocolError(f"server speaks protocol {self._info.get('protocol')}, client {PROTOCOL_VERSION}")
        self.identity = self._info.get("victim", self.url)

    def _request(self, path: str, data: bytes | None = None) -> tuple[int, dict]:
        req = urllib.request.Request(self.url + path, data=data, method="POST" if data is not None else "GET")
        if data is not None:
            req.add_header("Content-Type", "application/x-npz")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            try:
                body = json.loads(exc.read())
            except ValueError:
                body = {}
            return exc.code, body
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise TransportError(f"{self.url}{path}: {exc}") from exc

    def _get(self, path: str) -> dict:
        status, body = self._request(path)
        if status != 200:
            raise TransportError(f"GET {path} returned {status}: {body}")
        return body

    def info(self) -> dict:
        return dict(self._info)

    def remaining(self) -> int:
        return int(self._get("/v1/budget")["remaining"])

    def query(self, batch) -> Detection:
        if isinstance(batch, torch.Tensor):
            batch = batch.detach().cpu().numpy()
        status, body = self._request("/v1/predict", encode_batch(np.asarray(batch, dtype=np.float32)))
        if status == 200:
            dets = body["detections"]
            probs = torch.tensor([d["probs"] for d in dets], dtype=torch.float32)
            boxes = torch.tensor([d["box"] for d in dets], dtype=torch.float32)
            return Detection(probs, boxes)
        if status == HTTPStatus.TOO_MANY_REQUESTS and body.get("error") == "budget_exhausted":
            raise BudgetExhausted(int(body["requested"]), int(body["remaining"]))
        if status == 400:
            raise InvalidQuery(body.get("detail", "malformed request"))
        raise TransportError(f"predict returned {status}: {body}")


def connect(url: str, timeout: float = 60.0) -> RemoteOracle:
    return RemoteOracle(url, timeout)
