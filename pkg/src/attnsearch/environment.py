"""Where validation rewards come from, and how the reward terms combine.

Two sources of ``g_val`` are provided: ``PlantedEnv``, a seeded synthetic
landscape with known optimum, and ``ExternalEvaluator``, a client for any
process that speaks the newline-delimited JSON protocol below.

Protocol (UTF-8, one JSON object per line, same over pipes and TCP)::

    request:  {"id": <uint64>, "op": "eval", "scheme": "<scheme text>"}
    response: {"id": <uint64>, "g_val": <float in [0, 1]>}
    error:    {"id": <uint64>, "error": "<message>"}
"""

from __future__ import annotations

import json
import logging
import math
import queue
import shlex
import socket
import socketserver
import subprocess
import sys
import threading
from dataclasses import dataclass, field

import numpy as np

from .scheme import ConnectionScheme, decode, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 0.1

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError(f"reward weights must be finite and nonnegative: {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one reward weight must be positive")

    def as_dict(self):
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3}


@dataclass(frozen=True)
class RewardBreakdown:
    g_spa: float
    g_val: float
    g_rnd: float
    total: float


def combine_reward(w, g_spa, g_val, g_rnd):
    terms = (g_spa, g_val, g_rnd)
    if not all(math.isfinite(t) for t in terms):
        raise ValueError(f"non-finite reward term in {terms}")
    total = w.lambda1 * g_spa + w.lambda2 * g_val + w.lambda3 * g_rnd
    return RewardBreakdown(float(g_spa), float(g_val), float(g_rnd), float(total))


# -- planted landscape ------------------------------------------------------

@dataclass
class PlantedEnv:
    """g_val(a) = clip(base + sum u_i a_i + sum_{i<j} J_ij a_i a_j + noise, 0, 1)."""

    utilities: np.ndarray
    interactions: np.ndarray
    base: float = 0.5
    noise_std: float = 0.01
    seed: int | None = None
    _pairs: list = field(init=False, repr=False)

    def __post_init__(self):
        self.utilities = np.asarray(self.utilities, dtype=np.float64)
        m = self.utilities.size
        J = np.asarray(self.interactions, dtype=np.float64)
        if J.shape != (m, m) or not np.array_equal(J, J.T):
            raise ValueError("interaction matrix must be symmetric m x m")
        if np.any(np.diag(J) != 0):
            raise ValueError("interaction matrix must have a zero diagonal")
        self.interactions = J
        self._pairs = [(i, j, float(J[i, j])) for i in range(m) for j in range(i + 1, m)
                       if J[i, j] != 0]

    @property
    def m(self):
        return self.utilities.size

    @classmethod
    def generate(cls, m=18, seed=0, n_interactions=4, noise_std=0.01, base=None,
                 utility_scale=None, interaction_scale=None, ceiling=0.95):
        """Random landscape with utilities and interactions drawn from U(-s, s).

        ``s`` defaults to 2.5/m so the total spread of the landscape does not
        depend on m. With ``base=None`` the base value is set so that the best
        achievable noiseless value is at most ``ceiling``; the optimum then
        never sits on the upper clamp.
        """
        rng = np.random.default_rng(seed)
        s = 2.5 / m if utility_scale is None else utility_scale
        js = s if interaction_scale is None else interaction_scale
        u = rng.uniform(-s, s, size=m)
        J = np.zeros((m, m))
        pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
        n_interactions = min(n_interactions, len(pairs))
        if n_interactions:
            chosen = rng.choice(len(pairs), size=n_interactions, replace=False)
            for k in sorted(chosen.tolist()):
                i, j = pairs[k]
                J[i, j] = J[j, i] = rng.uniform(-js, js)
        if base is None:
            base = ceiling - np.maximum(u, 0).sum() - np.maximum(np.triu(J), 0).sum()
        return cls(u, J, float(base), noise_std, seed)

    def _bits(self, scheme):
        a = scheme.bits if isinstance(scheme, ConnectionScheme) else tuple(int(b) for b in scheme)
        if len(a) != self.m:
            raise ValueError(f"scheme has {len(a)} bits, environment has {self.m}")
        return a

    def _sum(self, a):
        # fixed summation order; batch_noiseless repeats it exactly
        s = float(self.base)
        for i in range(self.m):
            s += float(self.utilities[i]) * a[i]
        for i, j, v in self._pairs:
            s += v * (a[i] * a[j])
        return s

    def noiseless(self, scheme):
        return min(max(self._sum(self._bits(scheme)), 0.0), 1.0)

    def batch_noiseless(self, bits):
        bits = np.asarray(bits)
        s = np.full(bits.shape[0], float(self.base))
        for i in range(self.m):
            s += float(self.utilities[i]) * bits[:, i].astype(np.float64)
        for i, j, v in self._pairs:
            s += v * (bits[:, i] * bits[:, j]).astype(np.float64)
        return np.clip(s, 0.0, 1.0)

    def evaluate(self, scheme, noisy=False, rng=None):
        if not noisy or self.noise_std == 0:
            return self.noiseless(scheme)
        s = self._sum(self._bits(scheme)) + float(rng.normal(0.0, self.noise_std))
        return min(max(s, 0.0), 1.0)


def planted_eval(env, scheme, noisy=False, rng=None):
    return env.evaluate(scheme, noisy, rng)


# -- wire protocol ----------------------------------------------------------

class TransportError(ConnectionError):
    pass


class ProtocolError(ValueError):
    def __init__(self, message, raw=None):
        super().__init__(message if raw is None else f"{message}: {raw!r}")
        self.raw = raw


def make_request(req_id, scheme):
    text = scheme if isinstance(scheme, str) else encode(scheme)
    return json.dumps({"id": req_id, "op": "eval", "scheme": text}) + "\n"


def handle_request_line(line, handler):
    """Answer one request line with ``handler(scheme) -> g_val``; returns the response line."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        return json.dumps({"id": None, "error": f"bad json: {exc}"}) + "\n"
    req_id = msg.get("id") if isinstance(msg, dict) else None
    try:
        if not isinstance(msg, dict) or msg.get("op") != "eval":
            raise ValueError(f"unsupported op {msg.get('op') if isinstance(msg, dict) else msg!r}")
        g_val = float(handler(decode(msg["scheme"])))
        return json.dumps({"id": req_id, "g_val": g_val}) + "\n"
    except Exception as exc:  # reported to the client, the server keeps running
        return json.dumps({"id": req_id, "error": str(exc)}) + "\n"


def serve_stream(handler, infile=None, outfile=None):
    """Serve requests from ``infile`` until EOF (defaults: stdin/stdout)."""
    infile = infile or sys.stdin
    outfile = outfile or sys.stdout
    for line in infile:
        if not line.strip():
            continue
        outfile.write(handle_request_line(line, handler))
        outfile.flush()


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8")
            if not line.strip():
                continue
            with self.server.handler_lock:
                resp = handle_request_line(line, self.server.eval_handler)
            self.wfile.write(resp.encode("utf-8"))
            self.wfile.flush()


class ProtocolServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, handler):
        super().__init__(address, _TcpHandler)
        self.eval_handler = handler
        self.handler_lock = threading.Lock()


def serve_tcp(handler, host="127.0.0.1", port=0):
    """Start a TCP protocol server in a background thread; returns the server."""
    server = ProtocolServer((host, port), handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


def _reader(stream, q):
    try:
        for raw in iter(stream.readline, b""):
            q.put(raw)
    except (OSError, ValueError):
        pass
    q.put(None)


def parse_endpoint(endpoint):
    """``tcp://host:port`` or ``exec:<command line>`` -> (transport, target)."""
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp endpoint {endpoint!r}")
        return "tcp", (host, int(port))
    if endpoint.startswith("exec:"):
        cmd = shlex.split(endpoint[len("exec:"):])
        if not cmd:
            raise ValueError("empty exec endpoint")
        return "stdio", cmd
    raise ValueError(f"unknown endpoint {endpoint!r}; expected tcp://host:port or exec:<cmd>")


class ExternalEvaluator:
    """Client for one protocol connection with at most one request in flight."""

    def __init__(self, endpoint, timeout=30.0, retries=2):
        self.endpoint = endpoint
        self.transport, self.target = parse_endpoint(endpoint)
        self.timeout = float(timeout)
        self.retries = int(retries)
        self._next_id = 1
        self._abandoned = set()
        self._lock = threading.Lock()
        self._proc = None
        self._sock = None
        self._out = None
        self._lines = None

    def connect(self):
        self._lines = queue.Queue()
        try:
            if self.transport == "stdio":
                self._proc = subprocess.Popen(
                    self.target, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0,
                )
                self._out = self._proc.stdin
                src = self._proc.stdout
            else:
                self._sock = socket.create_connection(self.target, timeout=self.timeout)
                self._sock.settimeout(None)
                self._out = self._sock.makefile("wb", buffering=0)
                src = self._sock.makefile("rb")
        except OSError as exc:
            raise TransportError(f"cannot reach {self.endpoint}: {exc}") from exc
        threading.Thread(target=_reader, args=(src, self._lines), daemon=True).start()
        return self

    def close(self):
        if self._out is not None:
            try:
                self._out.close()
            except OSError:
                pass
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._out = self._sock = self._proc = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def _send(self, line):
        try:
            self._out.write(line.encode("utf-8"))
            self._out.flush()
        except (OSError, ValueError) as exc:
            raise TransportError(f"write to {self.endpoint} failed: {exc}") from exc

    def _await(self, req_id):
        while True:
            try:
                raw = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                return None
            if raw is None:
                raise TransportError(f"{self.endpoint} closed the connection")
            line = raw.decode("utf-8", errors="replace").rstrip("\n")
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                raise ProtocolError("malformed response", line) from None
            if not isinstance(msg, dict) or "id" not in msg:
                raise ProtocolError("response without id", line)
            if msg["id"] in self._abandoned:
                # late answer to a request we already gave up on
                self._abandoned.discard(msg["id"])
                continue
            if msg["id"] != req_id:
                raise ProtocolError(f"id mismatch (expected {req_id})", line)
            if "error" in msg:
                raise ProtocolError(f"evaluator error: {msg['error']}", line)
            g_val = msg.get("g_val")
            if isinstance(g_val, bool) or not isinstance(g_val, (int, float)):
                raise ProtocolError("missing or non-numeric g_val", line)
            g_val = float(g_val)
            if not (0.0 <= g_val <= 1.0):
                raise ProtocolError("g_val outside [0, 1]", line)
            return g_val

    def evaluate(self, scheme):
        if self._lines is None:
            raise TransportError("evaluator is not connected")
        with self._lock:
            for _ in range(self.retries + 1):
                req_id = self._next_id
                self._next_id += 1
                self._send(make_request(req_id, scheme))
                result = self._await(req_id)
                if result is not None:
                    return result
                log.warning("request %d to %s timed out", req_id, self.endpoint)
                self._abandoned.add(req_id)
            raise TransportError(
                f"{self.endpoint}: no response after {self.retries + 1} attempts"
            )


def external_eval(ev, scheme):
    return ev.evaluate(scheme)


def evaluate_concurrently(evaluators, schemes):
    """Score ``schemes`` spreading them over several connections; results keep input order."""
    results = [None] * len(schemes)
    work = queue.Queue()
    for i, s in enumerate(schemes):
        work.put((i, s))
    errors = []

    def worker(ev):
        while True:
            try:
                i, s = work.get_nowait()
            except queue.Empty:
                return
            try:
                results[i] = ev.evaluate(s)
            except Exception as exc:
                errors.append(exc)
                return

    threads = [threading.Thread(target=worker, args=(ev,)) for ev in evaluators]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results
