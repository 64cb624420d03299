"""Line-delimited request/response protocol for generator and scorer endpoints.

One JSON object per line in both directions, so any model runtime can serve
the pipeline over a subprocess pipe. Two request kinds exist: "generate"
returns sampled text ({"kind":"result"}), and "score" returns a full trace
record ({"kind":"trace"}). Servers answer malformed input with a
{"kind":"error"} record and stay up.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import sys
from dataclasses import dataclass, replace
from typing import Any, Callable, Protocol, TextIO

from .datamodel import ScoredTrace, canonical_dumps, decode_trace, encode_trace

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class GenRequest:
    """One sampled-generation request. The seed fully determines the output."""

    prompt: str
    temperature: float = 1.0
    top_p: float = 1.0
    max_tokens: int = 64
    seed: int = 0
    greedy: bool = False
    stop_markers: tuple[str, ...] = ()

    def with_seed(self, seed: int) -> "GenRequest":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class GenResponse:
    """Generated text plus how generation ended and the seed that produced it."""

    text: str
    finish_reason: str  # "stop" | "length" | "marker"
    seed: int


@dataclass(frozen=True)
class ScoreRequest:
    sample_id: str
    query_text: str
    response_text: str


class EndpointError(RuntimeError):
    """Endpoint misbehaved: protocol error record, dead process, or bad reply."""


def encode_gen_request(req: GenRequest) -> dict[str, Any]:
    return {
        "greedy": req.greedy,
        "kind": "generate",
        "max_tokens": req.max_tokens,
        "prompt": req.prompt,
        "seed": req.seed,
        "stop_markers": list(req.stop_markers),
        "temperature": req.temperature,
        "top_p": req.top_p,
    }


def decode_gen_request(obj: dict[str, Any]) -> GenRequest:
    return GenRequest(
        prompt=str(obj["prompt"]),
        temperature=float(obj.get("temperature", 1.0)),
        top_p=float(obj.get("top_p", 1.0)),
        max_tokens=int(obj.get("max_tokens", 64)),
        seed=int(obj.get("seed", 0)),
        greedy=bool(obj.get("greedy", False)),
        stop_markers=tuple(str(m) for m in obj.get("stop_markers", [])),
    )


def encode_score_request(req: ScoreRequest) -> dict[str, Any]:
    return {
        "kind": "score",
        "query_text": req.query_text,
        "response_text": req.response_text,
        "sample_id": req.sample_id,
    }


def decode_score_request(obj: dict[str, Any]) -> ScoreRequest:
    return ScoreRequest(
        sample_id=str(obj["sample_id"]),
        query_text=str(obj["query_text"]),
        response_text=str(obj["response_text"]),
    )


class Endpoint(Protocol):
    def generate(self, request: GenRequest) -> GenResponse: ...

    def score(self, request: ScoreRequest) -> ScoredTrace: ...

    def close(self) -> None: ...


class CallableEndpoint:
    """In-process endpoint wrapping handler callables; used by toy mode and tests."""

    def __init__(
        self,
        generate: Callable[[GenRequest], GenResponse] | None = None,
        score: Callable[[ScoreRequest], ScoredTrace] | None = None,
    ):
        self._generate = generate
        self._score = score

    def generate(self, request: GenRequest) -> GenResponse:
        if self._generate is None:
            raise EndpointError("endpoint does not serve generation")
        return self._generate(request)

    def score(self, request: ScoreRequest) -> ScoredTrace:
        if self._score is None:
            raise EndpointError("endpoint does not serve scoring")
        return self._score(request)

    def close(self) -> None:
        pass


class SubprocessEndpoint:
    """Endpoint over a child process's stdin/stdout pipe."""

    def __init__(self, argv: list[str]):
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )

    def _roundtrip(self, payload: dict[str, Any]) -> dict[str, Any]:
        proc = self._proc
        if proc.poll() is not None or proc.stdin is None or proc.stdout is None:
            raise EndpointError("endpoint process is not running")
        proc.stdin.write(canonical_dumps(payload) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise EndpointError("endpoint closed the pipe")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EndpointError(f"unparseable endpoint reply: {line[:120]!r}") from exc
        if not isinstance(reply, dict):
            raise EndpointError("endpoint reply is not an object")
        if reply.get("kind") == "error":
            raise EndpointError(f"endpoint error: {reply.get('message', 'unknown')}")
        return reply

    def generate(self, request: GenRequest) -> GenResponse:
        reply = self._roundtrip(encode_gen_request(request))
        if reply.get("kind") != "result":
            raise EndpointError(f"expected result record, got kind {reply.get('kind')!r}")
        return GenResponse(
            text=str(reply["text"]),
            finish_reason=str(reply.get("finish_reason", "stop")),
            seed=int(reply.get("seed", request.seed)),
        )

    def score(self, request: ScoreRequest) -> ScoredTrace:
        reply = self._roundtrip(encode_score_request(request))
        if reply.get("kind") != "trace":
            raise EndpointError(f"expected trace record, got kind {reply.get('kind')!r}")
        return decode_trace(reply["trace"])

    def close(self) -> None:
        proc = self._proc
        if proc.stdin is not None:
            try:
                proc.stdin.close()
            except OSError:
                pass
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()


def open_endpoint(locator: str) -> Endpoint:
    """Resolve an endpoint locator string.

    "cmd:<command line>" launches a subprocess speaking the line protocol.
    """
    if locator.startswith("cmd:"):
        argv = shlex.split(locator[len("cmd:") :])
        if not argv:
            raise ValueError("empty command in endpoint locator")
        return SubprocessEndpoint(argv)
    raise ValueError(f"unsupported endpoint locator {locator!r}")


class RequestHandler(Protocol):
    def generate(self, request: GenRequest) -> GenResponse: ...

    def score(self, request: ScoreRequest) -> ScoredTrace: ...


def serve_loop(handler: RequestHandler, in_stream: TextIO | None = None, out_stream: TextIO | None = None) -> None:
    """Serve line-protocol requests until the input stream closes.

    Malformed or failing requests produce an error record; the loop never
    dies on a single bad request.
    """
    in_stream = in_stream if in_stream is not None else sys.stdin
    out_stream = out_stream if out_stream is not None else sys.stdout

    def emit(obj: dict[str, Any]) -> None:
        out_stream.write(canonical_dumps(obj) + "\n")
        out_stream.flush()

    for line in in_stream:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("request is not an object")
            kind = obj.get("kind")
            if kind == "generate":
                response = handler.generate(decode_gen_request(obj))
                emit(
                    {
                        "finish_reason": response.finish_reason,
                        "kind": "result",
                        "seed": response.seed,
                        "text": response.text,
                    }
                )
            elif kind == "score":
                trace = handler.score(decode_score_request(obj))
                emit({"kind": "trace", "trace": encode_trace(trace)})
            elif kind == "shutdown":
                emit({"kind": "ok"})
                return
            else:
                raise ValueError(f"unknown request kind {kind!r}")
        except Exception as exc:  # noqa: BLE001 - protocol boundary
            emit({"kind": "error", "message": str(exc)})
