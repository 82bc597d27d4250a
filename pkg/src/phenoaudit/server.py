"""Blinded review service.

Serves packets to authenticated reviewers and records their verdicts in an
append-only JSONL log. The service never handles model probabilities, bins,
directions, or diabetes codes: packets are blinded before they reach it, and
progress reporting only joins tokens back to bins when the process was
started in owner mode and the caller presents the owner token.

Endpoints (JSON over HTTP/1.1):

* ``GET /health`` -> ``{"version": ...}``
* ``GET /next`` (Bearer reviewer token) -> packet | ``{"done": true}``
* ``POST /judgment`` ``{token, verdict, confidence}`` -> ``{"ok": true}``
* ``GET /progress`` -> per-reviewer counts (bins only for the owner)
* ``GET /export`` (owner mode + owner token) -> raw judgment log

Judgments are flushed and fsynced before the acknowledgment is sent; exact
duplicates are acknowledged without re-logging; a resubmission that changes
the verdict is rejected with 409. Each reviewer walks the packets in a
private deterministic shuffle, one packet at a time.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from . import __version__
from .audit import CONFIDENCES, VERDICTS, load_packets, load_token_map
from .errors import ValidationError


class ServerConfig:
    def __init__(
        self,
        packets_path,
        log_path,
        reviewers: dict[str, str],
        owner_token: str = "",
        host: str = "127.0.0.1",
        port: int = 8350,
        owner_mode: bool = False,
        token_map_path=None,
        discordant_bins_path=None,
    ):
        if not reviewers:
            raise ValidationError("server config needs at least one reviewer token")
        self.packets_path = Path(packets_path)
        self.log_path = Path(log_path)
        self.reviewers = dict(reviewers)
        self.owner_token = owner_token
        self.host = host
        self.port = port
        self.owner_mode = owner_mode
        self.token_map_path = Path(token_map_path) if token_map_path else None
        self.discordant_bins_path = (
            Path(discordant_bins_path) if discordant_bins_path else None
        )

    @classmethod
    def from_file(cls, path, owner_mode: bool = False, port: int | None = None):
        payload = json.loads(Path(path).read_text())
        base = Path(path).resolve().parent

        def resolve(p):
            return None if p is None else (base / p if not os.path.isabs(str(p)) else Path(p))

        return cls(
            packets_path=resolve(payload["packets"]),
            log_path=resolve(payload["log"]),
            reviewers=payload["reviewers"],
            owner_token=payload.get("owner_token", ""),
            host=payload.get("host", "127.0.0.1"),
            port=port if port is not None else payload.get("port", 8350),
            owner_mode=owner_mode,
            token_map_path=resolve(payload.get("token_map")),
            discordant_bins_path=resolve(payload.get("discordant")),
        )


class JudgmentLog:
    """Append-only, fsynced, single-writer judgment store."""

    def __init__(self, path: Path):
        self.path = path
        self.lock = threading.Lock()
        # (reviewer, token) -> (verdict, confidence)
        self.seen: dict[tuple[str, str], tuple[str, str]] = {}
        self.count_per_reviewer: dict[str, int] = {}
        self.tokens_per_reviewer: dict[str, set] = {}
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._remember(json.loads(line))

    def _remember(self, payload: dict):
        key = (payload["reviewer"], payload["token"])
        self.seen[key] = (payload["verdict"], payload["confidence"])
        self.count_per_reviewer[payload["reviewer"]] = (
            self.count_per_reviewer.get(payload["reviewer"], 0) + 1
        )
        self.tokens_per_reviewer.setdefault(payload["reviewer"], set()).add(payload["token"])

    def judged(self, reviewer: str, token: str) -> bool:
        return (reviewer, token) in self.seen

    def append(self, reviewer: str, token: str, verdict: str, confidence: str) -> str:
        """Returns 'ok', 'duplicate', or 'conflict'."""
        key = (reviewer, token)
        with self.lock:
            if key in self.seen:
                return "duplicate" if self.seen[key] == (verdict, confidence) else "conflict"
            payload = {
                "token": token,
                "reviewer": reviewer,
                "verdict": verdict,
                "confidence": confidence,
                "timestamp": int(time.time()),
            }
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(payload) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._remember(payload)
            return "ok"


def _reviewer_order(reviewer_id: str, n: int) -> list[int]:
    """Deterministic per-reviewer packet order, stable across restarts."""
    digest = hashlib.sha256(f"order:{reviewer_id}".encode()).digest()
    seed = int.from_bytes(digest[:8], "little")
    import numpy as np

    return list(np.random.default_rng(seed).permutation(n))


def create_app(config: ServerConfig) -> FastAPI:
    packets = load_packets(config.packets_path)
    by_token = {p["token"]: p for p in packets}
    if len(by_token) != len(packets):
        raise ValidationError("duplicate packet tokens in packets file")
    config.log_path.parent.mkdir(parents=True, exist_ok=True)
    log = JudgmentLog(config.log_path)
    token_to_reviewer = {tok: name for name, tok in config.reviewers.items()}
    orders = {name: _reviewer_order(name, len(packets)) for name in config.reviewers}

    token_bins = {}
    if config.owner_mode and config.token_map_path and config.discordant_bins_path:
        token_map = load_token_map(config.token_map_path)
        bins_by_encounter = {}
        for line in Path(config.discordant_bins_path).read_text().splitlines()[1:]:
            if line.strip():
                parts = line.rstrip("\r").split(",")
                bins_by_encounter[parts[0]] = parts[4]
        token_bins = {
            tok: bins_by_encounter.get(eid) for tok, eid in token_map.items()
        }

    app = FastAPI(title="phenoaudit-review", docs_url=None, redoc_url=None)
    # the console is served from its own origin (file:// or a static host)
    from fastapi.middleware.cors import CORSMiddleware

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["Authorization", "Content-Type"],
    )

    def bearer(request: Request) -> str | None:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            return header[7:].strip()
        return None

    def reviewer_of(request: Request) -> str | None:
        token = bearer(request)
        return token_to_reviewer.get(token) if token else None

    def is_owner(request: Request) -> bool:
        return (
            config.owner_mode
            and bool(config.owner_token)
            and bearer(request) == config.owner_token
        )

    @app.get("/health")
    def health():
        return {"version": __version__, "packets": len(packets)}

    @app.get("/next")
    def next_case(request: Request):
        reviewer = reviewer_of(request)
        if reviewer is None:
            return JSONResponse({"error": "unknown reviewer token"}, status_code=401)
        for idx in orders[reviewer]:
            packet = packets[idx]
            if not log.judged(reviewer, packet["token"]):
                done = len(log.tokens_per_reviewer.get(reviewer, ()))
                return {"packet": packet, "position": done + 1, "total": len(packets)}
        return {"done": True, "total": len(packets)}

    @app.post("/judgment")
    async def submit_judgment(request: Request):
        reviewer = reviewer_of(request)
        if reviewer is None:
            return JSONResponse({"error": "unknown reviewer token"}, status_code=401)
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "invalid JSON body"}, status_code=400)
        token = body.get("token")
        verdict = body.get("verdict")
        confidence = body.get("confidence")
        if token not in by_token:
            return JSONResponse({"error": "unknown case token"}, status_code=404)
        if verdict not in VERDICTS:
            return JSONResponse(
                {"error": f"verdict must be one of {list(VERDICTS)}"}, status_code=400
            )
        if confidence not in CONFIDENCES:
            return JSONResponse(
                {"error": f"confidence must be one of {list(CONFIDENCES)}"}, status_code=400
            )
        outcome = log.append(reviewer, token, verdict, confidence)
        if outcome == "conflict":
            return JSONResponse(
                {"error": "case already judged with a different verdict"}, status_code=409
            )
        return {"ok": True, "duplicate": outcome == "duplicate"}

    @app.get("/progress")
    def progress(request: Request):
        per_reviewer = {
            name: log.count_per_reviewer.get(name, 0) for name in config.reviewers
        }
        body = {
            "per_reviewer": per_reviewer,
            "total_judgments": sum(per_reviewer.values()),
            "n_packets": len(packets),
        }
        if is_owner(request) and token_bins:
            per_bin: dict[str, int] = {}
            for tokens in log.tokens_per_reviewer.values():
                for tok in tokens:
                    b = token_bins.get(tok)
                    if b:
                        per_bin[b] = per_bin.get(b, 0) + 1
            body["per_bin"] = dict(sorted(per_bin.items()))
        return body

    @app.get("/export")
    def export(request: Request):
        if not is_owner(request):
            return JSONResponse({"error": "owner token required"}, status_code=403)
        text = config.log_path.read_text(encoding="utf-8") if config.log_path.exists() else ""
        return PlainTextResponse(text, media_type="application/jsonl")

    return app


def serve(config: ServerConfig) -> None:
    """Run the service until interrupted (blocking)."""
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


def write_server_config(
    path,
    packets="packets.jsonl",
    log="judgments.jsonl",
    reviewers: dict[str, str] | None = None,
    owner_token: str = "owner-secret",
    token_map="token_map.csv",
    discordant="discordant.csv",
    port: int = 8350,
) -> None:
    payload = {
        "host": "127.0.0.1",
        "port": port,
        "reviewers": reviewers or {"reviewer-1": "token-reviewer-1"},
        "owner_token": owner_token,
        "packets": str(packets),
        "log": str(log),
        "token_map": str(token_map),
        "discordant": str(discordant),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
