"""WebSocket chat endpoint around a loaded dialog system.

Frame protocol (JSON text frames):

    client -> {"session_id": "abc", "utterance": "i need a hotel"}
    server -> {"type": "turn", "session_id": "abc", "turn_index": 0,
               "user_utterance": "...", "system_response": "...",
               "trace": {TurnTrace fields}}
    server -> {"type": "error", "message": "..."}   (session preserved)

GET /healthz returns 200. Unknown session ids create fresh sessions;
sessions are isolated by id and their turns run strictly sequentially.
"""

from __future__ import annotations

import asyncio
import hashlib
import json

import anyio
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .system import ChatSession, DialogSystem


def _session_seed(session_id: str) -> int:
    return int(hashlib.sha256(session_id.encode()).hexdigest()[:8], 16)


def build_app(system: DialogSystem, decode: str = "greedy", beam_size: int = 8) -> FastAPI:
    app = FastAPI(title="todkit chat endpoint")
    sessions: dict[str, ChatSession] = {}
    locks: dict[str, asyncio.Lock] = {}

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.websocket("/chat")
    async def chat(ws: WebSocket):
        await ws.accept()
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    frame = json.loads(raw)
                except json.JSONDecodeError:
                    await ws.send_json({"type": "error", "message": "frame is not valid JSON"})
                    continue
                if (
                    not isinstance(frame, dict)
                    or not isinstance(frame.get("session_id"), str)
                    or not isinstance(frame.get("utterance"), str)
                ):
                    await ws.send_json(
                        {"type": "error", "message": "frame needs session_id and utterance"}
                    )
                    continue
                sid = frame["session_id"]
                session = sessions.setdefault(
                    sid, ChatSession(sid, seed=_session_seed(sid))
                )
                lock = locks.setdefault(sid, asyncio.Lock())
                async with lock:
                    turn_index = session.turn_count
                    trace = await anyio.to_thread.run_sync(
                        lambda: system.respond(
                            session, frame["utterance"], decode=decode, beam_size=beam_size
                        )
                    )
                await ws.send_json(
                    {
                        "type": "turn",
                        "session_id": sid,
                        "turn_index": turn_index,
                        "user_utterance": frame["utterance"],
                        "system_response": trace.lexicalized_response,
                        "trace": trace.to_json(),
                    }
                )
        except WebSocketDisconnect:
            pass

    return app


def serve(system: DialogSystem, host: str, port: int, decode: str = "greedy") -> None:
    import uvicorn

    uvicorn.run(build_app(system, decode=decode), host=host, port=port, log_level="warning")
