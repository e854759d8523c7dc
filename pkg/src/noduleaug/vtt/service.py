"""Session service for the four-test classification study.

Sessions persist as append-only newline-delimited JSON event logs, one
file per session; state is always derived by replay, so reports computed
from disk equal reports computed from the live submissions. Truth labels
live only in the logs and aggregate reports; no payload served to a
rater carries them.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from ..evaluation import VttResponse, vtt_statistics
from .pool import TEST_IDS, VttPoolItem, load_pool, render_center_slices

ITEMS_PER_CLASS = 50


@dataclass
class SessionState:
    session_id: str
    rater_id: str
    test_id: int
    order: list[str]
    answers: dict[str, str] = field(default_factory=dict)
    cursor: int = 0

    @property
    def total(self) -> int:
        return len(self.order)

    @property
    def completed(self) -> bool:
        return self.cursor >= self.total

    def current_item(self) -> str:
        return self.order[self.cursor]


class VttStore:
    """Append-only per-session event logs under <data_dir>/sessions/."""

    def __init__(self, data_dir: str | Path):
        self.sessions_dir = Path(data_dir) / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.ndjson"

    def exists(self, session_id: str) -> bool:
        return self._path(session_id).exists()

    def append(self, session_id: str, event: dict) -> None:
        with open(self._path(session_id), "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def events(self, session_id: str) -> list[dict]:
        path = self._path(session_id)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def all_session_ids(self) -> list[str]:
        return sorted(p.stem for p in self.sessions_dir.glob("*.ndjson"))

    def replay(self, session_id: str) -> SessionState | None:
        events = self.events(session_id)
        if not events or events[0]["event"] != "create":
            return None
        head = events[0]
        state = SessionState(session_id=session_id, rater_id=head["rater_id"],
                             test_id=head["test_id"], order=list(head["order"]))
        for ev in events[1:]:
            if ev["event"] == "submit":
                state.answers[ev["item_id"]] = ev["answer"]
                state.cursor += 1
        return state


def _session_id(rater_id: str, test_id: int, seed: int) -> str:
    return hashlib.sha1(f"{rater_id}:{test_id}:{seed}".encode()).hexdigest()[:16]


class CreateSessionBody(BaseModel):
    rater_id: str
    test_id: int
    seed: int = 0


class AnswerBody(BaseModel):
    item_id: str
    answer: str


def create_app(pool_dir: str | Path, data_dir: str | Path,
               items_per_class: int = ITEMS_PER_CLASS,
               static_dir: str | Path | None = None) -> FastAPI:
    pool = load_pool(pool_dir)
    items_by_id: dict[str, VttPoolItem] = {
        item.item_id: item for items in pool.values() for item in items
    }
    store = VttStore(data_dir)
    locks: dict[str, threading.Lock] = {}
    locks_guard = threading.Lock()

    def lock_for(session_id: str) -> threading.Lock:
        with locks_guard:
            return locks.setdefault(session_id, threading.Lock())

    app = FastAPI(title="visual turing test service")

    def get_state(session_id: str) -> SessionState:
        state = store.replay(session_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return state

    def completed_tests(rater_id: str) -> set[int]:
        done = set()
        for sid in store.all_session_ids():
            state = store.replay(sid)
            if state and state.rater_id == rater_id and state.completed:
                done.add(state.test_id)
        return done

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        if body.test_id not in TEST_IDS:
            raise HTTPException(status_code=422, detail=f"test_id must be one of {TEST_IDS}")
        session_id = _session_id(body.rater_id, body.test_id, body.seed)
        with lock_for(session_id):
            if store.exists(session_id):
                state = get_state(session_id)  # idempotent create: resume
                return {"session_id": session_id, "test_id": state.test_id,
                        "progress": {"answered": state.cursor, "total": state.total},
                        "resumed": True}
            if body.test_id > 1 and (body.test_id - 1) not in completed_tests(body.rater_id):
                raise HTTPException(
                    status_code=409,
                    detail=f"test {body.test_id - 1} must be completed before test {body.test_id}")
            items = pool.get(body.test_id, [])
            real = [i.item_id for i in items if i.truth == "real"]
            synt = [i.item_id for i in items if i.truth == "synthetic"]
            if len(real) < items_per_class or len(synt) < items_per_class:
                raise HTTPException(
                    status_code=409,
                    detail=f"pool for test {body.test_id} holds {len(real)} real / "
                           f"{len(synt)} synthetic items; {items_per_class} of each required")
            rng = random.Random(body.seed)
            chosen = rng.sample(real, items_per_class) + rng.sample(synt, items_per_class)
            rng.shuffle(chosen)
            store.append(session_id, {
                "event": "create", "session_id": session_id, "rater_id": body.rater_id,
                "test_id": body.test_id, "seed": body.seed, "order": chosen,
                "ts": time.time(),
            })
            return {"session_id": session_id, "test_id": body.test_id,
                    "progress": {"answered": 0, "total": len(chosen)}, "resumed": False}

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        with lock_for(session_id):
            state = get_state(session_id)
            if state.completed:
                return {"completed": True,
                        "progress": {"answered": state.cursor, "total": state.total}}
            item = items_by_id.get(state.current_item())
            if item is None:
                raise HTTPException(status_code=500,
                                    detail="session references an item missing from the pool")
            events = store.events(session_id)
            already_served = any(
                ev["event"] == "serve" and ev.get("cursor") == state.cursor for ev in events)
            if not already_served:
                store.append(session_id, {
                    "event": "serve", "item_id": item.item_id, "cursor": state.cursor,
                    "window": list(item.window), "ts": time.time(),
                })
            payload = {"item_id": item.item_id,
                       "progress": {"answered": state.cursor, "total": state.total},
                       "completed": False}
            payload.update(render_center_slices(item.data, item.window))
            return payload

    @app.post("/sessions/{session_id}/answers")
    def submit_answer(session_id: str, body: AnswerBody):
        if body.answer not in ("real", "synthetic"):
            raise HTTPException(status_code=422, detail="answer must be real|synthetic")
        with lock_for(session_id):
            state = get_state(session_id)
            if state.completed:
                raise HTTPException(status_code=409, detail="session already completed")
            if body.item_id in state.answers:
                raise HTTPException(status_code=409,
                                    detail="item already answered; stored response unchanged")
            if body.item_id != state.current_item():
                raise HTTPException(
                    status_code=409,
                    detail=f"out-of-order answer: expected item {state.current_item()}")
            item = items_by_id[body.item_id]
            store.append(session_id, {
                "event": "submit", "item_id": body.item_id, "answer": body.answer,
                "truth": item.truth, "cursor": state.cursor, "ts": time.time(),
            })
            answered = state.cursor + 1
            return {"accepted": True,
                    "progress": {"answered": answered, "total": state.total},
                    "completed": answered >= state.total}

    @app.get("/reports/{test_id}")
    def report(test_id: int):
        if test_id not in TEST_IDS:
            raise HTTPException(status_code=422, detail=f"test_id must be one of {TEST_IDS}")
        responses: list[VttResponse] = []
        raters: dict[str, str] = {}
        expected = items_per_class * 2
        for sid in store.all_session_ids():
            events = store.events(sid)
            if not events or events[0]["event"] != "create":
                continue
            head = events[0]
            if head["test_id"] != test_id:
                continue
            raters[sid] = head["rater_id"]
            for ev in events:
                if ev["event"] == "submit":
                    responses.append(VttResponse(
                        session_id=sid, test_id=test_id, item_id=ev["item_id"],
                        truth=ev["truth"], answer=ev["answer"], timestamp=ev["ts"]))
        rows, flagged = vtt_statistics(responses, expected_items=expected, raters=raters)
        return {"test_id": test_id,
                "rows": [r.to_json() for r in rows],
                "incomplete_sessions": flagged}

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
