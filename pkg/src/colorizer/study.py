"""Real-vs-fake perceptual study service.

Sessions run the two-alternative forced-choice protocol: 10 practice trials
with correctness feedback, then 40 timed test pairs without feedback, of
which 10% are sentinel attention checks pitting ground truth against the
random-colorization baseline. "Fooled" means the participant clicked the
real photo as the fake. State is an append-only JSON-lines event log per
session; replaying the logs reconstructs identical results.
"""

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel

from .metrics import bootstrap_mean_se


class CreateSessionBody(BaseModel):
    algorithm: str
    token: str


class ChoiceBody(BaseModel):
    n: int
    side: str
    response_ms: int

N_PRACTICE = 10
N_TEST = 40
N_SENTINEL = 4          # 10% of test trials, rounded
SENTINEL_PASS_MIN = 3   # sessions below 3/4 sentinel accuracy get flagged
EXPOSURE_MS = 1000
MIN_PAIRS = 50


class StudyError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Trial:
    index: int
    phase: str            # "practice" | "test"
    pair_id: str
    real: str
    fake: str
    sentinel: bool
    fake_side: str        # "left" | "right"
    choice: Optional[str] = None
    response_ms: Optional[int] = None

    @property
    def left(self) -> str:
        return self.fake if self.fake_side == "left" else self.real

    @property
    def right(self) -> str:
        return self.fake if self.fake_side == "right" else self.real


@dataclass
class StudySession:
    id: str
    algorithm: str
    token: str
    trials: list
    cursor: int = 0
    completed: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def descriptor(self) -> dict:
        return {"id": self.id, "algorithm": self.algorithm,
                "n_practice": N_PRACTICE, "n_test": N_TEST,
                "exposure_ms": EXPOSURE_MS, "cursor": self.cursor,
                "completed": self.completed}


def load_manifest(path) -> dict:
    """Parse and validate the image manifest.

    Shape: {"algorithms": {name: [{"id", "real", "fake"}, ...]},
    "sentinels": [{"id", "real", "fake"}, ...]}. Image refs are paths
    relative to the manifest directory and must exist.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StudyError(400, "bad_manifest", f"cannot parse manifest: {exc}")
    if not isinstance(doc, dict) or not isinstance(doc.get("algorithms"), dict) \
            or not doc["algorithms"]:
        raise StudyError(400, "bad_manifest",
                         "manifest needs a non-empty 'algorithms' object")
    root = path.parent

    def check_pairs(pairs, where):
        if not isinstance(pairs, list):
            raise StudyError(400, "bad_manifest", f"{where} must be a list")
        for p in pairs:
            if not isinstance(p, dict) or \
                    not all(isinstance(p.get(k), str) for k in ("id", "real", "fake")):
                raise StudyError(400, "bad_manifest",
                                 f"{where}: every pair needs string id/real/fake")
            for ref in (p["real"], p["fake"]):
                target = (root / ref).resolve()
                if not str(target).startswith(str(root.resolve())):
                    raise StudyError(400, "bad_manifest",
                                     f"{where}: ref {ref!r} escapes the image root")
                if not target.is_file():
                    raise StudyError(400, "bad_manifest",
                                     f"{where}: image {ref!r} does not exist")

    for name, pairs in doc["algorithms"].items():
        check_pairs(pairs, f"algorithm {name!r}")
    sentinels = doc.get("sentinels", [])
    check_pairs(sentinels, "sentinels")
    return {"algorithms": doc["algorithms"], "sentinels": sentinels,
            "root": root}


class StudyStore:
    """All session state plus the append-only event logs."""

    def __init__(self, manifest: dict, results_dir=None, seed: int = 0):
        self.manifest = manifest
        self.results_dir = Path(results_dir) if results_dir else None
        self.seed = seed
        self.sessions: dict[str, StudySession] = {}
        self._by_participation: dict[tuple, str] = {}
        self._counter = 0
        self._lock = threading.Lock()
        if self.results_dir:
            self.results_dir.mkdir(parents=True, exist_ok=True)
            self._replay_existing_logs()

    # ------------------------------------------------------------- events

    def _log_path(self, session_id: str) -> Path:
        return self.results_dir / f"session-{session_id}.jsonl"

    def _append_event(self, session_id: str, event: dict) -> None:
        if self.results_dir is None:
            return
        with open(self._log_path(session_id), "a", encoding="utf-8") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def _replay_existing_logs(self) -> None:
        for path in sorted(self.results_dir.glob("session-*.jsonl")):
            session = replay_session_log(path)
            self.sessions[session.id] = session
            self._by_participation[(session.algorithm, session.token)] = session.id
            self._counter += 1

    # ------------------------------------------------------------ protocol

    def create_session(self, algorithm: str, token: str) -> StudySession:
        if not algorithm or not token:
            raise StudyError(400, "invalid_request",
                             "algorithm and token are required")
        with self._lock:
            pairs = self.manifest["algorithms"].get(algorithm)
            if pairs is None:
                raise StudyError(404, "unknown_algorithm",
                                 f"no such algorithm {algorithm!r}")
            existing_id = self._by_participation.get((algorithm, token))
            if existing_id is not None:
                existing = self.sessions[existing_id]
                if existing.completed:
                    raise StudyError(409, "duplicate_participation",
                                     "this participant already completed a "
                                     f"session for {algorithm!r}")
                return existing  # resume: same descriptor, server-side cursor
            if len(pairs) < MIN_PAIRS:
                raise StudyError(400, "too_few_pairs",
                                 f"algorithm {algorithm!r} has {len(pairs)} pairs; "
                                 f"{MIN_PAIRS} required")
            sentinels = self.manifest["sentinels"]
            if len(sentinels) < N_SENTINEL:
                raise StudyError(400, "too_few_pairs",
                                 f"{N_SENTINEL} sentinel pairs required, "
                                 f"manifest has {len(sentinels)}")
            counter = self._counter
            self._counter += 1
            session = self._assemble(algorithm, token, counter)
            self.sessions[session.id] = session
            self._by_participation[(algorithm, token)] = session.id
            self._append_event(session.id, {
                "event": "created", "id": session.id, "algorithm": algorithm,
                "token": token,
                "trials": [{"index": t.index, "phase": t.phase,
                            "pair_id": t.pair_id, "real": t.real,
                            "fake": t.fake, "sentinel": t.sentinel,
                            "fake_side": t.fake_side} for t in session.trials]})
            return session

    def _assemble(self, algorithm: str, token: str, counter: int) -> StudySession:
        rng = np.random.default_rng((self.seed, counter))
        pairs = self.manifest["algorithms"][algorithm]
        sentinels = self.manifest["sentinels"]
        picked = rng.choice(len(pairs), size=N_PRACTICE + N_TEST - N_SENTINEL,
                            replace=False)
        sentinel_picked = rng.choice(len(sentinels), size=N_SENTINEL,
                                     replace=len(sentinels) < N_SENTINEL)
        sentinel_slots = set(rng.choice(N_TEST, size=N_SENTINEL, replace=False).tolist())

        trials = []
        algo_iter = iter(picked.tolist())
        sent_iter = iter(sentinel_picked.tolist())
        for i in range(N_PRACTICE + N_TEST):
            phase = "practice" if i < N_PRACTICE else "test"
            is_sentinel = phase == "test" and (i - N_PRACTICE) in sentinel_slots
            src = sentinels[next(sent_iter)] if is_sentinel else pairs[next(algo_iter)]
            fake_side = "left" if rng.uniform() < 0.5 else "right"
            trials.append(Trial(index=i, phase=phase, pair_id=src["id"],
                                real=src["real"], fake=src["fake"],
                                sentinel=is_sentinel, fake_side=fake_side))
        sid = f"{counter:06d}-{rng.integers(0, 16**8):08x}"
        return StudySession(id=sid, algorithm=algorithm, token=token,
                            trials=trials)

    def get_session(self, session_id: str) -> StudySession:
        session = self.sessions.get(session_id)
        if session is None:
            raise StudyError(404, "unknown_session",
                             f"no such session {session_id!r}")
        return session

    def get_trial(self, session_id: str, n: int) -> dict:
        session = self.get_session(session_id)
        with session.lock:
            if n != session.cursor:
                raise StudyError(409, "out_of_order",
                                 f"trial {n} requested but the session is at "
                                 f"trial {session.cursor}; trials are served "
                                 "strictly in order")
            t = session.trials[n]
            # never reveal which side is fake
            return {"index": t.index, "phase": t.phase,
                    "left": f"/images/{t.left}", "right": f"/images/{t.right}",
                    "exposure_ms": EXPOSURE_MS}

    def submit_choice(self, session_id: str, n: int, side: str,
                      response_ms: int) -> dict:
        if side not in ("left", "right"):
            raise StudyError(400, "invalid_request",
                             "side must be 'left' or 'right'")
        session = self.get_session(session_id)
        with session.lock:
            if n == session.cursor - 1:
                prev = session.trials[n]
                if prev.choice == side:
                    return self._feedback(prev)  # idempotent duplicate
                raise StudyError(409, "conflicting_resubmission",
                                 f"trial {n} already answered {prev.choice!r}")
            if n != session.cursor:
                raise StudyError(409, "out_of_order",
                                 f"expected a choice for trial {session.cursor}, "
                                 f"got {n}")
            if session.completed:
                raise StudyError(409, "session_completed",
                                 "session is already complete")
            t = session.trials[n]
            t.choice = side
            t.response_ms = int(response_ms)
            session.cursor += 1
            if session.cursor == len(session.trials):
                session.completed = True
            self._append_event(session.id, {
                "event": "choice", "n": n, "side": side,
                "response_ms": int(response_ms)})
            return self._feedback(t)

    @staticmethod
    def _feedback(t: Trial) -> dict:
        if t.phase == "practice":
            return {"phase": "practice", "correct": t.choice == t.fake_side}
        return {"phase": "test", "acknowledged": True}

    def results(self, algorithm: str) -> dict:
        with self._lock:
            done = [s for s in self.sessions.values()
                    if s.algorithm == algorithm and s.completed]
        if not done:
            raise StudyError(404, "no_results",
                             f"no completed sessions for {algorithm!r}")
        return aggregate_results(done)


def aggregate_results(sessions) -> dict:
    """Fooled-rate statistics over completed sessions.

    A participant is fooled when they pick the real image as the fake one.
    Sentinel trials are scored separately as an attention check; sessions
    below 3/4 sentinel accuracy are flagged and the aggregate is reported
    both with and without them.
    """
    def outcomes_of(group):
        out = []
        for s in group:
            for t in s.trials:
                if t.phase == "test" and not t.sentinel:
                    out.append(1.0 if t.choice != t.fake_side else 0.0)
        return out

    flagged = []
    passed = []
    sentinel_correct = 0
    sentinel_total = 0
    for s in sessions:
        correct = sum(1 for t in s.trials
                      if t.sentinel and t.choice == t.fake_side)
        total = sum(1 for t in s.trials if t.sentinel)
        sentinel_correct += correct
        sentinel_total += total
        (passed if correct >= SENTINEL_PASS_MIN else flagged).append(s)

    def stats(group):
        out = outcomes_of(group)
        if not out:
            return {"fooled_rate": None, "se": None, "n_trials": 0,
                    "n_participants": len(group)}
        mean, se = bootstrap_mean_se(out, resamples=10000, seed=0)
        return {"fooled_rate": mean, "se": se, "n_trials": len(out),
                "n_participants": len(group)}

    return {
        "all": stats(sessions),
        "attention_passed": stats(passed),
        "n_flagged": len(flagged),
        "sentinel_accuracy": (sentinel_correct / sentinel_total
                              if sentinel_total else None),
    }


def replay_session_log(path) -> StudySession:
    """Rebuild one session from its append-only event log."""
    session = None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            event = json.loads(line)
            if event["event"] == "created":
                trials = [Trial(index=t["index"], phase=t["phase"],
                                pair_id=t["pair_id"], real=t["real"],
                                fake=t["fake"], sentinel=t["sentinel"],
                                fake_side=t["fake_side"])
                          for t in event["trials"]]
                session = StudySession(id=event["id"],
                                       algorithm=event["algorithm"],
                                       token=event["token"], trials=trials)
            elif event["event"] == "choice":
                if session is None:
                    raise StudyError(500, "corrupt_log",
                                     f"{path}: choice before creation")
                t = session.trials[event["n"]]
                t.choice = event["side"]
                t.response_ms = event["response_ms"]
                session.cursor = event["n"] + 1
            else:
                raise StudyError(500, "corrupt_log",
                                 f"{path}: unknown event {event['event']!r}")
    if session is None:
        raise StudyError(500, "corrupt_log", f"{path}: no creation event")
    session.completed = session.cursor == len(session.trials)
    return session


def replay_results(results_dir, algorithm: str) -> dict:
    """Offline aggregation by replaying every session log in a directory."""
    sessions = [replay_session_log(p)
                for p in sorted(Path(results_dir).glob("session-*.jsonl"))]
    done = [s for s in sessions if s.algorithm == algorithm and s.completed]
    if not done:
        raise StudyError(404, "no_results",
                         f"no completed sessions for {algorithm!r}")
    return aggregate_results(done)


# ---------------------------------------------------------------- HTTP app

_MEDIA_TYPES = {".ppm": "image/x-portable-pixmap", ".png": "image/png",
                ".jpg": "image/jpeg", ".jpeg": "image/jpeg"}


def create_app(manifest: dict, results_dir=None, seed: int = 0):
    """FastAPI app implementing the study protocol over a StudyStore."""
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse, Response

    store = StudyStore(manifest, results_dir=results_dir, seed=seed)
    app = FastAPI(title="colorization real-vs-fake study")
    app.state.store = store

    @app.exception_handler(StudyError)
    async def study_error_handler(request: Request, exc: StudyError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": "invalid_request",
                                     "message": str(exc.errors())})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/api/sessions")
    def create_session(body: CreateSessionBody):
        return store.create_session(body.algorithm, body.token).descriptor()

    @app.get("/api/sessions/{session_id}/trials/{n}")
    def get_trial(session_id: str, n: int):
        return store.get_trial(session_id, n)

    @app.post("/api/sessions/{session_id}/choices")
    def submit_choice(session_id: str, body: ChoiceBody):
        return store.submit_choice(session_id, body.n, body.side,
                                   body.response_ms)

    @app.get("/api/results/{algorithm}")
    def results(algorithm: str):
        return store.results(algorithm)

    @app.get("/images/{ref:path}")
    def serve_image(ref: str):
        root = store.manifest["root"].resolve()
        target = (root / ref).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            raise StudyError(404, "unknown_image", f"no such image {ref!r}")
        media = _MEDIA_TYPES.get(target.suffix.lower(), "application/octet-stream")
        return Response(content=target.read_bytes(), media_type=media)

    return app
