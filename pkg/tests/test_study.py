import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from colorizer.colorspace import RgbImage
from colorizer.dataio import write_ppm
from colorizer.study import (
    EXPOSURE_MS,
    N_PRACTICE,
    N_SENTINEL,
    N_TEST,
    StudyError,
    StudyStore,
    aggregate_results,
    create_app,
    load_manifest,
    replay_results,
    replay_session_log,
)


def build_manifest_dir(root, n_pairs=55, n_sentinels=6, identical_pairs=False):
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)

    def img(name):
        data = rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8)
        write_ppm(root / name, RgbImage(data=data))
        return name

    algo_pairs = []
    for i in range(n_pairs):
        real = img(f"real{i:03d}.ppm")
        fake = real if identical_pairs else img(f"fake{i:03d}.ppm")
        algo_pairs.append({"id": f"p{i:03d}", "real": real, "fake": fake})
    sentinels = []
    for i in range(n_sentinels):
        sentinels.append({"id": f"s{i:03d}", "real": img(f"sreal{i:03d}.ppm"),
                          "fake": img(f"sfake{i:03d}.ppm")})
    doc = {"algorithms": {"full": algo_pairs}, "sentinels": sentinels}
    (root / "manifest.json").write_text(json.dumps(doc))
    return root / "manifest.json"


@pytest.fixture()
def manifest(tmp_path):
    return load_manifest(build_manifest_dir(tmp_path / "study"))


@pytest.fixture()
def client(manifest, tmp_path):
    app = create_app(manifest, results_dir=tmp_path / "results", seed=42)
    with TestClient(app) as c:
        yield c


def run_session(client, token, strategy, algorithm="full"):
    """Drive one full session; strategy(trial_payload, n) -> 'left'|'right'."""
    r = client.post("/api/sessions", json={"algorithm": algorithm, "token": token})
    assert r.status_code == 200, r.text
    sid = r.json()["id"]
    responses = []
    for n in range(N_PRACTICE + N_TEST):
        t = client.get(f"/api/sessions/{sid}/trials/{n}")
        assert t.status_code == 200, t.text
        payload = t.json()
        side = strategy(payload, n)
        c = client.post(f"/api/sessions/{sid}/choices",
                        json={"n": n, "side": side, "response_ms": 350})
        assert c.status_code == 200, c.text
        responses.append((payload, c.json()))
    return sid, responses


class TestManifest:
    def test_loads_valid(self, manifest):
        assert len(manifest["algorithms"]["full"]) == 55
        assert len(manifest["sentinels"]) == 6

    def test_rejects_missing_algorithms(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"sentinels": []}))
        with pytest.raises(StudyError, match="algorithms"):
            load_manifest(p)

    def test_rejects_missing_image_file(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"algorithms": {"a": [
            {"id": "x", "real": "nope.ppm", "fake": "nope2.ppm"}]}}))
        with pytest.raises(StudyError, match="does not exist"):
            load_manifest(p)

    def test_rejects_path_escape(self, tmp_path):
        sub = tmp_path / "sub"
        sub.mkdir()
        write_ppm(tmp_path / "outside.ppm",
                  RgbImage(data=np.zeros((1, 1, 3), dtype=np.uint8)))
        p = sub / "m.json"
        p.write_text(json.dumps({"algorithms": {"a": [
            {"id": "x", "real": "../outside.ppm", "fake": "../outside.ppm"}]}}))
        with pytest.raises(StudyError, match="escapes"):
            load_manifest(p)

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{not json")
        with pytest.raises(StudyError, match="parse"):
            load_manifest(p)


class TestSessionProtocol:
    def test_healthz(self, client):
        r = client.get("/healthz")
        assert r.status_code == 200 and r.json() == {"status": "ok"}

    def test_descriptor_counts(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full", "token": "t1"})
        d = r.json()
        assert d["n_practice"] == 10 and d["n_test"] == 40
        assert d["exposure_ms"] == 1000 and d["cursor"] == 0

    def test_session_has_4_sentinels_in_test_phase(self, manifest):
        store = StudyStore(manifest, seed=7)
        s = store.create_session("full", "tok")
        sentinels = [t for t in s.trials if t.sentinel]
        assert len(sentinels) == N_SENTINEL
        assert all(t.phase == "test" for t in sentinels)
        assert sum(1 for t in s.trials if t.phase == "practice") == N_PRACTICE

    def test_unknown_algorithm_404(self, client):
        r = client.post("/api/sessions", json={"algorithm": "nope", "token": "t"})
        assert r.status_code == 404
        assert r.json()["code"] == "unknown_algorithm"

    def test_too_few_pairs_rejected(self, tmp_path):
        m = load_manifest(build_manifest_dir(tmp_path / "small", n_pairs=20))
        store = StudyStore(m, seed=0)
        with pytest.raises(StudyError, match="50"):
            store.create_session("full", "t")

    def test_duplicate_token_resumes_then_refuses(self, client):
        r1 = client.post("/api/sessions", json={"algorithm": "full", "token": "dup"})
        sid = r1.json()["id"]
        # incomplete session: same token resumes with the server-side cursor
        t = client.get(f"/api/sessions/{sid}/trials/0").json()
        client.post(f"/api/sessions/{sid}/choices",
                    json={"n": 0, "side": "left", "response_ms": 100})
        r2 = client.post("/api/sessions", json={"algorithm": "full", "token": "dup"})
        assert r2.status_code == 200
        assert r2.json()["id"] == sid
        assert r2.json()["cursor"] == 1
        # completed session: refused
        run_session(client, "done-token", lambda p, n: "left")
        r3 = client.post("/api/sessions", json={"algorithm": "full",
                                                "token": "done-token"})
        assert r3.status_code == 409
        assert r3.json()["code"] == "duplicate_participation"

    def test_different_sessions_differ_in_side_assignment(self, manifest):
        store = StudyStore(manifest, seed=11)
        s1 = store.create_session("full", "a")
        s2 = store.create_session("full", "b")
        sides1 = [t.fake_side for t in s1.trials]
        sides2 = [t.fake_side for t in s2.trials]
        assert sides1 != sides2

    def test_trials_strictly_in_order(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full", "token": "o"})
        sid = r.json()["id"]
        assert client.get(f"/api/sessions/{sid}/trials/3").status_code == 409
        assert client.get(f"/api/sessions/{sid}/trials/0").status_code == 200
        # not answered yet: re-fetch of 0 fine, 1 refused
        assert client.get(f"/api/sessions/{sid}/trials/0").status_code == 200
        assert client.get(f"/api/sessions/{sid}/trials/1").status_code == 409

    def test_trial_payload_never_reveals_fake_side(self, client):
        sid, responses = run_session(client, "audit", lambda p, n: "left")
        for payload, _ in responses:
            assert set(payload) == {"index", "phase", "left", "right",
                                    "exposure_ms"}
            assert payload["exposure_ms"] == EXPOSURE_MS

    def test_image_refs_resolve(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full", "token": "img"})
        sid = r.json()["id"]
        t = client.get(f"/api/sessions/{sid}/trials/0").json()
        img = client.get(t["left"])
        assert img.status_code == 200
        assert img.headers["content-type"].startswith("image/x-portable-pixmap")
        assert img.content.startswith(b"P6\n")

    def test_unknown_image_404(self, client):
        assert client.get("/images/none.ppm").status_code == 404
        assert client.get("/images/../secret").status_code == 404

    def test_practice_feedback_test_silence(self, client):
        sid, responses = run_session(client, "fb", lambda p, n: "left")
        for payload, reply in responses:
            if payload["phase"] == "practice":
                assert "correct" in reply and isinstance(reply["correct"], bool)
            else:
                assert reply == {"phase": "test", "acknowledged": True}

    def test_duplicate_choice_idempotent_conflict_rejected(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full", "token": "d2"})
        sid = r.json()["id"]
        client.get(f"/api/sessions/{sid}/trials/0")
        first = client.post(f"/api/sessions/{sid}/choices",
                            json={"n": 0, "side": "right", "response_ms": 10})
        dup = client.post(f"/api/sessions/{sid}/choices",
                          json={"n": 0, "side": "right", "response_ms": 10})
        assert dup.status_code == 200 and dup.json() == first.json()
        conflict = client.post(f"/api/sessions/{sid}/choices",
                               json={"n": 0, "side": "left", "response_ms": 10})
        assert conflict.status_code == 409
        assert conflict.json()["code"] == "conflicting_resubmission"

    def test_out_of_order_choice_rejected(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full", "token": "o2"})
        sid = r.json()["id"]
        bad = client.post(f"/api/sessions/{sid}/choices",
                          json={"n": 5, "side": "left", "response_ms": 10})
        assert bad.status_code == 409

    def test_unknown_session_404(self, client):
        assert client.get("/api/sessions/zzz/trials/0").status_code == 404

    def test_validation_error_shape(self, client):
        r = client.post("/api/sessions", json={"algorithm": "full"})
        assert r.status_code == 400
        assert set(r.json()) == {"code", "message"}


class TestResults:
    def test_no_completed_sessions_404(self, client):
        r = client.get("/api/results/full")
        assert r.status_code == 404 and r.json()["code"] == "no_results"

    def test_always_correct_gives_fooled_rate_zero(self, manifest):
        store = StudyStore(manifest, seed=3)
        s = store.create_session("full", "oracle")
        for n, t in enumerate(s.trials):
            store.get_trial(s.id, n)
            store.submit_choice(s.id, n, t.fake_side, 100)
        res = store.results("full")
        assert res["all"]["fooled_rate"] == 0.0
        assert res["sentinel_accuracy"] == 1.0
        assert res["n_flagged"] == 0
        assert res["all"]["n_trials"] == N_TEST - N_SENTINEL

    def test_always_fooled_and_flagged(self, manifest):
        store = StudyStore(manifest, seed=4)
        s = store.create_session("full", "wrong")
        for n, t in enumerate(s.trials):
            store.get_trial(s.id, n)
            wrong = "left" if t.fake_side == "right" else "right"
            store.submit_choice(s.id, n, wrong, 100)
        res = store.results("full")
        assert res["all"]["fooled_rate"] == 1.0
        assert res["sentinel_accuracy"] == 0.0
        assert res["n_flagged"] == 1
        assert res["attention_passed"]["n_participants"] == 0
        assert res["attention_passed"]["fooled_rate"] is None

    def test_random_guessers_near_half(self, manifest, tmp_path):
        store = StudyStore(manifest, results_dir=tmp_path / "res", seed=5)
        rng = np.random.default_rng(99)
        for k in range(40):
            s = store.create_session("full", f"guesser{k}")
            for n in range(len(s.trials)):
                store.get_trial(s.id, n)
                side = "left" if rng.uniform() < 0.5 else "right"
                store.submit_choice(s.id, n, side, 100)
        res = store.results("full")
        assert abs(res["all"]["fooled_rate"] - 0.5) <= 3 * res["all"]["se"]
        # offline replay of the event logs reconstructs identical results
        assert replay_results(tmp_path / "res", "full") == res

    def test_ground_truth_pairs_fool_half_under_any_strategy(self, tmp_path):
        # real == fake image: the fake-side label is random, so any fixed
        # strategy is fooled 50% of the time on expectation
        m = load_manifest(build_manifest_dir(tmp_path / "gt", identical_pairs=True))
        store = StudyStore(m, seed=6)
        for k in range(20):
            s = store.create_session("full", f"p{k}")
            for n in range(len(s.trials)):
                store.get_trial(s.id, n)
                store.submit_choice(s.id, n, "left", 100)  # fixed strategy
        res = store.results("full")
        assert abs(res["all"]["fooled_rate"] - 0.5) <= 3 * res["all"]["se"]

    def test_matches_independent_reference_aggregation(self, manifest, tmp_path):
        results_dir = tmp_path / "res"
        app = create_app(manifest, results_dir=results_dir, seed=13)
        with TestClient(app) as client:
            rng = np.random.default_rng(7)
            for k in range(5):
                run_session(client, f"ref{k}",
                            lambda p, n: "left" if rng.uniform() < 0.5 else "right")
            res = client.get("/api/results/full").json()

        # independent reference: parse the logs directly, no library code
        fooled = []
        per_session_sentinel = []
        for path in sorted(results_dir.glob("session-*.jsonl")):
            events = [json.loads(l) for l in path.read_text().splitlines()]
            created = events[0]
            trials = {t["index"]: t for t in created["trials"]}
            choices = {e["n"]: e["side"] for e in events[1:]}
            if len(choices) != len(trials):
                continue
            good = 0
            for i, t in trials.items():
                if t["phase"] != "test":
                    continue
                if t["sentinel"]:
                    good += int(choices[i] == t["fake_side"])
                else:
                    fooled.append(1.0 if choices[i] != t["fake_side"] else 0.0)
            per_session_sentinel.append(good)
        assert res["all"]["n_trials"] == len(fooled)
        assert res["all"]["fooled_rate"] == pytest.approx(np.mean(fooled))
        assert res["sentinel_accuracy"] == pytest.approx(
            sum(per_session_sentinel) / (4 * len(per_session_sentinel)))

    def test_session_persists_across_restart(self, manifest, tmp_path):
        results_dir = tmp_path / "res"
        app = create_app(manifest, results_dir=results_dir, seed=21)
        with TestClient(app) as client:
            r = client.post("/api/sessions", json={"algorithm": "full",
                                                   "token": "persist"})
            sid = r.json()["id"]
            client.get(f"/api/sessions/{sid}/trials/0")
            client.post(f"/api/sessions/{sid}/choices",
                        json={"n": 0, "side": "left", "response_ms": 42})

        # a fresh app over the same results dir reloads the session
        app2 = create_app(manifest, results_dir=results_dir, seed=21)
        with TestClient(app2) as client2:
            r = client2.post("/api/sessions", json={"algorithm": "full",
                                                    "token": "persist"})
            assert r.json()["id"] == sid
            assert r.json()["cursor"] == 1
            assert client2.get(f"/api/sessions/{sid}/trials/1").status_code == 200

    def test_replayed_log_round_trips(self, manifest, tmp_path):
        store = StudyStore(manifest, results_dir=tmp_path / "res", seed=8)
        s = store.create_session("full", "rt")
        for n, t in enumerate(s.trials):
            store.get_trial(s.id, n)
            store.submit_choice(s.id, n, t.fake_side, n * 10)
        replayed = replay_session_log(tmp_path / "res" / f"session-{s.id}.jsonl")
        assert replayed.completed
        assert [t.choice for t in replayed.trials] == [t.choice for t in s.trials]
        assert [t.response_ms for t in replayed.trials] == \
            [t.response_ms for t in s.trials]
        assert aggregate_results([replayed]) == aggregate_results([s])
