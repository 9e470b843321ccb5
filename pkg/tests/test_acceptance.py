"""Acceptance gate: one test per release criterion, one verdict line each.

Every test wraps its assertions in the ``verdict`` fixture from conftest,
which records "[PASS] ACn: ..." or "[FAIL] ACn: ..." and echoes all lines
in the terminal summary of a plain pytest run. Expected values come from
self-contained oracles (exhaustive enumeration, analytic formulas, hand
computation), never from the implementation under test.
"""

import hashlib
import math
import os
import random
import shutil
import threading
import time
from pathlib import Path

import pytest

from trajscope.config import load_config
from trajscope.context import (
    ContextDb,
    FilterPolicy,
    Poi,
    RoadSegment,
    TrafficLight,
    element_id,
    element_view_distance_m,
    filter_context,
)
from trajscope.core import (
    EARTH_RADIUS_M,
    TrajPoint,
    Trajectory,
    haversine_m,
    offset_point,
)
from trajscope.gateway import (
    ChatRequest,
    Gateway,
    MockBackend,
    RemoteBackend,
    TextPart,
    TransientBackendError,
    request_digest,
)
from trajscope.multiview import GLOBAL_VIEW, assemble, item_rank
from trajscope.pipeline import STAGES
from trajscope.prompt_library import default_prompt
from trajscope.prompting import RoundEval, SeedCase, TaskPrompt, instantiate, optimize, system_text
from trajscope.render import StyleSheet, SyntheticTiles, pixel_frame, to_pixel
from trajscope.segmentation import CostWeights, build_cost_table, dp_segment, segment_trajectory
from trajscope.tasks import (
    TTE_MASK,
    BenchmarkParams,
    DetourParams,
    SwitchParams,
    build_anomaly_benchmark,
    classification_metrics,
    inject_detour,
    inject_switch,
    parse_answer,
    pr_auc,
    regression_metrics,
    topk_accuracy,
)
from trajscope.tokens import text_token

SAMPLE = Path(__file__).resolve().parent.parent / "assets" / "sample"


# ---------------------------------------------------------------- helpers

def rand_traj(rng, n, traj_id="t", lon0=116.3, lat0=39.9, step_hi=300.0):
    lon, lat = lon0 + rng.uniform(-0.01, 0.01), lat0 + rng.uniform(-0.01, 0.01)
    t = 1_700_000_000 + rng.randint(0, 10_000)
    pts = [TrajPoint(lon, lat, t)]
    for _ in range(n - 1):
        lon, lat = offset_point(lon, lat, rng.uniform(0, 360), rng.uniform(5, step_hi))
        t += rng.randint(1, 90)
        pts.append(TrajPoint(lon, lat, t))
    return Trajectory(traj_id, tuple(pts))


def line_traj(rng, traj_id, n=100, jitter_m=15.0):
    """Noisy straight run between two fixed anchors: every pair of these
    trajectories shares endpoints, so any can donate a suffix to any other."""
    a, b = (116.300, 39.900), (116.330, 39.915)
    t = 1_700_000_000
    pts = []
    for i in range(n):
        f = i / (n - 1)
        lon = a[0] + (b[0] - a[0]) * f
        lat = a[1] + (b[1] - a[1]) * f
        if 0 < i < n - 1 and jitter_m > 0:
            lon, lat = offset_point(lon, lat, rng.uniform(0, 360), rng.uniform(0, jitter_m))
        pts.append(TrajPoint(lon, lat, t))
        t += rng.randint(10, 30)
    return Trajectory(traj_id, tuple(pts))


def random_scene(rng, lon0=116.3, lat0=39.9):
    def jitter(scale_m):
        return offset_point(lon0, lat0, rng.uniform(0, 360), rng.uniform(0, scale_m))

    roads = []
    for i in range(6):
        sx, sy = jitter(900)
        pts = [(sx, sy)]
        brg = rng.uniform(0, 360)
        for _ in range(rng.randint(1, 4)):
            brg += rng.uniform(-40, 40)
            nx, ny = offset_point(pts[-1][0], pts[-1][1], brg, rng.uniform(80, 400))
            pts.append((nx, ny))
        roads.append(RoadSegment(f"r{i:03d}", "residential", tuple(pts)))
    pois = [Poi(f"p{i:03d}", "shop", *jitter(1000)) for i in range(14)]
    lights = [TrafficLight(f"l{i:03d}", *jitter(1000)) for i in range(5)]
    return ContextDb(roads=tuple(roads), pois=tuple(pois), lights=tuple(lights))


def random_view(rng, lon0=116.3, lat0=39.9):
    n = rng.randint(2, 10)
    lon, lat = offset_point(lon0, lat0, rng.uniform(0, 360), rng.uniform(0, 600))
    pts = [(lon, lat)]
    for _ in range(n - 1):
        lon, lat = offset_point(lon, lat, rng.uniform(0, 360), rng.uniform(30, 250))
        pts.append((lon, lat))
    return pts


def brute_force_segment(table):
    """Oracle: enumerate every contiguous partition depth-first, summing
    costs left to right, strict improvement only (first minimum kept)."""
    L, cap = table.length, table.cap
    best = [math.inf]
    best_bounds = [None]

    def rec(start, acc, bounds):
        if start > L:
            if acc < best[0]:
                best[0] = acc
                best_bounds[0] = tuple(bounds)
            return
        for end in range(start, min(L, start + cap - 1) + 1):
            bounds.append((start, end))
            rec(end + 1, acc + table.cost(start, end), bounds)
            bounds.pop()

    rec(1, 0.0, [])
    return best_bounds[0], best[0]


def pr_auc_by_thresholds(labels, scores):
    """Independent oracle: enumerate every distinct score as a threshold."""
    n_pos = sum(labels)
    points = [(0.0, 1.0)]
    for theta in sorted(set(scores), reverse=True):
        tp = sum(1 for y, s in zip(labels, scores) if s >= theta and y == 1)
        fp = sum(1 for y, s in zip(labels, scores) if s >= theta and y == 0)
        points.append((tp / n_pos, tp / (tp + fp)))
    return sum((r2 - r1) * (p1 + p2) / 2.0 for (r1, p1), (r2, p2) in zip(points, points[1:]))


def tree_hashes(root: Path) -> dict:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class QueueBackend:
    """Feeds scripted responses in exact call order; records requests."""

    name = "queue"

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def complete(self, req):
        self.requests.append(req)
        if not self.replies:
            raise AssertionError("backend queue exhausted")
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply, 10, 5, 0.01


def exact_match_scorer(seeds, outputs):
    agreements = tuple(o.strip() == s.truth for s, o in zip(seeds, outputs))
    return RoundEval(score=sum(agreements) / len(agreements), agreements=agreements)


def two_seeds():
    return [
        SeedCase("s1", parts=(TextPart("desc one"),), texts=("desc one",), truth="car"),
        SeedCase("s2", parts=(TextPart("desc two"),), texts=("desc two",), truth="walk"),
    ]


def plain_prompt():
    return TaskPrompt(
        task_name="tmi",
        role="analyst role",
        task="decide the mode",
        knowledge="plain facts",
        format="final line is the mode",
        version=1,
    )


GOOD_REFINEMENT = "TASK:\nrefined task\nKNOWLEDGE:\nextra facts"


# --------------------------------------------------------------- criteria

def test_ac01_segmentation_optimality(verdict):
    with verdict(1, "DP segmentation equals exhaustive enumeration on 200 trajectories"):
        rng = random.Random(101)
        db = random_scene(rng)
        t0 = time.monotonic()
        for i in range(200):
            traj = rand_traj(rng, rng.randint(1, 14), f"s{i}")
            weights = CostWeights(
                w_speed=rng.uniform(0.2, 2.0),
                w_road=rng.uniform(0.2, 2.0),
                w_len=rng.uniform(0.2, 2.0),
            )
            table = build_cost_table(traj, db, weights)
            got = dp_segment(table)
            want_bounds, want_cost = brute_force_segment(table)
            assert got.total_cost == want_cost, f"trajectory {i}: cost mismatch"
            assert got.boundaries == want_bounds, f"trajectory {i}: tie-break mismatch"
        assert time.monotonic() - t0 < 60.0


def test_ac02_haversine_accuracy(verdict):
    with verdict(2, "haversine meridian arc within 0.1 m; symmetric on 10k pairs"):
        arc = EARTH_RADIUS_M * math.radians(1.0)
        for lon, lat in ((0.0, 0.0), (116.3, 39.9), (-70.0, -45.0), (179.5, 60.0)):
            d = haversine_m(lon, lat, lon, lat + 1.0)
            assert abs(d - 111_194.9) <= 0.1
            assert d == pytest.approx(arc, abs=1e-6)
        rng = random.Random(202)
        for _ in range(10_000):
            lon1, lat1 = rng.uniform(-180, 180), rng.uniform(-90, 90)
            lon2, lat2 = rng.uniform(-180, 180), rng.uniform(-90, 90)
            assert haversine_m(lon1, lat1, lon2, lat2) == haversine_m(lon2, lat2, lon1, lat1)
            assert haversine_m(lon1, lat1, lon1, lat1) == 0.0


def test_ac03_context_filtering(verdict):
    with verdict(3, "indexed context filter matches brute-force scan on 100 scenes"):
        rng = random.Random(303)
        for i in range(100):
            db = random_scene(rng)
            view = random_view(rng)
            theta = rng.choice([50.0, 100.0, 150.0, 300.0])
            policy = FilterPolicy(theta, theta, theta)
            for layer in ("road", "poi", "light"):
                got = {element_id(e) for e in filter_context(db, view, layer, policy)}
                want = {
                    element_id(e)
                    for e in db.elements(layer)
                    if element_view_distance_m(e, view) <= theta
                }
                assert got == want, f"scene {i} layer {layer} theta {theta}"

        # growing theta never drops an element
        for _ in range(10):
            db = random_scene(rng)
            view = random_view(rng)
            for layer in ("road", "poi", "light"):
                prev: set = set()
                for theta in (25.0, 50.0, 100.0, 200.0, 400.0):
                    policy = FilterPolicy(theta, theta, theta)
                    ids = {element_id(e) for e in filter_context(db, view, layer, policy)}
                    assert prev <= ids
                    prev = ids

        # an element exactly at the threshold distance is retained
        for _ in range(10):
            db = random_scene(rng)
            view = random_view(rng)
            poi = db.pois[0]
            d = element_view_distance_m(poi, view)
            ids = {element_id(e) for e in filter_context(db, view, "poi", FilterPolicy(theta_poi_m=d))}
            assert poi.poi_id in ids


def test_ac04_text_template_fidelity(verdict):
    with verdict(4, "text description reproduces reference lines byte-exactly"):
        # two meridian points exactly 410.8 m apart, 66 s travel time
        dlat = 410.8 / (EARTH_RADIUS_M * math.pi / 180.0)
        pts = (TrajPoint(116.30, 39.90, 1_700_000_000), TrajPoint(116.30, 39.90 + dlat, 1_700_000_066))
        lines = text_token(pts).rendered.splitlines()
        assert "Total Distance (meters): 410.8" in lines
        assert "Average Speed (m/s): 6.22" in lines


def test_ac05_count_law_and_projection(verdict):
    with verdict(5, "|items| = (1+N) x Z, rank-ordered, zero out-of-frame points"):
        rng = random.Random(505)
        style = StyleSheet(target_px=128)
        tiles = SyntheticTiles()
        out_of_bounds = 0
        for i in range(50):
            traj = rand_traj(rng, rng.randint(1, 20), f"m{i}", step_hi=200.0)
            layers = ("poi", "road", "light") if i % 2 else ("poi", "road")
            seg = segment_trajectory(traj, weights=CostWeights(max_seg_points=6))
            seq = assemble(traj, seg, None, FilterPolicy(), style, tiles, layers)
            assert len(seq.items) == (1 + len(seg.boundaries)) * len(layers)
            ranks = [item_rank(seq, p) for p in seq.items]
            assert ranks == sorted(ranks)
            assert len(set(ranks)) == len(ranks)
            for item in seq.items:
                if item.view == GLOBAL_VIEW:
                    scope = traj.points
                else:
                    a, b = seg.boundaries[item.partition_index - 1]
                    scope = traj.slice(a, b)
                frame = pixel_frame(item.image.clip, item.image.zoom)
                assert (frame.width, frame.height) == (item.image.width, item.image.height)
                for p in scope:
                    x, y = to_pixel(frame, p.lon, p.lat)
                    if not (0 <= x < item.image.width and 0 <= y < item.image.height):
                        out_of_bounds += 1
        assert out_of_bounds == 0


def test_ac06_anomaly_synthesis(verdict):
    with verdict(6, "pool of 100 yields 5 anomalies; detour moves 10 pts by 150 m; switch keeps 30"):
        rng = random.Random(606)
        pool = [line_traj(rng, f"p{i:03d}", n=rng.randint(50, 90)) for i in range(100)]
        assert BenchmarkParams().inject_ratio == 0.05
        out, injections = build_anomaly_benchmark(pool, BenchmarkParams(), seed=11)
        labels = [t.label for t in out]
        assert labels.count("anomaly") == 5
        assert labels.count("normal") == 95
        assert injections["n_anomalies"] == 5
        assert injections["n_detours"] + injections["n_switches"] == 5

        # detour: alpha=0.1 on 100 points -> exactly 10 moved, each 150 m +/- 1
        traj = line_traj(random.Random(7), "detour-src", n=100)
        bent, _ = inject_detour(traj, DetourParams(alpha=0.1, displacement_cells=3.0, grid_cell_m=50.0), random.Random(5))
        moves = [haversine_m(a.lon, a.lat, b.lon, b.lat) for a, b in zip(traj.points, bent.points)]
        moved = [d for d in moves if d > 1e-9]
        assert len(moved) == 10
        assert all(abs(d - 150.0) <= 1.0 for d in moved)
        assert moves[0] == 0.0 and moves[-1] == 0.0

        # switch: mu=0.3 on 100 points -> exactly the first 30 points kept
        donor = line_traj(random.Random(8), "donor", n=100)
        mixed, _ = inject_switch(traj, donor, SwitchParams(mu=0.3), random.Random(9))
        assert mixed.points[:30] == traj.points[:30]
        assert (mixed.points[30].lon, mixed.points[30].lat) != (traj.points[30].lon, traj.points[30].lat)


def test_ac07_metric_oracles(verdict):
    with verdict(7, "regression/PR-AUC/top-k/F1 metrics match independent oracles"):
        cases = [
            ((2.0, 4.0), (1.0, 2.0), 1.5, math.sqrt(2.5), 50.0),
            ((10.0, 20.0, 30.0), (12.0, 18.0, 33.0), 7.0 / 3.0, math.sqrt(17.0 / 3.0), 40.0 / 3.0),
            ((4.0, 8.0, 16.0, 2.0), (5.0, 6.0, 20.0, 2.0), 1.75, math.sqrt(21.0 / 4.0), 18.75),
        ]
        for truths, preds, mae, rmse, mape in cases:
            m = regression_metrics(truths, preds)
            assert abs(m["mae"] - mae) <= 1e-9
            assert abs(m["rmse"] - rmse) <= 1e-9
            assert abs(m["mape_pct"] - mape) <= 1e-9

        rng = random.Random(707)
        for _ in range(50):
            scores = [s / 10_000 for s in rng.sample(range(10_000), 20)]
            labels = [rng.randint(0, 1) for _ in range(20)]
            if sum(labels) == 0:
                labels[rng.randrange(20)] = 1
            assert abs(pr_auc(labels, scores) - pr_auc_by_thresholds(labels, scores)) < 1e-9

        vocab = [f"R{r:02d}C{c:02d}" for r in range(4) for c in range(4)]
        for _ in range(50):
            truths = [rng.choice(vocab) for _ in range(30)]
            ranked = [rng.sample(vocab, 8) for _ in range(30)]
            assert topk_accuracy(truths, ranked, 5) >= topk_accuracy(truths, ranked, 1)

        # balanced supports: the support-weighted mean equals the plain mean
        truths, preds = [], []
        for klass, hits in (("walk", 6), ("bike", 4), ("car", 9)):
            truths += [klass] * 10
            wrong = [k for k in ("walk", "bike", "car") if k != klass]
            preds += [klass] * hits + [rng.choice(wrong) for _ in range(10 - hits)]
        m = classification_metrics(truths, preds)
        assert abs(m["macro_f1"] - m["weighted_f1"]) <= 1e-12


def test_ac08_optimization_contracts(verdict):
    with verdict(8, "prompt optimization stops, bounds rounds, keeps role/format stable"):
        # (a) immediate satisfaction: one round, no refinement calls
        backend = QueueBackend(["car", "walk"])
        result = optimize(
            plain_prompt(), two_seeds(), Gateway(backend), exact_match_scorer,
            model="m", max_rounds=5,
        )
        assert result.trace.stop_reason == "satisfied"
        assert len(result.trace.rounds) == 1
        assert len(backend.requests) == 2
        assert result.prompt.version == 1

        # (b) never satisfied: exactly max_rounds rounds, best-seen returned
        backend = QueueBackend(
            ["car", "bad", GOOD_REFINEMENT, "bad", "bad", GOOD_REFINEMENT, "bad", "bad"]
        )
        initial = plain_prompt()
        result = optimize(
            initial, two_seeds(), Gateway(backend), exact_match_scorer,
            model="m", max_rounds=3,
        )
        assert result.trace.stop_reason == "max_rounds"
        assert len(result.trace.rounds) == 3
        assert len(backend.requests) == 8
        assert result.prompt.version == 1  # round 1 scored 0.5, later rounds 0.0

        # (c) role and format sections byte-stable across every version
        assert len(result.trace.prompts) == 3
        for p in result.trace.prompts:
            assert p.role == initial.role
            assert p.format == initial.format
        assert result.trace.prompts[1].task == "refined task"


def test_ac09_end_to_end_determinism(verdict, tmp_path):
    with verdict(9, "segment/assemble/run/report twice into one tree, hash-identical"):
        sample = tmp_path / "sample"
        shutil.copytree(SAMPLE, sample)
        cfg = load_config(str(sample / "pipeline.ini"))

        def run_once():
            for stage in ("segment", "assemble", "run", "report"):
                STAGES[stage](cfg, sample)
            return tree_hashes(sample / "out")

        t0 = time.monotonic()
        first = run_once()
        second = run_once()
        elapsed = time.monotonic() - t0
        assert first, "pipeline produced no artifacts"
        assert first == second
        assert elapsed < 120.0


def test_ac10_gateway_resilience(verdict):
    with verdict(10, "2x429 then success = 3 attempts; burst never exceeds in-flight cap"):
        r = ChatRequest(model="m", system="s", parts=(TextPart("x"),))
        backend = MockBackend(
            fixtures={request_digest(r): "ok"},
            failures=[TransientBackendError("429"), TransientBackendError("429")],
        )
        gw = Gateway(backend, max_attempts=3, backoff_base_s=0.001)
        resp = gw.send(r)
        assert resp.text == "ok"
        assert resp.attempts == 3

        lock = threading.Lock()
        state = {"active": 0, "peak": 0}

        class SlowBackend:
            name = "slow"

            def complete(self, req):
                with lock:
                    state["active"] += 1
                    state["peak"] = max(state["peak"], state["active"])
                time.sleep(0.02)
                with lock:
                    state["active"] -= 1
                return "done", 1, 1, 0.0

        gw = Gateway(SlowBackend(), max_in_flight=3)
        threads = [threading.Thread(target=gw.send, args=(r,)) for _ in range(10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert state["peak"] <= 3
        assert gw.ledger.summary()["m"]["calls"] == 10


def test_ac11_live_smoke(verdict):
    endpoint = os.environ.get("TRAJSCOPE_LIVE_ENDPOINT")
    model = os.environ.get("TRAJSCOPE_LIVE_MODEL")
    has_key = bool(os.environ.get("TRAJSCOPE_API_KEY"))
    with verdict(11, "live endpoint answers one travel-time case in parseable form"):
        if not (endpoint and model and has_key):
            pytest.skip(
                "live smoke needs TRAJSCOPE_LIVE_ENDPOINT, TRAJSCOPE_LIVE_MODEL "
                "and TRAJSCOPE_API_KEY"
            )
        prompt = instantiate(
            default_prompt("tte"),
            {"city": "a mid-sized grid-planned city", "notes": "times are UTC"},
        )
        traj = rand_traj(random.Random(0), 12, "live")
        tok = text_token(traj.points, masked=TTE_MASK)
        req = ChatRequest(model=model, system=system_text(prompt), parts=(TextPart(tok.rendered),))
        gw = Gateway(RemoteBackend(endpoint, credential_env="TRAJSCOPE_API_KEY"))
        resp = gw.send(req)
        parsed = parse_answer("tte", resp.text, start_t=traj.points[0].t)
        assert parsed.ok, f"unparseable live answer: {resp.text!r}"
