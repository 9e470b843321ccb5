"""Regenerate the checked-in sample assets.

Produces assets/sample/: the 10-trajectory dataset, context layers, seed
cases, a bound prompt, gateway fixtures keyed by request digest, the
pipeline config, and the golden report. Rerun after any change that
affects rendering, text descriptions, prompt content, or request
serialization, then commit the refreshed files:

    python3 scripts/make_sample_assets.py
"""

from __future__ import annotations

import json
import math
import random
import shutil
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from trajscope.config import load_config
from trajscope.core import TrajPoint, Trajectory, kinematics, offset_point, write_trajectories_csv
from trajscope.gateway import ChatRequest, request_digest
from trajscope.pipeline import (
    STAGES,
    _assemble_case,
    _load_bound_prompt,
    _load_db,
    _load_trajectories,
    _prepare_cases,
    _tiles,
)
from trajscope.prompting import system_text
from trajscope.prompt_library import default_prompt
from trajscope.prompting import instantiate, save_prompt

SAMPLE = REPO / "assets" / "sample"

CITY_FACTS = "Trips take place in a mid-sized grid-planned city"
NOTES = "Distances are meters, speeds meters per second, times UTC"


def gen_trajectory(rng: random.Random, traj_id: str, t0: int) -> Trajectory:
    lon = 116.300 + rng.uniform(0.0, 0.01)
    lat = 39.900 + rng.uniform(0.0, 0.01)
    heading = rng.uniform(20.0, 70.0)  # drift northeast
    n = rng.randint(24, 48)
    # two or three speed regimes so segmentation has something to find
    regimes = []
    remaining = n - 1
    for _ in range(rng.randint(2, 3) - 1):
        size = rng.randint(6, max(7, remaining // 2))
        regimes.append((size, rng.choice((1.4, 4.0, 9.0, 14.0))))
        remaining -= size
    regimes.append((remaining, rng.choice((1.4, 4.0, 9.0, 14.0))))

    pts = [TrajPoint(lon=lon, lat=lat, t=t0)]
    t = t0
    for size, speed in regimes:
        for _ in range(size):
            dt = rng.randint(8, 15)
            step = speed * dt * rng.uniform(0.85, 1.15)
            bearing = (heading + rng.uniform(-25.0, 25.0)) % 360.0
            lon, lat = offset_point(lon, lat, bearing, step)
            t += dt
            pts.append(TrajPoint(lon=lon, lat=lat, t=t))
    return Trajectory(traj_id=traj_id, points=tuple(pts))


def write_datasets() -> tuple[list[Trajectory], list[Trajectory]]:
    rng = random.Random(20240601)
    trajs = [gen_trajectory(rng, f"trip-{i:02d}", 1_717_200_000 + i * 7200) for i in range(10)]
    seeds = [gen_trajectory(rng, f"seed-{i}", 1_717_300_000 + i * 7200) for i in range(3)]
    write_trajectories_csv(trajs, SAMPLE / "trajectories.csv")
    write_trajectories_csv(seeds, SAMPLE / "seeds.csv")
    return trajs, seeds


def write_context(trajs: list[Trajectory]) -> None:
    rng = random.Random(9)
    features = []
    pts = [p for t in trajs for p in t.points]
    # roads: short two-point segments snapped near trajectory points
    for i in range(8):
        anchor = rng.choice(pts)
        heading = rng.uniform(0, 360)
        a = offset_point(anchor.lon, anchor.lat, heading, rng.uniform(10, 60))
        b = offset_point(a[0], a[1], (heading + rng.uniform(-30, 30)) % 360, rng.uniform(250, 600))
        features.append(
            {
                "type": "Feature",
                "properties": {
                    "layer": "road",
                    "id": f"road-{i:02d}",
                    "class": rng.choice(["primary", "secondary", "residential"]),
                    "name": f"Sample Road {i}",
                },
                "geometry": {"type": "LineString", "coordinates": [list(a), list(b)]},
            }
        )
    for i in range(12):
        anchor = rng.choice(pts)
        lon, lat = offset_point(anchor.lon, anchor.lat, rng.uniform(0, 360), rng.uniform(15, 80))
        features.append(
            {
                "type": "Feature",
                "properties": {
                    "layer": "poi",
                    "id": f"poi-{i:02d}",
                    "category": rng.choice(["food", "shop", "park", "office"]),
                    "name": f"Sample POI {i}",
                },
                "geometry": {"type": "Point", "coordinates": [lon, lat]},
            }
        )
    for i in range(8):
        anchor = rng.choice(pts)
        lon, lat = offset_point(anchor.lon, anchor.lat, rng.uniform(0, 360), rng.uniform(10, 70))
        features.append(
            {
                "type": "Feature",
                "properties": {"layer": "light", "id": f"light-{i:02d}"},
                "geometry": {"type": "Point", "coordinates": [lon, lat]},
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    (SAMPLE / "context.geojson").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_prompt() -> None:
    prompt = instantiate(default_prompt("tte"), {"city": CITY_FACTS, "notes": NOTES})
    (SAMPLE / "prompts").mkdir(parents=True, exist_ok=True)
    save_prompt(prompt, SAMPLE / "prompts" / "tte.prompt")


def write_config() -> None:
    (SAMPLE / "pipeline.ini").write_text(
        """\
[data]
trajectories = trajectories.csv
context = context.geojson
output_dir = out

[task]
name = tte
prompt_file = prompts/tte.prompt
seeds_file = seeds.csv
seed = 7

[gateway]
backend = mock
model = sim-1
fixtures = fixtures/tte.jsonl
fallback = error
price_input_per_mtok = 2.5
price_output_per_mtok = 10.0
"""
    )


def write_fixtures() -> None:
    """Simulate a decent model: near-truth answers for runs, exact for seeds."""
    # fixtures must exist for load_config's path check; start empty
    fixtures_path = SAMPLE / "fixtures" / "tte.jsonl"
    fixtures_path.parent.mkdir(parents=True, exist_ok=True)
    fixtures_path.write_text("")

    cfg = load_config(str(SAMPLE / "pipeline.ini"))
    db = _load_db(cfg, SAMPLE)
    tiles = _tiles(cfg, SAMPLE)
    prompt = _load_bound_prompt(cfg, SAMPLE)
    system = system_text(prompt)

    lines = []
    rng = random.Random(33)
    trajs = _load_trajectories(cfg, SAMPLE)
    cases, _ = _prepare_cases(cfg, trajs)
    for case in cases:
        _, seq = _assemble_case(cfg, case.traj, db, tiles)
        from trajscope.multiview import to_chat_parts

        req = ChatRequest(model=cfg.gateway.model, system=system, parts=tuple(to_chat_parts(seq)))
        truth = float(case.truth)
        pred = int(round(truth * (1.0 + rng.uniform(-0.12, 0.12))))
        text = (
            "The trip moves through several distinct speed regimes.\n"
            f"Estimated Duration Seconds: {pred}"
        )
        lines.append({"digest": request_digest(req), "text": text})

    seed_trajs = _load_trajectories(
        load_config(str(SAMPLE / "pipeline.ini"), overrides=["data.trajectories=seeds.csv"]),
        SAMPLE,
    )
    seed_cases, _ = _prepare_cases(cfg, seed_trajs)
    for case in seed_cases:
        _, seq = _assemble_case(cfg, case.traj, db, tiles)
        from trajscope.multiview import to_chat_parts

        req = ChatRequest(model=cfg.gateway.model, system=system, parts=tuple(to_chat_parts(seq)))
        text = f"Estimated Duration Seconds: {int(float(case.truth))}"
        lines.append({"digest": request_digest(req), "text": text})

    fixtures_path.write_text("".join(json.dumps(line) + "\n" for line in lines))


def write_golden() -> None:
    cfg = load_config(str(SAMPLE / "pipeline.ini"))
    STAGES["run"](cfg, SAMPLE)
    STAGES["report"](cfg, SAMPLE)
    golden = SAMPLE / "golden"
    golden.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(SAMPLE / "out" / "report" / "tte_report.json", golden / "tte_report.json")
    shutil.copyfile(SAMPLE / "out" / "results" / "tte.jsonl", golden / "tte_results.jsonl")
    shutil.rmtree(SAMPLE / "out")


def main() -> None:
    SAMPLE.mkdir(parents=True, exist_ok=True)
    trajs, _ = write_datasets()
    write_context(trajs)
    write_prompt()
    write_config()
    write_fixtures()
    write_golden()
    kins = [kinematics(t.points) for t in trajs]
    print(f"wrote {len(trajs)} trajectories; durations "
          f"{min(k.duration_s for k in kins)}..{max(k.duration_s for k in kins)} s")
    print(f"fixtures: {sum(1 for _ in (SAMPLE / 'fixtures' / 'tte.jsonl').open())} entries")


if __name__ == "__main__":
    main()
