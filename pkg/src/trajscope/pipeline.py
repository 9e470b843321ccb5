"""Pipeline stages: segment, assemble, synth, optimize, run, report.

Each stage is a plain function from (config, base_dir) to a StageResult,
writing its artifacts under the configured output directory along with a
run manifest (config snapshot, package version, output digests). Nothing
here touches wall-clock time, so reruns with identical inputs produce
hash-identical output trees.

Paths in the config are resolved relative to the config file's directory
(base_dir), never the process working directory.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

from . import __version__
from .config import ConfigError, PipelineConfig, config_snapshot
from .context import ContextDb, ContextError, FilterPolicy, load_context
from .core import IngestError, Trajectory, kinematics, load_trajectories_csv, write_trajectories_csv
from .gateway import ChatRequest, Gateway, MockBackend, RemoteBackend
from .multiview import assemble, serialize_sequence, to_chat_parts
from .prompting import (
    OptimizationAborted,
    PromptError,
    SeedCase,
    TaskPrompt,
    instantiate,
    load_prompt,
    optimize,
    save_prompt,
    system_text,
)
from .render import DirectoryTiles, HttpTiles, StyleSheet, SyntheticTiles, TileSource
from .segmentation import CostWeights, Segmentation, segment_trajectory
from .tasks import (
    TASKS,
    TMI_MODES,
    BenchmarkParams,
    DetourParams,
    RegionGrid,
    ResultRow,
    SwitchParams,
    build_anomaly_benchmark,
    make_seed_scorer,
    parse_answer,
    score_results,
    truncate_for_prediction,
)
from .tokens import TemplateError


class DataError(Exception):
    """Input data is malformed or insufficient for the requested stage."""


class NoResultsError(DataError):
    """Report stage found an empty results store (zero-coverage report written)."""


# everything the service/CLI should map to the data-error exit path
DATA_ERRORS = (DataError, IngestError, ContextError, TemplateError, PromptError)

T = TypeVar("T")
U = TypeVar("U")


@dataclass(frozen=True, slots=True)
class StageResult:
    command: str
    out_dir: Path
    outputs: tuple[str, ...]  # relative to out_dir
    manifest_path: Path
    summary: dict


@dataclass(frozen=True, slots=True)
class Case:
    """One model query: possibly truncated input plus the hidden truth."""

    case_id: str
    traj: Trajectory
    truth: str
    start_t: Optional[int]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _finish_stage(
    command: str, cfg: PipelineConfig, stage_dir: Path, summary: dict
) -> StageResult:
    """Digest every artifact in the stage dir and write the run manifest."""
    outputs = sorted(
        str(p.relative_to(stage_dir))
        for p in stage_dir.rglob("*")
        if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "command": command,
        "version": __version__,
        "config": config_snapshot(cfg),
        "outputs": {rel: _sha256(stage_dir / rel) for rel in outputs},
        "summary": summary,
    }
    manifest_path = stage_dir / "manifest.json"
    _write_json(manifest_path, manifest)
    return StageResult(
        command=command,
        out_dir=stage_dir,
        outputs=tuple(outputs),
        manifest_path=manifest_path,
        summary=summary,
    )


def _map_jobs(fn: Callable[[T], U], items: Sequence[T], jobs: int) -> list[U]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Shared construction from config


def _out_dir(cfg: PipelineConfig, base_dir: Path) -> Path:
    return (base_dir / cfg.data.output_dir).resolve()


def _load_trajectories(cfg: PipelineConfig, base_dir: Path) -> list[Trajectory]:
    cfg.require("data.trajectories")
    trajs = load_trajectories_csv(base_dir / cfg.data.trajectories)
    if not trajs:
        raise DataError(f"no trajectories in {cfg.data.trajectories}")
    return trajs


def _load_db(cfg: PipelineConfig, base_dir: Path) -> Optional[ContextDb]:
    if not cfg.data.context:
        return None
    return load_context(base_dir / cfg.data.context)


def _weights(cfg: PipelineConfig) -> CostWeights:
    s = cfg.segmentation
    return CostWeights(
        w_speed=s.w_speed, w_road=s.w_road, w_len=s.w_len, max_seg_points=s.max_seg_points
    )


def _policy(cfg: PipelineConfig) -> FilterPolicy:
    c = cfg.context
    return FilterPolicy(
        theta_poi_m=c.theta_poi_m, theta_road_m=c.theta_road_m, theta_light_m=c.theta_light_m
    )


def _style(cfg: PipelineConfig) -> StyleSheet:
    return StyleSheet(target_px=cfg.render.target_px)


def _tiles(cfg: PipelineConfig, base_dir: Path) -> TileSource:
    spec = cfg.render.tiles
    if spec == "synthetic":
        return SyntheticTiles()
    scheme, _, rest = spec.partition(":")
    if scheme == "directory":
        return DirectoryTiles(base_dir / rest)
    cache = cfg.render.tile_cache or str(Path(cfg.data.output_dir) / "tile_cache")
    return HttpTiles(rest, base_dir / cache)


def _build_gateway(cfg: PipelineConfig, base_dir: Path) -> Gateway:
    g = cfg.gateway
    if g.backend == "mock":
        if g.fixtures:
            backend = MockBackend.from_jsonl(
                base_dir / g.fixtures, fallback=g.fallback, default_text=g.default_text
            )
        else:
            backend = MockBackend({}, fallback=g.fallback, default_text=g.default_text)
    else:
        backend = RemoteBackend(g.endpoint, g.credential_env, timeout_s=g.timeout_s)
    return Gateway(
        backend,
        max_in_flight=g.max_in_flight,
        max_attempts=g.max_attempts,
        backoff_base_s=g.backoff_base_s,
        tokens_per_minute=g.tokens_per_minute,
    )


def _price_table(cfg: PipelineConfig) -> Optional[dict]:
    g = cfg.gateway
    if g.price_input_per_mtok is None or g.price_output_per_mtok is None:
        return None
    return {
        g.model: {
            "input_per_mtok": g.price_input_per_mtok,
            "output_per_mtok": g.price_output_per_mtok,
        }
    }


def _bindings(cfg: PipelineConfig) -> dict[str, str]:
    facts = {
        "grid_rows": str(cfg.task.grid_rows),
        "grid_cols": str(cfg.task.grid_cols),
    }
    facts.update(cfg.knowledge)
    return facts


def _load_bound_prompt(cfg: PipelineConfig, base_dir: Path) -> TaskPrompt:
    cfg.require("task.prompt_file")
    prompt = load_prompt(base_dir / cfg.task.prompt_file)
    if prompt.task_name != cfg.task.name:
        raise DataError(
            f"prompt file is for task {prompt.task_name!r}, configured task is {cfg.task.name!r}"
        )
    return instantiate(prompt, _bindings(cfg))


def _prepare_cases(
    cfg: PipelineConfig, trajs: Sequence[Trajectory]
) -> tuple[list[Case], Optional[RegionGrid]]:
    """Derive the model inputs and hidden truths for the configured task."""
    task = cfg.task.name
    cases: list[Case] = []
    grid: Optional[RegionGrid] = None
    if task == "tte":
        for traj in trajs:
            kin = kinematics(traj.points)
            cases.append(Case(traj.traj_id, traj, str(int(kin.duration_s)), traj.start.t))
    elif task == "ad":
        for traj in trajs:
            if traj.label not in ("anomaly", "normal"):
                raise DataError(
                    f"trajectory {traj.traj_id!r} lacks an anomaly/normal label"
                )
            cases.append(Case(traj.traj_id, traj, traj.label, None))
    elif task == "tmi":
        for traj in trajs:
            if traj.label not in TMI_MODES:
                raise DataError(
                    f"trajectory {traj.traj_id!r} lacks a travel-mode label"
                )
            cases.append(Case(traj.traj_id, traj, traj.label, None))
    elif task == "mp":
        grid = RegionGrid.from_trajectories(trajs, cfg.task.grid_rows, cfg.task.grid_cols)
        for traj in trajs:
            truth = grid.region_id(traj.end.lon, traj.end.lat)
            cases.append(
                Case(traj.traj_id, truncate_for_prediction(traj, cfg.task.mp_truncate_fraction), truth, None)
            )
    else:
        raise ConfigError([f"task.name: unknown task {task!r}"])
    return cases, grid


def _assemble_case(
    cfg: PipelineConfig,
    traj: Trajectory,
    db: Optional[ContextDb],
    tiles: TileSource,
):
    seg = segment_trajectory(traj, db, _weights(cfg), cfg.segmentation.road_radius_m)
    seq = assemble(
        traj,
        seg,
        db,
        _policy(cfg),
        _style(cfg),
        tiles,
        layers=cfg.render.layers,
        redaction=TASKS[cfg.task.name].redaction,
    )
    return seg, seq


def _case_texts(seq) -> tuple[str, ...]:
    first_layer = seq.layers[0]
    return tuple(item.text.rendered for item in seq.items if item.layer == first_layer)


# ---------------------------------------------------------------------------
# Stages


def run_segment(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Segment every input trajectory; one JSON file per trajectory."""
    trajs = _load_trajectories(cfg, base_dir)
    db = _load_db(cfg, base_dir)
    stage_dir = _out_dir(cfg, base_dir) / "segments"
    stage_dir.mkdir(parents=True, exist_ok=True)

    def work(traj: Trajectory) -> Segmentation:
        return segment_trajectory(traj, db, _weights(cfg), cfg.segmentation.road_radius_m)

    segs = _map_jobs(work, trajs, cfg.jobs)
    for seg in segs:
        _write_json(stage_dir / f"{seg.trajectory_id}.json", seg.to_json_dict())
    summary = {
        "trajectories": len(trajs),
        "total_segments": sum(len(s.boundaries) for s in segs),
    }
    return _finish_stage("segment", cfg, stage_dir, summary)


def run_assemble(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Build and serialize the interleaved sequence for every case."""
    trajs = _load_trajectories(cfg, base_dir)
    db = _load_db(cfg, base_dir)
    tiles = _tiles(cfg, base_dir)
    cases, _ = _prepare_cases(cfg, trajs)
    stage_dir = _out_dir(cfg, base_dir) / "sequences"
    stage_dir.mkdir(parents=True, exist_ok=True)

    def work(case: Case):
        _, seq = _assemble_case(cfg, case.traj, db, tiles)
        return seq

    seqs = _map_jobs(work, cases, cfg.jobs)
    items = 0
    for seq in seqs:
        serialize_sequence(seq, stage_dir / seq.trajectory_id)
        items += len(seq.items)
    summary = {"sequences": len(seqs), "total_items": items}
    return _finish_stage("assemble", cfg, stage_dir, summary)


def run_synth(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Inject synthetic anomalies into the input pool and write the benchmark."""
    trajs = _load_trajectories(cfg, base_dir)
    a = cfg.anomaly
    params = BenchmarkParams(
        inject_ratio=a.inject_ratio,
        min_pool=a.min_pool,
        detour=DetourParams(a.detour_alpha, a.detour_cells, a.grid_cell_m),
        switch=SwitchParams(a.switch_mu, a.endpoint_tolerance_m),
    )
    bench, manifest = build_anomaly_benchmark(trajs, params, cfg.task.seed)
    stage_dir = _out_dir(cfg, base_dir) / "benchmark"
    stage_dir.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(bench, stage_dir / "trajectories.csv")
    _write_json(stage_dir / "injections.json", manifest)
    summary = {
        "pool_size": manifest["pool_size"],
        "n_anomalies": manifest["n_anomalies"],
        "n_detours": manifest["n_detours"],
        "n_switches": manifest["n_switches"],
    }
    return _finish_stage("synth-anomalies", cfg, stage_dir, summary)


def run_optimize(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Refine the task prompt against seed cases through the gateway."""
    cfg.require("task.prompt_file", "task.seeds_file")
    initial = _load_bound_prompt(cfg, base_dir)
    seed_trajs = load_trajectories_csv(base_dir / cfg.task.seeds_file)
    if not seed_trajs:
        raise DataError(f"no seed trajectories in {cfg.task.seeds_file}")
    db = _load_db(cfg, base_dir)
    tiles = _tiles(cfg, base_dir)
    cases, _ = _prepare_cases(cfg, seed_trajs)

    def work(case: Case) -> SeedCase:
        _, seq = _assemble_case(cfg, case.traj, db, tiles)
        return SeedCase(
            case_id=case.case_id,
            parts=tuple(to_chat_parts(seq)),
            texts=_case_texts(seq),
            truth=case.truth,
            start_t=case.start_t,
        )

    seeds = _map_jobs(work, cases, cfg.jobs)
    gateway = _build_gateway(cfg, base_dir)
    scorer = make_seed_scorer(cfg.task.name)
    stage_dir = _out_dir(cfg, base_dir) / "prompts"
    stage_dir.mkdir(parents=True, exist_ok=True)
    trace_path = stage_dir / f"{cfg.task.name}_trace.json"
    try:
        result = optimize(
            initial,
            seeds,
            gateway,
            scorer,
            model=cfg.gateway.model,
            target_score=cfg.optimize.target_score,
            max_rounds=cfg.optimize.max_rounds,
        )
    except OptimizationAborted as exc:
        # surface the partial trace before propagating the gateway failure
        _write_json(trace_path, exc.trace.to_json_dict())
        raise
    save_prompt(result.prompt, stage_dir / f"{cfg.task.name}.prompt")
    _write_json(trace_path, result.trace.to_json_dict())
    last = result.trace.rounds[-1]
    summary = {
        "task": cfg.task.name,
        "rounds": len(result.trace.rounds),
        "stop_reason": result.trace.stop_reason,
        "best_version": result.trace.best_version,
        "final_score": last.score,
        "seeds": len(seeds),
    }
    return _finish_stage("optimize", cfg, stage_dir, summary)


def run_task(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Query the model for every case and persist raw responses."""
    prompt = _load_bound_prompt(cfg, base_dir)
    system = system_text(prompt)
    trajs = _load_trajectories(cfg, base_dir)
    db = _load_db(cfg, base_dir)
    tiles = _tiles(cfg, base_dir)
    cases, _ = _prepare_cases(cfg, trajs)
    gateway = _build_gateway(cfg, base_dir)

    def work(case: Case) -> ResultRow:
        _, seq = _assemble_case(cfg, case.traj, db, tiles)
        req = ChatRequest(
            model=cfg.gateway.model, system=system, parts=tuple(to_chat_parts(seq))
        )
        resp = gateway.send(req)
        return ResultRow(
            case_id=case.case_id, truth=case.truth, response=resp.text, start_t=case.start_t
        )

    rows = _map_jobs(work, cases, cfg.jobs)
    stage_dir = _out_dir(cfg, base_dir) / "results"
    stage_dir.mkdir(parents=True, exist_ok=True)
    results_path = stage_dir / f"{cfg.task.name}.jsonl"
    with results_path.open("w") as fh:
        for row in rows:
            fh.write(
                json.dumps(
                    {
                        "case_id": row.case_id,
                        "truth": row.truth,
                        "response": row.response,
                        "start_t": row.start_t,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _write_json(
        stage_dir / f"{cfg.task.name}_usage.json", gateway.ledger.summary(_price_table(cfg))
    )
    summary = {"task": cfg.task.name, "cases": len(rows)}
    return _finish_stage("run", cfg, stage_dir, summary)


def load_results(path: Path) -> list[ResultRow]:
    rows: list[ResultRow] = []
    if not path.exists():
        return rows
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                rows.append(
                    ResultRow(
                        case_id=doc["case_id"],
                        truth=doc["truth"],
                        response=doc["response"],
                        start_t=doc.get("start_t"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad result row: {exc}") from exc
    return rows


def run_report(cfg: PipelineConfig, base_dir: Path) -> StageResult:
    """Score persisted results; an empty store still writes a zero report."""
    task = cfg.task.name
    results_path = _out_dir(cfg, base_dir) / "results" / f"{task}.jsonl"
    rows = load_results(results_path)
    stage_dir = _out_dir(cfg, base_dir) / "report"
    stage_dir.mkdir(parents=True, exist_ok=True)

    if not rows:
        empty = {
            "task": task,
            "n_cases": 0,
            "n_parsed": 0,
            "n_parse_failures": 0,
            "metrics": {},
            "undefined": [],
        }
        _write_json(stage_dir / f"{task}_report.json", empty)
        (stage_dir / f"{task}_report.txt").write_text(
            f"task: {task}\ncases: 0 (no results to score)\n"
        )
        _finish_stage("report", cfg, stage_dir, {"task": task, "cases": 0})
        raise NoResultsError(f"no results found at {results_path}")

    report = score_results(task, rows)
    _write_json(stage_dir / f"{task}_report.json", report.to_json_dict())
    (stage_dir / f"{task}_report.txt").write_text(report.to_text() + "\n")

    # per-case plot fodder
    case_lines = ["case_id,truth,parsed_ok,prediction"]
    for row in rows:
        parsed = parse_answer(task, row.response, start_t=row.start_t)
        if not parsed.ok:
            shown = ""
        elif task == "ad":
            shown = f"{parsed.value[0]}:{parsed.value[1]}"
        elif task == "mp":
            shown = "|".join(parsed.value)
        else:
            shown = str(parsed.value)
        case_lines.append(f"{row.case_id},{row.truth},{int(parsed.ok)},{shown}")
    (stage_dir / f"{task}_cases.csv").write_text("\n".join(case_lines) + "\n")

    summary = {
        "task": task,
        "cases": report.n_cases,
        "parse_failures": report.n_parse_failures,
        "metrics": {
            k: v for k, v in report.metrics.items() if isinstance(v, (int, float))
        },
    }
    return _finish_stage("report", cfg, stage_dir, summary)


STAGES = {
    "segment": run_segment,
    "assemble": run_assemble,
    "synth-anomalies": run_synth,
    "optimize": run_optimize,
    "run": run_task,
    "report": run_report,
}
