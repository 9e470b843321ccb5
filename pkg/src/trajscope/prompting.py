"""Structured task prompts and the feedback-driven optimization loop.

A TaskPrompt has four parts: role, task instructions, knowledge (the only
part carrying {placeholders}, bound at run time), and an output format
whose grammar id equals the task name. Optimization refines only the
task and knowledge parts; role and format stay byte-identical across
every version.

The loop evaluates the current prompt on labeled seed cases through the
gateway, stops as soon as the scorer meets the target (zero refinement
calls when round one already satisfies), and otherwise asks the model to
rewrite task/knowledge given the disagreeing cases. Feedback includes
only textual descriptions, never image bytes. A refinement that fails
the self-check is retried once, then the prior version is kept. The
returned prompt is the best seen (earliest argmax of score).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .gateway import ChatRequest, Gateway, GatewayError, TextPart

TASK_NAMES = ("tte", "ad", "mp", "tmi")

DEFAULT_TARGETS = {"tte": 0.8, "ad": 1.0, "mp": 1.0, "tmi": 1.0}

_PLACEHOLDER_RE = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")

REFINER_SYSTEM = (
    "You improve prompts for a trajectory analysis assistant. "
    "Rewrite only what is asked for and keep the required answer format intact."
)

_RETRY_NOTE = (
    "\nYour previous reply did not follow the required two-section format. "
    "Output exactly the sections TASK: and KNOWLEDGE:."
)


class PromptError(ValueError):
    """Malformed prompt file or unbound placeholder."""


@dataclass(frozen=True, slots=True)
class TaskPrompt:
    """One versioned prompt; task_name doubles as the answer grammar id."""

    task_name: str
    role: str
    task: str
    knowledge: str
    format: str
    version: int = 1

    def __post_init__(self) -> None:
        if self.task_name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.task_name!r}")
        if self.version < 1:
            raise ValueError("version must be >= 1")


def placeholders(text: str) -> set[str]:
    return set(_PLACEHOLDER_RE.findall(text))


def instantiate(prompt: TaskPrompt, facts: Mapping[str, str]) -> TaskPrompt:
    """Bind knowledge placeholders; other sections are never substituted."""

    def lookup(match: re.Match) -> str:
        name = match.group(1)
        if name not in facts:
            raise PromptError(f"unbound placeholder: {name}")
        return str(facts[name])

    return replace(prompt, knowledge=_PLACEHOLDER_RE.sub(lookup, prompt.knowledge))


def system_text(prompt: TaskPrompt) -> str:
    """The full system message assembled from the four sections."""
    if placeholders(prompt.knowledge):
        missing = sorted(placeholders(prompt.knowledge))
        raise PromptError(f"unbound placeholder: {missing[0]}")
    return (
        f"## Role\n{prompt.role}\n\n"
        f"## Task\n{prompt.task}\n\n"
        f"## Knowledge\n{prompt.knowledge}\n\n"
        f"## Output Format\n{prompt.format}"
    )


_SECTION_NAMES = ("role", "task", "knowledge", "format")


def save_prompt(prompt: TaskPrompt, path) -> None:
    """Write the canonical prompt file: front matter plus [section] blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [f"---\ntask: {prompt.task_name}\nversion: {prompt.version}\n---"]
    for name in _SECTION_NAMES:
        parts.append(f"[{name}]\n{getattr(prompt, name)}")
    path.write_text("\n".join(parts) + "\n")


def load_prompt(path) -> TaskPrompt:
    """Parse a prompt file written by save_prompt."""
    path = Path(path)
    text = path.read_text()
    m = re.match(r"---\n(.*?)\n---\n(.*)\Z", text, re.DOTALL)
    if not m:
        raise PromptError(f"{path}: missing front matter")
    meta: dict[str, str] = {}
    for line in m.group(1).splitlines():
        key, sep, value = line.partition(":")
        if not sep:
            raise PromptError(f"{path}: bad front matter line {line!r}")
        meta[key.strip()] = value.strip()
    if "task" not in meta:
        raise PromptError(f"{path}: front matter must declare the task")
    body = m.group(2)
    sections: dict[str, str] = {}
    current: Optional[str] = None
    buf: list[str] = []
    for line in body.splitlines():
        header = re.fullmatch(r"\[([a-z]+)\]", line)
        if header and header.group(1) in _SECTION_NAMES:
            if current is not None:
                sections[current] = "\n".join(buf).strip("\n")
            current = header.group(1)
            buf = []
        else:
            buf.append(line)
    if current is not None:
        sections[current] = "\n".join(buf).strip("\n")
    missing = [s for s in _SECTION_NAMES if s not in sections]
    if missing:
        raise PromptError(f"{path}: missing sections {missing}")
    try:
        version = int(meta.get("version", "1"))
    except ValueError as exc:
        raise PromptError(f"{path}: bad version {meta.get('version')!r}") from exc
    return TaskPrompt(
        task_name=meta["task"],
        role=sections["role"],
        task=sections["task"],
        knowledge=sections["knowledge"],
        format=sections["format"],
        version=version,
    )


@dataclass(frozen=True, slots=True)
class SeedCase:
    """One labeled evaluation case for the optimization loop.

    parts is the full multimodal payload; texts keeps only the textual
    descriptions for use in refinement feedback.
    """

    case_id: str
    parts: tuple
    texts: tuple[str, ...]
    truth: str
    start_t: Optional[int] = None


@dataclass(frozen=True, slots=True)
class RoundEval:
    """Scorer verdict for one round: overall score plus per-seed agreement."""

    score: float
    agreements: tuple[bool, ...]


Scorer = Callable[[Sequence[SeedCase], Sequence[str]], RoundEval]


@dataclass(frozen=True, slots=True)
class RoundRecord:
    round_index: int
    prompt_version: int
    outputs: tuple[str, ...]
    agreements: tuple[bool, ...]
    score: float
    feedback: Optional[str]
    refinement_accepted: Optional[bool]


@dataclass(frozen=True, slots=True)
class OptimizationTrace:
    rounds: tuple[RoundRecord, ...]
    prompts: tuple[TaskPrompt, ...]
    stop_reason: str
    best_version: int

    def to_json_dict(self) -> dict:
        return {
            "stop_reason": self.stop_reason,
            "best_version": self.best_version,
            "rounds": [
                {
                    "round_index": r.round_index,
                    "prompt_version": r.prompt_version,
                    "outputs": list(r.outputs),
                    "agreements": list(r.agreements),
                    "score": r.score,
                    "feedback": r.feedback,
                    "refinement_accepted": r.refinement_accepted,
                }
                for r in self.rounds
            ],
            "prompt_versions": [
                {
                    "version": p.version,
                    "task": p.task,
                    "knowledge": p.knowledge,
                    "role": p.role,
                    "format": p.format,
                }
                for p in self.prompts
            ],
        }


@dataclass(frozen=True, slots=True)
class OptimizationResult:
    prompt: TaskPrompt
    trace: OptimizationTrace


class OptimizationAborted(GatewayError):
    """Gateway failure mid-loop; carries the trace accumulated so far."""

    def __init__(self, message: str, trace: OptimizationTrace) -> None:
        super().__init__(message)
        self.trace = trace


def build_feedback(prompt: TaskPrompt, seeds: Sequence[SeedCase], outputs: Sequence[str], ev: RoundEval) -> str:
    """Refinement feedback: current text sections plus disagreeing cases.

    Only textual trajectory descriptions are included, never images.
    """
    lines = [
        "The current task instructions and knowledge are:",
        "TASK:",
        prompt.task,
        "KNOWLEDGE:",
        prompt.knowledge,
        "",
        "These cases were answered incorrectly:",
    ]
    for case, output, ok in zip(seeds, outputs, ev.agreements):
        if ok:
            continue
        lines += [
            f"--- Case {case.case_id} ---",
            f"Expected: {case.truth}",
            f"Model answered: {output.strip() or '(empty)'}",
            "Trajectory descriptions:",
            *case.texts,
            "",
        ]
    lines += [
        "Rewrite the task instructions and knowledge to fix these mistakes.",
        "Reply with exactly two sections:",
        "TASK:",
        "<improved task text>",
        "KNOWLEDGE:",
        "<improved knowledge text>",
    ]
    return "\n".join(lines)


def parse_refinement(text: str) -> Optional[tuple[str, str]]:
    """Extract (task, knowledge) from a refinement reply, or None."""
    m = re.search(r"TASK:\s*\n(.*?)\nKNOWLEDGE:\s*\n(.*)\Z", text, re.DOTALL)
    if not m:
        return None
    task = m.group(1).strip()
    knowledge = m.group(2).strip()
    if not task or not knowledge:
        return None
    return task, knowledge


def _self_check(current: TaskPrompt, task: str, knowledge: str) -> bool:
    # A refinement may drop placeholders but must not invent new ones the
    # run configuration could not bind.
    return placeholders(knowledge) <= placeholders(current.knowledge)


def optimize(
    initial: TaskPrompt,
    seeds: Sequence[SeedCase],
    gateway: Gateway,
    scorer: Scorer,
    *,
    model: str,
    target_score: Optional[float] = None,
    max_rounds: int = 5,
) -> OptimizationResult:
    """Iteratively refine task/knowledge until the target score or round cap.

    Role and format sections are never modified. Raises OptimizationAborted
    (with the partial trace attached) if the gateway fails mid-loop.
    """
    if not seeds:
        raise ValueError("optimization needs at least one seed case")
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    target = DEFAULT_TARGETS[initial.task_name] if target_score is None else target_score

    current = initial
    prompts: list[TaskPrompt] = [initial]
    rounds: list[RoundRecord] = []
    best_prompt = initial
    best_score = float("-inf")
    stop_reason = "max_rounds"

    def trace_so_far(reason: str, best_version: int) -> OptimizationTrace:
        return OptimizationTrace(
            rounds=tuple(rounds),
            prompts=tuple(prompts),
            stop_reason=reason,
            best_version=best_version,
        )

    for round_index in range(1, max_rounds + 1):
        system = system_text(current)
        outputs: list[str] = []
        try:
            for case in seeds:
                resp = gateway.send(
                    ChatRequest(model=model, system=system, parts=tuple(case.parts))
                )
                outputs.append(resp.text)
        except GatewayError as exc:
            raise OptimizationAborted(
                f"gateway failed in round {round_index}: {exc}",
                trace_so_far("aborted", best_prompt.version),
            ) from exc

        ev = scorer(seeds, outputs)
        if ev.score > best_score:
            best_score = ev.score
            best_prompt = current

        feedback: Optional[str] = None
        accepted: Optional[bool] = None
        if ev.score >= target:
            stop_reason = "satisfied"
            rounds.append(
                RoundRecord(round_index, current.version, tuple(outputs), ev.agreements, ev.score, None, None)
            )
            break
        if round_index == max_rounds:
            rounds.append(
                RoundRecord(round_index, current.version, tuple(outputs), ev.agreements, ev.score, None, None)
            )
            stop_reason = "max_rounds"
            break

        feedback = build_feedback(current, seeds, outputs, ev)
        refined: Optional[tuple[str, str]] = None
        try:
            for attempt_text in (feedback, feedback + _RETRY_NOTE):
                resp = gateway.send(
                    ChatRequest(model=model, system=REFINER_SYSTEM, parts=(TextPart(attempt_text),))
                )
                parsed = parse_refinement(resp.text)
                if parsed and _self_check(current, *parsed):
                    refined = parsed
                    break
        except GatewayError as exc:
            rounds.append(
                RoundRecord(round_index, current.version, tuple(outputs), ev.agreements, ev.score, feedback, None)
            )
            raise OptimizationAborted(
                f"gateway failed refining after round {round_index}: {exc}",
                trace_so_far("aborted", best_prompt.version),
            ) from exc

        accepted = refined is not None
        rounds.append(
            RoundRecord(round_index, current.version, tuple(outputs), ev.agreements, ev.score, feedback, accepted)
        )
        if refined is not None:
            current = replace(
                current, task=refined[0], knowledge=refined[1], version=current.version + 1
            )
            prompts.append(current)
        # else: keep the prior version and evaluate it again next round.

    return OptimizationResult(
        prompt=best_prompt,
        trace=trace_so_far(stop_reason, best_prompt.version),
    )
