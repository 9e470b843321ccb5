"""Tests for prompts and the optimization loop contracts."""

import pytest

from trajscope.gateway import Gateway, PermanentBackendError, TextPart
from trajscope.prompt_library import default_prompt
from trajscope.prompting import (
    OptimizationAborted,
    PromptError,
    REFINER_SYSTEM,
    RoundEval,
    SeedCase,
    TaskPrompt,
    build_feedback,
    instantiate,
    load_prompt,
    optimize,
    parse_refinement,
    placeholders,
    save_prompt,
    system_text,
)


def mini_prompt(**overrides):
    base = dict(
        task_name="tmi",
        role="analyst role",
        task="decide the mode",
        knowledge="City: {city}.",
        format="final line is the mode",
        version=1,
    )
    base.update(overrides)
    return TaskPrompt(**base)


class TestPromptStructure:
    def test_instantiate_binds_knowledge_only(self):
        p = mini_prompt(task="task with {city} braces untouched")
        bound = instantiate(p, {"city": "Beijing"})
        assert bound.knowledge == "City: Beijing."
        assert bound.task == "task with {city} braces untouched"

    def test_unbound_placeholder_message(self):
        with pytest.raises(PromptError, match="unbound placeholder: city"):
            instantiate(mini_prompt(), {"town": "x"})

    def test_extra_facts_ignored(self):
        bound = instantiate(mini_prompt(), {"city": "Xian", "noise": "y"})
        assert "Xian" in bound.knowledge

    def test_system_text_sections(self):
        p = instantiate(mini_prompt(), {"city": "Chengdu"})
        sys = system_text(p)
        for header in ("## Role", "## Task", "## Knowledge", "## Output Format"):
            assert header in sys

    def test_system_text_refuses_unbound(self):
        with pytest.raises(PromptError, match="unbound placeholder"):
            system_text(mini_prompt())

    def test_placeholders_found(self):
        assert placeholders("a {x} b {long_name} {x}") == {"x", "long_name"}

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            mini_prompt(task_name="cooking")


class TestPromptFiles:
    def test_roundtrip(self, tmp_path):
        p = default_prompt("tte")
        path = tmp_path / "tte.prompt"
        save_prompt(p, path)
        assert load_prompt(path) == p

    def test_roundtrip_multiline_sections(self, tmp_path):
        p = mini_prompt(task="line one\n\nline three", version=4)
        path = tmp_path / "p.prompt"
        save_prompt(p, path)
        back = load_prompt(path)
        assert back.task == "line one\n\nline three"
        assert back.version == 4

    def test_missing_front_matter(self, tmp_path):
        path = tmp_path / "bad.prompt"
        path.write_text("[role]\nx\n")
        with pytest.raises(PromptError, match="front matter"):
            load_prompt(path)

    def test_missing_section(self, tmp_path):
        path = tmp_path / "bad.prompt"
        path.write_text("---\ntask: tte\nversion: 1\n---\n[role]\nr\n[task]\nt\n[knowledge]\nk\n")
        with pytest.raises(PromptError, match="format"):
            load_prompt(path)

    def test_all_defaults_roundtrip(self, tmp_path):
        for name in ("tte", "ad", "mp", "tmi"):
            p = default_prompt(name)
            save_prompt(p, tmp_path / f"{name}.prompt")
            assert load_prompt(tmp_path / f"{name}.prompt") == p


class TestParseRefinement:
    def test_valid(self):
        text = "thinking...\nTASK:\nnew task text\nKNOWLEDGE:\nnew knowledge text"
        assert parse_refinement(text) == ("new task text", "new knowledge text")

    def test_multiline(self):
        text = "TASK:\nline a\nline b\nKNOWLEDGE:\nk1\nk2"
        assert parse_refinement(text) == ("line a\nline b", "k1\nk2")

    def test_missing_sections(self):
        assert parse_refinement("just some words") is None
        assert parse_refinement("TASK:\nonly task") is None

    def test_empty_task_rejected(self):
        assert parse_refinement("TASK:\n\nKNOWLEDGE:\nk") is None


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
    score = sum(agreements) / len(agreements)
    return RoundEval(score=score, agreements=agreements)


def two_seeds():
    return [
        SeedCase("s1", parts=(TextPart("desc one"),), texts=("desc one",), truth="car"),
        SeedCase("s2", parts=(TextPart("desc two"),), texts=("desc two",), truth="walk"),
    ]


GOOD_REFINEMENT = "TASK:\nrefined task\nKNOWLEDGE:\nCity X facts.\nextra hint"


class TestOptimizeLoop:
    def test_satisfied_immediately_zero_refinements(self):
        backend = QueueBackend(["car", "walk"])
        result = optimize(
            instantiate(mini_prompt(), {"city": "X"}),
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=5,
        )
        assert result.trace.stop_reason == "satisfied"
        assert len(result.trace.rounds) == 1
        assert len(backend.requests) == 2  # evaluations only, no refinement
        assert result.prompt.version == 1

    def test_never_correct_runs_exactly_max_rounds(self):
        # 3 rounds of 2 evals each + 2 refinements between rounds = 8 calls.
        backend = QueueBackend(
            ["bad", "bad", GOOD_REFINEMENT, "bad", "bad", GOOD_REFINEMENT, "bad", "bad"]
        )
        initial = instantiate(mini_prompt(), {"city": "X"})
        result = optimize(
            initial,
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=3,
        )
        assert result.trace.stop_reason == "max_rounds"
        assert len(result.trace.rounds) == 3
        assert len(backend.requests) == 8
        assert [r.prompt_version for r in result.trace.rounds] == [1, 2, 3]
        # all scores equal: earliest version is the best-seen
        assert result.prompt.version == 1

    def test_role_and_format_byte_stable_across_versions(self):
        backend = QueueBackend(
            ["bad", "bad", GOOD_REFINEMENT, "bad", "bad", GOOD_REFINEMENT, "bad", "bad"]
        )
        initial = instantiate(mini_prompt(), {"city": "X"})
        result = optimize(
            initial, two_seeds(), Gateway(backend), exact_match_scorer, model="m", max_rounds=3
        )
        assert len(result.trace.prompts) == 3
        for p in result.trace.prompts:
            assert p.role == initial.role
            assert p.format == initial.format
        assert result.trace.prompts[1].task == "refined task"

    def test_refinement_retry_once_then_accept(self):
        backend = QueueBackend(
            ["bad", "bad", "no sections here", GOOD_REFINEMENT, "car", "walk"]
        )
        result = optimize(
            instantiate(mini_prompt(), {"city": "X"}),
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=3,
        )
        assert result.trace.rounds[0].refinement_accepted is True
        assert result.trace.stop_reason == "satisfied"
        assert result.prompt.version == 2
        # the retry request carries the format reminder
        retry_req = backend.requests[3]
        assert retry_req.system == REFINER_SYSTEM
        assert "two-section format" in retry_req.parts[0].text

    def test_refinement_fails_twice_keeps_prior(self):
        backend = QueueBackend(
            ["bad", "bad", "garbage", "more garbage", "bad", "bad"]
        )
        result = optimize(
            instantiate(mini_prompt(), {"city": "X"}),
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=2,
        )
        assert result.trace.rounds[0].refinement_accepted is False
        assert [r.prompt_version for r in result.trace.rounds] == [1, 1]
        assert result.prompt.version == 1

    def test_self_check_rejects_new_placeholders(self):
        sneaky = "TASK:\nok task\nKNOWLEDGE:\nneeds {unknown_fact}"
        backend = QueueBackend(["bad", "bad", sneaky, sneaky, "bad", "bad"])
        result = optimize(
            mini_prompt(knowledge="plain knowledge"),
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=2,
        )
        assert result.trace.rounds[0].refinement_accepted is False
        assert result.prompt.version == 1

    def test_best_seen_returned_when_scores_decline(self):
        # round 1: half right (0.5); rounds 2-3: all wrong (0.0) -> best is v1.
        backend = QueueBackend(
            ["car", "nope", GOOD_REFINEMENT, "x", "y", GOOD_REFINEMENT, "x", "y"]
        )
        result = optimize(
            instantiate(mini_prompt(), {"city": "X"}),
            two_seeds(),
            Gateway(backend),
            exact_match_scorer,
            model="m",
            max_rounds=3,
        )
        assert result.prompt.version == 1
        assert result.trace.best_version == 1
        assert [r.score for r in result.trace.rounds] == [0.5, 0.0, 0.0]

    def test_gateway_failure_aborts_with_trace(self):
        backend = QueueBackend(["car", "nope", GOOD_REFINEMENT, PermanentBackendError("down")])
        with pytest.raises(OptimizationAborted) as excinfo:
            optimize(
                instantiate(mini_prompt(), {"city": "X"}),
                two_seeds(),
                Gateway(backend),
                exact_match_scorer,
                model="m",
                max_rounds=3,
            )
        trace = excinfo.value.trace
        assert trace.stop_reason == "aborted"
        assert len(trace.rounds) == 1

    def test_feedback_contains_disagreements_and_texts_only(self):
        prompt = instantiate(mini_prompt(), {"city": "X"})
        seeds = two_seeds()
        ev = RoundEval(score=0.5, agreements=(True, False))
        fb = build_feedback(prompt, seeds, ["car", "wrong"], ev)
        assert "Case s2" in fb and "Case s1" not in fb
        assert "desc two" in fb
        assert "Expected: walk" in fb
        assert "base64" not in fb

    def test_empty_seeds_rejected(self):
        with pytest.raises(ValueError):
            optimize(
                mini_prompt(), [], Gateway(QueueBackend([])), exact_match_scorer, model="m"
            )
