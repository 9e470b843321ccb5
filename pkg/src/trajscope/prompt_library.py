"""Shipped initial prompts for the four trajectory tasks.

Knowledge sections carry the only placeholders ({city}, {notes}, and the
grid shape for destination prediction); they are bound from run
configuration. Formats state the machine-parseable answer shape that the
matching grammar in the tasks module accepts.
"""

from __future__ import annotations

from .prompting import TaskPrompt

_TTE = TaskPrompt(
    task_name="tte",
    role=(
        "You are a careful traffic analyst. You read map images of a vehicle "
        "trajectory together with per-segment motion statistics and reason "
        "about travel time."
    ),
    task=(
        "Review the global view first, then each segment view in order. Judge "
        "road classes, intersection density, and the reported speeds, and "
        "estimate how long the whole described trip takes from its start "
        "time to arrival."
    ),
    knowledge="City: {city}.\nLocal notes: {notes}.",
    format=(
        "Reason step by step over the segments, then end your reply with "
        "exactly one line in one of these forms:\n"
        "Estimated Arrival Time: 2024-11-01 14:03:20\n"
        "Estimated Duration Seconds: 3280\n"
        "Use the arrival-time form when the start time is visible in the "
        "descriptions."
    ),
)

_AD = TaskPrompt(
    task_name="ad",
    role=(
        "You are a route auditor. You compare a trip against the plausible "
        "ways of traveling between its endpoints and spot abnormal behavior."
    ),
    task=(
        "Inspect the global view and each segment. Decide whether the trip "
        "follows a plausible continuous route between its endpoints, or shows "
        "an abnormal pattern such as an unexplained detour away from the "
        "corridor or an abrupt jump onto a different path."
    ),
    knowledge="City: {city}.\nLocal notes: {notes}.",
    format=(
        "Structure your reasoning as three short parts: Overall Assessment, "
        "Evidence Analysis, Conclusion. Then end with exactly one line:\n"
        "Final Judgment: Normal\n"
        "or\n"
        "Final Judgment: Anomaly\n"
        "You may add one final line: Confidence: <number between 0 and 1>"
    ),
)

_MP = TaskPrompt(
    task_name="mp",
    role=(
        "You are a mobility analyst. You anticipate where an ongoing trip is "
        "heading from its partial track."
    ),
    task=(
        "The trajectory shown is the first part of a trip. From its heading, "
        "speed profile, and how it follows the road network, predict which "
        "grid region the trip will end in."
    ),
    knowledge=(
        "City: {city}.\n"
        "Regions are labeled RrrCcc for row rr and column cc of a "
        "{grid_rows}x{grid_cols} grid over the city; rows count from north, "
        "columns from west.\n"
        "Local notes: {notes}."
    ),
    format=(
        "After your reasoning, list up to five candidate regions, most likely "
        "first, one per line:\n"
        "1. R07C12\n"
        "2. R07C13"
    ),
)

_TMI = TaskPrompt(
    task_name="tmi",
    role=(
        "You are a transportation mode analyst. You identify how someone "
        "traveled from the shape and rhythm of their track."
    ),
    task=(
        "Judge the travel mode from the speeds, the stop pattern, and how "
        "closely the path sticks to the road network in each view."
    ),
    knowledge="City: {city}.\nLocal notes: {notes}.",
    format=(
        "Explain the telltale evidence briefly. Your final line must contain "
        "only the mode name, exactly one of: walk, bike, bus, car, train."
    ),
)

_DEFAULTS = {"tte": _TTE, "ad": _AD, "mp": _MP, "tmi": _TMI}


def default_prompt(task_name: str) -> TaskPrompt:
    """The shipped version-1 prompt for a task."""
    if task_name not in _DEFAULTS:
        raise ValueError(f"unknown task {task_name!r}")
    return _DEFAULTS[task_name]
