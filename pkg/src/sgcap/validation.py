"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

from .scene_graph import SceneGraph, parse_scene_graph, validate


def as_scene_graph(x) -> SceneGraph:
    """Accept a SceneGraph or SG-format text; reject anything invalid."""
    if isinstance(x, str):
        g = parse_scene_graph(x)
    elif isinstance(x, SceneGraph):
        g = x
    else:
        raise TypeError(f"expected SceneGraph or SG text, got {type(x).__name__}")
    problems = validate(g)
    if problems:
        raise ValueError("invalid scene graph: " + "; ".join(problems))
    return g


def check_graphs(X) -> list[SceneGraph]:
    if len(X) == 0:
        raise ValueError("expected at least one scene graph")
    return [as_scene_graph(x) for x in X]


def check_aligned(name: str, values, n: int):
    if values is not None and len(values) != n:
        raise ValueError(f"{name} has {len(values)} entries for {n} graphs")
    return values
