"""In-memory scene graphs, the line-based SG text format, and validation.

A scene graph has three node kinds: objects, attributes attached to a
single object, and directed relations between two distinct objects.
Object indices are 0-based positions into ``objects``; the SG text
format uses arbitrary positive integer ids that are resolved to indices
in order of appearance.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class SGParseError(ValueError):
    """Raised when an SG document cannot be parsed into a valid graph."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class SceneGraph:
    """Objects plus attachment and relation edges.

    attributes holds (object index, label) pairs; relations holds
    (subject index, object index, label) triples.  Relations keep their
    direction in storage even though the attention mask built from them
    is symmetric.
    """

    objects: tuple[str, ...]
    attributes: tuple[tuple[int, str], ...] = field(default=())
    relations: tuple[tuple[int, int, str], ...] = field(default=())

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def n_nodes(self) -> int:
        return len(self.objects) + len(self.attributes) + len(self.relations)


def validate(g: SceneGraph) -> list[str]:
    """Return one description per violated invariant; empty means valid."""
    problems = []
    n = len(g.objects)
    if n == 0:
        problems.append("graph has no objects")
    for k, (obj, label) in enumerate(g.attributes, start=1):
        if not 0 <= obj < n:
            problems.append(f"dangling attribute target at attribute {k}")
    for k, (subj, obj, label) in enumerate(g.relations, start=1):
        if not 0 <= subj < n or not 0 <= obj < n:
            problems.append(f"dangling relation endpoint at relation {k}")
        elif subj == obj:
            problems.append(f"self-relation at relation {k}")
    return problems


def parse_scene_graph(text: str) -> SceneGraph:
    """Parse an SG document into a SceneGraph.

    Format, one record per line, '#' starts a comment line:

        obj <id:int> <label>
        attr <obj-id:int> <label>
        rel <subj-id:int> <obj-id:int> <label>

    Object ids are arbitrary positive integers, unique within the
    document; internal indices follow order of appearance.  Raises
    SGParseError (with the offending line number) on syntax errors,
    duplicate object ids, dangling references, or self-relations.
    """
    objects: list[str] = []
    id_to_index: dict[int, int] = {}
    # (line, kind-specific payload); resolved after all obj lines are known
    attr_lines: list[tuple[int, int, str]] = []
    rel_lines: list[tuple[int, int, int, str]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "obj":
            if len(parts) != 3:
                raise SGParseError("expected 'obj <id> <label>'", lineno)
            oid = _parse_id(parts[1], lineno)
            if oid in id_to_index:
                raise SGParseError(f"duplicate object id {oid}", lineno)
            id_to_index[oid] = len(objects)
            objects.append(parts[2])
        elif kind == "attr":
            if len(parts) != 3:
                raise SGParseError("expected 'attr <obj-id> <label>'", lineno)
            attr_lines.append((lineno, _parse_id(parts[1], lineno), parts[2]))
        elif kind == "rel":
            if len(parts) != 4:
                raise SGParseError("expected 'rel <subj-id> <obj-id> <label>'", lineno)
            sid = _parse_id(parts[1], lineno)
            oid = _parse_id(parts[2], lineno)
            if sid == oid:
                raise SGParseError(f"self-relation on object id {sid}", lineno)
            rel_lines.append((lineno, sid, oid, parts[3]))
        else:
            raise SGParseError(f"unknown record kind {kind!r}", lineno)

    attributes = []
    for lineno, oid, label in attr_lines:
        if oid not in id_to_index:
            raise SGParseError(f"dangling object reference {oid}", lineno)
        attributes.append((id_to_index[oid], label))
    relations = []
    for lineno, sid, oid, label in rel_lines:
        for ref in (sid, oid):
            if ref not in id_to_index:
                raise SGParseError(f"dangling object reference {ref}", lineno)
        relations.append((id_to_index[sid], id_to_index[oid], label))

    if not objects:
        raise SGParseError("document declares no objects")

    return SceneGraph(tuple(objects), tuple(attributes), tuple(relations))


def serialize_scene_graph(g: SceneGraph) -> str:
    """Render a SceneGraph as an SG document (ids are 1-based positions)."""
    lines = [f"obj {i + 1} {label}" for i, label in enumerate(g.objects)]
    lines += [f"attr {obj + 1} {label}" for obj, label in g.attributes]
    lines += [f"rel {s + 1} {o + 1} {label}" for s, o, label in g.relations]
    return "\n".join(lines) + "\n"


def _parse_id(token: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise SGParseError(f"expected an integer id, got {token!r}", lineno) from None
    if value <= 0:
        raise SGParseError(f"object ids must be positive, got {value}", lineno)
    return value
