"""Deterministic synthetic scene-graph/caption dataset.

Captions are built from a fixed template so that caption content is a
pure function of the graph: nouns are exactly the object labels,
adjectives the attribute labels, verbs/prepositions the relation
labels, plus a closed function-word set.  Object mentions, attribute
lists, and relation directions are ordered canonically by label, so a
permutation-equivariant encoder sees everything it needs to reproduce
the caption exactly.

The only templated variation is the article ("a" vs "the"), chosen per
object label from the dataset seed, which keeps it learnable.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene_graph import SceneGraph, parse_scene_graph, serialize_scene_graph

FUNCTION_WORDS = ("a", "the", "and")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_N_SYLLABLES = len(_CONSONANTS) * len(_VOWELS)

_MAX_REJECTS = 200


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the generator; defaults give the desk-scale benchmark."""

    seed: int = 0
    n_object_labels: int = 20
    n_attribute_labels: int = 8
    n_relation_labels: int = 8
    min_objects: int = 1
    max_objects: int = 4
    attr_prob: float = 0.5
    rel_prob: float = 0.35
    max_relations: int = 3
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def __post_init__(self):
        if min(self.n_object_labels, self.n_attribute_labels, self.n_relation_labels) < 1:
            raise ValueError("label vocabularies must be non-empty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.n_object_labels:
            raise ValueError("max_objects exceeds the object label vocabulary")
        if not (0.0 <= self.attr_prob <= 1.0 and 0.0 <= self.rel_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.max_relations < 0:
            raise ValueError("max_relations must be >= 0")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("split sizes must be >= 1")


@dataclass(frozen=True)
class SynthSample:
    """One graph with its reference caption(s) and per-word POS tags."""

    id: int
    graph: SceneGraph
    captions: tuple[str, ...]
    pos_tags: tuple[str, ...]   # aligned with the words of captions[0]

    @property
    def caption(self) -> str:
        return self.captions[0]


@dataclass
class DatasetSplits:
    train: list[SynthSample]
    val: list[SynthSample]
    test: list[SynthSample]


def _syllable(i: int) -> str:
    return _CONSONANTS[i % len(_CONSONANTS)] + _VOWELS[(i // len(_CONSONANTS)) % len(_VOWELS)]


class SynthLabels:
    """Label vocabularies plus the per-label template choices.

    Object labels look like nouns ("bado"), attribute labels like
    adjectives ("fovy"), relation labels alternate verb-like ("bas") and
    preposition-like ("bader") forms; the suffix patterns keep the three
    vocabularies disjoint.
    """

    def __init__(self, spec: SynthSpec):
        self.objects = tuple(
            _syllable(i % _N_SYLLABLES) + _syllable((3 * i + 7) % _N_SYLLABLES)
            for i in range(spec.n_object_labels)
        )
        self.attributes = tuple(
            _syllable((5 * i + 1) % _N_SYLLABLES) + "vy"
            for i in range(spec.n_attribute_labels)
        )
        relations, rel_tags = [], {}
        for i in range(spec.n_relation_labels):
            stem = _syllable((2 * i + 3) % _N_SYLLABLES)
            if i % 2 == 0:
                label, tag = stem + "s", "VERB"
            else:
                label, tag = stem + "der", "PREP"
            relations.append(label)
            rel_tags[label] = tag
        self.relations = tuple(relations)
        self.rel_tags = rel_tags
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(999,)))
        self.articles = {
            label: ("a" if rng.random() < 0.5 else "the") for label in self.objects
        }
        for kind, labels in (("object", self.objects), ("attribute", self.attributes),
                             ("relation", self.relations)):
            if len(set(labels)) != len(labels):
                raise ValueError(f"{kind} vocabulary too large for distinct labels")


def generate_sample(spec: SynthSpec, index: int, salt: int = 0, labels: SynthLabels | None = None) -> SynthSample:
    """Deterministic sample for (spec.seed, index); salt varies retries."""
    labels = labels or SynthLabels(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(index, salt)))
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    # distinct labels per graph: a set-shaped encoder cannot tell two
    # same-label objects apart, so duplicates would make the template
    # caption unpredictable in principle
    picks = rng.choice(len(labels.objects), size=n_obj, replace=False)
    objects = tuple(labels.objects[int(k)] for k in picks)
    attributes = []
    for i in range(n_obj):
        if rng.random() < spec.attr_prob:
            attributes.append((i, labels.attributes[int(rng.integers(0, len(labels.attributes)))]))
    relations = []
    pairs = [(i, j) for i in range(n_obj) for j in range(i + 1, n_obj)]
    for p in rng.permutation(len(pairs)) if pairs else []:
        if len(relations) >= spec.max_relations:
            break
        if rng.random() < spec.rel_prob:
            i, j = pairs[int(p)]
            rel = labels.relations[int(rng.integers(0, len(labels.relations)))]
            # canonical direction: the label that reads first is the subject
            if (objects[j], j) < (objects[i], i):
                relations.append((j, i, rel))
            else:
                relations.append((i, j, rel))
    graph = SceneGraph(objects, tuple(attributes), tuple(sorted(relations)))
    words, tags = _template_caption(graph, labels)
    return SynthSample(index, graph, (" ".join(words),), tuple(tags))


def _template_caption(graph: SceneGraph, labels: SynthLabels) -> tuple[list[str], list[str]]:
    """Render a graph as one sentence, mentioning every node exactly once.

    Objects appear in canonical label order; each relation label is
    emitted in the gap just before its later-mentioned endpoint, which
    puts it between its two endpoint nouns.
    """
    order = sorted(range(len(graph.objects)), key=lambda i: (graph.objects[i], i))
    mention = {obj: pos for pos, obj in enumerate(order)}
    attrs = defaultdict(list)
    for obj, label in graph.attributes:
        attrs[obj].append(label)
    gaps = defaultdict(list)
    for subj, obj, label in graph.relations:
        first, last = sorted((mention[subj], mention[obj]))
        gaps[last].append((label, first))
    words, tags = [], []
    for pos, obj in enumerate(order):
        if pos > 0:
            connectors = sorted(gaps.get(pos, []))
            if connectors:
                for k, (label, _first) in enumerate(connectors):
                    if k > 0:
                        words.append("and")
                        tags.append("OTHER")
                    words.append(label)
                    tags.append(labels.rel_tags[label])
            else:
                words.append("and")
                tags.append("OTHER")
        words.append(labels.articles[graph.objects[obj]])
        tags.append("OTHER")
        for attr in sorted(attrs.get(obj, [])):
            words.append(attr)
            tags.append("ADJ")
        words.append(graph.objects[obj])
        tags.append("NOUN")
    return words, tags


def tag_caption(words: list[str], labels: SynthLabels) -> list[str]:
    """POS tags for a caption in the template grammar.

    Relation labels and function words are recognized by surface form;
    inside a noun phrase (article, adjectives..., noun) the class comes
    from position, so attribute words that are homographs of object
    labels are still tagged correctly.  Ungrammatical sequences get a
    best-effort tagging (word class by position in the current phrase).
    """
    relations = set(labels.relations)
    tags = ["OTHER"] * len(words)
    phrase: list[int] = []

    def close_phrase():
        if phrase:
            tags[phrase[-1]] = "NOUN"
            for idx in phrase[:-1]:
                tags[idx] = "ADJ"
            phrase.clear()

    for i, word in enumerate(words):
        if word in ("a", "the", "and"):
            close_phrase()
        elif word in relations:
            close_phrase()
            tags[i] = labels.rel_tags[word]
        else:
            phrase.append(i)
    close_phrase()
    return tags


def graph_combinations(graph: SceneGraph) -> set[tuple]:
    """Label-level attachment and relation combinations in a graph."""
    combos = set()
    for obj, label in graph.attributes:
        combos.add(("attr", graph.objects[obj], label))
    for subj, obj, label in graph.relations:
        combos.add(("rel", graph.objects[subj], label, graph.objects[obj]))
    return combos


def generate_dataset(spec: SynthSpec, out_dir: str | Path | None = None) -> DatasetSplits:
    """Build train/val/test over disjoint index ranges.

    Every test sample is regenerated (salt bump) until it contains at
    least one attachment or relation combination absent from the whole
    training split, so test scores require compositional generalization.
    Raises if the spec is too small for that guarantee.
    """
    labels = SynthLabels(spec)
    train = [generate_sample(spec, i, labels=labels) for i in range(spec.n_train)]
    val_base = spec.n_train
    val = [generate_sample(spec, val_base + i, labels=labels) for i in range(spec.n_val)]
    seen = set()
    for sample in train:
        seen |= graph_combinations(sample.graph)
    test_base = val_base + spec.n_val
    test = []
    for i in range(spec.n_test):
        index = test_base + i
        for salt in range(_MAX_REJECTS):
            sample = generate_sample(spec, index, salt=salt, labels=labels)
            if graph_combinations(sample.graph) - seen:
                break
        else:
            raise ValueError(
                "spec too small to satisfy the unseen-combination guarantee "
                f"for test sample {index}"
            )
        test.append(sample)
    splits = DatasetSplits(train, val, test)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            write_split(out, name, getattr(splits, name), seed=spec.seed)
    return splits


# ---------------------------------------------------------------------------
# on-disk layout: <split>.sg holds one SG block per sample separated by
# blank lines (each block is a standalone SG document); <split>.cap holds
# one record per sample: id, tab, caption, tab, space-separated POS tags.
# ---------------------------------------------------------------------------

def write_split(out_dir: Path, name: str, samples: list[SynthSample], seed: int | None = None):
    header = f"# seed {seed}\n" if seed is not None else ""
    sg_blocks, cap_lines = [], []
    for sample in samples:
        sg_blocks.append(f"# sample {sample.id}\n" + serialize_scene_graph(sample.graph))
        cap_lines.append(f"{sample.id}\t{sample.caption}\t{' '.join(sample.pos_tags)}")
    (out_dir / f"{name}.sg").write_text(header + "\n".join(sg_blocks), encoding="utf-8")
    (out_dir / f"{name}.cap").write_text(header + "\n".join(cap_lines) + "\n", encoding="utf-8")


def load_split(data_dir: str | Path, name: str) -> list[SynthSample]:
    data_dir = Path(data_dir)
    sg_text = (data_dir / f"{name}.sg").read_text(encoding="utf-8")
    cap_text = (data_dir / f"{name}.cap").read_text(encoding="utf-8")
    graphs = []
    for block in sg_text.split("\n\n"):
        stripped = [ln for ln in block.splitlines() if ln.strip() and not ln.strip().startswith("# seed")]
        if stripped:
            graphs.append(parse_scene_graph("\n".join(stripped)))
    records = []
    for line in cap_text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        sample_id, caption, tag_text = line.split("\t")
        records.append((int(sample_id), caption, tuple(tag_text.split())))
    if len(graphs) != len(records):
        raise ValueError(f"{name}: {len(graphs)} graphs but {len(records)} caption records")
    return [
        SynthSample(sample_id, graph, (caption,), tags)
        for graph, (sample_id, caption, tags) in zip(graphs, records)
    ]


def load_dataset(data_dir: str | Path) -> DatasetSplits:
    return DatasetSplits(
        train=load_split(data_dir, "train"),
        val=load_split(data_dir, "val"),
        test=load_split(data_dir, "test"),
    )
