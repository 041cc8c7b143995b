import numpy as np
import pytest

from sgcap.linearize import ATTRIBUTE, OBJECT, RELATION, build_mask, linearize, mask_to_text
from sgcap.scene_graph import SceneGraph, parse_scene_graph
from sgcap.vocab import Vocab

from oracles import FIG_GRAPH, FIG_MASK, mask_oracle, random_graph


def node_vocab(g: SceneGraph) -> Vocab:
    labels = list(g.objects) + [a for _, a in g.attributes] + [r for _, _, r in g.relations]
    return Vocab.for_node_labels(labels)


def test_linearize_order_and_segments():
    g = parse_scene_graph("obj 1 dog\nobj 2 fish\nattr 1 black\nrel 1 2 bite\n")
    vocab = node_vocab(g)
    lg = linearize(g, vocab)
    assert lg.n_nodes == 4
    assert (lg.n_obj, lg.n_attr, lg.n_rel) == (2, 1, 1)
    assert [vocab.token(i) for i in lg.token_ids] == ["dog", "fish", "black", "bite"]
    assert list(lg.type_ids) == [OBJECT, OBJECT, ATTRIBUTE, RELATION]


def test_linearize_fig_positions():
    # objects become tokens 1..3, the attribute token 4, relations 5..6
    lg = linearize(FIG_GRAPH, node_vocab(FIG_GRAPH))
    assert list(lg.type_ids) == [OBJECT] * 3 + [ATTRIBUTE] + [RELATION] * 2
    assert lg.n_obj == 3 and lg.n_attr == 1 and lg.n_rel == 2


def test_linearize_single_object():
    g = SceneGraph(("cat",))
    lg = linearize(g, node_vocab(g))
    assert lg.n_nodes == 1
    assert list(lg.type_ids) == [OBJECT]
    assert lg.mask.tolist() == [[1.0]]


def test_linearize_unknown_labels_counted():
    g = parse_scene_graph("obj 1 dog\nobj 2 wombat\nattr 1 black\n")
    vocab = Vocab.for_node_labels(["dog", "black"])
    lg = linearize(g, vocab)
    assert lg.unk_count == 1
    assert lg.token_ids[1] == vocab.unk_id


def test_mask_fig_paper_anchors():
    mask = build_mask(FIG_GRAPH)
    # 1-based anchors M[2,4], M[1,5], M[2,5] map to 0-based indices
    assert mask[1, 3] == 1
    assert mask[0, 4] == 1 and mask[1, 4] == 1
    assert mask[1, 5] == 1 and mask[2, 5] == 1


def test_mask_fig_full_matrix():
    assert np.array_equal(build_mask(FIG_GRAPH), FIG_MASK)


def test_mask_fig_matches_rule_oracle():
    assert np.array_equal(build_mask(FIG_GRAPH), mask_oracle(FIG_GRAPH))


def test_mask_two_objects_all_ones():
    g = SceneGraph(("a", "b"))
    assert build_mask(g).tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_mask_rejects_invalid_graph():
    with pytest.raises(ValueError, match="invalid scene graph"):
        build_mask(SceneGraph(("a",), (), ((0, 0, "r"),)))


def assert_mask_postconditions(g: SceneGraph, mask: np.ndarray):
    n_obj, n_attr, n_rel = len(g.objects), len(g.attributes), len(g.relations)
    n = n_obj + n_attr + n_rel
    assert mask.shape == (n, n)
    assert np.array_equal(mask, mask.T), "mask must be symmetric"
    assert np.all(mask[:n_obj, :n_obj] == 1), "object block saturated"
    assert np.all(np.diag(mask) == 1), "self-loops on the diagonal"
    attr_rows = slice(n_obj, n_obj + n_attr)
    rel_rows = slice(n_obj + n_attr, n)
    assert np.all(mask[attr_rows, rel_rows] == 0), "attribute-relation block zero"
    # row sums: attribute = object + self; relation = endpoints + self
    for j in range(n_attr):
        assert mask[n_obj + j].sum() == 2
    for k, (s, o, _label) in enumerate(g.relations):
        assert mask[n_obj + n_attr + k].sum() == 3


def test_mask_properties_random_graphs():
    rng = np.random.default_rng(11)
    for _ in range(300):
        g = random_graph(rng)
        mask = build_mask(g)
        assert_mask_postconditions(g, mask)
        assert np.array_equal(mask, mask_oracle(g))


def test_mask_object_permutation_consistency():
    rng = np.random.default_rng(12)
    for _ in range(50):
        g = random_graph(rng)
        n_obj = len(g.objects)
        if n_obj < 2:
            continue
        perm = rng.permutation(n_obj)
        inverse = np.argsort(perm)
        permuted = SceneGraph(
            tuple(g.objects[perm[i]] for i in range(n_obj)),
            tuple((int(inverse[obj]), label) for obj, label in g.attributes),
            tuple((int(inverse[s]), int(inverse[o]), label) for s, o, label in g.relations),
        )
        full = np.concatenate([perm, np.arange(n_obj, g.n_nodes)])
        expected = build_mask(g)[np.ix_(full, full)]
        assert np.array_equal(build_mask(permuted), expected)


def test_mask_deterministic():
    g = random_graph(np.random.default_rng(3))
    assert np.array_equal(build_mask(g), build_mask(g))


def test_mask_to_text():
    g = SceneGraph(("a", "b"))
    assert mask_to_text(build_mask(g)) == "1 1\n1 1\n"
