import pytest

from hiptune.errors import ConfigError, LabelError
from hiptune.taxonomy import AttackTaxonomy, build_taxonomy


def test_default_level_counts(taxonomy):
    assert [len(taxonomy.level(k)) for k in (1, 2, 3)] == [3, 5, 14]
    assert len(taxonomy) == 22


def test_default_has_54_methods(taxonomy):
    assert taxonomy.n_methods == 54
    assert taxonomy.method_ids == tuple(range(54))


def test_one_method_per_leaf_node():
    assert build_taxonomy(1).n_methods == 14


def test_duplicate_name_rejected():
    with pytest.raises(ConfigError):
        build_taxonomy(structure={"physical": ("2D",), "digital": ("2D",), "2D": ("print",)})


def test_nonpositive_leaf_count_rejected():
    with pytest.raises(ConfigError):
        build_taxonomy({"print": 0})


def test_ids_are_deterministic():
    a, b = build_taxonomy(), build_taxonomy()
    assert a == b and a.digest() == b.digest()


def test_paths_and_child_order(taxonomy):
    dig = taxonomy.by_name("digital").id
    adv = taxonomy.by_name("adversarial").id
    pix = taxonomy.by_name("pixel-level").id
    assert taxonomy.child_index(dig) == 2
    assert taxonomy.child_index(adv) == 1
    assert taxonomy.child_index(pix) == 0
    m = taxonomy[pix].method_ids[0]
    assert taxonomy.path_of_method(m) == (dig, adv, pix)
    taxonomy.check_path((dig, adv, pix))
    with pytest.raises(LabelError):
        taxonomy.check_path((dig, taxonomy.by_name("2D").id, pix))


def test_unknown_node(taxonomy):
    with pytest.raises(LabelError):
        taxonomy[999]
    with pytest.raises(LabelError):
        taxonomy.by_name("nope")


def test_dict_round_trip(taxonomy):
    again = AttackTaxonomy.from_dict(taxonomy.to_dict())
    assert again == taxonomy
    assert again.digest() == taxonomy.digest()
