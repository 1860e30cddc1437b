import json

import pytest
from hypothesis import given, strategies as st

from llmser.catalog import (
    Catalog,
    CatalogError,
    GroupingConfig,
    Interaction,
    Item,
    UserSequence,
    build_catalog,
    group_users,
    ingest,
    leave_one_out_split,
    length_histogram,
    load_catalog,
    reverse_sequence,
    save_catalog,
)

from conftest import make_catalog


def _write(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_ingest_builds_sequences(tmp_path):
    _write(tmp_path / "items.jsonl", [{"item_id": x, "title": f"t{x}"} for x in "abc"])
    _write(tmp_path / "inter.jsonl", [{"user_id": "u1", "item_id": x, "timestamp": t}
                                      for t, x in [(3, "c"), (1, "a"), (2, "b")]])
    cat = ingest(tmp_path / "inter.jsonl", tmp_path / "items.jsonl")
    assert cat.sequences["u1"].items == ("a", "b", "c")
    assert cat.sequences["u1"].n == 3
    assert cat.dropped_interactions == 0


def test_unknown_item_is_dropped_and_counted(tmp_path):
    _write(tmp_path / "items.jsonl", [{"item_id": "a", "title": "A"}, {"item_id": "b", "title": "B"}])
    _write(tmp_path / "inter.jsonl", [{"user_id": "u", "item_id": x, "timestamp": t}
                                      for t, x in enumerate(["a", "b", "zz"])])
    cat = ingest(tmp_path / "inter.jsonl", tmp_path / "items.jsonl")
    assert cat.dropped_interactions == 1
    assert cat.sequences["u"].items == ("a", "b")


def test_empty_interactions_file(tmp_path):
    _write(tmp_path / "items.jsonl", [{"item_id": "a", "title": "A"}])
    (tmp_path / "inter.jsonl").write_text("")
    with pytest.raises(CatalogError, match="no interactions"):
        ingest(tmp_path / "inter.jsonl", tmp_path / "items.jsonl")


def test_mostly_unknown_items_is_fatal():
    items = [Item("a", "A")]
    inter = [Interaction("u", x, t) for t, x in enumerate(["a", "x", "y"])]
    with pytest.raises(CatalogError, match="2 of 3"):
        build_catalog(items, inter)


def test_unreadable_file(tmp_path):
    with pytest.raises(CatalogError, match="cannot read"):
        ingest(tmp_path / "nope.jsonl", tmp_path / "nope2.jsonl")


def test_equal_timestamps_keep_input_order():
    items = [Item(x, x.upper()) for x in "abc"]
    inter = [Interaction("u", "c", 5), Interaction("u", "a", 5), Interaction("u", "b", 1)]
    assert build_catalog(items, inter).sequences["u"].items == ("b", "c", "a")


def test_duplicate_items_keep_first():
    cat = build_catalog([Item("a", "first"), Item("a", "second")], [Interaction("u", "a", 0)])
    assert cat.title("a") == "first"


def test_blank_title_rejected():
    with pytest.raises(ValueError):
        Item("a", "   ")


def test_catalog_is_read_only(tiny_catalog):
    with pytest.raises(TypeError):
        tiny_catalog.sequences["new"] = UserSequence("new", ("a",))


def test_reverse_sequence():
    assert reverse_sequence(UserSequence("u", ("a", "b", "c"))).items == ("c", "b", "a")
    assert reverse_sequence(UserSequence("u", ("a",))).items == ("a",)
    s = UserSequence("u", ("a", "b"))
    assert reverse_sequence(reverse_sequence(s)) == s


@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=20))
def test_reverse_is_an_involution(items):
    s = UserSequence("u", tuple(items))
    assert reverse_sequence(reverse_sequence(s)) == s
    assert reverse_sequence(s).n == s.n


def test_leave_one_out_split():
    cat = make_catalog({"long": list("abcd"), "two": list("ab"), "one": ["a"]})
    split = leave_one_out_split(cat)
    u = split.users["long"]
    assert (u.train.items, u.valid, u.test) == (("a", "b"), "c", "d")
    u = split.users["two"]
    assert (u.train.items, u.valid, u.test) == (("a",), None, "b")
    u = split.users["one"]
    assert u.train.items == ("a",) and not u.evaluable
    assert set(split.evaluable_users()) == {"long", "two"}
    assert {s.user_id for s in split.train_sequences()} == {"long", "two", "one"}


@given(st.lists(st.sampled_from("abcdefgh"), min_size=3, max_size=15))
def test_split_reconstructs_sequence(items):
    cat = make_catalog({"u": items})
    u = leave_one_out_split(cat).users["u"]
    assert u.train.items + (u.valid, u.test) == tuple(items)
    assert u.test_context() == tuple(items[:-1])


def test_group_users_fig_bounds():
    g = GroupingConfig()
    assert g.label_for(3) == "short"
    assert g.label_for(4) == "medium"
    assert g.label_for(5) == "medium"
    assert g.label_for(6) == "long"
    assert g.label_for(100) == "long"
    cat = make_catalog({"s": list("abc"), "m": list("abcd"), "l": list("abcdefg")})
    assert group_users(cat, g) == {"short": {"s"}, "medium": {"m"}, "long": {"l"}}


@pytest.mark.parametrize("bounds", [(0, 4, 4), (0, 6, 4), (2, 4, 6)])
def test_bad_group_bounds(bounds):
    with pytest.raises(ValueError):
        GroupingConfig(group_bounds=bounds)


@given(st.lists(st.integers(1, 40), min_size=1, max_size=30))
def test_groups_partition_users(lengths):
    seqs = {f"u{i}": [f"x{j}" for j in range(n)] for i, n in enumerate(lengths)}
    groups = group_users(make_catalog(seqs), GroupingConfig())
    members = [u for g in groups.values() for u in g]
    assert sorted(members) == sorted(seqs)


def test_length_histogram():
    cat = make_catalog({"a": ["x"], "b": ["y"], "c": ["x", "y"], "d": [f"z{i}" for i in range(9)]})
    hist = dict((lab, frac) for lab, _, frac in length_histogram(cat, edges=(8,)))
    assert hist["<=8"] == pytest.approx(0.75)
    assert hist[">8"] == pytest.approx(0.25)
    assert length_histogram(Catalog({}, {})) == []
    assert length_histogram(make_catalog({"a": ["x", "y"]})) == [("<=2", 1, 1.0)]


def test_catalog_roundtrip(tmp_path, tiny_catalog):
    save_catalog(tiny_catalog, tmp_path / "c.json")
    assert load_catalog(tmp_path / "c.json") == tiny_catalog
