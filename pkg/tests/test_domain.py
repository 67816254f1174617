import json

import numpy as np
import pytest

from rlsft.domain import (DatasetError, DemoPair, DemoSet, PrefSet, PrefTriple, Vocab,
                          chosen_only, load_demo_set, load_pref_set, save_demo_set,
                          save_pref_set, split_prefs, unique_prompts, validate_pref_set)
from rlsft.policies import make_rng


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_vocab_rejects_small_and_duplicate_labels():
    with pytest.raises(ValueError):
        Vocab(1)
    with pytest.raises(ValueError):
        Vocab(2, ("a", "a"))
    with pytest.raises(ValueError):
        Vocab(3, ("a", "b"))
    assert Vocab(3).labels == ("t0", "t1", "t2")
    assert Vocab(3, ("a", "b", "c")).render((2, 0)) == "c a"


def test_load_two_line_file(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [{"prompt": [0], "continuation": [1, 2]},
                                             {"prompt": [1], "continuation": [2]}])
    ds = load_demo_set(path)
    assert len(ds) == 2
    assert ds[0] == DemoPair((0,), (1, 2))
    assert ds[1] == DemoPair((1,), (2,))


def test_empty_file_is_rejected(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text("")
    with pytest.raises(DatasetError, match="empty dataset"):
        load_demo_set(path)


def test_token_equal_to_vocab_size_names_the_line(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [{"vocab_size": 3},
                                             {"prompt": [0], "continuation": [1]},
                                             {"prompt": [0], "continuation": [3]}])
    with pytest.raises(DatasetError, match="line 3") as info:
        load_demo_set(path)
    assert info.value.line == 3


def test_malformed_line_names_the_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"prompt": [0], "continuation": [1]}\n{"prompt": [0], \n')
    with pytest.raises(DatasetError, match="line 2"):
        load_demo_set(path)


def test_missing_field_is_reported(tmp_path):
    path = write_lines(tmp_path / "d.jsonl", [{"prompt": [0]}])
    with pytest.raises(DatasetError, match="continuation"):
        load_demo_set(path)


def test_round_trip_and_order(tmp_path):
    vocab = Vocab(5, tuple("abcde"))
    ds = DemoSet(tuple(DemoPair((i % 3,), (4 - i % 5, i % 2)) for i in range(12)), vocab)
    save_demo_set(ds, tmp_path / "d.jsonl")
    back = load_demo_set(tmp_path / "d.jsonl")
    assert back.items == ds.items
    assert back.vocab == vocab


def test_pref_round_trip(tmp_path):
    vocab = Vocab(3)
    ps = PrefSet((PrefTriple((), (0,), (1,)), PrefTriple((1,), (2, 2), (0,))), vocab)
    save_pref_set(ps, tmp_path / "p.jsonl")
    assert load_pref_set(tmp_path / "p.jsonl").items == ps.items


def test_empty_prompt_is_allowed():
    ds = DemoSet((DemoPair((), (2,)),), Vocab(3))
    assert ds.prompts == [()]


def test_prompt_weights_accumulate_over_duplicates():
    ds = DemoSet((DemoPair((0,), (1,)), DemoPair((0,), (2,)), DemoPair((1,), (1,))), Vocab(3))
    assert ds.prompt_weights[(0,)] == pytest.approx(2 / 3)
    assert ds.prompt_weights[(1,)] == pytest.approx(1 / 3)
    assert np.allclose(ds.item_weights(), 1 / 3)


def test_prompt_weights_must_sum_to_one():
    items = (DemoPair((0,), (1,)), DemoPair((1,), (1,)))
    with pytest.raises(DatasetError):
        DemoSet(items, Vocab(3), prompt_weights={(0,): 0.5, (1,): 0.4})
    ds = DemoSet(items, Vocab(3), prompt_weights={(0,): 0.25, (1,): 0.75})
    assert np.allclose(ds.item_weights(), [0.25, 0.75])


def test_demo_set_rejects_bad_items():
    with pytest.raises(DatasetError):
        DemoSet((), Vocab(3))
    with pytest.raises(DatasetError):
        DemoSet((DemoPair((0,), (3,)),), Vocab(3))
    with pytest.raises(DatasetError):
        DemoSet((DemoPair((0,), ()),), Vocab(3))
    with pytest.raises(DatasetError):
        DemoSet((DemoPair((0,), (1, 1, 1)),), Vocab(3), max_len=2)


def test_validate_well_formed_set():
    ps = PrefSet(tuple(PrefTriple((0,), (1,), (2,)) for _ in range(3)), Vocab(3))
    assert validate_pref_set(ps) == []


def test_validate_degenerate_pair():
    ps = PrefSet((PrefTriple((0,), (1,), (2,)), PrefTriple((0,), (1,), (1,))), Vocab(3))
    assert validate_pref_set(ps) == ["degenerate pair at index 1"]


def test_validate_one_violation_per_field():
    ps = PrefSet((PrefTriple((5,), (1,), (7,)),), Vocab(3))
    out = validate_pref_set(ps)
    assert len(out) == 2
    assert any("prompt" in v for v in out) and any("rejected" in v for v in out)
    before = ps.items
    validate_pref_set(ps)
    assert ps.items == before


def test_chosen_only_split_and_unique_prompts():
    ps = PrefSet(tuple(PrefTriple((i % 2,), (1,), (2,)) for i in range(10)), Vocab(3))
    demos = chosen_only(ps)
    assert [d.continuation for d in demos] == [(1,)] * 10
    a, b = split_prefs(ps, 7, make_rng(0))
    assert len(a) == 7 and len(b) == 3
    assert unique_prompts([(1,), (0,), (1,)]) == [(1,), (0,)]
    assert ps.swapped()[0] == PrefTriple((0,), (2,), (1,))
