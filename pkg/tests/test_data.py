import json

import numpy as np
import pytest

from fouriernat import data as D
from fouriernat.data import EOS, PAD, Example, TaskSpec
from fouriernat.tensor import ConfigError, Rng


def test_special_ids():
    v = D.Vocabulary(36)
    assert (v.pad, v.bos, v.eos, v.mask) == (0, 1, 2, 3)
    assert list(v.content_ids)[:2] == [4, 5]
    with pytest.raises(ConfigError):
        D.Vocabulary(4)


def test_task_examples():
    assert D.apply_task("copy", [5, 7, 9]) + [EOS] == [5, 7, 9, EOS]
    assert D.apply_task("reverse", [5, 7, 9]) + [EOS] == [9, 7, 5, EOS]
    assert D.apply_task("sort", [9, 5, 7]) == [5, 7, 9]
    identity = np.arange(32) + D.N_SPECIAL
    assert D.apply_task("cipher", [5, 7, 9], identity) + [EOS] == [7, 5, 9, EOS]
    assert D.apply_task("cipher", [5, 7, 9, 4], identity) == [7, 5, 4, 9]


@pytest.mark.parametrize("kind", D.TASK_KINDS)
def test_generate_deterministic_and_valid(kind):
    spec = TaskSpec(kind=kind, content_vocab=10, min_len=2, max_len=6, seed=5, t_max=8)
    a, b = D.generate(spec, 50), D.generate(spec, 50)
    assert a == b
    for ex in a:
        assert 2 <= len(ex.src) <= 6
        assert ex.tgt[-1] == EOS and len(ex.tgt) == len(ex.src) + 1
        assert all(D.N_SPECIAL <= t < D.N_SPECIAL + 10 for t in ex.src + ex.tgt[:-1])
    assert D.generate(spec, 0) == []


def test_cipher_is_bijective_and_invertible():
    spec = TaskSpec(kind="cipher", content_vocab=12, min_len=3, max_len=7, seed=3, t_max=8)
    perm = D.cipher_permutation(12, 3)
    assert sorted(perm.tolist()) == list(range(4, 16))
    inv = {int(v): i + D.N_SPECIAL for i, v in enumerate(perm)}
    for ex in D.generate(spec, 100):
        recovered = [inv[t] for t in ex.tgt[:-1]]
        assert recovered == D.adjacent_swap(ex.src)
        # adjacent swap is its own inverse, so the source is recoverable
        assert D.adjacent_swap(recovered) == ex.src


def test_length_distribution_covers_range():
    spec = TaskSpec(kind="copy", min_len=4, max_len=11, seed=0, t_max=16)
    lengths = {len(ex.src) for ex in D.generate(spec, 1000)}
    assert lengths == set(range(4, 12))


def test_spec_violating_t_max_is_config_error():
    with pytest.raises(ConfigError):
        D.generate(TaskSpec(max_len=16, t_max=16), 1)
    with pytest.raises(ConfigError):
        D.generate(TaskSpec(kind="shuffle"), 1)


def test_save_load_roundtrip(tmp_path):
    exs = D.generate(TaskSpec(kind="reverse", seed=9), 100)
    path = tmp_path / "d.jsonl"
    D.save(exs, path)
    assert D.load(path) == exs
    assert len(path.read_text().splitlines()) == 100


def test_load_empty_and_format(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert D.load(empty) == []
    one = tmp_path / "one.jsonl"
    one.write_text('{"src":[4,5],"tgt":[5,4,2]}\n')
    assert D.load(one) == [Example([4, 5], [5, 4, 2])]


def test_load_malformed_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"src":[4],"tgt":[4,2]}\n{"src":[4]\n')
    with pytest.raises(ValueError, match=":2:"):
        D.load(p)


def test_make_batches_examples():
    ex = [Example([5, 4], [5, 4, EOS])]
    (b,) = D.make_batches(ex, 8, 4, Rng(0))
    assert len(b) == 1
    np.testing.assert_array_equal(b.tgt_pad_mask[0], [False] * 3 + [True] * 5)
    assert b.gold_lengths.tolist() == [3]
    assert b.src_ids.tolist() == [[5, 4, EOS]]


def test_make_batches_deterministic_order_and_padding():
    exs = D.generate(TaskSpec(seed=1), 37)
    a = D.make_batches(exs, 16, 8, Rng(4))
    b = D.make_batches(exs, 16, 8, Rng(4))
    assert [x.indices for x in a] == [x.indices for x in b]
    assert sum(len(x) for x in a) == 37
    for batch in a:
        assert np.array_equal(batch.tgt_pad_mask, batch.tgt_ids == PAD)
        assert np.all(batch.gold_lengths <= 16)


def test_make_batches_oversize_names_index():
    exs = [Example([4], [4, EOS]), Example([4] * 9, [4] * 9 + [EOS])]
    with pytest.raises(ValueError, match="example 1"):
        D.make_batches(exs, 8, 2)


def test_record_is_compact_json():
    assert json.loads(Example([4], [4, 2]).to_json()) == {"src": [4], "tgt": [4, 2]}
