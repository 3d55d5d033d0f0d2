# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import os

import numpy as np
import pytest

from ssmpeft import tasks
from ssmpeft.errors import ContractError
from ssmpeft.tasks import TaskGenerator, TaskSpec


def test_selective_copy():
    x = tasks.gen_selective_copy(7, 20, 3, 16)
    assert len(x) == 20
    assert x.kind == "selective_copy"
    assert np.all(x.tokens < 16)
    assert np.all(x.tokens[-3:] == tasks.QUERY)
    assert list(x.mask) == [False] * 17 + [True] * 3
    assert np.all(x.target[~x.mask] == 0)

    # the payload follows each marker, in order
    pos = np.where(x.tokens[:17] == tasks.MARKER_A)[0]
    assert len(pos) == 3
    assert list(x.tokens[pos + 1]) == list(x.target[-3:])
    assert np.all(x.target[-3:] >= tasks.CONTENT_START)


def test_selective_copy_deterministic():
    a = tasks.gen_selective_copy(3, 24, 4, 20)
    b = tasks.gen_selective_copy(3, 24, 4, 20)
    c = tasks.gen_selective_copy(4, 24, 4, 20)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.target, b.target)
    assert not np.array_equal(a.tokens, c.tokens)


def test_selective_copy_marker():
    x = tasks.gen_selective_copy(3, 24, 4, 20, marker=tasks.MARKER_B)
    assert np.sum(x.tokens == tasks.MARKER_B) == 4
    assert np.sum(x.tokens == tasks.MARKER_A) == 0


def test_selective_copy_errors():
    with pytest.raises(ContractError):
        tasks.gen_selective_copy(0, 8, 3, 16)
    with pytest.raises(ContractError):
        tasks.gen_selective_copy(0, 8, 0, 16)
    with pytest.raises(ContractError):
        tasks.gen_selective_copy(0, 8, 2, 16, marker=tasks.QUERY)
    # fewer than 2 content tokens
    with pytest.raises(ContractError):
        tasks.gen_selective_copy(0, 8, 2, 5)


def test_payload_remap():
    r = tasks.payload_remap(12, 5)
    assert np.array_equal(r[: tasks.CONTENT_START], np.arange(tasks.CONTENT_START))
    content = np.arange(tasks.CONTENT_START, 12)
    assert sorted(r[content]) == list(content)
    assert np.all(r[content] != content)
    assert np.array_equal(r, tasks.payload_remap(12, 5))

    x = tasks.gen_selective_copy(1, 20, 3, 12)
    y = tasks.gen_selective_copy(1, 20, 3, 12, remap_seed=5)
    assert np.array_equal(x.tokens, y.tokens)
    assert np.array_equal(y.target[-3:], r[x.target[-3:]])


@pytest.mark.parametrize("rule", tasks.RULES)
def test_classification(rule):
    for seed in range(20):
        x = tasks.gen_sequence_classification(seed, 9, rule, 12)
        assert x.label in (0, 1)
        assert x.target[-1] == x.label
        assert list(x.mask) == [False] * 8 + [True]
        assert np.all(x.tokens < 12)

        if rule == "majority":
            upper = np.sum(x.tokens >= 8)
            assert x.label == int(upper > 9 - upper)
        elif rule == "first_last_match":
            assert x.label == int(x.tokens[0] == x.tokens[-1])
        else:
            assert x.label == np.sum(x.tokens == tasks.MARKER_A) % 2


def test_classification_majority_tie():
    for seed in range(40):
        x = tasks.gen_sequence_classification(seed, 4, "majority", 8)
        upper = np.sum(x.tokens >= 6)
        if upper == 2:
            assert x.label == int(x.tokens[-1] >= 6)


def test_classification_errors():
    with pytest.raises(ContractError):
        tasks.gen_sequence_classification(0, 8, "palindrome", 12)
    with pytest.raises(ContractError):
        tasks.gen_sequence_classification(0, 1, "first_last_match", 12)
    with pytest.raises(ContractError):
        tasks.gen_sequence_classification(0, 0, "majority", 12)


def test_generator():
    spec = TaskSpec("selective_copy", seq_len=16, vocab=12, n_marked=2)
    gen = TaskGenerator(spec)
    ds = gen.dataset(5, seed=3)
    assert len(ds) == 5
    assert not np.array_equal(ds[0].tokens, ds[1].tokens)
    assert np.array_equal(ds[2].tokens, gen.dataset(5, seed=3)[2].tokens)

    tokens, target, mask = TaskGenerator.stack(ds)
    assert tokens.shape == (5, 16)
    assert target.shape == (5, 16)
    assert mask.dtype == bool

    # a generator built from the dict form samples the same instances
    gen2 = TaskGenerator(spec.to_dict())
    assert np.array_equal(gen2.sample(9).tokens, gen.sample(9).tokens)


def test_task_spec():
    spec = TaskSpec("classification", seq_len=8, vocab=12, rule="marker_parity")
    assert TaskSpec.from_dict(spec.to_dict()) == spec
    assert "n_marked" not in spec.to_dict()
    with pytest.raises(ContractError):
        TaskSpec("translation")


def test_domain_shift():
    a = TaskSpec("selective_copy", seq_len=16, vocab=12, n_marked=2, marker=tasks.MARKER_A)
    b = TaskSpec("selective_copy", seq_len=16, vocab=12, n_marked=2, marker=tasks.MARKER_B)
    gen_a, gen_b = tasks.domain_shift(a, b.to_dict())
    assert gen_a.spec == a
    assert gen_b.spec == b

    with pytest.raises(ContractError):
        tasks.domain_shift(a, a)

    c = TaskSpec("selective_copy", seq_len=16, vocab=14, n_marked=2)
    with pytest.raises(ContractError):
        tasks.domain_shift(a, c)


def test_snapshot(tmp_path):
    copy_set = TaskGenerator(TaskSpec(seq_len=12, vocab=10, n_marked=2)).dataset(3, 0)
    cls_set = TaskGenerator(TaskSpec("classification", seq_len=6, vocab=10, rule="majority")).dataset(3, 0)
    path = os.path.join(tmp_path, "tasks.jsonl")
    tasks.write_snapshot(copy_set + cls_set, path)

    with open(path) as f:
        assert len(f.readlines()) == 6

    r = tasks.read_snapshot(path)
    assert len(r) == 6
    for x, y in zip(copy_set + cls_set, r):
        assert x.kind == y.kind
        assert x.label == y.label
        assert np.array_equal(x.tokens, y.tokens)
        assert np.array_equal(x.target, y.target)
        assert np.array_equal(x.mask, y.mask)
