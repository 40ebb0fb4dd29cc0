import time

import numpy as np
import pytest

from eapgp.metrics import MetricSpec
from eapgp.tasks import (
    GENERATORS,
    IOI_NAMES,
    TaskBatch,
    TaskValidationError,
    concat_batches,
    gen_greater_than_toy,
    gen_induction,
    gen_toy_ioi,
    induction_stream,
    induction_targets,
    make_task,
    task_vocab,
)


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_same_seed_same_batch(name):
    a, b = make_task(name, 11, 16), make_task(name, 11, 16)
    np.testing.assert_array_equal(a.clean_tokens, b.clean_tokens)
    np.testing.assert_array_equal(a.corrupted_tokens, b.corrupted_tokens)
    assert a.metrics == b.metrics
    c = make_task(name, 12, 16)
    assert not np.array_equal(a.clean_tokens, c.clean_tokens)


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_pairs_differ_exactly_at_declared_position(name):
    batch = make_task(name, 3, 64)
    for i, declared in enumerate(batch.declared_positions):
        diff = tuple(np.flatnonzero(batch.clean_tokens[i] != batch.corrupted_tokens[i]))
        assert diff == declared and len(diff) == 1


def test_induction_structure():
    batch = gen_induction(5, 200)
    for row, bad, m in zip(batch.clean_tokens, batch.corrupted_tokens, batch.metrics):
        a, c = row[-1], bad[-1]
        assert a != c
        (pa,) = np.flatnonzero(row[:-1] == a)
        (pc,) = np.flatnonzero(row[:-1] == c)
        assert m.correct_ids == (row[pa + 1],) and m.incorrect_ids == (row[pc + 1],)
        assert m.correct_ids != m.incorrect_ids


def test_induction_size_checks():
    with pytest.raises(ValueError, match="vocab"):
        gen_induction(0, 4, vocab=7)
    with pytest.raises(ValueError, match="seq"):
        gen_induction(0, 4, seq=5)
    assert gen_induction(0, 4, seq=6, vocab=8).clean_tokens.shape == (4, 6)


def test_induction_targets_by_hand():
    t = np.array([[3, 4, 5, 3, 6, 4, 4]])
    # pos 3 repeats 3 -> next was 4; pos 5 repeats 4 -> 5; pos 6 has two earlier 4s
    np.testing.assert_array_equal(induction_targets(t), [[-1, -1, -1, 4, -1, 5, -1]])
    assert induction_targets(np.array([[2, 2]]))[0, 1] == -1


def test_induction_targets_include_answer():
    batch = gen_induction(9, 50)
    assert all(batch.train_targets[i, -1] == m.correct_ids[0] for i, m in enumerate(batch.metrics))


def test_induction_stream_fresh_batches():
    s = induction_stream(0, 4)
    a, b = next(s), next(s)
    assert not np.array_equal(a.clean_tokens, b.clean_tokens)
    s2 = induction_stream(0, 4)
    np.testing.assert_array_equal(next(s2).clean_tokens, a.clean_tokens)


def test_greater_than_sets_and_speed():
    start = time.perf_counter()
    batch = gen_greater_than_toy(0, 256)
    assert time.perf_counter() - start < 1.0
    for row, m in zip(batch.clean_tokens, batch.metrics):
        assert not set(m.correct_ids) & set(m.incorrect_ids)
        assert set(m.correct_ids) | set(m.incorrect_ids) == set(range(100))
        assert min(m.correct_ids) == row[7] + 1
        assert row[6] == row[11]
    assert np.all(batch.corrupted_tokens[:, 7] == 1)


def test_toy_ioi_names_distinct():
    batch = gen_toy_ioi(4, 300)
    orders = set()
    for row, bad, m in zip(batch.clean_tokens, batch.corrupted_tokens, batch.metrics):
        a, b, c = m.correct_ids[0], m.incorrect_ids[0], bad[9]
        assert len({a, b, c}) == 3
        assert row[9] == b and {row[1], row[3]} == {a, b}
        assert c in IOI_NAMES
        orders.add(row[1] == a)
    assert orders == {True, False}


def test_toy_ioi_needs_three_names():
    with pytest.raises(ValueError):
        gen_toy_ioi(0, 2, names=(16, 17))


def test_fuzz_thousand_seeds_pass_validation():
    for seed in range(1000):
        for name in GENERATORS:
            make_task(name, seed, 2).validate()


def test_validation_catches_violations():
    good = gen_induction(0, 3)
    bad = good.subset(np.arange(3))
    bad.corrupted_tokens[0, 0] = (bad.clean_tokens[0, 0] + 1) % 16
    with pytest.raises(TaskValidationError, match="differ"):
        bad.validate()
    with pytest.raises(TaskValidationError, match="shapes"):
        TaskBatch(good.clean_tokens, good.corrupted_tokens[:, :-1], good.metrics, 16).validate()
    with pytest.raises(TaskValidationError, match="answer id"):
        TaskBatch(good.clean_tokens, good.corrupted_tokens, [MetricSpec("logit_diff", (0,), (20,))] * 3, 16).validate()
    with pytest.raises(TaskValidationError, match="outside"):
        TaskBatch(good.clean_tokens + 16, good.corrupted_tokens, good.metrics, 16).validate()


def test_jsonl_round_trip(tmp_path):
    batch = gen_toy_ioi(2, 10)
    path = batch.to_jsonl(tmp_path / "t" / "ioi.jsonl")
    back = TaskBatch.from_jsonl(path, vocab_size=batch.vocab_size)
    np.testing.assert_array_equal(back.clean_tokens, batch.clean_tokens)
    np.testing.assert_array_equal(back.corrupted_tokens, batch.corrupted_tokens)
    assert back.metrics == batch.metrics
    assert back.declared_positions == batch.declared_positions
    assert back.name == "ioi"


def test_jsonl_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"clean_tokens": [1, 2]}\n')
    with pytest.raises(TaskValidationError, match="bad.jsonl:1"):
        TaskBatch.from_jsonl(p)
    p.write_text("")
    with pytest.raises(TaskValidationError, match="no examples"):
        TaskBatch.from_jsonl(p)


def test_subset_shuffle_chunks_concat():
    batch = gen_induction(1, 10)
    sh = batch.shuffled(0)
    assert sorted(map(tuple, sh.clean_tokens)) == sorted(map(tuple, batch.clean_tokens))
    parts = list(batch.chunks(4))
    assert [len(p) for p in parts] == [4, 4, 2]
    joined = concat_batches(parts)
    np.testing.assert_array_equal(joined.clean_tokens, batch.clean_tokens)
    assert joined.declared_positions == batch.declared_positions


def test_make_task_and_vocab():
    with pytest.raises(ValueError, match="unknown task"):
        make_task("sva", 0, 1)
    assert task_vocab("ioi") == 28 and task_vocab("greater_than") == 110 and task_vocab("induction", vocab=20) == 20
