import json

import pytest

from cotprune import datagen as dg
from cotprune.errors import ConfigError, InputError, ParseError


def test_tokenize_detokenize_roundtrip_generated(small_corpus):
    train, val = small_corpus
    for ex in train + val:
        text = dg.detokenize(ex.tokens)
        assert dg.tokenize(text) == ex.tokens


def test_tokenize_empty():
    assert dg.tokenize("") == []
    assert dg.tokenize([]) == []


def test_tokenize_unknown_symbol():
    with pytest.raises(InputError):
        dg.tokenize("3 + banana")


def test_detokenize_bad_id():
    with pytest.raises(InputError):
        dg.detokenize([dg.VOCAB_SIZE])


def test_chain_arithmetic_gold():
    # 3 + 5 + 2 mod 10 -> 0
    spec = dg.TaskSpec(chain_depth=3, seed=0, n_train=1, n_val=0)
    ex = dg._build_example(0, [3, 5, 2], spec)
    assert ex.gold_answer == "0"
    assert dg.detokenize(ex.prompt_tokens) == "3 + 5 + 2 ="
    assert dg.detokenize(ex.completion_tokens) == \
        "3 + 5 : 8 ; 8 + 2 : 0 ; answer 0 <end>"


def test_corruption_counts_exact():
    spec = dg.TaskSpec(n_train=1000, n_val=10, corruption_rate=0.1, seed=5)
    train, _ = dg.generate_corpus(spec)
    assert sum(ex.corrupted for ex in train) == 100
    spec = dg.TaskSpec(n_train=1000, n_val=10, corruption_rate=0.0, seed=5)
    train, _ = dg.generate_corpus(spec)
    assert sum(ex.corrupted for ex in train) == 0


def test_uncorrupted_completions_end_with_gold(small_corpus):
    train, val = small_corpus
    for ex in train + val:
        assert ex.completion_tokens[-3] == dg.ANSWER_ID
        assert ex.completion_tokens[-1] == dg.END_ID
        if not ex.corrupted:
            assert ex.completion_tokens[-2] == dg.digit_token(int(ex.gold_answer))


def test_corrupted_final_answer_differs():
    spec = dg.TaskSpec(n_train=200, n_val=0, corruption_rate=0.5, seed=2,
                       corruption_mode=dg.WRONG_FINAL)
    train, _ = dg.generate_corpus(spec)
    for ex in train:
        written = ex.completion_tokens[-2]
        if ex.corrupted:
            assert written != dg.digit_token(int(ex.gold_answer))
        else:
            assert written == dg.digit_token(int(ex.gold_answer))


def test_wrong_intermediate_step_propagates():
    spec = dg.TaskSpec(n_train=200, n_val=0, corruption_rate=0.5, seed=2,
                       corruption_mode=dg.WRONG_STEP)
    train, _ = dg.generate_corpus(spec)
    plus, colon, semi = dg.tokenize("+ : ;")
    for ex in train:
        if not ex.corrupted:
            continue
        # written answer is wrong, and the trace stays internally consistent
        # downstream of exactly one broken addition
        assert ex.completion_tokens[-2] != dg.digit_token(int(ex.gold_answer))
        text = dg.detokenize(ex.completion_tokens)
        steps = [s.strip() for s in text.split(";")[:-1]]
        bad = 0
        for step in steps:
            lhs, rhs = step.split(":")
            x, y = [int(t) for t in lhs.split("+")]
            if (x + y) % spec.modulus != int(rhs):
                bad += 1
        assert bad == 1


def test_validation_never_corrupted():
    spec = dg.TaskSpec(n_train=50, n_val=50, n_heldout=50,
                       corruption_rate=1.0, seed=9)
    train, val, held = dg.generate_splits(spec)
    assert all(ex.corrupted for ex in train)
    assert not any(ex.corrupted for ex in val)
    assert not any(ex.corrupted for ex in held)


def test_splits_are_disjoint_chains():
    spec = dg.TaskSpec(n_train=300, n_val=100, n_heldout=100, seed=4)
    train, val, held = dg.generate_splits(spec)
    prompts = [tuple(ex.prompt_tokens) for ex in train + val + held]
    assert len(set(prompts)) == len(prompts)


def test_seed_determinism_byte_identical(tmp_path):
    spec = dg.TaskSpec(n_train=100, n_val=20, corruption_rate=0.2, seed=21)
    for i in range(2):
        train, val = dg.generate_corpus(spec)
        dg.write_corpus(tmp_path / f"t{i}.jsonl", train)
        dg.write_corpus(tmp_path / f"v{i}.jsonl", val)
    assert (tmp_path / "t0.jsonl").read_bytes() == (tmp_path / "t1.jsonl").read_bytes()
    assert (tmp_path / "v0.jsonl").read_bytes() == (tmp_path / "v1.jsonl").read_bytes()


def test_n_train_zero_rejected():
    with pytest.raises(InputError):
        dg.generate_corpus(dg.TaskSpec(n_train=0, n_val=5))


def test_bad_spec_rejected():
    with pytest.raises(ConfigError):
        dg.TaskSpec(corruption_rate=1.5)
    with pytest.raises(ConfigError):
        dg.TaskSpec(chain_depth=1)
    with pytest.raises(ConfigError):
        dg.TaskSpec(corruption_mode="typo")


def test_corpus_roundtrip(tmp_path):
    spec = dg.TaskSpec(n_train=100, n_val=0, corruption_rate=0.3, seed=8)
    train, _ = dg.generate_corpus(spec)
    path = tmp_path / "corpus.jsonl"
    dg.write_corpus(path, train)
    back = dg.read_corpus(path)
    assert back == train


def test_corpus_read_truncated_line(tmp_path):
    spec = dg.TaskSpec(n_train=3, n_val=0, seed=8)
    train, _ = dg.generate_corpus(spec)
    path = tmp_path / "corpus.jsonl"
    dg.write_corpus(path, train)
    text = path.read_text()
    path.write_text(text[: len(text) - 20])  # chop the final line
    with pytest.raises(ParseError) as err:
        dg.read_corpus(path)
    assert err.value.line == 3


def test_corpus_read_missing_field(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"id": 0}) + "\n")
    with pytest.raises(ParseError) as err:
        dg.read_corpus(path)
    assert err.value.line == 1


def test_corpus_read_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert dg.read_corpus(path) == []


def test_example_mask_invariant():
    with pytest.raises(InputError):
        dg.Example(0, [1, 2], [3], [True, False, True], "0")
    with pytest.raises(InputError):
        dg.Example(0, [1, 2], [3], [False, False], "0")
