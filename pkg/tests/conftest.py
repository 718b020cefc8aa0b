import numpy as np
import pytest

from cotprune import datagen as dg
from cotprune import model as md


@pytest.fixture(scope="session")
def small_corpus():
    spec = dg.TaskSpec(n_train=60, n_val=20, corruption_rate=0.1, seed=13)
    train, val = dg.generate_corpus(spec)
    return train, val


@pytest.fixture(scope="session")
def tiny_config():
    return md.ModelConfig(embed_dim=12, hidden_dim=10, mlp_layers=2,
                          window=16, seed=1)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_config):
    return md.init_model(tiny_config)


@pytest.fixture(scope="session")
def trained_small(small_corpus, tiny_config):
    """A briefly trained checkpoint so curvature/influence have structure."""
    train, _ = small_corpus
    ck = md.init_model(tiny_config)
    tc = md.TrainConfig(epochs=6, peak_lr=0.2, batch_size=16,
                        snapshot_every=6, seed=0)
    return md.train(ck, train, tc)[-1]


def uniform_checkpoint(vocab_size=10, **kw):
    """All-zero parameters: logits identically zero, softmax uniform."""
    cfg = md.ModelConfig(vocab_size=vocab_size, embed_dim=8, hidden_dim=6,
                         mlp_layers=1, window=4, seed=0, **kw)
    ck = md.init_model(cfg)
    for name in ck.params:
        ck.params[name][:] = 0.0
    return ck


def make_example(prompt, completion, gold="0", ex_id=0):
    return dg.Example(
        id=ex_id,
        prompt_tokens=list(prompt),
        completion_tokens=list(completion),
        loss_mask=[False] * len(prompt) + [True] * len(completion),
        gold_answer=gold,
    )


def successor_checkpoint(answer_digit: int):
    """Rigged window-1 model that greedily emits 'answer <d> <end>' after '='.

    Embedding is a scaled identity and the readout encodes a token-successor
    map, so greedy decoding is fully controlled; every other token maps to
    <end>.
    """
    v = dg.VOCAB_SIZE
    cfg = md.ModelConfig(vocab_size=v, context_len=32, embed_dim=v,
                         mlp_layers=1, hidden_dim=4, window=1, seed=0)
    ck = md.init_model(cfg)
    for name in ck.params:
        ck.params[name][:] = 0.0
    ck.params["embed"][:] = 10.0 * np.eye(v)
    succ = {dg.tokenize("=")[0]: dg.ANSWER_ID,
            dg.ANSWER_ID: dg.digit_token(answer_digit),
            dg.digit_token(answer_digit): dg.END_ID}
    readout = ck.params["readout"]
    for k in range(v):
        readout[succ.get(k, dg.END_ID), k] = 10.0
    return ck
