import pytest
import torch

import distillab as dl
from distillab.data import split_queries
from distillab.training import TrainConfig, fit

torch.set_num_threads(4)


def tiny_encoder_config(vocab_size, seed=0, max_position=16, hidden_dim=16, num_layers=1,
                        num_heads=2, feedforward_dim=32, dropout_rate=0.0):
    return dl.EncoderConfig(
        vocab_size=vocab_size,
        hidden_dim=hidden_dim,
        num_layers=num_layers,
        num_heads=num_heads,
        feedforward_dim=feedforward_dim,
        max_position=max_position,
        dropout_rate=dropout_rate,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_dataset():
    """Synthetic retrieval set small enough for per-test training."""
    store, queries, qrels = dl.gen_synthetic(
        num_docs=250, num_queries=60, vocab_size=50, doc_len=8, query_len=4, seed=90
    )
    vocab = dl.build_vocab(store, queries.values())
    return store, queries, qrels, vocab


@pytest.fixture(scope="session")
def small_groups(small_dataset):
    store, queries, qrels, vocab = small_dataset
    train_q, heldout_q = split_queries(queries, 48, 12)
    train = dl.build_train_groups(train_q, qrels, store, vocab, 8, 0, 6, 10)
    heldout = dl.build_train_groups(heldout_q, qrels, store, vocab, 12, 1, 6, 10)
    return train, heldout


@pytest.fixture(scope="session")
def trained_tiny(small_dataset, small_groups, tmp_path_factory):
    """A quick basic-mode run used by tests that need trained towers."""
    store, queries, qrels, vocab = small_dataset
    train, heldout = small_groups
    config = TrainConfig(
        retriever_config=tiny_encoder_config(vocab.size, seed=3, max_position=12, hidden_dim=32,
                                             feedforward_dim=64),
        ranker_config=tiny_encoder_config(vocab.size, seed=4, max_position=19, hidden_dim=32,
                                          num_layers=2, feedforward_dim=64),
        mode="basic",
        epochs=12,
        batch_size=4,
        group_size=8,
        lr_retriever=3e-3,
        lr_ranker=3e-3,
        seed=11,
    )
    out = tmp_path_factory.mktemp("trained_tiny")
    return fit(config, train, heldout, out), vocab, store, queries, qrels
