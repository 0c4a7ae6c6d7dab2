import dataclasses
import math

import pytest
import torch

import distillab as dl
from distillab.checkpoint import load_retriever
from distillab.encoder import cross_scores
from distillab.errors import DivergenceError, NonFiniteLossError
from distillab.filtering import false_negative_mask, masked_count
from distillab.training import (
    MODES,
    TrainConfig,
    evaluate_heldout,
    fit,
    grad_flow_check,
    read_history,
    train_step,
    warmup_scale,
    write_history,
)

from conftest import tiny_encoder_config


def make_config(vocab_size, mode="basic", **overrides):
    defaults = dict(
        retriever_config=tiny_encoder_config(vocab_size, seed=3, max_position=12),
        ranker_config=tiny_encoder_config(vocab_size, seed=4, max_position=19, num_layers=2),
        mode=mode,
        epochs=1,
        batch_size=4,
        group_size=8,
        lr_retriever=1e-3,
        lr_ranker=1e-3,
        seed=7,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def fresh_models(config):
    torch.manual_seed(config.seed)
    retriever = dl.DualRetriever(config.retriever_config)
    ranker = dl.CrossRanker(config.ranker_config)
    r_opt = torch.optim.AdamW(retriever.parameters(), lr=config.lr_retriever)
    k_opt = torch.optim.AdamW(ranker.parameters(), lr=config.lr_ranker)
    return retriever, ranker, r_opt, k_opt


class TestWarmup:
    def test_zero_at_step_zero(self):
        assert warmup_scale(0, 100, 0.1) == 0.0

    def test_full_rate_exactly_at_warmup_end(self):
        warm = math.ceil(0.1 * 100)
        assert warmup_scale(warm, 100, 0.1) == 1.0
        assert warmup_scale(warm - 1, 100, 0.1) < 1.0

    def test_constant_afterwards(self):
        assert warmup_scale(73, 100, 0.1) == 1.0

    def test_zero_ratio_skips_warmup(self):
        assert warmup_scale(0, 100, 0.0) == 1.0


class TestTrainStep:
    def test_basic_mode_reports_zero_distill_terms(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="basic")
        retriever, ranker, r_opt, k_opt = fresh_models(config)
        report = train_step(retriever, ranker, train[:4], config, r_opt, k_opt)
        assert report.losses.l_sent == 0.0
        assert report.losses.l_word == 0.0
        assert report.masked_negatives == 0
        assert report.losses.total == pytest.approx(report.losses.l_de + report.losses.l_ce)

    def test_full_mode_populates_all_terms(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="full")
        retriever, ranker, r_opt, k_opt = fresh_models(config)
        report = train_step(retriever, ranker, train[:4], config, r_opt, k_opt)
        assert report.losses.l_sent > 0.0
        assert report.losses.l_word > 0.0
        assert report.grad_norm_retriever > 0.0
        assert report.grad_norm_ranker > 0.0
        assert report.duration_s > 0.0

    def test_deterministic_given_seeding(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="full")
        reports = []
        for _ in range(2):
            retriever, ranker, r_opt, k_opt = fresh_models(config)
            reports.append(train_step(retriever, ranker, train[:4], config, r_opt, k_opt))
        assert reports[0].losses == reports[1].losses
        assert reports[0].masked_negatives == reports[1].masked_negatives

    def test_masked_count_matches_oracle_recount(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="fnf")
        retriever, ranker, r_opt, k_opt = fresh_models(config)
        batch = train[:5]
        expected = 0
        ranker.eval()
        with torch.no_grad():
            for group in batch:
                scores, _, _ = cross_scores(ranker, group.query, list(group.docs))
                expected += masked_count(false_negative_mask(scores, group.pos_idx))
        report = train_step(retriever, ranker, batch, config, r_opt, k_opt)
        assert report.masked_negatives == expected

    def test_empty_batch_rejected(self, small_dataset):
        _, _, _, vocab = small_dataset
        config = make_config(vocab.size)
        retriever, ranker, r_opt, k_opt = fresh_models(config)
        with pytest.raises(ValueError):
            train_step(retriever, ranker, [], config, r_opt, k_opt)

    def test_non_finite_loss_reports_components(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="basic")
        retriever, ranker, r_opt, k_opt = fresh_models(config)
        with torch.no_grad():
            retriever.query_encoder.position_embedding.weight[0] = float("nan")
        with pytest.raises(NonFiniteLossError):
            train_step(retriever, ranker, train[:2], config, r_opt, k_opt)


class TestGradFlow:
    def test_freeze_rule(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        train, _ = small_groups
        config = make_config(vocab.size, mode="full")
        retriever, ranker, _, _ = fresh_models(config)
        report = grad_flow_check(retriever, ranker, train[0])
        assert report["ranker_from_distill"] == 0.0
        assert report["ranker_from_ce"] > 0.0
        assert report["retriever_from_ce"] == 0.0
        for key in ("retriever_from_de", "retriever_from_sent", "retriever_from_word"):
            assert report[key] > 0.0


class TestFit:
    def test_zero_epochs_returns_initial_checkpoints(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(vocab.size, epochs=0)
        result = fit(config, train, heldout, tmp_path)
        assert len(result.history) == 0
        assert result.retriever_path.exists()
        assert result.ranker_path.exists()
        fresh = dl.DualRetriever(config.retriever_config)
        loaded, _, _ = load_retriever(result.retriever_path)
        for key, tensor in fresh.state_dict().items():
            assert torch.equal(tensor, loaded.state_dict()[key])

    def test_history_length_equals_epochs(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(vocab.size, epochs=2)
        result = fit(config, train[:12], heldout, tmp_path)
        assert len(result.history) == 2
        assert [r.epoch for r in result.history.records] == [0, 1]

    def test_learning_improves_heldout_mrr(self, trained_tiny):
        result = trained_tiny[0]
        assert result.history.records[-1].heldout_mrr10 > result.history.baseline_mrr10

    def test_identical_seeds_reproduce_history(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(vocab.size, mode="full", epochs=2, seed=13)
        a = fit(config, train[:12], heldout[:6], tmp_path / "a")
        b = fit(config, train[:12], heldout[:6], tmp_path / "b")
        for ra, rb in zip(a.history.records, b.history.records):
            for field in ("l_de", "l_ce", "l_sent", "l_word", "total", "heldout_mrr10"):
                assert abs(getattr(ra, field) - getattr(rb, field)) <= 1e-7

    def test_mode_lattice_zero_weight_matches_basic(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        basic = make_config(vocab.size, mode="basic", epochs=1, seed=21)
        zeroed = dataclasses.replace(basic, mode="sd", weight_sent=0.0)
        a = fit(basic, train[:8], heldout[:4], tmp_path / "basic")
        b = fit(zeroed, train[:8], heldout[:4], tmp_path / "sd0")
        for key, tensor in a.retriever.state_dict().items():
            assert torch.allclose(tensor, b.retriever.state_dict()[key], atol=1e-7)
        for key, tensor in a.ranker.state_dict().items():
            assert torch.allclose(tensor, b.ranker.state_dict()[key], atol=1e-7)

    def test_checkpoint_roundtrip_identical_scores(self, trained_tiny):
        result, vocab, store, queries, qrels = trained_tiny
        loaded, _, _ = load_retriever(result.retriever_path)
        query = dl.tokenize(next(iter(queries.values())), vocab, 6)
        docs = [dl.tokenize(store.texts[i], vocab, 10) for i in range(4)]
        a, _, _ = dl.dual_scores(result.retriever.eval(), query, docs)
        b, _, _ = dl.dual_scores(loaded, query, docs)
        assert torch.equal(a.detach(), b.detach())

    def test_divergence_aborts_with_history(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(
            vocab.size, epochs=1, divergence_threshold=-1.0, divergence_patience=2
        )
        with pytest.raises(DivergenceError) as err:
            fit(config, train[:12], heldout[:4], tmp_path)
        assert err.value.history is not None

    def test_checkpoint_cadence(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(vocab.size, epochs=2, checkpoint_every=1)
        fit(config, train[:8], heldout[:4], tmp_path)
        assert (tmp_path / "epoch000.retriever").exists()
        assert (tmp_path / "epoch001.ranker").exists()

    def test_invalid_mode_rejected(self, small_dataset):
        _, _, _, vocab = small_dataset
        config = make_config(vocab.size)
        config = dataclasses.replace(config, mode="turbo")
        with pytest.raises(ValueError, match="mode"):
            config.validate()
        assert "turbo" not in MODES

    def test_metadata_records_mode(self, small_dataset, small_groups, tmp_path):
        _, _, _, vocab = small_dataset
        train, heldout = small_groups
        config = make_config(vocab.size, mode="fnf", epochs=1)
        result = fit(config, train[:8], heldout[:4], tmp_path)
        _, metadata, _ = load_retriever(result.retriever_path)
        assert metadata["mode"] == "fnf"


class TestEvaluateHeldout:
    def test_perfect_separation_gives_one(self, small_dataset, small_groups):
        _, _, _, vocab = small_dataset
        _, heldout = small_groups
        config = make_config(vocab.size)
        retriever, _, _, _ = fresh_models(config)
        value = evaluate_heldout(retriever, heldout)
        assert 0.0 <= value <= 1.0

    def test_empty_groups_rejected(self, small_dataset):
        _, _, _, vocab = small_dataset
        retriever, _, _, _ = fresh_models(make_config(vocab.size))
        with pytest.raises(ValueError):
            evaluate_heldout(retriever, [])


class TestHistoryFile:
    def test_roundtrip(self, trained_tiny, tmp_path):
        result = trained_tiny[0]
        path = tmp_path / "history.tsv"
        write_history(result.history, path)
        records = read_history(path)
        assert len(records) == len(result.history)
        for a, b in zip(records, result.history.records):
            assert a.epoch == b.epoch
            assert a.heldout_mrr10 == pytest.approx(b.heldout_mrr10)
            assert a.masked_rate == pytest.approx(b.masked_rate)
