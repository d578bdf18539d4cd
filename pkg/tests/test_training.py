"""
Tests for the optimizer, masked-LM pre-training, fine-tuning and checkpoints.
"""

import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridner.core.exceptions import CheckpointError, ConfigError, ContractError, NonFiniteError, ShapeError
from gridner.diffcore import Tensor, no_record
from gridner.models.params import ModelParams
from gridner.repositories.checkpoint_repository import CheckpointRepository
from gridner.schemas.checkpoint import Checkpoint
from gridner.schemas.config import RunConfig, TrainConfig, load_run_config
from gridner.schemas.corpus import Vocab
from gridner.services.corpus_service import QUERIES, build_instances, build_vocab, mlm_corpus
from gridner.services.optimizer import (
    AdamOptimizer,
    OptimState,
    adam_step,
    clip_by_global_norm,
    global_norm,
    warmup_factor,
)
from gridner.services.training_service import (
    batch_loss,
    finetune,
    load_checkpoint,
    make_meta,
    mask_tokens,
    mlm_pretrain,
    prepare_model,
    restore_model,
    save_checkpoint,
)
from gridner.utils.rng import RngStreams


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def two_params(encoder_value=0.0, heads_value=0.0) -> ModelParams:
    return ModelParams(OrderedDict([
        ("embed.token", Tensor(np.full((2, 3), encoder_value), requires_grad=True)),
        ("output.b", Tensor(np.full(3, heads_value), requires_grad=True)),
    ]))


def with_train(run_config: RunConfig, **updates) -> RunConfig:
    train = run_config.train.model_copy(update=updates)
    return RunConfig(model=run_config.model, train=train, seed=run_config.seed)


# =============================================================================
# Optimizer
# =============================================================================

def test_zero_gradient_leaves_parameters(tiny_run_config):
    params = two_params(1.0, 2.0)
    grads = {name: np.zeros(t.shape) for name, t in params.items()}
    adam_step(params, grads, OptimState(), tiny_run_config.train)
    assert_array_equal(params["embed.token"].data, 1.0)
    assert_array_equal(params["output.b"].data, 2.0)


def test_first_step_moves_by_learning_rate():
    config = TrainConfig(lr_encoder=0.01, lr_heads=0.1, grad_clip_norm=None)
    params = two_params()
    state = OptimState()
    adam_step(params, {name: np.ones(t.shape) for name, t in params.items()}, state, config)
    assert state.step == 1
    assert_allclose(params["embed.token"].data, -0.01, rtol=1e-6)
    assert_allclose(params["output.b"].data, -0.1, rtol=1e-6)


def test_learning_rate_override():
    config = TrainConfig(lr_encoder=0.01, lr_heads=0.1, grad_clip_norm=None)
    params = two_params()
    adam_step(params, {name: np.ones(t.shape) for name, t in params.items()}, OptimState(), config,
              learning_rates={"heads": 0.5})
    assert_allclose(params["output.b"].data, -0.5, rtol=1e-6)
    assert_allclose(params["embed.token"].data, -0.01, rtol=1e-6)


def test_clipping_preserves_direction():
    grads = {"a": np.array([30.0, 40.0]), "b": None}
    clipped = clip_by_global_norm(grads, 5.0)
    assert global_norm(clipped) == pytest.approx(5.0)
    assert_allclose(clipped["a"], [3.0, 4.0])
    assert clipped["b"] is None


def test_clipping_below_threshold_is_identity():
    grads = {"a": np.array([0.3, 0.4])}
    assert_array_equal(clip_by_global_norm(grads, 5.0)["a"], grads["a"])
    assert_array_equal(clip_by_global_norm({"a": np.array([30.0, 40.0])}, None)["a"], [30.0, 40.0])


def test_non_finite_gradient_updates_nothing():
    params = two_params(1.0, 1.0)
    state = OptimState()
    grads = {"embed.token": np.ones((2, 3)), "output.b": np.array([0.0, np.nan, 0.0])}
    with pytest.raises(NonFiniteError):
        adam_step(params, grads, state, TrainConfig())
    assert state.step == 0
    assert_array_equal(params["embed.token"].data, 1.0)


def test_missing_gradient_freezes_parameter():
    params = two_params(1.0, 1.0)
    state = OptimState()
    adam_step(params, {"embed.token": np.ones((2, 3)), "output.b": None}, state, TrainConfig())
    assert_array_equal(params["output.b"].data, 1.0)
    assert "output.b" not in state.m


def test_gradient_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(two_params(), {"output.b": np.ones(4)}, OptimState(), TrainConfig())


def test_warmup():
    assert warmup_factor(1, 0) == 1.0
    assert warmup_factor(1, 10) == pytest.approx(0.1)
    assert warmup_factor(25, 10) == 1.0
    config = TrainConfig(lr_encoder=0.01, lr_heads=0.01, warmup_steps=10, grad_clip_norm=None)
    params = two_params()
    adam_step(params, {"embed.token": np.ones((2, 3)), "output.b": None}, OptimState(), config)
    assert_allclose(params["embed.token"].data, -0.001, rtol=1e-6)


def test_optimizer_resumes_step_counter():
    params = two_params()
    optimizer = AdamOptimizer(params, TrainConfig(), start_step=40)
    params["output.b"].grad = np.ones(3)
    optimizer.step()
    assert optimizer.step_count == 41


def test_resumed_optimizer_moves_like_a_fresh_one():
    config = TrainConfig(lr_heads=1e-3, grad_clip_norm=None, warmup_steps=0)
    moves = []
    for start_step in (0, 1000):
        params = two_params()
        optimizer = AdamOptimizer(params, config, start_step=start_step)
        for _ in range(10):
            params["output.b"].grad = np.ones(3)
            optimizer.step()
        moves.append(-params["output.b"].data)
    assert_allclose(moves[0], 0.01, rtol=1e-6)
    assert_array_equal(moves[1], moves[0])


def test_bias_correction_counts_updates_per_parameter():
    config = TrainConfig(lr_encoder=0.01, lr_heads=0.01, grad_clip_norm=None)
    params = two_params()
    state = OptimState()
    adam_step(params, {"embed.token": np.ones((2, 3)), "output.b": None}, state, config)
    adam_step(params, {"embed.token": np.ones((2, 3)), "output.b": np.ones(3)}, state, config)
    assert state.step == 2
    assert state.moment_steps == {"embed.token": 2, "output.b": 1}
    assert_allclose(params["output.b"].data, -0.01, rtol=1e-6)


# =============================================================================
# Masked-LM pre-training
# =============================================================================

def test_mask_tokens_selects_only_content(rng):
    sequence = [Vocab.CLS] + list(range(5, 25)) + [Vocab.SEP]
    corrupted, targets, selected = mask_tokens(sequence, 30, 0.15, rng)
    assert int(selected.sum()) == 3
    assert not selected[0] and not selected[-1]
    assert_array_equal(targets, sequence)
    assert_array_equal(corrupted[~selected], np.asarray(sequence)[~selected])


def test_mask_tokens_corruption_mix(rng):
    sequence = [Vocab.CLS] + [7] * 2000 + [Vocab.SEP]
    corrupted, _, selected = mask_tokens(sequence, 30, 1.0, rng)
    assert int(selected.sum()) == 2000
    masked = np.mean(corrupted[selected] == Vocab.MASK)
    assert 0.75 < masked < 0.85
    assert np.all(corrupted[selected] != Vocab.PAD)
    assert np.all((corrupted[selected] == Vocab.MASK) | (corrupted[selected] >= len(Vocab.SPECIALS)))


def test_mask_tokens_zero_rate_and_special_only(rng):
    assert not mask_tokens([2, 5, 6, 3], 10, 0.0, rng)[2].any()
    assert not mask_tokens([2, 3], 10, 0.5, rng)[2].any()


def test_mlm_needs_real_tokens(tiny_run_config):
    vocab = Vocab(list(Vocab.SPECIALS) + ["a"])
    params = ModelParams.initialize(tiny_run_config.model, len(vocab), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        mlm_pretrain([[2, 5, 3]], params, vocab, tiny_run_config, RngStreams(0))


def test_mlm_zero_rate_warns(tiny_run_config, fixture_records, caplog):
    run_config = with_train(tiny_run_config, mlm_mask_rate=0.0)
    vocab = build_vocab(fixture_records[:2])
    params = ModelParams.initialize(run_config.model, len(vocab), np.random.default_rng(0))
    optimizer, history = mlm_pretrain(mlm_corpus(fixture_records[:2], vocab), params, vocab, run_config,
                                      RngStreams(0))
    assert "mlm_mask_rate is 0" in caplog.text
    assert optimizer.step_count == 0
    assert math.isnan(history[0])


def test_mlm_epoch_updates_encoder_only(tiny_run_config, fixture_records):
    vocab = build_vocab(fixture_records[:3])
    params = ModelParams.initialize(tiny_run_config.model, len(vocab), np.random.default_rng(0))
    before = {name: t.data.copy() for name, t in params.items()}
    sequences = mlm_corpus(fixture_records[:3], vocab)
    optimizer, history = mlm_pretrain(sequences, params, vocab, tiny_run_config, RngStreams(0))
    assert len(history) == 1 and np.isfinite(history[0])
    assert optimizer.step_count == 1
    assert not np.array_equal(params["embed.token"].data, before["embed.token"])
    assert_array_equal(params["biaffine.U"].data, before["biaffine.U"])


@pytest.mark.slow
def test_mlm_loss_trends_down(tiny_run_config, fixture_records):
    run_config = with_train(tiny_run_config, lr_mlm=5e-3)
    vocab = build_vocab(fixture_records)
    params = ModelParams.initialize(run_config.model, len(vocab), np.random.default_rng(0))
    _, history = mlm_pretrain(mlm_corpus(fixture_records, vocab), params, vocab, run_config,
                              RngStreams(0), epochs=30)
    assert history[-1] < history[0]


# =============================================================================
# Fine-tuning
# =============================================================================

def run_finetune(run_config, train_records, dev_records, init=None, **kwargs):
    streams = RngStreams(run_config.seed)
    params, vocab, step = prepare_model(train_records, run_config, streams, init=init)
    return finetune(train_records, dev_records, params, vocab, run_config, streams, start_step=step, **kwargs)


def test_finetune_is_deterministic(tiny_run_config, fixture_records):
    records = fixture_records[:2]
    first = run_finetune(tiny_run_config, records, records)
    second = run_finetune(tiny_run_config, records, records)
    assert first.history[0].train_loss == second.history[0].train_loss
    for name, array in first.checkpoint.tensors.items():
        assert_array_equal(array, second.checkpoint.tensors[name])


def test_finetune_logs_each_epoch(tiny_run_config, fixture_records, tmp_path):
    run_config = with_train(tiny_run_config, epochs=2)
    seen = []
    result = run_finetune(run_config, fixture_records[:2], fixture_records[:2],
                          checkpoint_path=tmp_path / "best.ckpt", on_epoch=seen.append)
    assert [log.epoch for log in seen] == [0, 1]
    assert all(log.dev_f1 is not None and 0.0 <= log.dev_f1 <= 1.0 for log in seen)
    assert seen[1].step == 2 * seen[0].step
    assert (tmp_path / "best.ckpt").exists()
    assert result.checkpoint.meta.kind == "finetune"


def test_empty_dev_set_warns(tiny_run_config, fixture_records, caplog, tmp_path):
    result = run_finetune(tiny_run_config, fixture_records[:1], [], checkpoint_path=tmp_path / "last.ckpt")
    assert "Empty dev set" in caplog.text
    assert result.history[0].dev_f1 is None
    assert result.best_f1 is None
    assert result.checkpoint.meta.dev_f1 is None
    assert (tmp_path / "last.ckpt").exists()


def test_eval_on_train_monitors_train_f1(tiny_run_config, fixture_records):
    run_config = with_train(tiny_run_config, eval_on_train=True)
    result = run_finetune(run_config, fixture_records[:1], [])
    assert result.history[0].train_f1 is not None
    assert result.best_f1 == result.history[0].train_f1


def test_finetune_needs_training_data(tiny_run_config, fixture_records):
    streams = RngStreams(0)
    params, vocab, _ = prepare_model(fixture_records[:1], tiny_run_config, streams)
    with pytest.raises(ContractError):
        finetune([], [], params, vocab, tiny_run_config, streams)


def test_prepare_model_vocab_covers_queries(tiny_run_config, fixture_records):
    params, vocab, step = prepare_model(fixture_records, tiny_run_config, RngStreams(0))
    assert step == 0
    assert all(ch in vocab for query in QUERIES.values() for ch in query)
    assert params["embed.token"].shape == (len(vocab), tiny_run_config.model.d_model)


def test_prepare_model_loads_only_encoder(tiny_run_config, fixture_records, tmp_path):
    pretrained, vocab, _ = prepare_model(fixture_records, tiny_run_config, RngStreams(99))
    path = save_checkpoint(pretrained, make_meta("mlm", vocab, tiny_run_config, step=12), tmp_path / "mlm.ckpt")

    params, loaded_vocab, step = prepare_model(fixture_records, tiny_run_config, RngStreams(7), init=path)
    assert step == 12
    assert loaded_vocab == vocab
    assert_array_equal(params["embed.token"].data, pretrained["embed.token"].data)
    assert_array_equal(params["encoder.0.attn.wq"].data, pretrained["encoder.0.attn.wq"].data)
    assert not np.array_equal(params["biaffine.U"].data, pretrained["biaffine.U"].data)


# =============================================================================
# Checkpoints
# =============================================================================

@pytest.fixture
def saved(tiny_run_config, fixture_records, tmp_path):
    params, vocab, _ = prepare_model(fixture_records, tiny_run_config, RngStreams(3))
    meta = make_meta("finetune", vocab, tiny_run_config, step=5, epoch=1, dev_f1=0.5)
    path = save_checkpoint(params, meta, tmp_path / "model.ckpt")
    return path, params, vocab


def test_checkpoint_roundtrip_is_bitwise(saved, tiny_run_config):
    path, params, vocab = saved
    checkpoint = load_checkpoint(path)
    assert checkpoint.meta.step == 5
    assert checkpoint.meta.dev_f1 == 0.5
    assert checkpoint.meta.config["model"]["d_model"] == tiny_run_config.model.d_model
    restored, restored_vocab = restore_model(checkpoint)
    assert restored_vocab == vocab
    assert restored.names() == params.names()
    for name in params:
        assert_array_equal(restored[name].data, params[name].data)


def test_checkpoint_float32(tiny_run_config, fixture_records, tmp_path):
    params, vocab, _ = prepare_model(fixture_records, tiny_run_config, RngStreams(3))
    path = save_checkpoint(params, make_meta("mlm", vocab, tiny_run_config, 0), tmp_path / "f32.ckpt", "float32")
    checkpoint = load_checkpoint(path)
    assert checkpoint.tensors["biaffine.U"].dtype == np.float32
    assert_allclose(checkpoint.tensors["biaffine.U"], params["biaffine.U"].data, rtol=1e-6)


def test_truncated_checkpoint(saved):
    path = saved[0]
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes(saved):
    path = saved[0]
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_bad_magic(saved):
    path = saved[0]
    path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_version_mismatch(saved, tmp_path):
    path, params, _ = saved
    repository = CheckpointRepository()
    header, tensors = repository.load(path)
    repository.version = 2
    other = repository.save(tmp_path / "v2.ckpt", {k: header[k] for k in ("kind", "step", "epoch", "dev_f1",
                                                                          "vocab", "vocab_hash", "config")},
                            tensors, "float64")
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(other)


def test_vocab_hash_mismatch(tiny_run_config, fixture_records, tmp_path):
    params, vocab, _ = prepare_model(fixture_records, tiny_run_config, RngStreams(3))
    meta = make_meta("mlm", vocab, tiny_run_config, 0).model_copy(update={"vocab_hash": "0" * 64})
    path = save_checkpoint(params, meta, tmp_path / "hash.ckpt")
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path)


def test_unknown_parameter_name(saved):
    checkpoint = load_checkpoint(saved[0])
    tensors = OrderedDict(checkpoint.tensors)
    tensors["decoder.extra"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="decoder.extra"):
        restore_model(Checkpoint(meta=checkpoint.meta, tensors=tensors))


def test_missing_parameter(saved):
    checkpoint = load_checkpoint(saved[0])
    tensors = OrderedDict(checkpoint.tensors)
    del tensors["output.b"]
    with pytest.raises(CheckpointError, match="output.b"):
        restore_model(Checkpoint(meta=checkpoint.meta, tensors=tensors))


def test_shape_mismatch_names_tensor(saved, tiny_run_config):
    checkpoint = load_checkpoint(saved[0])
    wider = tiny_run_config.model.model_copy(update={"d_model": 16})
    with pytest.raises(CheckpointError, match="Shape mismatch"):
        restore_model(checkpoint, wider)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


# =============================================================================
# End to end
# =============================================================================

def test_hundred_steps_are_bit_identical(tiny_run_config, fixture_records):
    run_config = with_train(tiny_run_config, batch_size=1, epochs=12, eval_every=12)
    records = fixture_records[:1]
    runs = [run_finetune(run_config, records, []) for _ in range(2)]
    assert runs[0].history[-1].step >= 100
    assert [log.train_loss for log in runs[0].history] == [log.train_loss for log in runs[1].history]
    for name, array in runs[0].checkpoint.tensors.items():
        assert_array_equal(array, runs[1].checkpoint.tensors[name])


def eval_loss(instances, params, run_config) -> float:
    with no_record():
        return batch_loss(instances, params, run_config).item()


def epochs_to_perfect(result) -> int:
    assert result.best_f1 == pytest.approx(1.0)
    return result.best_epoch + 1


@pytest.mark.slow
def test_overfits_fixture_corpus(fixture_records):
    run_config = load_run_config(CONFIG_DIR / "overfit.json")
    streams = RngStreams(run_config.seed)
    params, vocab, step = prepare_model(fixture_records, run_config, streams)
    instances, _ = build_instances(fixture_records, vocab, max_len=run_config.model.max_len)
    losses = [eval_loss(instances, params, run_config)]

    def track(log):
        if log.epoch < 20:
            losses.append(eval_loss(instances, params, run_config))

    result = finetune(fixture_records, fixture_records, params, vocab, run_config, streams,
                      start_step=step, on_epoch=track)
    epochs_to_perfect(result)
    rises = sum(1 for before, after in zip(losses, losses[1:]) if after > before)
    assert rises <= 2
    assert eval_loss(instances, params, run_config) < losses[0] / 10


@pytest.mark.slow
def test_pretrained_encoder_converges_within_three_times_scratch(fixture_records, tmp_path):
    run_config = load_run_config(CONFIG_DIR / "overfit.json")
    scratch = run_finetune(run_config, fixture_records, fixture_records)

    streams = RngStreams(run_config.seed)
    params, vocab, _ = prepare_model(fixture_records, run_config, streams)
    optimizer, _ = mlm_pretrain(mlm_corpus(fixture_records, vocab), params, vocab, run_config, streams, epochs=30)
    path = save_checkpoint(params, make_meta("mlm", vocab, run_config, optimizer.step_count), tmp_path / "mlm.ckpt")

    pretrained = run_finetune(run_config, fixture_records, fixture_records, init=path)
    assert epochs_to_perfect(pretrained) <= 3 * epochs_to_perfect(scratch)
