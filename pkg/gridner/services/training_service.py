"""
Training Service
Masked-LM pre-training of the encoder, supervised fine-tuning with dev-F1
model selection, and checkpoint persistence.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from gridner.core.exceptions import CheckpointError, ConfigError, ContractError, NonFiniteError
from gridner.diffcore import Tape, Tensor, add, backward, masked_cross_entropy, no_record, scale, softmax
from gridner.models.encoder import encode, mlm_logits
from gridner.models.network import forward, loss
from gridner.models.params import ENCODER_PREFIXES, ModelParams
from gridner.repositories.checkpoint_repository import CheckpointRepository
from gridner.schemas.checkpoint import Checkpoint, CheckpointMeta
from gridner.schemas.config import ModelConfig, RunConfig
from gridner.schemas.corpus import MrcInstance, SentenceRecord, Vocab
from gridner.services.corpus_service import QUERIES, build_instances, build_vocab
from gridner.services.evaluation_service import gold_spans, micro_metrics
from gridner.services.optimizer import AdamOptimizer
from gridner.services.prediction_service import predict_corpus
from gridner.utils.logger import get_logger, run_logger
from gridner.utils.rng import RngStreams


logger = get_logger("training")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, meta: CheckpointMeta, path: Path, precision: str = "float64") -> Path:
    """Write parameters and metadata in the GRIDNER1 layout."""
    return CheckpointRepository().save(path, meta.model_dump(), params.state_dict(), precision)


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Read a checkpoint and validate its header.

    Raises:
        CheckpointError: Corrupt, truncated or foreign file, or a vocabulary
            that does not match its recorded hash
    """
    header, tensors = CheckpointRepository().load(path)
    try:
        meta = CheckpointMeta.model_validate(header)
    except ValueError as exc:
        raise CheckpointError(f"Checkpoint {path} has an invalid header: {exc}") from exc
    if Vocab(meta.vocab).fingerprint() != meta.vocab_hash:
        raise CheckpointError(f"Vocabulary hash mismatch in {path}")
    return Checkpoint(meta=meta, tensors=tensors)


def make_meta(kind: str, params_vocab: Vocab, run_config: RunConfig, step: int,
              epoch: int = 0, dev_f1: Optional[float] = None) -> CheckpointMeta:
    return CheckpointMeta(
        kind=kind,
        step=step,
        epoch=epoch,
        dev_f1=dev_f1,
        vocab=params_vocab.tokens,
        vocab_hash=params_vocab.fingerprint(),
        config=run_config.echo(),
    )


def checkpoint_model_config(checkpoint: Checkpoint) -> ModelConfig:
    """Model section of the run config echoed into the checkpoint header."""
    return ModelConfig.model_validate(checkpoint.meta.config.get("model", {}))


def restore_model(checkpoint: Checkpoint,
                  model_config: Optional[ModelConfig] = None) -> Tuple[ModelParams, Vocab]:
    """
    Rebuild parameters from a checkpoint.

    Args:
        checkpoint: Loaded checkpoint
        model_config: Config to rebuild for; defaults to the one in the header

    Raises:
        CheckpointError: Name set or shapes do not fit the config
    """
    config = model_config or checkpoint_model_config(checkpoint)
    vocab = Vocab(checkpoint.meta.vocab)
    params = ModelParams.initialize(config, len(vocab), np.random.default_rng(0))
    params.load_state_dict(checkpoint.tensors, strict=True)
    return params, vocab


# ---------------------------------------------------------------------------
# Masked-LM pre-training
# ---------------------------------------------------------------------------

def mask_tokens(sequence: Sequence[int], vocab_size: int, rate: float,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Select and corrupt positions for masked-LM training.

    round(rate * n) of the n non-special positions are selected (at least one
    when rate > 0); of those 80% become <mask>, 10% a random non-special token
    and 10% stay unchanged.

    Args:
        sequence: Token ids including <cls>/<sep>
        vocab_size: Vocabulary size
        rate: Selection rate
        rng: Masking random source

    Returns:
        Tuple of (corrupted ids, target ids, selected-position mask)
    """
    ids = np.asarray(sequence, dtype=np.int64)
    candidates = np.flatnonzero(ids >= len(Vocab.SPECIALS))
    selected = np.zeros(ids.shape, dtype=bool)
    if rate <= 0.0 or candidates.size == 0:
        return ids.copy(), ids.copy(), selected

    count = min(candidates.size, max(1, int(round(rate * candidates.size))))
    chosen = rng.choice(candidates, size=count, replace=False)
    selected[chosen] = True
    corrupted = ids.copy()
    for position in chosen:
        draw = rng.random()
        if draw < 0.8:
            corrupted[position] = Vocab.MASK
        elif draw < 0.9:
            corrupted[position] = rng.integers(len(Vocab.SPECIALS), vocab_size)
    return corrupted, ids.copy(), selected


def mlm_loss(token_ids: np.ndarray, targets: np.ndarray, selected: np.ndarray, params: ModelParams,
             run_config: RunConfig, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Cross-entropy of the original tokens at the selected positions."""
    train_mode = rng is not None
    layers = encode(token_ids, params, run_config.model, train_mode=train_mode, rng=rng)
    probs = softmax(mlm_logits(layers[-1], params), axis=-1)
    return masked_cross_entropy(probs, targets, selected)


def mlm_pretrain(
    sequences: Sequence[Sequence[int]],
    params: ModelParams,
    vocab: Vocab,
    run_config: RunConfig,
    streams: RngStreams,
    start_step: int = 0,
    epochs: Optional[int] = None,
) -> Tuple[AdamOptimizer, List[float]]:
    """
    Task-adaptive masked-LM training of embeddings and encoder layers.

    Args:
        sequences: Token id sequences from `corpus_service.mlm_corpus`
        params: Parameters, updated in place
        vocab: Vocabulary (must contain non-special tokens)
        run_config: Run configuration
        streams: Run random streams ("shuffle", "mlm", "dropout")
        start_step: Optimizer step to resume counting from
        epochs: Override for `train.mlm_epochs`

    Returns:
        Tuple of (optimizer, mean loss per epoch)
    """
    train = run_config.train
    if len(vocab) - vocab.n_specials < 2:
        raise ConfigError("Masked-LM pre-training needs at least two non-special tokens in the vocabulary")
    if train.mlm_mask_rate <= 0.0:
        logger.warning("mlm_mask_rate is 0: no position is ever selected, every sequence is skipped")

    optimizer = AdamOptimizer(params, train, start_step=start_step,
                              learning_rates={"encoder": train.lr_mlm, "heads": train.lr_mlm})
    run_log = run_logger("training", phase="mlm")
    history: List[float] = []
    for epoch in range(epochs if epochs is not None else train.mlm_epochs):
        order = streams["shuffle"].permutation(len(sequences))
        losses, skipped = [], 0
        for start in range(0, len(order), train.batch_size):
            batch = []
            for index in order[start: start + train.batch_size]:
                corrupted, targets, selected = mask_tokens(sequences[index], len(vocab),
                                                           train.mlm_mask_rate, streams["mlm"])
                if selected.any():
                    batch.append((corrupted, targets, selected))
                else:
                    skipped += 1
            if not batch:
                continue

            optimizer.zero_grad()
            with Tape() as tape:
                total = None
                for corrupted, targets, selected in batch:
                    item = mlm_loss(corrupted, targets, selected, params, run_config, streams["dropout"])
                    total = item if total is None else add(total, item)
                batch_loss = scale(total, 1.0 / len(batch))
            _check_finite(batch_loss, epoch, start // train.batch_size)
            backward(batch_loss, tape)
            optimizer.step()
            losses.append(batch_loss.item())

        if skipped:
            run_log.bind(epoch=epoch).warning(f"skipped {skipped} sequence(s) with no maskable position")
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        run_log.bind(epoch=epoch).info(f"loss={mean:.6f} step={optimizer.step_count}")
    return optimizer, history


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    step: int
    train_loss: float
    dev_f1: Optional[float] = None
    train_f1: Optional[float] = None


@dataclass
class FinetuneResult:
    """Best checkpoint and the per-epoch log of one fine-tuning run."""

    checkpoint: Checkpoint
    history: List[EpochLog] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_f1: Optional[float] = None


def _check_finite(value: Tensor, epoch: int, batch: int) -> None:
    if not np.isfinite(value.item()):
        logger.error(f"Non-finite loss at epoch {epoch}, batch {batch}")
        raise NonFiniteError(f"Non-finite loss at epoch {epoch}, batch {batch}",
                             detail={"epoch": epoch, "batch": batch})


def batch_loss(batch: Sequence[MrcInstance], params: ModelParams, run_config: RunConfig,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean instance loss of a batch; dropout is active when `rng` is given."""
    total = None
    for instance in batch:
        grid = forward(instance, params, run_config.model, train_mode=rng is not None, rng=rng)
        item = loss(grid.probs, instance, run_config.model)
        total = item if total is None else add(total, item)
    return scale(total, 1.0 / len(batch))


def corpus_f1(records: Sequence[SentenceRecord], params: ModelParams, vocab: Vocab, run_config: RunConfig) -> float:
    predictions, _, _ = predict_corpus(records, params, vocab, run_config.model)
    return micro_metrics(predictions, gold_spans(records)).f1


def finetune(
    train_records: Sequence[SentenceRecord],
    dev_records: Sequence[SentenceRecord],
    params: ModelParams,
    vocab: Vocab,
    run_config: RunConfig,
    streams: RngStreams,
    start_step: int = 0,
    checkpoint_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> FinetuneResult:
    """
    Supervised training on MRC instances with best-checkpoint selection.

    Each epoch shuffles the instances with the "shuffle" stream, runs
    forward/loss/backward/Adam per batch, then scores micro-F1 on the dev set.
    The best-scoring parameters are kept (and written to `checkpoint_path`);
    training stops after `patience` evaluations without improvement or once
    `stop_at_f1` is reached. With no dev records, train F1 is monitored when
    `eval_on_train` is set; otherwise the last parameters are returned.

    Args:
        train_records: Training corpus
        dev_records: Development corpus (may be empty)
        params: Parameters, updated in place and left at the best state
        vocab: Vocabulary
        run_config: Run configuration
        streams: Run random streams
        start_step: Optimizer step to resume counting from
        checkpoint_path: Where to write the best checkpoint
        on_epoch: Callback receiving each epoch's log

    Returns:
        FinetuneResult: Best checkpoint and history
    """
    train = run_config.train
    instances, truncation = build_instances(
        train_records, vocab, max_len=run_config.model.max_len, label_scheme=run_config.model.label_scheme,
        negative_sampling=train.negative_sampling, rng=streams["negatives"],
    )
    if not instances:
        raise ContractError("Fine-tuning needs a non-empty training set")
    if not dev_records:
        logger.warning("Empty dev set: dev evaluation skipped")

    logger.info(f"Fine-tuning on {len(instances)} instances ({len(train_records)} records), "
                f"{params.count()} parameters")
    optimizer = AdamOptimizer(params, train, start_step=start_step)
    run_log = run_logger("training", phase="finetune")
    monitor = "dev" if dev_records else ("train" if train.eval_on_train else None)

    result = FinetuneResult(checkpoint=None)
    best_state = None
    stale = 0
    for epoch in range(train.epochs):
        order = streams["shuffle"].permutation(len(instances))
        losses = []
        for number, start in enumerate(range(0, len(order), train.batch_size)):
            batch = [instances[k] for k in order[start: start + train.batch_size]]
            optimizer.zero_grad()
            with Tape() as tape:
                value = batch_loss(batch, params, run_config, streams["dropout"])
            _check_finite(value, epoch, number)
            backward(value, tape)
            optimizer.step()
            losses.append(value.item())

        log = EpochLog(epoch=epoch, step=optimizer.step_count, train_loss=float(np.mean(losses)))
        if (epoch + 1) % train.eval_every == 0 or epoch + 1 == train.epochs:
            with no_record():
                if dev_records:
                    log.dev_f1 = corpus_f1(dev_records, params, vocab, run_config)
                if train.eval_on_train:
                    log.train_f1 = corpus_f1(train_records, params, vocab, run_config)
        result.history.append(log)
        run_log.bind(epoch=epoch).info(f"loss={log.train_loss:.6f} dev_f1={log.dev_f1} train_f1={log.train_f1} "
                    f"step={log.step}")
        if on_epoch is not None:
            on_epoch(log)

        score = log.dev_f1 if monitor == "dev" else log.train_f1 if monitor == "train" else None
        if score is None:
            continue
        if result.best_f1 is None or score > result.best_f1:
            result.best_f1, result.best_epoch, stale = score, epoch, 0
            best_state = OrderedDict((name, array.copy()) for name, array in params.state_dict().items())
            best_meta = make_meta("finetune", vocab, run_config, log.step, epoch, score)
            if checkpoint_path is not None:
                save_checkpoint(params, best_meta, checkpoint_path, run_config.precision)
        else:
            stale += 1
        if train.stop_at_f1 is not None and score >= train.stop_at_f1:
            run_log.bind(epoch=epoch).info(f"Reached F1 {score:.4f} >= {train.stop_at_f1}")
            break
        if stale >= train.patience:
            run_log.bind(epoch=epoch).info(f"Early stop after {stale} epochs without improvement")
            break

    if best_state is None:
        last = result.history[-1]
        best_meta = make_meta("finetune", vocab, run_config, last.step, last.epoch, None)
        if checkpoint_path is not None:
            save_checkpoint(params, best_meta, checkpoint_path, run_config.precision)
    else:
        params.load_state_dict(best_state)
    result.checkpoint = Checkpoint(meta=best_meta, tensors=params.state_dict())
    if truncation.entities_dropped:
        logger.warning(f"Training truncation: {truncation.as_dict()}")
    return result


# ---------------------------------------------------------------------------
# Model set-up
# ---------------------------------------------------------------------------

def prepare_model(
    train_records: Sequence[SentenceRecord],
    run_config: RunConfig,
    streams: RngStreams,
    init: Optional[Path] = None,
) -> Tuple[ModelParams, Vocab, int]:
    """
    Fresh parameters, optionally with the encoder taken from a checkpoint.

    Without `init` the vocabulary is built from the training texts and the
    queries. With `init`, the checkpoint's vocabulary is reused and only the
    embedding, encoder and MLM tensors are loaded; the heads stay freshly
    initialized.

    Returns:
        Tuple of (parameters, vocabulary, checkpoint step or 0)
    """
    if init is None:
        vocab = build_vocab(train_records, extra_texts=QUERIES.values())
        params = ModelParams.initialize(run_config.model, len(vocab), streams["init"])
        return params, vocab, 0

    checkpoint = load_checkpoint(init)
    vocab = Vocab(checkpoint.meta.vocab)
    params = ModelParams.initialize(run_config.model, len(vocab), streams["init"])
    loaded = params.load_state_dict(checkpoint.tensors, strict=True, only=ENCODER_PREFIXES)
    logger.info(f"Initialized {len(loaded)} encoder tensors from {init} (step {checkpoint.meta.step})")
    return params, vocab, checkpoint.meta.step
