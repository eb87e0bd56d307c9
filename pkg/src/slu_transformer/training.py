"""Label-smoothed losses, warmup schedule, Adam and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Utterance
from .decoding import predict_batch
from .evaluation import evaluate
from .model import (EVAL, ForwardContext, ModelConfig, ModelParams, classification_head, encode,
                    init_params, save_checkpoint, sequence_logits)
from .numerics import NumericalError, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "eval_domain_acc", "eval_intent_acc",
                  "eval_slot_acc", "eval_exact_match", "lr"]


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    schedule_factor: float = 0.95
    warmup_steps: int = 18000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 5.0
    seed: int = 0
    constrained_decode: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smoothing_targets(targets: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    """q_target = 1 - eps + eps/C, every other class eps/C."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"target id out of range [0, {num_classes})")
    q = np.full(targets.shape + (num_classes,), smoothing / num_classes)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / num_classes, axis=-1)
    return q


def smoothed_cross_entropy(logits, targets, smoothing: float = 0.1) -> Tensor:
    """Mean over positions of -sum_c q_c log softmax(logits)_c."""
    logits = nx.as_tensor(logits)
    q = smoothing_targets(targets, logits.shape[-1], smoothing)
    per_position = nx.scale(nx.sum_(nx.log_softmax(logits) * q, axis=-1), -1.0)
    return nx.mean(per_position)


def smoothing_floor(num_classes: int, smoothing: float) -> float:
    """Entropy of the smoothed target, the infimum of the smoothed loss."""
    hi = 1.0 - smoothing + smoothing / num_classes
    lo = smoothing / num_classes
    out = -hi * math.log(hi)
    if lo > 0:
        out -= (num_classes - 1) * lo * math.log(lo)
    return out


def teacher_forcing(labels: Sequence, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs [sop, y_D, ..., y_sM] and targets [y_D, ..., y_sM, eop]."""
    seqs = np.array([cfg.label_space.to_tokens(lv) for lv in labels], dtype=np.int64)
    return seqs[:, :-1], seqs[:, 1:]


def batch_loss(x, lengths, labels, params: ModelParams, cfg: ModelConfig,
               ctx: ForwardContext = EVAL) -> Tensor:
    """Mode-dispatched loss for a padded batch (B, T, p)."""
    enc, mask = encode(x, params, cfg, lengths, ctx)
    if cfg.mode == "classification":
        targets = np.array([cfg.label_space.label_to_class(lv) for lv in labels])
        logits = classification_head(enc, params, cfg, mask, ctx)
    else:
        inputs, targets = teacher_forcing(labels, cfg)
        logits = sequence_logits(inputs, enc, params, cfg, mask, ctx)
    return smoothed_cross_entropy(logits, targets, cfg.label_smoothing)


def sequence_loss(utterances: Sequence[Utterance], params: ModelParams, cfg: ModelConfig,
                  ctx: ForwardContext = EVAL) -> Tensor:
    """Mean smoothed cross-entropy over every target position of every utterance."""
    if cfg.mode != "hierarchical":
        raise ValueError("sequence loss needs a hierarchical model")
    x, lengths = pad_batch([u.features for u in utterances])
    return batch_loss(x, lengths, [u.label for u in utterances], params, cfg, ctx)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------

def lr_at(step: int, factor: float = 0.95, model_dim: int = 128, warmup: int = 18000) -> float:
    """k * d^-0.5 * min(step^-0.5, step * w^-1.5)."""
    if step < 1:
        raise ValueError("learning-rate steps start at 1")
    if factor <= 0 or warmup < 1:
        raise ValueError("schedule needs factor > 0 and warmup >= 1")
    return factor * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor] | ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if update.any():
            p.assign(p.data - update)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = nx.global_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pad_batch(xs: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    lengths = [x.shape[0] for x in xs]
    out = np.zeros((len(xs), max(lengths), xs[0].shape[1]))
    for b, x in enumerate(xs):
        out[b, :lengths[b]] = x
    return out, lengths


def bucket_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Group similar lengths together; random order within equal lengths and across batches."""
    perm = rng.permutation(len(lengths))
    order = sorted(perm.tolist(), key=lambda i: lengths[i])
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: ModelConfig
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_exact_match: float
    checkpoint: Path | None = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        write_metrics(buf, self.history)
        return buf.getvalue()


def write_metrics(fh, rows: Sequence[dict]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def evaluate_split(utterances: Sequence[Utterance], params: ModelParams, cfg: ModelConfig,
                   constrained: bool = False):
    preds = predict_batch([u.features for u in utterances], params, cfg, constrained)
    return evaluate({u.id: p for u, p in zip(utterances, preds)},
                    {u.id: u.label for u in utterances}, cfg.label_space)


def train(train_set: Sequence[Utterance], eval_set: Sequence[Utterance], cfg: ModelConfig,
          tcfg: TrainConfig, out_dir: str | Path | None = None,
          params: ModelParams | None = None) -> TrainResult:
    """Train, evaluating after every epoch and keeping the best exact-match weights.

    Writes ``best.slum`` and ``metrics.csv`` to ``out_dir`` when given.
    """
    if not train_set or not eval_set:
        raise ValueError("training needs non-empty train and eval splits")
    seeds = np.random.SeedSequence(tcfg.seed).spawn(3)
    params = params if params is not None else init_params(cfg, int(seeds[0].generate_state(1)[0]))
    batch_rng = np.random.default_rng(seeds[1])
    ctx = ForwardContext(train=True, rng=np.random.default_rng(seeds[2]))
    state = AdamState(tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    lengths = [u.features.shape[0] for u in train_set]
    best = params.snapshot()
    best_epoch, best_em = 0, -1.0
    history: list[dict] = []
    lr = 0.0
    for epoch in range(1, tcfg.epochs + 1):
        total, seen = 0.0, 0
        for idx in bucket_batches(lengths, tcfg.batch_size, batch_rng):
            x, lens = pad_batch([train_set[i].features for i in idx])
            labels = [train_set[i].label for i in idx]
            loss = batch_loss(x, lens, labels, params, cfg, ctx)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
            named = dict(params.items())
            grads = nx.backward(loss, named.values())
            grads = {k: grads[p] for k, p in named.items()}
            norm = clip_gradients(grads, tcfg.clip_norm)
            if not math.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm at epoch {epoch}, step {state.step + 1}")
            lr = lr_at(state.step + 1, tcfg.schedule_factor, cfg.model_dim, tcfg.warmup_steps)
            adam_step(params, grads, state, lr)
            total += value * len(idx)
            seen += len(idx)
        report = evaluate_split(eval_set, params, cfg, tcfg.constrained_decode)
        row = {"epoch": epoch, "train_loss": total / seen, "eval_domain_acc": report.domain_acc,
               "eval_intent_acc": report.intent_acc, "eval_slot_acc": report.slot_acc_macro,
               "eval_exact_match": report.exact_match, "lr": lr}
        history.append(row)
        log.info("epoch %d loss %.4f eval exact %.4f lr %.3g", epoch, row["train_loss"],
                 report.exact_match, lr)
        if report.exact_match > best_em:
            best_em, best_epoch, best = report.exact_match, epoch, params.snapshot()
    params.load_snapshot(best)
    ckpt = None
    if out is not None:
        ckpt = out / "best.slum"
        save_checkpoint(ckpt, cfg, params)
        with open(out / "metrics.csv", "w", newline="") as fh:
            write_metrics(fh, history)
    return TrainResult(cfg, params, history, best_epoch, max(best_em, 0.0), ckpt)


# ---------------------------------------------------------------------------
# whole-model gradient verification
# ---------------------------------------------------------------------------

def tiny_config(mode: str = "hierarchical", **changes) -> ModelConfig:
    """d=8, n=4, 2 heads, 1+1 layers; 2 domains x 3 intents so the vocabulary is 7."""
    from .labels import LabelSpace

    base = dict(input_dim=6, model_dim=8, head_dim=4, num_heads=2, enc_layers=1, dec_layers=1,
                ffn_inner=16, dropout=0.0, mode=mode, max_frames=16,
                label_space=LabelSpace.sized(2, 3))
    base.update(changes)
    return ModelConfig(**base)


def model_grad_check(cfg: ModelConfig, frames: int = 3, batch: int = 1, seed: int = 0,
                     tolerance: float = 1e-5) -> nx.GradCheckReport:
    """Finite-difference check of the full loss w.r.t. every parameter tensor."""
    from .labels import LabelVector

    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # nonzero biases and gains so their gradients are exercised away from init
    for name, t in params.items():
        if t.ndim == 1:
            t.assign(t.data + 0.1 * rng.standard_normal(t.shape))
    x = rng.standard_normal((batch, frames, cfg.input_dim))
    card = cfg.label_space.cardinalities
    labels = [LabelVector.from_sequence([int(rng.integers(c)) for c in card]) for _ in range(batch)]
    return nx.grad_check(lambda: batch_loss(x, [frames] * batch, labels, params, cfg),
                         dict(params.items()), tolerance)
