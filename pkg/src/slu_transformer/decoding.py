"""Classification-based and hierarchical (sop ... eop) inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .labels import EOP, SOP, LabelSpace, LabelVector
from .model import (ModelConfig, ModelParams, classification_head, decode_step, encode)

__all__ = ["LabelSpace", "LabelVector", "Prediction", "classify", "hierarchical_decode",
           "constrained_decode", "greedy_loop", "softmax_np"]


@dataclass
class Prediction:
    """Decoded fields; a field is None when decoding never produced a valid value for it."""
    domain: int | None
    intent: int | None
    slots: list[int | None]
    mode: str
    structural_violation: bool = False
    posteriors: list[float] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    class_id: int | None = None

    def field_values(self) -> list[int | None]:
        return [self.domain, self.intent, *self.slots]

    def label(self) -> LabelVector | None:
        vals = self.field_values()
        if any(v is None for v in vals):
            return None
        return LabelVector.from_sequence(vals)

    def to_json(self, uid: str, space: LabelSpace | None = None) -> dict:
        def name(values, v):
            return None if v is None else (values[v] if space is not None else v)

        out = {"id": uid, "mode": self.mode}
        if space is not None:
            out["domain"] = name(space.domains, self.domain)
            out["intent"] = name(space.intents, self.intent)
            out["slots"] = [name(s, v) for s, v in zip(space.slots, self.slots)]
        else:
            out.update(domain=self.domain, intent=self.intent, slots=list(self.slots))
        out["posterior"] = [float(p) for p in self.posteriors]
        out["structural_violation"] = bool(self.structural_violation)
        return out


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _argmax(values: np.ndarray) -> int:
    # np.argmax already returns the first (lowest) index on ties
    return int(np.argmax(values))


def classify_logits(logits: np.ndarray, space: LabelSpace) -> Prediction:
    post = softmax_np(logits)
    cls = _argmax(logits)
    lv = space.class_to_label(cls)
    return Prediction(lv.domain, lv.intent, list(lv.slots), "classification",
                      posteriors=[float(post[cls])], class_id=cls)


def classify(x: np.ndarray, params: ModelParams, cfg: ModelConfig) -> tuple[Prediction, np.ndarray]:
    """Argmax class (lowest id on ties) and the full class posterior."""
    if cfg.mode != "classification":
        raise ValueError("classify needs a classification-mode model")
    with nx.no_grad():
        enc, _ = encode(x, params, cfg)
        logits = classification_head(enc, params, cfg).data
    return classify_logits(logits, cfg.label_space), softmax_np(logits)


def greedy_loop(step: Callable[[list[int]], np.ndarray], space: LabelSpace,
                max_len: int | None = None, constrained: bool = False) -> Prediction:
    """Greedy sop -> ... loop over a next-token logit function.

    Token t (0-based) should belong to field t. Emitting eop early or a token
    from the wrong field marks a structural violation, and that field and all
    later ones are left undecided.
    """
    M = space.num_slots
    max_len = M + 2 if max_len is None else max_len
    prefix = [SOP]
    values: list[int | None] = [None] * (M + 2)
    posteriors: list[float] = []
    violation = False
    broken = False
    for t in range(max_len):
        logits = np.asarray(step(prefix), dtype=np.float64)
        if constrained:
            allowed = np.full(logits.shape, False)
            if t < M + 2:
                allowed[list(space.field_range(t))] = True
            else:
                allowed[EOP] = True
            token = _argmax(np.where(allowed, logits, -np.inf))
        else:
            token = _argmax(logits)
        posteriors.append(float(softmax_np(logits)[token]))
        prefix.append(token)
        if token == EOP:
            break
        if t >= M + 2:
            violation = True
            break
        where = space.token_field(token)
        if broken or where is None or where[0] != t:
            violation = True
            broken = True
        else:
            values[t] = where[1]
    emitted = [v for v in prefix[1:] if v != EOP]
    if len(emitted) < M + 2:
        violation = True
    return Prediction(values[0], values[1], values[2:], "hierarchical", violation, posteriors, prefix[1:])


def _encode_once(x, params, cfg):
    with nx.no_grad():
        enc, _ = encode(x, params, cfg)
    return enc


def hierarchical_decode(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                        max_len: int | None = None) -> Prediction:
    """Greedy decoding, unrestricted argmax at each step."""
    if cfg.mode != "hierarchical":
        raise ValueError("hierarchical decoding needs a hierarchical-mode model")
    enc = _encode_once(x, params, cfg)
    return greedy_loop(lambda p: decode_step(p, enc, params, cfg), cfg.label_space, max_len)


def constrained_decode(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                       max_len: int | None = None) -> Prediction:
    """Greedy decoding where step t only considers tokens of field t."""
    if cfg.mode != "hierarchical":
        raise ValueError("hierarchical decoding needs a hierarchical-mode model")
    enc = _encode_once(x, params, cfg)
    return greedy_loop(lambda p: decode_step(p, enc, params, cfg), cfg.label_space, max_len,
                       constrained=True)


def predict_one(x: np.ndarray, params: ModelParams, cfg: ModelConfig,
                constrained: bool = False) -> Prediction:
    if cfg.mode == "classification":
        return classify(x, params, cfg)[0]
    if constrained:
        return constrained_decode(x, params, cfg)
    return hierarchical_decode(x, params, cfg)


def predict_batch(xs: Sequence[np.ndarray], params: ModelParams, cfg: ModelConfig,
                  constrained: bool = False, batch_size: int = 64) -> list[Prediction]:
    """Batched inference; pads by length and masks padded frames."""
    from .model import decoder_hidden, output_logits  # local: keeps module import order simple

    order = sorted(range(len(xs)), key=lambda i: xs[i].shape[0])
    out: list[Prediction | None] = [None] * len(xs)
    space = cfg.label_space
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        lengths = [xs[i].shape[0] for i in idx]
        T = max(lengths)
        batch = np.zeros((len(idx), T, xs[idx[0]].shape[1]))
        for b, i in enumerate(idx):
            batch[b, :lengths[b]] = xs[i]
        with nx.no_grad():
            enc, mask = encode(batch, params, cfg, lengths)
            if cfg.mode == "classification":
                logits = classification_head(enc, params, cfg, mask).data
                for b, i in enumerate(idx):
                    out[i] = classify_logits(logits[b], space)
                continue
            # greedy decode the whole batch in lockstep; each row replays the
            # scalar loop's decisions through a per-row step function
            M = space.num_slots
            prefixes = np.full((len(idx), 1), SOP, dtype=np.int64)
            step_logits = []
            for t in range(M + 2):
                hid = decoder_hidden(prefixes, enc, params, cfg, mask)
                logit = output_logits(hid, params).data[:, -1, :]
                step_logits.append(logit)
                if constrained:
                    allowed = np.full(logit.shape[-1], False)
                    allowed[list(space.field_range(t))] = True
                    nxt = np.argmax(np.where(allowed, logit, -np.inf), axis=-1)
                else:
                    nxt = np.argmax(logit, axis=-1)
                prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        for b, i in enumerate(idx):
            rows = [s[b] for s in step_logits]
            out[i] = greedy_loop(lambda p, rows=rows: rows[len(p) - 1], space, constrained=constrained)
    return out  # type: ignore[return-value]
