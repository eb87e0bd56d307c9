"""scikit-learn compatible wrappers around the feature pipeline and the network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Utterance
from .decoding import predict_batch, softmax_np
from .features import (SAMPLE_RATE, Waveform, cmvn_apply, cmvn_fit, frame_and_window,
                       log_spectral, stack_frames)
from .labels import LabelSpace, LabelVector
from .model import ModelConfig, classification_head, encode
from .training import TrainConfig, pad_batch, train
from . import numerics as nx


def _check_sequences(X, n_features: int | None = None) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    seqs = [check_array(x, dtype=np.float64, ensure_2d=True) for x in X]
    if not seqs:
        raise ValueError("expected at least one utterance")
    if n_features is not None:
        for x in seqs:
            if x.shape[1] != n_features:
                raise ValueError(f"utterance has {x.shape[1]} features, estimator expects {n_features}")
    return seqs


class LogMelFeaturizer(TransformerMixin, BaseEstimator):
    """Waveforms -> stacked log-mel features; ``fit`` learns global CMVN."""

    def __init__(self, sample_rate=SAMPLE_RATE, win_ms=25.0, hop_ms=10.0, stack=4, skip=3,
                 normalize=True):
        self.sample_rate = sample_rate
        self.win_ms = win_ms
        self.hop_ms = hop_ms
        self.stack = stack
        self.skip = skip
        self.normalize = normalize

    def _raw(self, X) -> list[np.ndarray]:
        out = []
        for w in X:
            samples = w.samples if isinstance(w, Waveform) else check_array(
                np.asarray(w).reshape(1, -1), dtype=np.float64).ravel()
            wave = Waveform(samples, self.sample_rate)
            frames = frame_and_window(wave, self.win_ms, self.hop_ms)
            out.append(stack_frames(log_spectral(frames, self.sample_rate), self.stack, self.skip))
        return out

    def fit(self, X, y=None):
        raw = self._raw(X)
        self.cmvn_ = cmvn_fit(raw)
        self.n_features_out_ = raw[0].shape[1]
        return self

    def transform(self, X) -> list[np.ndarray]:
        raw = self._raw(X)
        if not self.normalize:
            return raw
        check_is_fitted(self, "cmvn_")
        return [cmvn_apply(x, self.cmvn_) for x in raw]


class SLUTransformer(ClassifierMixin, BaseEstimator):
    """End-to-end transformer SLU model.

    ``X`` is a list of (T, p) feature matrices; ``y`` is an (N, 2 + M) integer
    array of [domain, intent, slot_1, ..., slot_M] ids. ``predict`` returns
    the same layout, with -1 for fields a hierarchical decode left undecided.
    """

    def __init__(self, mode="hierarchical", classifier="decoder", model_dim=128, head_dim=64,
                 num_heads=3, enc_layers=5, dec_layers=1, ffn_inner=512, dropout=0.1,
                 label_smoothing=0.1, epochs=250, batch_size=32, schedule_factor=0.95,
                 warmup_steps=18000, clip_norm=5.0, seed=0, constrained_decode=False,
                 label_space=None):
        self.mode = mode
        self.classifier = classifier
        self.model_dim = model_dim
        self.head_dim = head_dim
        self.num_heads = num_heads
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.ffn_inner = ffn_inner
        self.dropout = dropout
        self.label_smoothing = label_smoothing
        self.epochs = epochs
        self.batch_size = batch_size
        self.schedule_factor = schedule_factor
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.seed = seed
        self.constrained_decode = constrained_decode
        self.label_space = label_space

    def _utterances(self, X, y, prefix):
        y = check_array(y, dtype=np.int64, ensure_2d=True)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} utterances but {len(y)} label rows")
        return [Utterance(f"{prefix}{i}", x, LabelVector.from_sequence(row))
                for i, (x, row) in enumerate(zip(X, y))]

    def fit(self, X, y, eval_set=None):
        """Train; ``eval_set=(X, y)`` drives best-checkpoint selection (default: train data)."""
        seqs = _check_sequences(X)
        y_arr = check_array(y, dtype=np.int64, ensure_2d=True)
        space = self.label_space
        if space is None:
            card = y_arr.max(axis=0) + 1
            space = LabelSpace.sized(int(card[0]), int(card[1]), [int(c) for c in card[2:]])
        self.label_space_ = space
        self.config_ = ModelConfig(
            input_dim=seqs[0].shape[1], model_dim=self.model_dim, head_dim=self.head_dim,
            num_heads=self.num_heads, enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            ffn_inner=self.ffn_inner, dropout=self.dropout, label_smoothing=self.label_smoothing,
            mode=self.mode, classifier=self.classifier,
            max_frames=max(1024, max(x.shape[0] for x in seqs)), label_space=space)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           schedule_factor=self.schedule_factor, warmup_steps=self.warmup_steps,
                           clip_norm=self.clip_norm, seed=self.seed,
                           constrained_decode=self.constrained_decode)
        train_set = self._utterances(seqs, y_arr, "train")
        if eval_set is not None:
            eval_utts = self._utterances(_check_sequences(eval_set[0], seqs[0].shape[1]), eval_set[1], "eval")
        else:
            eval_utts = train_set
        result = train(train_set, eval_utts, self.config_, tcfg)
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = seqs[0].shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        seqs = _check_sequences(X, self.n_features_in_)
        preds = predict_batch(seqs, self.params_, self.config_, self.constrained_decode)
        return np.array([[-1 if v is None else v for v in p.field_values()] for p in preds],
                        dtype=np.int64)

    def predict_proba(self, X) -> np.ndarray:
        """Class posteriors (classification mode only), columns in class-id order."""
        check_is_fitted(self, "params_")
        if self.config_.mode != "classification":
            raise AttributeError("predict_proba is only defined in classification mode")
        seqs = _check_sequences(X, self.n_features_in_)
        x, lengths = pad_batch(seqs)
        with nx.no_grad():
            enc, mask = encode(x, self.params_, self.config_, lengths)
            logits = classification_head(enc, self.params_, self.config_, mask).data
        return softmax_np(logits)

    def score(self, X, y, sample_weight=None) -> float:
        """Exact-match accuracy: every field correct."""
        y = check_array(y, dtype=np.int64, ensure_2d=True)
        hit = np.all(self.predict(X) == y, axis=1)
        return float(np.average(hit, weights=sample_weight))
