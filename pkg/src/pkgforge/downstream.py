"""Downstream task harness: task recognition, step recognition, forecasting.

Examples are sequences of (optionally adapter-refined) segment features.
The model adds a learned positional vector to each segment, aggregates the
sequence (mean by default, sum available), and classifies with a
one-hidden-layer MLP under softmax cross entropy. The harness path is
identical for raw and refined features; only the input transform differs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus_io import CorpusFormatError, SegmentCorpus, canonical_json
from .nn import AdamState, Mlp, adam_step, glorot_uniform, softmax_cross_entropy

log = logging.getLogger(__name__)

TASK_RECOGNITION = "TR"
STEP_RECOGNITION = "SR"
STEP_FORECASTING = "SF"


@dataclass
class DownstreamConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 16
    patience: int = 50
    max_epochs: int = 1000
    hidden_tr: int = 128
    hidden_sr: int = 768
    max_positions: int = 128
    aggregation: str = "mean"  # "sum" follows the alternative reading
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    seed: int = 0

    def hidden_for(self, kind: str) -> int:
        return self.hidden_tr if kind == TASK_RECOGNITION else self.hidden_sr


@dataclass
class StepSpan:
    step_class: int
    start: int  # first segment index
    end: int  # one past the last segment index


@dataclass
class VideoAnnotation:
    video_id: str
    task_class: int
    steps: list[StepSpan]


@dataclass
class DownstreamExample:
    features: np.ndarray  # (L, d)
    label: int
    video_id: str


@dataclass
class DownstreamSplits:
    kind: str
    n_classes: int
    train: list[DownstreamExample]
    val: list[DownstreamExample]
    test: list[DownstreamExample]


# ---------------------------------------------------------------------------
# annotations file


def save_annotations(annotations: list[VideoAnnotation], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            rec = {
                "video_id": ann.video_id,
                "task_class": ann.task_class,
                "steps": [{"class": s.step_class, "start": s.start, "end": s.end} for s in ann.steps],
            }
            fh.write(canonical_json(rec) + "\n")


def load_annotations(path: str | Path) -> list[VideoAnnotation]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(
                    VideoAnnotation(
                        video_id=obj["video_id"],
                        task_class=int(obj["task_class"]),
                        steps=[
                            StepSpan(int(s["class"]), int(s["start"]), int(s["end"]))
                            for s in obj["steps"]
                        ],
                    )
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: malformed annotation: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# dataset construction


def _video_examples(
    kind: str, ann: VideoAnnotation, features: np.ndarray
) -> list[DownstreamExample]:
    if kind == TASK_RECOGNITION:
        return [DownstreamExample(features, ann.task_class, ann.video_id)]
    if kind == STEP_RECOGNITION:
        return [
            DownstreamExample(features[s.start : s.end], s.step_class, ann.video_id)
            for s in ann.steps
            if s.end > s.start
        ]
    if kind == STEP_FORECASTING:
        # history must contain at least the first full step
        out = []
        for i in range(1, len(ann.steps)):
            span = ann.steps[i]
            if span.start > 0:
                out.append(DownstreamExample(features[: span.start], span.step_class, ann.video_id))
        return out
    raise ValueError(f"unknown downstream task kind {kind!r}")


def build_downstream_dataset(
    corpus: SegmentCorpus,
    annotations: list[VideoAnnotation],
    kind: str,
    config: DownstreamConfig,
    transform=None,
) -> DownstreamSplits:
    """Seeded, video-disjoint train/val/test splits of downstream examples.

    `transform` maps a (L, d) feature block to the representation under
    evaluation (identity for raw features, the adapter for refined ones);
    it never changes the harness path itself.
    """
    by_id = {v.video_id: v for v in corpus.videos}
    missing = [a.video_id for a in annotations if a.video_id not in by_id]
    if missing:
        raise ValueError(f"annotations reference unknown videos: {missing[:3]}")
    if kind == TASK_RECOGNITION:
        n_classes = max(a.task_class for a in annotations) + 1
    else:
        n_classes = max(s.step_class for a in annotations for s in a.steps) + 1

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(annotations))
    n_train = int(round(config.train_fraction * len(annotations)))
    n_val = int(round(config.val_fraction * len(annotations)))
    buckets = {"train": [], "val": [], "test": []}
    for rank, ann_idx in enumerate(order):
        ann = annotations[ann_idx]
        feats = by_id[ann.video_id].segments
        if transform is not None:
            feats = transform(feats)
        if feats.shape[0] > config.max_positions:
            raise ValueError(
                f"video {ann.video_id} has {feats.shape[0]} segments, "
                f"exceeding max_positions={config.max_positions}"
            )
        examples = _video_examples(kind, ann, feats)
        if rank < n_train:
            buckets["train"].extend(examples)
        elif rank < n_train + n_val:
            buckets["val"].extend(examples)
        else:
            buckets["test"].extend(examples)
    return DownstreamSplits(
        kind=kind,
        n_classes=n_classes,
        train=buckets["train"],
        val=buckets["val"],
        test=buckets["test"],
    )


# ---------------------------------------------------------------------------
# model


class DownstreamModel:
    """Learned absolute positional table plus a one-hidden-layer classifier."""

    def __init__(self, dim: int, n_classes: int, kind: str, config: DownstreamConfig, rng):
        self.config = config
        if rng is None:
            self.positions = np.zeros((config.max_positions, dim))
        else:
            self.positions = glorot_uniform(rng, config.max_positions, dim)
        self.classifier = Mlp([dim, config.hidden_for(kind), n_classes], rng)

    def named_params(self) -> dict[str, np.ndarray]:
        params = {"positions": self.positions}
        params.update(self.classifier.named_params("clf"))
        return params

    def _aggregate(self, features: np.ndarray) -> np.ndarray:
        length = features.shape[0]
        if length > self.positions.shape[0]:
            raise ValueError(f"sequence of length {length} exceeds positional table")
        if length == 0:
            raise ValueError("cannot classify an empty segment sequence")
        augmented = features + self.positions[:length]
        if self.config.aggregation == "sum":
            return augmented.sum(axis=0)
        return augmented.mean(axis=0)

    def forward(self, batch: list[DownstreamExample]):
        aggs = np.stack([self._aggregate(ex.features) for ex in batch])
        logits, cache = self.classifier.forward(aggs)
        return logits, cache

    def backward(self, batch, cache, dlogits):
        grads = {}
        gw, gb, dagg = self.classifier.backward(cache, dlogits)
        for i in range(self.classifier.n_layers):
            grads[f"clf.w{i}"] = gw[i]
            grads[f"clf.b{i}"] = gb[i]
        dpos = np.zeros_like(self.positions)
        for row, ex in enumerate(batch):
            length = ex.features.shape[0]
            g = dagg[row] if self.config.aggregation == "sum" else dagg[row] / length
            dpos[:length] += g
        grads["positions"] = dpos
        return grads


def downstream_forward(model: DownstreamModel, example: DownstreamExample) -> np.ndarray:
    """Class scores for one example."""
    logits, _ = model.forward([example])
    return logits[0]


# ---------------------------------------------------------------------------
# training and evaluation


def evaluate(model: DownstreamModel, examples: list[DownstreamExample]) -> float:
    """Fraction of argmax-correct predictions (ties go to the smallest id)."""
    if not examples:
        raise ValueError("cannot evaluate on an empty example set")
    correct = 0
    for start in range(0, len(examples), 256):
        batch = examples[start : start + 256]
        logits, _ = model.forward(batch)
        preds = np.argmax(logits, axis=1)
        correct += int(sum(p == ex.label for p, ex in zip(preds, batch)))
    return correct / len(examples)


def train_downstream(
    splits: DownstreamSplits, dim: int, config: DownstreamConfig
) -> tuple[DownstreamModel, dict]:
    """Cross-entropy training with early stopping on validation accuracy."""
    if not splits.train:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    model = DownstreamModel(dim, splits.n_classes, splits.kind, config, rng)
    params = model.named_params()
    adam = AdamState.for_params(params)

    best_acc = -1.0
    best_params = {k: v.copy() for k, v in params.items()}
    stall = 0
    history = {"train_loss": [], "val_accuracy": []}
    batch_size = min(config.batch_size, len(splits.train))

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(splits.train))
        epoch_loss = 0.0
        for start in range(0, order.size, batch_size):
            batch = [splits.train[i] for i in order[start : start + batch_size]]
            labels = np.array([ex.label for ex in batch])
            logits, cache = model.forward(batch)
            loss, dlogits = softmax_cross_entropy(logits, labels)
            grads = model.backward(batch, cache, dlogits)
            adam_step(
                params,
                grads,
                adam,
                lr=config.learning_rate,
                weight_decay=config.weight_decay,
            )
            epoch_loss += loss * len(batch)
        history["train_loss"].append(epoch_loss / len(splits.train))

        if splits.val:
            acc = evaluate(model, splits.val)
            history["val_accuracy"].append(acc)
            if acc > best_acc:
                best_acc = acc
                best_params = {k: v.copy() for k, v in params.items()}
                stall = 0
            else:
                stall += 1
                if stall > config.patience:
                    log.info("downstream early stop at epoch %d", epoch)
                    break
        else:
            best_params = {k: v.copy() for k, v in params.items()}

    for key, value in best_params.items():
        params[key][...] = value
    return model, history
