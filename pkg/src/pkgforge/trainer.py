"""Train the feature adapter and its per-objective answer heads.

The adapter is a bottleneck MLP (input -> 128 -> input, ReLU inside) whose
output feeds one answer head per active objective. Heads over node-style
classes use hidden widths C//4 and C//2; heads over task-style classes use
a single C//2 hidden layer. Every objective is multi-label binary cross
entropy and the total loss is their unweighted sum. All gradients are
hand-derived and checked against central finite differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus_io import ModelCheckpoint, checkpoint_from_params
from .labeler import PseudoLabelSet
from .nn import AdamState, Mlp, adam_step, bce_with_logits

log = logging.getLogger(__name__)

BOTTLENECK_DIM = 128

NODE_STYLE = "node"
TASK_STYLE = "task"

# objective -> (head kind, which labels header field sizes the class space)
OBJECTIVE_SPECS = {
    "vnm": (NODE_STYLE, "num_nodes"),
    "vtm_db": (TASK_STYLE, "task_ids"),
    "vtm_corpus": (TASK_STYLE, "corpus_task_names"),
    "tcl_db": (NODE_STYLE, "num_nodes"),
    "tcl_corpus": (NODE_STYLE, "num_nodes"),
    "vsm": (NODE_STYLE, "num_headlines"),
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0
    objectives: tuple[str, ...] = ("vnm", "vtm_db", "vtm_corpus", "tcl_db", "nrl")
    nrl_hops: int = 1
    bottleneck: int = BOTTLENECK_DIM
    val_fraction: float = 0.1
    loss_coefficients: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if not self.objectives:
            raise ValueError("at least one training objective is required")
        for obj in self.objectives:
            if obj != "nrl" and obj not in OBJECTIVE_SPECS:
                raise ValueError(f"unknown objective {obj!r}")


@dataclass
class HeadSpec:
    name: str
    kind: str  # NODE_STYLE | TASK_STYLE
    n_classes: int

    def dims(self, input_dim: int) -> list[int]:
        c = self.n_classes
        if self.kind == NODE_STYLE:
            # C//4 and C//2, clamped so toy class counts stay constructible
            return [input_dim, max(1, c // 4), max(1, c // 2), c]
        return [input_dim, max(1, c // 2), c]


def expand_objectives(objectives, nrl_hops: int) -> list[str]:
    """Expand "nrl" into its per-direction, per-hop head names."""
    names = []
    for obj in objectives:
        if obj == "nrl":
            for k in range(1, nrl_hops + 1):
                names.extend([f"nrl_in_{k}", f"nrl_out_{k}"])
        else:
            names.append(obj)
    return names


def head_specs_from_header(header: dict, objectives, nrl_hops: int) -> list[HeadSpec]:
    specs = []
    for name in expand_objectives(objectives, nrl_hops):
        if name.startswith("nrl_"):
            specs.append(HeadSpec(name, NODE_STYLE, header["num_nodes"]))
            continue
        kind, size_field = OBJECTIVE_SPECS[name]
        size = header[size_field]
        n_classes = size if isinstance(size, int) else len(size)
        if n_classes < 1:
            raise ValueError(f"objective {name!r} has an empty class space")
        specs.append(HeadSpec(name, kind, n_classes))
    return specs


def targets_from_labels(
    header: dict, records: list[PseudoLabelSet], specs: list[HeadSpec]
) -> dict[str, list[np.ndarray]]:
    """Sparse positive-class index lists per head, aligned with the records."""
    task_index = {tid: i for i, tid in enumerate(header["task_ids"])}
    corpus_index = {name: i for i, name in enumerate(header["corpus_task_names"])}
    by_name = {s.name: s for s in specs}
    targets: dict[str, list[np.ndarray]] = {s.name: [] for s in specs}
    for rec in records:
        for spec in specs:
            name = spec.name
            if name == "vnm":
                ids = [nid for nid, _ in rec.vnm]
            elif name == "vtm_db":
                ids = [task_index[t] for t in rec.vtm_db]
            elif name == "vtm_corpus":
                ids = [corpus_index[t] for t in rec.vtm_corpus]
            elif name == "tcl_db":
                ids = rec.tcl_db
            elif name == "tcl_corpus":
                ids = rec.tcl_corpus
            elif name == "vsm":
                ids = [hid for hid, _ in rec.vsm]
            elif name.startswith("nrl_"):
                direction, hop = name.split("_")[1:]
                hops = rec.nrl[direction]
                ids = [nid for nid, _ in hops[int(hop) - 1]] if len(hops) >= int(hop) else []
            else:
                raise ValueError(f"unknown head {name!r}")
            arr = np.asarray(sorted(ids), dtype=np.int64)
            if arr.size and (arr[0] < 0 or arr[-1] >= by_name[name].n_classes):
                raise ValueError(f"head {name!r} target out of range for C={spec.n_classes}")
            targets[name].append(arr)
    return targets


@dataclass
class PaprikaModel:
    """Adapter plus answer heads; only the adapter survives to evaluation."""

    adapter: Mlp
    heads: dict[str, Mlp]
    specs: list[HeadSpec]

    @classmethod
    def build(cls, dim: int, specs: list[HeadSpec], bottleneck: int, rng: np.random.Generator):
        adapter = Mlp([dim, bottleneck, dim], rng)
        heads = {s.name: Mlp(s.dims(dim), rng) for s in specs}
        return cls(adapter=adapter, heads=heads, specs=specs)

    def named_params(self) -> dict[str, np.ndarray]:
        params = self.adapter.named_params("adapter")
        for spec in self.specs:
            params.update(self.heads[spec.name].named_params(f"head.{spec.name}"))
        return params


def _dense_targets(index_lists: list[np.ndarray], rows, n_classes: int) -> np.ndarray:
    dense = np.zeros((len(rows), n_classes))
    for out_row, idx in enumerate(rows):
        ids = index_lists[idx]
        if ids.size:
            dense[out_row, ids] = 1.0
    return dense


def model_loss_and_grads(model: PaprikaModel, x: np.ndarray, dense_targets: dict[str, np.ndarray], coeffs: dict[str, float]):
    """Total BCE over all heads plus gradients for every named parameter."""
    z, adapter_cache = model.adapter.forward(x)
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    dz = np.zeros_like(z)
    for spec in model.specs:
        head = model.heads[spec.name]
        logits, cache = head.forward(z)
        loss, dlogits = bce_with_logits(logits, dense_targets[spec.name])
        coeff = coeffs.get(spec.name, 1.0)
        total += coeff * loss
        gw, gb, dz_head = head.backward(cache, coeff * dlogits)
        for i in range(head.n_layers):
            grads[f"head.{spec.name}.w{i}"] = gw[i]
            grads[f"head.{spec.name}.b{i}"] = gb[i]
        dz += dz_head
    gw, gb, _ = model.adapter.backward(adapter_cache, dz)
    for i in range(model.adapter.n_layers):
        grads[f"adapter.w{i}"] = gw[i]
        grads[f"adapter.b{i}"] = gb[i]
    return total, grads


def model_loss(model: PaprikaModel, x, dense_targets, coeffs) -> float:
    total = 0.0
    z, _ = model.adapter.forward(x)
    for spec in model.specs:
        logits, _ = model.heads[spec.name].forward(z)
        loss, _ = bce_with_logits(logits, dense_targets[spec.name])
        total += coeffs.get(spec.name, 1.0) * loss
    return total


def _dataset_loss(model, features, targets, indices, coeffs, chunk=1024) -> float:
    total = 0.0
    for start in range(0, len(indices), chunk):
        rows = indices[start : start + chunk]
        dense = {
            s.name: _dense_targets(targets[s.name], rows, s.n_classes) for s in model.specs
        }
        total += model_loss(model, features[rows], dense, coeffs) * len(rows)
    return total / max(1, len(indices))


def train(
    features: np.ndarray,
    video_of: np.ndarray,
    header: dict,
    targets: dict[str, list[np.ndarray]],
    config: TrainConfig,
    config_hash: str | None = None,
) -> tuple[ModelCheckpoint, dict]:
    """Mini-batch Adam over shuffled segments with video-disjoint validation.

    Early stopping tracks the held-out total loss: training stops once it
    has not improved for more than `patience` consecutive epochs, and the
    best-scoring parameters are the ones checkpointed. The whole procedure
    is a pure function of (features, targets, config).
    """
    features = np.asarray(features, dtype=np.float64)
    n, dim = features.shape
    if n == 0:
        raise ValueError("cannot train on an empty segment set")
    specs = head_specs_from_header(header, config.objectives, config.nrl_hops)

    rng = np.random.default_rng(config.seed)
    model = PaprikaModel.build(dim, specs, config.bottleneck, rng)
    params = model.named_params()
    adam = AdamState.for_params(params)

    videos = np.unique(video_of)
    n_val_videos = int(round(config.val_fraction * videos.size))
    if 0 < n_val_videos < videos.size:
        shuffled = rng.permutation(videos)
        val_videos = set(shuffled[:n_val_videos].tolist())
        val_idx = np.nonzero([v in val_videos for v in video_of])[0]
        train_idx = np.nonzero([v not in val_videos for v in video_of])[0]
    else:
        train_idx = np.arange(n)
        val_idx = np.zeros(0, dtype=np.int64)

    coeffs = dict(config.loss_coefficients)
    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    stall = 0
    history = {"train_loss": [], "val_loss": []}

    batch = min(config.batch_size, train_idx.size)
    for epoch in range(config.max_epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        epoch_loss = 0.0
        for start in range(0, order.size, batch):
            rows = order[start : start + batch]
            dense = {s.name: _dense_targets(targets[s.name], rows, s.n_classes) for s in specs}
            loss, grads = model_loss_and_grads(model, features[rows], dense, coeffs)
            adam_step(
                params,
                grads,
                adam,
                lr=config.learning_rate,
                beta1=config.beta1,
                beta2=config.beta2,
                eps=config.eps,
                weight_decay=config.weight_decay,
            )
            epoch_loss += loss * rows.size
        history["train_loss"].append(epoch_loss / order.size)

        if val_idx.size:
            val_loss = _dataset_loss(model, features, targets, val_idx, coeffs)
            history["val_loss"].append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in params.items()}
                best_epoch = epoch
                stall = 0
            else:
                stall += 1
                if stall > config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
        else:
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch

    metadata = {
        "dim": dim,
        "bottleneck": config.bottleneck,
        "heads": {s.name: s.n_classes for s in specs},
        "head_kinds": {s.name: s.kind for s in specs},
        "objectives": list(config.objectives),
        "nrl_hops": config.nrl_hops,
        "seed": config.seed,
        "config_hash": config_hash,
        "best_epoch": best_epoch,
        "best_val_loss": None if not val_idx.size else best_val,
    }
    ckpt = checkpoint_from_params(best_params, metadata)
    return ckpt, history


# ---------------------------------------------------------------------------
# applying a trained adapter


def adapter_from_checkpoint(ckpt: ModelCheckpoint) -> Mlp:
    params = ckpt.unpack()
    dim = ckpt.metadata["dim"]
    bottleneck = ckpt.metadata.get("bottleneck", BOTTLENECK_DIM)
    adapter = Mlp([dim, bottleneck, dim])
    adapter.load_params("adapter", params)
    return adapter


def apply_adapter(adapter: Mlp, features: np.ndarray) -> np.ndarray:
    out, _ = adapter.forward(np.asarray(features, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# gradient verification


def gradient_check(
    model: PaprikaModel,
    x: np.ndarray,
    dense_targets: dict[str, np.ndarray],
    coeffs: dict[str, float] | None = None,
    h: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples n_coords parameter coordinates across all tensors. The
    denominator is floored at 1e-3 so coordinates with (near-)zero true
    gradient are judged on the absolute scale where finite differences are
    trustworthy.
    """
    coeffs = coeffs or {}
    rng = rng or np.random.default_rng(0)
    _, grads = model_loss_and_grads(model, x, dense_targets, coeffs)
    params = model.named_params()

    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat_index in sorted(int(p) for p in picks):
        slot = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        name = names[slot]
        local = flat_index - offsets[slot]
        flat_view = params[name].reshape(-1)
        saved = flat_view[local]
        flat_view[local] = saved + h
        plus = model_loss(model, x, dense_targets, coeffs)
        flat_view[local] = saved - h
        minus = model_loss(model, x, dense_targets, coeffs)
        flat_view[local] = saved
        fd = (plus - minus) / (2.0 * h)
        an = float(grads[name].reshape(-1)[local])
        if abs(fd) < 1e-12 and abs(an) < 1e-12:
            continue
        worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), 1e-3))
    return worst
