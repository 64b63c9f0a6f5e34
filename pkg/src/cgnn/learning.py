"""Losses, ordinal coding, optimisers, splits, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors
from .graph import ConceptGraphSpec, EmissionSpec, parse_graph_spec, serialize_graph_spec
from .metrics import (
    average_distance,
    balanced_accuracy,
    confusion_counts,
    accuracy,
    multiclass_accuracy,
)
from .model import DropoutConfig, Model, ModelConfig, forward_sequence, initial_state, init_model
from .worlds import SequenceRecord

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


class DataError(ValueError):
    """Dataset labels do not match the graph's emissions."""


# --------------------------------------------------------------------------
# ordinal coding


def ordinal_encode(cls: int, K: int) -> np.ndarray:
    """``cls`` in 1..K to K cumulative indicators, e.g. (3, 5) -> [1, 1, 1, 0, 0]."""
    if not 1 <= cls <= K:
        raise ValueError(f"ordinal class {cls} outside 1..{K}")
    out = np.zeros(K)
    out[:cls] = 1.0
    return out


def ordinal_decode(probs, rule: str = "count"):
    """Class in 1..K from K sigmoid outputs (last axis).

    ``count`` counts entries above 0.5; ``first_below`` takes the position of
    the first entry below 0.5. Both are clamped to at least 1.
    """
    p = np.asarray(probs, dtype=np.float64)
    if rule == "count":
        cls = (p > 0.5).sum(axis=-1)
    elif rule == "first_below":
        below = p < 0.5
        cls = np.where(below.any(axis=-1), below.argmax(axis=-1), p.shape[-1])
    else:
        raise ValueError(f"unknown ordinal decode rule {rule!r}")
    cls = np.maximum(cls, 1)
    return int(cls) if np.ndim(cls) == 0 else cls


def predict_classes(probs, emission: EmissionSpec, ordinal_rule: str = "count") -> np.ndarray:
    p = np.asarray(probs)
    if emission.kind == "binary":
        return (p[..., 0] > 0.5).astype(np.int64)
    if emission.kind == "categorical":
        return p.argmax(axis=-1)
    return np.asarray(ordinal_decode(p, ordinal_rule))


# --------------------------------------------------------------------------
# loss


def _targets(target, emission: EmissionSpec, batch: int, dtype) -> np.ndarray:
    y = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if y.size == 1 and batch > 1:
        y = np.full(batch, int(y[0]))
    K = emission.width
    if emission.kind == "binary":
        if np.any((y < 0) | (y > 1)):
            raise ValueError(f"binary target out of range: {y}")
        return y.astype(dtype)[:, None]
    if emission.kind == "categorical":
        if np.any((y < 0) | (y >= K)):
            raise ValueError(f"categorical target out of range 0..{K - 1}: {y}")
        return np.eye(K, dtype=dtype)[y]
    if np.any((y < 1) | (y > K)):
        raise ValueError(f"ordinal target out of range 1..{K}: {y}")
    return (np.arange(K)[None, :] < y[:, None]).astype(dtype)


def cross_entropy(emission: Tensor, target, kind: str | EmissionSpec, num_classes: int | None = None) -> Tensor:
    """Summed cross-entropy of probability rows against integer targets.

    Binary and ordinal heads use Bernoulli terms (ordinal against the
    cumulative encoding); categorical heads use the negative log of the
    target-class probability. Probabilities are clamped to
    ``[1e-7, 1 - 1e-7]`` before the log.
    """
    p = emission if isinstance(emission, Tensor) else Tensor(np.atleast_2d(np.asarray(emission, dtype=np.float64)))
    if isinstance(kind, EmissionSpec):
        spec = kind
    else:
        spec = EmissionSpec(kind, "", num_classes or p.shape[-1])
    y = _targets(target, spec, p.shape[0], p.dtype)
    hi = 1 - PROB_FLOOR
    log_p = ad.log(ad.clip(p, PROB_FLOOR, hi))
    pos = ad.sum_reduce(ad.hadamard(Tensor(y), log_p))
    if spec.kind == "categorical":
        return ad.scale(pos, -1.0)
    one_minus = ad.add(Tensor(np.ones_like(p.data)), ad.scale(p, -1.0))
    log_q = ad.log(ad.clip(one_minus, PROB_FLOOR, hi))
    neg = ad.sum_reduce(ad.hadamard(Tensor(1 - y), log_q))
    return ad.scale(ad.add(pos, neg), -1.0)


# --------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr: float):
        self.lr = lr
        self.step_count = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.step_count += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
            p.data -= p.dtype.type(self.lr) * g.astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays, step_count: int):
        self.step_count = step_count


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
            m = self.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
            v = self.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim/m/{k}": v for k, v in self.m.items()}
        out.update({f"optim/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        self.m = {k[len("optim/m/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/m/")}
        self.v = {k[len("optim/v/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/v/")}
        self.step_count = step_count


def make_optimizer(config: "TrainConfig"):
    if config.optimizer == "adam":
        return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], optimizer):
    optimizer.step(params, grads)
    return params


# --------------------------------------------------------------------------
# splits


def split_dataset(dataset, ratio: float = 0.9, n_splits: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random train/test index splits with ``ceil(ratio * n)`` training items."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n < 2:
        raise ValueError("need at least two items to split")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    n_train = min(math.ceil(ratio * n - 1e-9), n - 1)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        out.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 25
    sequence_chunk_length: int = 8
    batch_size: int = 1
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "f32"
    ordinal_rule: str = "count"
    sequence_reduction: str = "final"

    def __post_init__(self):
        if isinstance(self.dropout, dict):
            self.dropout = DropoutConfig(**self.dropout)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.sequence_chunk_length < 1 or self.batch_size < 1:
            raise ValueError("chunk length and batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.precision not in ad.DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.sequence_reduction not in ("final", "majority"):
            raise ValueError(f"unknown sequence_reduction {self.sequence_reduction!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValueError("train config must be a mapping")
        return cls.from_dict(doc)


def check_labels(spec: ConceptGraphSpec, records: list[SequenceRecord]):
    """Raise :class:`DataError` listing every label/spec mismatch."""
    problems = []
    for _, name, em in spec.emitters():
        for r in records:
            if em.label_track not in r.labels:
                problems.append(f"{r.id}: missing label track {em.label_track!r} for {name}")
                continue
            y = r.label_track(em.label_track)
            if len(y) != r.length:
                problems.append(f"{r.id}: track {em.label_track!r} has {len(y)} labels for {r.length} frames")
            lo, hi = (1, em.width) if em.kind == "ordinal" else (0, max(1, em.width - 1))
            if y.size and (y.min() < lo or y.max() > hi):
                problems.append(f"{r.id}: track {em.label_track!r} outside {lo}..{hi}")
    for r in records:
        if r.frames.ndim != 2 or r.frames.shape[1] != spec.input_dim:
            problems.append(f"{r.id}: frames shaped {r.frames.shape}, expected (T, {spec.input_dim})")
    if problems:
        head = problems[:20] + ([f"... and {len(problems) - 20} more"] if len(problems) > 20 else [])
        raise DataError("dataset does not match graph spec:\n  " + "\n  ".join(head))


def _batches(records: list[SequenceRecord], order, batch_size: int) -> list[list[int]]:
    """Consecutive batches over ``order``, only mixing sequences of equal length."""
    pending: dict[int, list[int]] = {}
    out = []
    for idx in order:
        bucket = pending.setdefault(records[idx].length, [])
        bucket.append(int(idx))
        if len(bucket) == batch_size:
            out.append(bucket)
            pending[records[idx].length] = []
    out.extend(b for b in pending.values() if b)
    return out


def _stack(records, idx, model: Model):
    frames = np.stack([records[i].frames for i in idx], axis=1).astype(model.config.dtype)
    tracks = {}
    for _, name, em in model.spec.emitters():
        tracks[name] = np.stack([records[i].label_track(em.label_track) for i in idx], axis=1)
    return frames, tracks


def sequence_loss(model: Model, emissions: list[dict[str, Tensor]], tracks: dict[str, np.ndarray], offset: int = 0) -> Tensor:
    """Equal-weight sum of cross-entropies over frames and emitting concepts."""
    total = None
    for t, em in enumerate(emissions):
        for name, probs in em.items():
            term = cross_entropy(probs, tracks[name][offset + t], model.heads[name].emission)
            total = term if total is None else ad.add(total, term)
    return total


@dataclass
class TrainResult:
    history: list[dict]
    optimizer: object
    epochs_completed: int


def train(
    model: Model,
    records: list[SequenceRecord],
    config: TrainConfig,
    optimizer=None,
    start_epoch: int = 0,
    history: list[dict] | None = None,
    checkpoint_path=None,
    progress=None,
) -> TrainResult:
    """Truncated-BPTT training; the recurrent state is carried across chunks.

    Each epoch shuffles sequences with ``default_rng([seed, epoch])`` so a
    resumed run draws exactly what an uninterrupted one would.
    """
    check_labels(model.spec, records)
    optimizer = optimizer or make_optimizer(config)
    history = list(history or [])
    params = model.params
    L = config.sequence_chunk_length
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        for idx in _batches(records, order, config.batch_size):
            frames, tracks = _stack(records, idx, model)
            state = None
            for start in range(0, frames.shape[0], L):
                with ad.Tape() as tape:
                    if state is None:
                        state = initial_state(model, len(idx))
                    ems, state = forward_sequence(model, frames[start : start + L], state, rng, config.dropout)
                    loss = sequence_loss(model, ems, tracks, offset=start)
                grads = ad.backpropagate(loss, tape, wrt=params.values())
                optimizer.step(params, grads)
                state = state.detach()
                epoch_loss += float(loss.data)
        history.append({"epoch": epoch + 1, "loss": epoch_loss / len(records)})
        logger.info("epoch %d loss %.6f", epoch + 1, history[-1]["loss"])
        if progress:
            progress(history[-1])
    result = TrainResult(history, optimizer, max(start_epoch, config.epochs))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer, config, history, result.epochs_completed)
    return result


def full_gradient(model: Model, record: SequenceRecord) -> dict[str, np.ndarray]:
    """Untruncated gradient of the sequence loss (no dropout)."""
    frames, tracks = _stack([record], [0], model)
    with ad.Tape() as tape:
        ems, _ = forward_sequence(model, frames)
        loss = sequence_loss(model, ems, tracks)
    return ad.backpropagate(loss, tape, wrt=model.params.values())


def chunked_gradient(model: Model, record: SequenceRecord, chunk: int) -> dict[str, np.ndarray]:
    """Sum of per-chunk gradients under truncation at ``chunk`` frames (no dropout)."""
    frames, tracks = _stack([record], [0], model)
    total = {k: np.zeros_like(v.data) for k, v in model.params.items()}
    state = None
    for start in range(0, frames.shape[0], chunk):
        with ad.Tape() as tape:
            if state is None:
                state = initial_state(model, 1)
            ems, state = forward_sequence(model, frames[start : start + chunk], state)
            loss = sequence_loss(model, ems, tracks, offset=start)
        for k, g in ad.backpropagate(loss, tape, wrt=model.params.values()).items():
            total[k] += g
        state = state.detach()
    return total


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, optimizer=None, config: TrainConfig | None = None, history=None, epoch: int = 0):
    entries = {f"param/{k}": v for k, v in model.param_arrays().items()}
    meta = {
        "spec_sha256": model.spec.digest(),
        "spec": serialize_graph_spec(model.spec),
        "model_config": asdict(model.config),
        "epoch": epoch,
        "history": list(history or []),
    }
    if config is not None:
        meta["train_config"] = config.to_dict()
    if optimizer is not None:
        entries.update(optimizer.state_arrays())
        meta["optimizer"] = {"kind": type(optimizer).__name__.lower(), "step": optimizer.step_count}
    save_tensors(path, entries, meta)


def load_checkpoint(path, expected_spec: ConceptGraphSpec | None = None):
    """Rebuild ``(model, optimizer, meta)``; the optimizer is ``None`` if not stored."""
    entries, meta = load_tensors(path)
    spec = parse_graph_spec(meta["spec"])
    if expected_spec is not None and expected_spec.digest() != meta["spec_sha256"]:
        raise DataError(
            f"checkpoint was trained on spec {meta['spec_sha256'][:12]}, got {expected_spec.digest()[:12]}"
        )
    model = init_model(spec, ModelConfig(**meta["model_config"]), seed=0)
    model.load_arrays({k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")})
    optimizer = None
    if "optimizer" in meta:
        cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta else TrainConfig()
        optimizer = make_optimizer(cfg)
        optimizer.load_state_arrays(entries, meta["optimizer"]["step"])
    return model, optimizer, meta


# --------------------------------------------------------------------------
# evaluation


def predict(model: Model, records: list[SequenceRecord], batch_size: int = 64) -> dict[str, dict[str, np.ndarray]]:
    """Per-record emission probabilities ``{id: {concept: (T, width)}}`` (no dropout)."""
    out = {}
    for idx in _batches(records, range(len(records)), batch_size):
        frames = np.stack([records[i].frames for i in idx], axis=1)
        ems, _ = forward_sequence(model, frames)
        for j, i in enumerate(idx):
            out[records[i].id] = {n: np.stack([em[n].data[j] for em in ems]) for n in ems[0]}
    return out


def prediction_dump(model: Model, records: list[SequenceRecord], ordinal_rule: str = "count") -> list[dict]:
    """One record per (sequence, frame, concept) with probabilities, prediction and label."""
    probs = predict(model, records)
    rows = []
    for r in records:
        for _, name, em in model.spec.emitters():
            p = probs[r.id][name]
            pred = predict_classes(p, em, ordinal_rule)
            y = r.label_track(em.label_track)
            for t in range(r.length):
                rows.append(
                    {
                        "sequence": r.id,
                        "frame": t,
                        "concept": name,
                        "kind": em.kind,
                        "probs": [float(x) for x in p[t]],
                        "prediction": int(pred[t]),
                        "label": int(y[t]),
                        "sequence_level": r.is_sequence_level(em.label_track),
                    }
                )
    return rows


def _reduce(values: list[int], how: str) -> int:
    if how == "final":
        return values[-1]
    counts = np.bincount(np.asarray(values) - min(values))
    return int(np.argmax(counts)) + min(values)


def report_from_dump(rows: list[dict], spec: ConceptGraphSpec, sequence_reduction: str = "final") -> dict:
    """Per-concept metrics at frame level and sequence level."""
    by_concept: dict[str, dict[str, list[tuple[int, int, int]]]] = {}
    for row in rows:
        seqs = by_concept.setdefault(row["concept"], {})
        seqs.setdefault(row["sequence"], []).append((row["frame"], row["prediction"], row["label"]))
    kinds = {name: em for _, name, em in spec.emitters()}
    report = {}
    for name, seqs in by_concept.items():
        em = kinds[name]
        frame_p, frame_y, seq_p, seq_y = [], [], [], []
        for items in seqs.values():
            items.sort()
            p = [i[1] for i in items]
            y = [i[2] for i in items]
            frame_p += p
            frame_y += y
            seq_p.append(_reduce(p, sequence_reduction))
            seq_y.append(_reduce(y, sequence_reduction))
        report[name] = {
            "kind": em.kind,
            "frame": _metric_block(frame_p, frame_y, em),
            "sequence": _metric_block(seq_p, seq_y, em),
        }
    return report


def _metric_block(pred, truth, em: EmissionSpec) -> dict:
    block = {"n": len(pred)}
    if em.kind == "binary":
        counts = confusion_counts(pred, truth)
        block["accuracy"] = accuracy(counts)
        block["balanced_accuracy"] = _quiet_ba(counts)
        block["ba_partial"] = not counts.has_both_classes
    else:
        block["accuracy"] = multiclass_accuracy(pred, truth)
    if em.kind == "ordinal":
        block["average_distance"] = average_distance(pred, truth)
    return block


def _quiet_ba(counts) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return balanced_accuracy(counts)


def evaluate(model: Model, records: list[SequenceRecord], spec: ConceptGraphSpec | None = None, ordinal_rule: str = "count", sequence_reduction: str = "final"):
    """Return ``(report, dump)`` for ``records``."""
    spec = spec or model.spec
    if spec.digest() != model.spec.digest():
        raise DataError("model and evaluation spec differ")
    check_labels(spec, records)
    rows = prediction_dump(model, records, ordinal_rule)
    return report_from_dump(rows, spec, sequence_reduction), rows


def format_report(report: dict) -> str:
    header = f"{'concept':<16}{'level':<10}{'n':>6}{'acc':>9}{'BA':>9}{'AD':>9}"
    lines = [header, "-" * len(header)]
    for name, entry in report.items():
        for level in ("frame", "sequence"):
            b = entry[level]
            ba = f"{b['balanced_accuracy']:.4f}" + ("*" if b.get("ba_partial") else "") if "balanced_accuracy" in b else "-"
            ad_ = f"{b['average_distance']:.4f}" if "average_distance" in b else "-"
            lines.append(f"{name:<16}{level:<10}{b['n']:>6}{b['accuracy']:>9.4f}{ba:>9}{ad_:>9}")
    if any(entry[level].get("ba_partial") for entry in report.values() for level in ("frame", "sequence")):
        lines.append("* one class absent; BA is the single defined rate")
    return "\n".join(lines) + "\n"


def dump_jsonl(rows: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
