"""Synthetic labelled sequence worlds mirroring the CVS and PGS concept graphs.

Each component concept owns a disjoint block of the frame feature vector in
which its latent state shows up as a fixed signature plus Gaussian noise. A
few shared distractor dimensions carry a slowly drifting nuisance signal.
The aggregate concept (CVS or PGS) has no block of its own: it is only
recoverable by combining the components.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from statistics import NormalDist

import numpy as np
import yaml

from .graph import ADHESION_LEVELS, CVS_COMPONENTS, DISTENTION_LEVELS, PGS_FACTORS

DATASET_FORMAT = "cgnn-dataset"
DATASET_VERSION = 1

PGS_CATEGORIES = {
    "adhesion": ADHESION_LEVELS,
    "distention": DISTENTION_LEVELS,
    "hyperemic": ("no", "yes"),
    "intra_hepatic": ("no", "yes"),
    "necrotic": ("no", "yes"),
}
# sampling weights for each factor value, in PGS_CATEGORIES order
PGS_PRIORS = {
    "adhesion": (0.2, 0.08, 0.12, 0.25, 0.35),
    "distention": (0.25, 0.6, 0.15),
    "hyperemic": (0.7, 0.3),
    "intra_hepatic": (0.85, 0.15),
    "necrotic": (0.9, 0.1),
}


@dataclass
class WorldConfig:
    kind: str = "cvs"
    n_sequences: int = 100
    frames: int | None = None
    block_dim: int = 4
    noise: float = 0.5
    distractor_dim: int = 4
    activation_window: float = 0.5
    p_active: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("cvs", "pgs"):
            raise ValueError(f"unknown world kind {self.kind!r}")
        if self.frames is None:
            self.frames = 50 if self.kind == "cvs" else 8
        if self.p_active is None:
            # P(all five components active by the last frame) = 1/2
            self.p_active = 0.5 ** (1 / len(CVS_COMPONENTS))
        if self.n_sequences < 1 or self.frames < 1 or self.block_dim < 1 or self.distractor_dim < 0:
            raise ValueError("world counts must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0 < self.activation_window <= 1:
            raise ValueError("activation_window must lie in (0, 1]")

    @property
    def n_components(self) -> int:
        return len(CVS_COMPONENTS) if self.kind == "cvs" else len(PGS_FACTORS)

    @property
    def input_dim(self) -> int:
        return self.n_components * self.block_dim + self.distractor_dim

    @classmethod
    def from_file(cls, path) -> "WorldConfig":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValueError("world config must be a mapping")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class SequenceRecord:
    id: str
    frames: np.ndarray
    labels: dict[str, list[int] | int]
    latents: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def label_track(self, name: str) -> np.ndarray:
        """Per-frame labels, broadcasting sequence-level labels."""
        lab = self.labels[name]
        if isinstance(lab, (list, tuple, np.ndarray)):
            return np.asarray(lab, dtype=np.int64)
        return np.full(self.length, int(lab), dtype=np.int64)

    def is_sequence_level(self, name: str) -> bool:
        return not isinstance(self.labels[name], (list, tuple, np.ndarray))


def noise_for_probe_accuracy(acc: float) -> float:
    """Noise level at which the best per-frame linear probe of a binary block reaches ``acc``."""
    return 1.0 / NormalDist().inv_cdf(acc)


def load_pgs_rules() -> list[tuple[int, dict[str, tuple[str, ...]]]]:
    text = resources.files("cgnn.data").joinpath("pgs_rules.yaml").read_text(encoding="utf-8")
    doc = yaml.safe_load(text)
    rules = []
    for row in doc["rules"]:
        cond = {k: tuple(v) if isinstance(v, list) else (v,) for k, v in row["when"].items()}
        rules.append((int(row["grade"]), cond))
    return rules


def pgs_grade(factors: dict[str, str], rules=None) -> int:
    for grade, cond in rules or load_pgs_rules():
        if all(factors[k] in allowed for k, allowed in cond.items()):
            return grade
    raise ValueError(f"no rule matches {factors}")


def oracle_labels(latents: dict, kind: str, frames: int | None = None) -> dict:
    """Ground-truth labels implied by the latent component states."""
    if kind == "cvs":
        T = frames if frames is not None else latents["frames"]
        onsets = latents["onsets"]
        labels = {}
        for name in CVS_COMPONENTS:
            on = onsets[name]
            labels[name] = [int(on is not None and t >= on) for t in range(T)]
        labels["cvs"] = [int(all(labels[c][t] for c in CVS_COMPONENTS)) for t in range(T)]
        return labels
    if kind == "pgs":
        factors = latents["factors"]
        labels = {name: PGS_CATEGORIES[name].index(factors[name]) for name in PGS_FACTORS}
        labels["pgs"] = pgs_grade(factors)
        return labels
    raise ValueError(f"unknown world kind {kind!r}")


def _signatures(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _distractors(rng, T, dim):
    if dim == 0:
        return np.zeros((T, 0))
    drift = np.cumsum(rng.standard_normal((T, dim)) * 0.3, axis=0)
    return drift + rng.standard_normal(dim)


def generate_cvs_world(config: WorldConfig, seed: int | None = None) -> list[SequenceRecord]:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    sig = _signatures(rng, len(CVS_COMPONENTS), config.block_dim)
    T, B = config.frames, config.block_dim
    window = max(1, int(round(config.activation_window * T)))
    records = []
    for i in range(config.n_sequences):
        srng = np.random.default_rng([seed, 1, i])
        onsets = {}
        for name in CVS_COMPONENTS:
            active = srng.random() < config.p_active
            onset = int(srng.integers(0, window))
            onsets[name] = onset if active else None
        latents = {"frames": T, "onsets": onsets}
        labels = oracle_labels(latents, "cvs")
        frames = np.empty((T, config.input_dim))
        for c, name in enumerate(CVS_COMPONENTS):
            state = np.asarray(labels[name], dtype=np.float64)[:, None] * 2 - 1
            frames[:, c * B : (c + 1) * B] = state * sig[c] + config.noise * srng.standard_normal((T, B))
        frames[:, len(CVS_COMPONENTS) * B :] = _distractors(srng, T, config.distractor_dim)
        records.append(SequenceRecord(f"cvs-{seed}-{i:04d}", frames, labels, latents))
    return records


def generate_pgs_world(config: WorldConfig, seed: int | None = None) -> list[SequenceRecord]:
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    sigs = {name: _signatures(rng, len(PGS_CATEGORIES[name]), config.block_dim) for name in PGS_FACTORS}
    rules = load_pgs_rules()
    T, B = config.frames, config.block_dim
    records = []
    for i in range(config.n_sequences):
        srng = np.random.default_rng([seed, 1, i])
        factors = {}
        for name in PGS_FACTORS:
            values = PGS_CATEGORIES[name]
            factors[name] = values[int(srng.choice(len(values), p=PGS_PRIORS[name]))]
        latents = {"factors": factors}
        labels = {name: PGS_CATEGORIES[name].index(factors[name]) for name in PGS_FACTORS}
        labels["pgs"] = pgs_grade(factors, rules)
        frames = np.empty((T, config.input_dim))
        for c, name in enumerate(PGS_FACTORS):
            vals = PGS_CATEGORIES[name]
            idx = vals.index(factors[name])
            if len(vals) == 2:
                centre = (2 * idx - 1) * sigs[name][1]
            else:
                centre = sigs[name][idx]
            frames[:, c * B : (c + 1) * B] = centre + config.noise * srng.standard_normal((T, B))
        frames[:, len(PGS_FACTORS) * B :] = _distractors(srng, T, config.distractor_dim)
        records.append(SequenceRecord(f"pgs-{seed}-{i:04d}", frames, labels, latents))
    return records


def generate_world(config: WorldConfig, seed: int | None = None) -> list[SequenceRecord]:
    if config.kind == "cvs":
        return generate_cvs_world(config, seed)
    return generate_pgs_world(config, seed)


# --------------------------------------------------------------------------
# dataset files: JSON lines, one header line then one record per line


def dumps_dataset(records: list[SequenceRecord], header: dict | None = None) -> str:
    head = {"format": DATASET_FORMAT, "format_version": DATASET_VERSION}
    head.update(header or {})
    lines = [json.dumps(head, sort_keys=True)]
    for r in records:
        doc = {"id": r.id, "frames": r.frames.tolist(), "labels": r.labels, "latents": r.latents}
        lines.append(json.dumps(doc, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> tuple[list[SequenceRecord], dict]:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ValueError("not a cgnn dataset file (missing header)")
    if header.get("format_version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset format_version {header.get('format_version')}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            frames = np.asarray(doc["frames"], dtype=np.float64)
            records.append(SequenceRecord(str(doc["id"]), frames, doc["labels"], doc.get("latents", {})))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: bad record ({exc})") from None
    return records, header


def save_dataset(path, records: list[SequenceRecord], header: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_dataset(records, header))


def load_dataset(path) -> tuple[list[SequenceRecord], dict]:
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())


def world_header(config: WorldConfig) -> dict:
    return {"world": config.kind, "config": asdict(config)}
