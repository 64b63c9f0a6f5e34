"""End-to-end gradient verification of a whole concept network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import ConceptGraphSpec, ConceptNodeSpec, EmissionSpec, HyperedgeSpec
from .learning import sequence_loss
from .autodiff import Tensor
from .model import ModelConfig, forward_sequence, init_model, initial_state

MAX_DIM = 16
MAX_FRAMES = 4
TOLERANCE = 1e-4


def pair_spec(dim: int = 4, mode: str = "undirected-encoding", input_dim: int = 3) -> ConceptGraphSpec:
    """Two concepts joined by one hyperedge; ``a`` is binary, ``b`` ordinal with K=3."""
    roles = ("input", "output") if mode != "undirected-encoding" else ("undirected", "undirected")
    return ConceptGraphSpec(
        nodes=(
            ConceptNodeSpec("a", dim, EmissionSpec("binary", "a")),
            ConceptNodeSpec("b", dim, EmissionSpec("ordinal", "b", 3)),
        ),
        hyperedges=(HyperedgeSpec("ab", (("a", roles[0]), ("b", roles[1])), dim),),
        directionality_mode=mode,
        global_dim=dim,
        input_dim=input_dim,
    )


@dataclass
class GradcheckReport:
    groups: dict[str, float]
    worst: list[tuple[str, float]]
    elapsed: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.groups.values())

    @property
    def max_error(self) -> float:
        return max(self.groups.values())

    def format(self) -> str:
        lines = [f"{'parameter group':<32}{'max rel err':>14}"]
        for g, v in self.groups.items():
            flag = "" if v <= self.tolerance else "  FAIL"
            lines.append(f"{g:<32}{v:>14.3e}{flag}")
        status = "PASS" if self.passed else "FAIL"
        lines.append(f"{status}: max {self.max_error:.3e} (tolerance {self.tolerance:g}) in {self.elapsed:.1f}s")
        if not self.passed:
            lines.append("worst parameters: " + ", ".join(f"{n} ({e:.2e})" for n, e in self.worst))
        return "\n".join(lines)


def group_of(name: str) -> str:
    return ".".join(name.split(".")[:3])


def gradcheck(spec: ConceptGraphSpec | None = None, dim: int = 4, frames: int = 2, seed: int = 0, epsilon: float = 1e-5, richardson: bool = False) -> GradcheckReport:
    """Compare reverse-mode gradients of a random sequence loss with central differences.

    Runs at 64-bit with dropout off. Every state, encoder and embedding width
    is set to ``dim``. Gradient entries far below the loss scale (around
    1e-8 for a loss near 10) sit at the round-off floor of plain central
    differences; ``richardson=True`` with ``epsilon=1e-3`` handles those.
    """
    if dim > MAX_DIM or frames > MAX_FRAMES:
        raise ValueError(f"gradcheck is limited to dim <= {MAX_DIM} and frames <= {MAX_FRAMES}")
    if dim < 1 or frames < 1:
        raise ValueError("dim and frames must be positive")
    start = time.perf_counter()
    spec = (spec or pair_spec(dim)).with_dims(state_dim=dim, global_dim=dim)
    config = ModelConfig(embed_dim=dim, lstm_input_dim=dim, encoder_hidden=dim, precision="f64")
    model = init_model(spec, config, seed)
    rng = np.random.default_rng([seed, 1])
    # Check at a random, well-conditioned point. With default-scale weights
    # and all-zero starting states, several gradients come out near 1e-9,
    # which is below central-difference round-off.
    for arr in model.param_arrays().values():
        arr[...] = rng.uniform(-1.0, 1.0, arr.shape)
    start_nodes = {n.name: rng.uniform(-0.8, 0.8, (2, 1, n.state_dim)) for n in spec.nodes}
    start_edges = {e.name: rng.uniform(-0.8, 0.8, (2, 1, e.state_dim)) for e in spec.hyperedges}
    x = rng.standard_normal((frames, 1, spec.input_dim))
    tracks = {}
    for _, name, em in spec.emitters():
        lo, hi = (1, em.width) if em.kind == "ordinal" else (0, max(1, em.width - 1))
        tracks[name] = rng.integers(lo, hi + 1, size=(frames, 1))

    def loss_value():
        state = initial_state(model, 1)
        state.nodes = {k: (Tensor(v[0]), Tensor(v[1])) for k, v in start_nodes.items()}
        state.edges = {k: (Tensor(v[0]), Tensor(v[1])) for k, v in start_edges.items()}
        ems, _ = forward_sequence(model, x, state)
        return sequence_loss(model, ems, tracks)

    with ad.Tape() as tape:
        loss = loss_value()
    analytic = ad.backpropagate(loss, tape, wrt=model.params.values())
    f = lambda _: float(loss_value().data)  # noqa: E731
    numeric = ad.finite_difference_gradient(f, model.param_arrays(), epsilon)
    if richardson:
        # combining steps h and h/2 cancels the h^2 truncation term, so a
        # step large enough to stay clear of round-off becomes usable
        fine = ad.finite_difference_gradient(f, model.param_arrays(), epsilon / 2)
        numeric = {k: (4 * fine[k] - numeric[k]) / 3 for k in fine}
    groups: dict[str, float] = {}
    per_param = []
    for name in model.params:
        err = float(ad.relative_error(analytic[name], numeric[name]).max())
        per_param.append((name, err))
        g = group_of(name)
        groups[g] = max(groups.get(g, 0.0), err)
    per_param.sort(key=lambda p: -p[1])
    return GradcheckReport(groups, per_param[:5], time.perf_counter() - start)

