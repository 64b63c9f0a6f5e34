"""Concept hypergraph definitions, YAML round-tripping, validation and presets."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from importlib import resources

import yaml

MODES = ("undirected-encoding", "directed-encoders", "individual-encoders")
ROLES = ("input", "output", "undirected")
EMISSION_KINDS = ("binary", "categorical", "ordinal")


class GraphSpecError(ValueError):
    """Raised for unparseable or invalid graph documents."""


@dataclass(frozen=True)
class EmissionSpec:
    kind: str
    label_track: str
    num_classes: int = 1
    class_names: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return 1 if self.kind == "binary" else self.num_classes


@dataclass(frozen=True)
class ConceptNodeSpec:
    name: str
    state_dim: int = 64
    emission: EmissionSpec | None = None


@dataclass(frozen=True)
class HyperedgeSpec:
    name: str
    members: tuple[tuple[str, str], ...]
    state_dim: int = 64
    emission: EmissionSpec | None = None

    def nodes_with_role(self, role: str) -> list[str]:
        return [n for n, r in self.members if r == role]

    @property
    def is_directed(self) -> bool:
        return any(r != "undirected" for _, r in self.members)


@dataclass(frozen=True)
class ConceptGraphSpec:
    nodes: tuple[ConceptNodeSpec, ...]
    hyperedges: tuple[HyperedgeSpec, ...] = ()
    directionality_mode: str = "undirected-encoding"
    global_dim: int = 64
    input_dim: int = 16

    def node(self, name: str) -> ConceptNodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(f"unknown node {name!r}")

    def edge(self, name: str) -> HyperedgeSpec:
        for e in self.hyperedges:
            if e.name == name:
                return e
        raise KeyError(f"unknown hyperedge {name!r}")

    @property
    def node_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def emitters(self) -> list[tuple[str, str, EmissionSpec]]:
        """(element kind, name, emission) for every emitting node and edge."""
        out = [("node", n.name, n.emission) for n in self.nodes if n.emission]
        out += [("edge", e.name, e.emission) for e in self.hyperedges if e.emission]
        return out

    def without_edges(self) -> "ConceptGraphSpec":
        return replace(self, hyperedges=())

    def with_dims(self, state_dim: int | None = None, global_dim: int | None = None, input_dim: int | None = None):
        nodes = tuple(replace(n, state_dim=state_dim or n.state_dim) for n in self.nodes)
        edges = tuple(replace(e, state_dim=state_dim or e.state_dim) for e in self.hyperedges)
        return replace(
            self,
            nodes=nodes,
            hyperedges=edges,
            global_dim=global_dim or self.global_dim,
            input_dim=input_dim or self.input_dim,
        )

    def digest(self) -> str:
        return hashlib.sha256(serialize_graph_spec(self).encode()).hexdigest()


def incident_edges(spec: ConceptGraphSpec, node: str) -> set[str]:
    if node not in spec.node_names:
        raise KeyError(f"unknown node {node!r}")
    return {e.name for e in spec.hyperedges if any(m == node for m, _ in e.members)}


def validate_spec(spec: ConceptGraphSpec) -> list[str]:
    """Every violated invariant, as human-readable strings. Empty means valid."""
    report = []
    names = [n.name for n in spec.nodes]
    seen = set()
    for n in names:
        if n in seen:
            report.append(f"duplicate node name {n!r}")
        seen.add(n)
    if not spec.nodes:
        report.append("graph requires at least one node")
    if spec.directionality_mode not in MODES:
        report.append(f"unknown directionality_mode {spec.directionality_mode!r}")
    for label, value in (("global_dim", spec.global_dim), ("input_dim", spec.input_dim)):
        if not isinstance(value, int) or value < 1:
            report.append(f"{label} must be a positive integer")

    def check_emission(owner: str, em: EmissionSpec | None):
        if em is None:
            return
        if em.kind not in EMISSION_KINDS:
            report.append(f"{owner}: unknown emission kind {em.kind!r}")
        elif em.kind != "binary" and em.num_classes < 2:
            report.append(f"{owner}: {em.kind} emission requires K >= 2")
        if em.class_names and len(em.class_names) != em.width:
            report.append(f"{owner}: {len(em.class_names)} class names for width {em.width}")

    for n in spec.nodes:
        if n.state_dim < 1:
            report.append(f"node {n.name!r}: state_dim must be positive")
        check_emission(f"node {n.name!r}", n.emission)
    if len({n.state_dim for n in spec.nodes}) > 1:
        report.append("all nodes must share one state_dim (mean aggregation)")

    edge_names = set()
    for e in spec.hyperedges:
        where = f"hyperedge {e.name!r}"
        if e.name in edge_names:
            report.append(f"duplicate hyperedge name {e.name!r}")
        edge_names.add(e.name)
        if e.name in seen:
            report.append(f"{where}: name collides with a node")
        if e.state_dim < 1:
            report.append(f"{where}: state_dim must be positive")
        if len(e.members) < 2:
            report.append(f"{where}: hyperedge requires >= 2 members")
        member_names = [m for m, _ in e.members]
        if len(set(member_names)) != len(member_names):
            report.append(f"{where}: repeated member")
        for m, role in e.members:
            if m not in seen:
                report.append(f"{where}: unknown node {m!r}")
            if role not in ROLES:
                report.append(f"{where}: unknown role {role!r} for {m!r}")
        roles = {r for _, r in e.members}
        if "undirected" in roles and roles != {"undirected"}:
            report.append(f"{where}: role-partition violation (undirected mixed with input/output)")
        elif roles and "undirected" not in roles and roles != {"input", "output"}:
            report.append(f"{where}: role-partition violation (directed edge needs nonempty input and output sets)")
        check_emission(where, e.emission)
    if len({e.state_dim for e in spec.hyperedges}) > 1:
        report.append("all hyperedges must share one state_dim (mean aggregation)")
    if not spec.emitters():
        report.append("at least one emission must be defined")
    return report


def check_spec(spec: ConceptGraphSpec) -> ConceptGraphSpec:
    report = validate_spec(spec)
    if report:
        raise GraphSpecError("invalid graph spec:\n  " + "\n  ".join(report))
    return spec


# --------------------------------------------------------------------------
# document form


def _emission_to_doc(em: EmissionSpec | None):
    if em is None:
        return None
    doc = {"kind": em.kind, "label_track": em.label_track}
    if em.kind != "binary":
        doc["num_classes"] = em.num_classes
    if em.class_names:
        doc["class_names"] = list(em.class_names)
    return doc


def _emission_from_doc(doc, where: str) -> EmissionSpec | None:
    if doc is None:
        return None
    if not isinstance(doc, dict) or "kind" not in doc:
        raise GraphSpecError(f"{where}: emission must be a mapping with 'kind'")
    return EmissionSpec(
        kind=doc["kind"],
        label_track=str(doc.get("label_track", "")),
        num_classes=int(doc.get("num_classes", 1)),
        class_names=tuple(str(c) for c in doc.get("class_names", ())),
    )


def spec_to_doc(spec: ConceptGraphSpec) -> dict:
    nodes = []
    for n in spec.nodes:
        d = {"name": n.name, "state_dim": n.state_dim}
        if n.emission:
            d["emission"] = _emission_to_doc(n.emission)
        nodes.append(d)
    edges = []
    for e in spec.hyperedges:
        d = {"name": e.name, "members": [{"node": m, "role": r} for m, r in e.members], "state_dim": e.state_dim}
        if e.emission:
            d["emission"] = _emission_to_doc(e.emission)
        edges.append(d)
    return {
        "directionality_mode": spec.directionality_mode,
        "global_dim": spec.global_dim,
        "input_dim": spec.input_dim,
        "nodes": nodes,
        "hyperedges": edges,
    }


def spec_from_doc(doc) -> ConceptGraphSpec:
    if not isinstance(doc, dict):
        raise GraphSpecError("graph document must be a mapping")
    unknown = set(doc) - {"nodes", "hyperedges", "directionality_mode", "global_dim", "input_dim"}
    if unknown:
        raise GraphSpecError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        nodes = tuple(
            ConceptNodeSpec(
                name=str(n["name"]),
                state_dim=int(n.get("state_dim", 64)),
                emission=_emission_from_doc(n.get("emission"), f"node {n['name']!r}"),
            )
            for n in doc.get("nodes") or ()
        )
        edges = []
        for e in doc.get("hyperedges") or ():
            members = []
            for m in e.get("members", ()):
                if isinstance(m, str):
                    members.append((m, "undirected"))
                else:
                    members.append((str(m["node"]), str(m.get("role", "undirected"))))
            edges.append(
                HyperedgeSpec(
                    name=str(e["name"]),
                    members=tuple(members),
                    state_dim=int(e.get("state_dim", 64)),
                    emission=_emission_from_doc(e.get("emission"), f"hyperedge {e['name']!r}"),
                )
            )
    except (KeyError, TypeError, AttributeError) as exc:
        raise GraphSpecError(f"malformed graph document: {exc!r}") from None
    spec = ConceptGraphSpec(
        nodes=nodes,
        hyperedges=tuple(edges),
        directionality_mode=str(doc.get("directionality_mode", "undirected-encoding")),
        global_dim=int(doc.get("global_dim", 64)),
        input_dim=int(doc.get("input_dim", 16)),
    )
    return check_spec(spec)


def parse_graph_spec(text: str) -> ConceptGraphSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise GraphSpecError(f"syntax error{where}: {getattr(exc, 'problem', exc)}") from None
    return spec_from_doc(doc)


def serialize_graph_spec(spec: ConceptGraphSpec) -> str:
    return yaml.safe_dump(spec_to_doc(spec), sort_keys=False, default_flow_style=False)


def load_graph_spec(path) -> ConceptGraphSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_graph_spec(fh.read())


def to_dot(spec: ConceptGraphSpec) -> str:
    """Graphviz rendering: concepts as circles, hyperedges as square connectors."""
    lines = ["digraph concepts {", "  rankdir=LR;"]
    for n in spec.nodes:
        lines.append(f'  "{n.name}" [shape=circle];')
    for e in spec.hyperedges:
        lines.append(f'  "{e.name}" [shape=square, label="", xlabel="{e.name}", style=filled, fillcolor=black];')
        for m, role in e.members:
            if role == "input":
                lines.append(f'  "{m}" -> "{e.name}";')
            elif role == "output":
                lines.append(f'  "{e.name}" -> "{m}";')
            else:
                lines.append(f'  "{m}" -> "{e.name}" [dir=none];')
    lines.append("}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# presets

CVS_COMPONENTS = ("cystic_artery", "cystic_duct", "cystic_plate", "two_structures", "liver_visible")
PGS_FACTORS = ("adhesion", "distention", "hyperemic", "intra_hepatic", "necrotic")
ADHESION_LEVELS = ("body", "buried", "majority", "neck", "none")
DISTENTION_LEVELS = ("distended", "normal", "shrivelled")


def _preset(name: str) -> ConceptGraphSpec:
    text = resources.files("cgnn.presets").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return parse_graph_spec(text)


def preset_cvs() -> ConceptGraphSpec:
    """Five CVS components feeding the aggregate ``cvs`` concept through one relation."""
    return _preset("cvs")


def preset_pgs() -> ConceptGraphSpec:
    """Five inflammation factors feeding the ordinal ``pgs`` concept through one relation."""
    return _preset("pgs")
