"""Discrete Bayesian network over patient attributes and detection outcome.

Structure and binning come from a small text config::

    node Age
      source age
      states <55 55-70 >70
      cuts 55 71
      midpoints 45 62.5 80
    node Sex
      source sex
      states F M
    edges
      Age -> Paretic

``cuts`` bin a numeric value ``v`` into the first state whose upper cut is
greater than ``v`` (so ``cuts 55 71`` gives v<55, 55<=v<71, v>=71).
"""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np


class StructureError(ValueError):
    """Invalid causal structure (cycle, unknown node, bad bins)."""


class ImpossibleEvidence(ValueError):
    """Evidence with zero joint probability under the model."""


@dataclass(frozen=True)
class NodeSpec:
    name: str
    states: tuple[str, ...]
    cuts: tuple[float, ...] | None = None
    midpoints: tuple[float, ...] | None = None
    source: str | None = None

    def __post_init__(self):
        if len(self.states) < 2 or len(set(self.states)) != len(self.states):
            raise StructureError(f"node {self.name}: need at least 2 distinct states")
        if self.cuts is not None:
            if len(self.cuts) != len(self.states) - 1:
                raise StructureError(f"node {self.name}: {len(self.states)} states need {len(self.states) - 1} cuts")
            if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
                raise StructureError(f"node {self.name}: cuts must be strictly increasing")
        if self.midpoints is not None and len(self.midpoints) != len(self.states):
            raise StructureError(f"node {self.name}: one midpoint per state required")

    @property
    def card(self) -> int:
        return len(self.states)

    @property
    def numeric(self) -> bool:
        return self.midpoints is not None

    def index(self, value) -> int:
        """State index for a state name, or for a raw number when the node has cuts."""
        if isinstance(value, str) and value in self.states:
            return self.states.index(value)
        if self.cuts is not None and isinstance(value, (int, float, np.integer, np.floating)) \
                and not isinstance(value, bool):
            return int(np.searchsorted(self.cuts, float(value), side="right"))
        raise ValueError(f"node {self.name}: invalid state {value!r}; expected one of {list(self.states)}")


DEFAULT_NODES = (
    NodeSpec("Age", ("<55", "55-70", ">70"), cuts=(55, 71), midpoints=(45.0, 62.5, 80.0), source="age"),
    NodeSpec("Sex", ("F", "M"), source="sex"),
    NodeSpec("Paretic", ("Left", "Right"), source="paretic_side"),
    NodeSpec("Impairment", ("Mild", "Moderate", "Severe"), source="impairment"),
    NodeSpec("Time", ("<90d", "90-365d", ">365d"), cuts=(90, 366), midpoints=(45.0, 228.0, 730.0),
             source="time_since_stroke_days"),
    NodeSpec("UE-FMA", ("0-28", "29-47", "48-66"), cuts=(29, 48), midpoints=(14.0, 38.0, 57.0),
             source="ue_fma"),
)
DEFAULT_EDGES = (
    ("Age", "Paretic"), ("Sex", "Paretic"), ("Paretic", "Impairment"),
    ("Time", "Impairment"), ("Impairment", "UE-FMA"),
)


@dataclass
class Dag:
    nodes: dict[str, NodeSpec]
    edges: list[tuple[str, str]]
    order: list[str] = field(init=False)

    def __post_init__(self):
        for a, b in self.edges:
            for n in (a, b):
                if n not in self.nodes:
                    raise StructureError(f"edge {a} -> {b}: unknown node {n!r}")
        if len(set(self.edges)) != len(self.edges):
            raise StructureError("duplicate edges")
        ts = TopologicalSorter({n: [] for n in self.nodes})
        for a, b in self.edges:
            ts.add(b, a)
        try:
            self.order = list(ts.static_order())
        except CycleError as exc:
            raise StructureError(f"cycle in causal structure: {' -> '.join(exc.args[1])}") from None

    def parents(self, node: str) -> tuple[str, ...]:
        return tuple(a for a, b in self.edges if b == node)


def default_dag() -> Dag:
    return Dag({n.name: n for n in DEFAULT_NODES}, list(DEFAULT_EDGES))


def _numbers(tokens, where):
    try:
        return tuple(float(t) for t in tokens)
    except ValueError:
        raise StructureError(f"{where}: expected numbers, got {tokens}") from None


def parse_structure(text: str) -> Dag:
    nodes: dict[str, dict] = {}
    edges = []
    current, in_edges = None, False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        key, *rest = line.split()
        if key == "node":
            if len(rest) != 1:
                raise StructureError(f"{where}: 'node <name>' expected")
            current, in_edges = rest[0], False
            if current in nodes:
                raise StructureError(f"{where}: node {current} defined twice")
            nodes[current] = {"name": current}
        elif key == "edges":
            current, in_edges = None, True
        elif in_edges:
            if len(rest) != 2 or rest[0] != "->":
                raise StructureError(f"{where}: edge lines look like 'A -> B'")
            edges.append((key, rest[1]))
        elif current is None:
            raise StructureError(f"{where}: {key!r} outside a node block")
        elif key == "states":
            nodes[current]["states"] = tuple(rest)
        elif key == "cuts":
            nodes[current]["cuts"] = _numbers(rest, where)
        elif key == "midpoints":
            nodes[current]["midpoints"] = _numbers(rest, where)
        elif key == "source":
            nodes[current]["source"] = rest[0] if rest else None
        else:
            raise StructureError(f"{where}: unknown key {key!r}")
    specs = {}
    for name, kw in nodes.items():
        if "states" not in kw:
            raise StructureError(f"node {name}: no states")
        specs[name] = NodeSpec(**kw)
    return Dag(specs, edges)


def load_structure(path=None) -> Dag:
    """Parse a structure file; ``None`` gives the built-in default network."""
    if path is None:
        return default_dag()
    return parse_structure(Path(path).read_text())


def _num(x: float) -> str:
    short = f"{x:g}"
    return short if float(short) == x else repr(float(x))


def format_structure(dag: Dag) -> str:
    lines = []
    for n in dag.nodes.values():
        lines.append(f"node {n.name}")
        if n.source:
            lines.append(f"  source {n.source}")
        lines.append("  states " + " ".join(n.states))
        if n.cuts is not None:
            lines.append("  cuts " + " ".join(map(_num, n.cuts)))
        if n.midpoints is not None:
            lines.append("  midpoints " + " ".join(map(_num, n.midpoints)))
    lines.append("edges")
    lines += [f"  {a} -> {b}" for a, b in dag.edges]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------

@dataclass
class CausalModel:
    """DAG plus one table per node, shaped ``[*parent cards, node card]``."""

    dag: Dag
    cpts: dict[str, np.ndarray]
    alpha: float = 1.0
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name, node in self.dag.nodes.items():
            shape = tuple(self.dag.nodes[p].card for p in self.dag.parents(name)) + (node.card,)
            t = np.asarray(self.cpts[name], dtype=np.float64)
            if t.shape != shape:
                raise StructureError(f"CPT for {name} has shape {t.shape}, expected {shape}")
            if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-12):
                raise StructureError(f"CPT rows for {name} must be nonnegative and sum to 1")
            self.cpts[name] = t

    @property
    def nodes(self) -> dict[str, NodeSpec]:
        return self.dag.nodes

    def to_json(self) -> dict:
        return {"structure": format_structure(self.dag), "alpha": self.alpha,
                "cpts": {k: v.tolist() for k, v in self.cpts.items()}}

    @classmethod
    def from_json(cls, obj: dict) -> "CausalModel":
        dag = parse_structure(obj["structure"])
        return cls(dag, {k: np.array(v) for k, v in obj["cpts"].items()}, obj.get("alpha", 1.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CausalModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _record_state(node: NodeSpec, record: dict):
    for key in (node.name, node.source):
        if key is not None and key in record and record[key] is not None:
            return node.index(record[key])
    return None


def fit_cpts(dag: Dag, records, alpha: float = 1.0) -> CausalModel:
    """Smoothed relative frequencies ``(n(x, pa) + a) / (n(pa) + a * |x|)``.

    Records are dicts keyed by node name or by the node's ``source`` field
    (the per-recording sidecar layout). A record only counts toward a node's
    table when the node and all its parents are observed in it.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    records = list(records)
    cpts, notes = {}, []
    for name in dag.order:
        node = dag.nodes[name]
        pars = [dag.nodes[p] for p in dag.parents(name)]
        counts = np.zeros(tuple(p.card for p in pars) + (node.card,))
        for rec in records:
            idx = [_record_state(p, rec) for p in pars] + [_record_state(node, rec)]
            if None not in idx:
                counts[tuple(idx)] += 1
        num = counts + alpha
        den = num.sum(axis=-1, keepdims=True)
        empty = den[..., 0] == 0
        if np.any(empty):
            msg = f"{name}: {int(empty.sum())} parent configuration(s) unseen with alpha=0; using uniform rows"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        table = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / node.card)
        cpts[name] = table
    return CausalModel(dag, cpts, alpha, notes)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class Factor:
    vars: tuple[str, ...]
    table: np.ndarray

    def expand(self, order: tuple[str, ...]) -> np.ndarray:
        perm = [self.vars.index(v) for v in order if v in self.vars]
        t = np.transpose(self.table, perm)
        shape = [self.table.shape[self.vars.index(v)] if v in self.vars else 1 for v in order]
        return t.reshape(shape)

    def __mul__(self, other: "Factor") -> "Factor":
        order = self.vars + tuple(v for v in other.vars if v not in self.vars)
        return Factor(order, self.expand(order) * other.expand(order))

    def sum_out(self, var: str) -> "Factor":
        ax = self.vars.index(var)
        return Factor(self.vars[:ax] + self.vars[ax + 1:], self.table.sum(axis=ax))

    def reduce(self, var: str, state: int) -> "Factor":
        ax = self.vars.index(var)
        return Factor(self.vars[:ax] + self.vars[ax + 1:], np.take(self.table, state, axis=ax))


def _evidence_indices(model: CausalModel, evidence: dict | None) -> dict[str, int]:
    out = {}
    for name, value in (evidence or {}).items():
        if name not in model.nodes:
            raise ValueError(f"unknown evidence node {name!r}; nodes are {list(model.nodes)}")
        node = model.nodes[name]
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool) and node.cuts is None:
            if not 0 <= value < node.card:
                raise ValueError(f"node {name}: state index {value} out of range")
            out[name] = int(value)
        else:
            out[name] = node.index(value)
    return out


def min_degree_order(factors, hidden) -> list[str]:
    """Greedy elimination order: fewest interaction-graph neighbours first, ties by name."""
    scopes = [set(f.vars) for f in factors]
    remaining, order = set(hidden), []
    while remaining:
        def degree(v):
            nb = set().union(*[s for s in scopes if v in s]) if any(v in s for s in scopes) else set()
            return len(nb - {v}), v
        v = min(remaining, key=degree)
        merged = set().union(*[s for s in scopes if v in s]) - {v} if any(v in s for s in scopes) else set()
        scopes = [s for s in scopes if v not in s] + [merged]
        remaining.remove(v)
        order.append(v)
    return order


def _point_mass(card, idx):
    p = np.zeros(card)
    p[idx] = 1.0
    return p


def posterior(model: CausalModel, evidence: dict | None, query: str) -> np.ndarray:
    """Exact ``P(query | evidence)`` by variable elimination."""
    if query not in model.nodes:
        raise ValueError(f"unknown query node {query!r}")
    ev = _evidence_indices(model, evidence)
    if query in ev:
        rest = {k: v for k, v in ev.items() if k != query}
        if posterior(model, rest, query)[ev[query]] == 0:
            raise ImpossibleEvidence(f"evidence {evidence} has zero probability")
        return _point_mass(model.nodes[query].card, ev[query])
    factors = []
    for name in model.dag.order:
        f = Factor(model.dag.parents(name) + (name,), model.cpts[name])
        for var, idx in ev.items():
            if var in f.vars:
                f = f.reduce(var, idx)
        factors.append(f)
    hidden = [n for n in model.nodes if n != query and n not in ev]
    for var in min_degree_order(factors, hidden):
        related = [f for f in factors if var in f.vars]
        if not related:
            continue
        prod = related[0]
        for f in related[1:]:
            prod = prod * f
        factors = [f for f in factors if var not in f.vars] + [prod.sum_out(var)]
    result = Factor((query,), np.ones(model.nodes[query].card))
    for f in factors:
        result = result * f
    dist = result.expand((query,))
    z = dist.sum()
    if not z > 0:
        raise ImpossibleEvidence(f"evidence {evidence} has zero probability")
    return dist / z


def marginals(model: CausalModel, evidence: dict | None = None) -> dict[str, np.ndarray]:
    return {n: posterior(model, evidence, n) for n in model.nodes}


def expected_value(model: CausalModel, evidence: dict | None, node: str) -> float:
    spec = model.nodes[node]
    if not spec.numeric:
        raise ValueError(f"node {node} has no numeric midpoints")
    return float(posterior(model, evidence, node) @ np.asarray(spec.midpoints))


MAX_ENUMERATION = 10 ** 6


def joint_enumeration_oracle(model: CausalModel, evidence: dict | None, query: str) -> np.ndarray:
    """Brute-force ``P(query | evidence)`` by summing the full joint; small models only."""
    names = list(model.nodes)
    cards = [model.nodes[n].card for n in names]
    if int(np.prod(cards, dtype=np.float64)) > MAX_ENUMERATION:
        raise ValueError(f"joint state space {int(np.prod(cards, dtype=np.float64))} exceeds {MAX_ENUMERATION}")
    ev = _evidence_indices(model, evidence)
    parents = {n: model.dag.parents(n) for n in names}
    pos = {n: i for i, n in enumerate(names)}
    qi = pos[query]
    dist = np.zeros(model.nodes[query].card)
    for assignment in itertools.product(*(range(c) for c in cards)):
        if any(assignment[pos[k]] != v for k, v in ev.items()):
            continue
        p = 1.0
        for n in names:
            idx = tuple(assignment[pos[q]] for q in parents[n]) + (assignment[pos[n]],)
            p *= model.cpts[n][idx]
            if p == 0.0:
                break
        dist[assignment[qi]] += p
    z = dist.sum()
    if not z > 0:
        raise ImpossibleEvidence(f"evidence {evidence} has zero probability")
    return dist / z


def format_posterior(model: CausalModel, dist, query: str, evidence: dict | None = None) -> str:
    node = model.nodes[query]
    ev = ", ".join(f"{k}:{v}" for k, v in (evidence or {}).items()) or "none"
    lines = [f"P({query} | {ev})"]
    width = max(len(s) for s in node.states)
    for s, p in zip(node.states, dist):
        lines.append(f"  {s:<{width}}  {100 * p:6.2f}%")
    if node.numeric:
        lines.append(f"  expected {query}: {float(np.asarray(dist) @ np.asarray(node.midpoints)):.2f}")
    return "\n".join(lines)
