"""Expert registry, supervised sparse gating, and dynamic ensembling.

An expert owns a disjoint region of one attribute dimension (brand/color/type)
via an explicit predicate; gates predict the attribute and the router assigns
weight 1 to the matching expert (single_best) or one expert per dimension
(per_dimension). Sparsity is structural: unmatched experts get weight exactly
0 and are never evaluated.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from pathlib import Path

from . import model as model_mod
from .losses import ProxyBank, nearest_proxy, pairwise_sq_dists
from .model import EmbeddingModel, ModelDescriptor, embed, samples_to_tensor

DIMENSIONS = ("brand", "color", "type")
ROUTING_POLICIES = ("single_best", "per_dimension")
UNIVERSAL = "*"


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class SubspacePredicate:
    """Predicate over attribute labels: a value set in one dimension, or universal."""

    dimension: str
    values: frozenset[int] | None = None  # None is the universal predicate

    def matches(self, labels: dict[str, int]) -> bool:
        if self.values is None:
            return True
        return labels.get(self.dimension) in self.values

    def overlaps(self, other: "SubspacePredicate") -> bool:
        if self.dimension != other.dimension:
            return False
        if self.values is None or other.values is None:
            return True
        return bool(self.values & other.values)

    def __str__(self) -> str:
        if self.values is None:
            return UNIVERSAL
        vals = sorted(self.values)
        if len(vals) == 1:
            return f"{self.dimension}_id={vals[0]}"
        return f"{self.dimension}_id in {{{','.join(map(str, vals))}}}"

    @classmethod
    def parse(cls, dimension: str, text: str) -> "SubspacePredicate":
        text = text.strip()
        if text == UNIVERSAL:
            return cls(dimension=dimension, values=None)
        _, _, rhs = text.partition("=") if "=" in text else text.partition(" in ")
        rhs = rhs.strip().strip("{}")
        return cls(dimension=dimension,
                   values=frozenset(int(v) for v in rhs.split(",")))


@dataclass(frozen=True)
class ExpertDescriptor:
    expert_id: str
    subspace: SubspacePredicate
    checkpoint_ref: str      # content hash
    checkpoint_path: str
    embedding_dim: int


@dataclass
class GateDecision:
    weights: dict[str, float]          # expert_id -> g(x), zero entries omitted
    selected: tuple[str, ...]
    gating_evidence: dict[str, tuple[int, float]]  # dim -> (label, confidence)

    def weight_vector(self, registry: "TeamRegistry") -> np.ndarray:
        return np.array([self.weights.get(e.expert_id, 0.0)
                         for e in registry.experts])


class AttributeGate:
    """Proxy-classifier gate: embedding backbone + nearest-proxy decision."""

    def __init__(self, attribute: str, model: EmbeddingModel, bank: ProxyBank):
        if attribute not in DIMENSIONS:
            raise ValueError(f"unknown attribute {attribute!r}")
        self.attribute = attribute
        self.model = model
        self.bank = bank

    @torch.no_grad()
    def predict(self, samples) -> tuple[np.ndarray, np.ndarray]:
        """Predicted attribute labels and softmax confidences."""
        self.model.eval()
        x = samples_to_tensor(samples, self.model.descriptor.input_resolution)
        emb = self.model(x)
        xn = torch.nn.functional.normalize(emb, p=2, dim=1)
        pn = torch.nn.functional.normalize(self.bank.proxies, p=2, dim=1)
        d = pairwise_sq_dists(xn, pn)
        probs = torch.softmax(-d, dim=1)
        conf, labels = probs.max(dim=1)
        return labels.numpy(), conf.numpy()

    def save(self, path: str | Path) -> str:
        state = {k: v.detach().cpu() for k, v in self.model.state_dict().items()}
        desc_json = self.model.descriptor.to_json()
        proxies = self.bank.proxies.detach().numpy()
        h = hashlib.sha256()
        h.update(desc_json.encode())
        h.update(self.attribute.encode())
        for name in sorted(state):
            h.update(name.encode())
            h.update(state[name].numpy().tobytes())
        h.update(proxies.tobytes())
        digest = h.hexdigest()
        buf = io.BytesIO()
        np.savez(buf, __descriptor__=np.array(desc_json),
                 __attribute__=np.array(self.attribute),
                 __hash__=np.array(digest),
                 __proxies__=proxies,
                 **{f"tensor/{k}": v.numpy() for k, v in state.items()})
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(buf.getvalue())
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "AttributeGate":
        with np.load(Path(path), allow_pickle=False) as z:
            desc = ModelDescriptor.from_json(str(z["__descriptor__"]))
            attribute = str(z["__attribute__"])
            proxies = z["__proxies__"]
            state = {k[len("tensor/"):]: torch.from_numpy(z[k].copy())
                     for k in z.files if k.startswith("tensor/")}
        net = EmbeddingModel(desc)
        net.load_state_dict(state)
        net.eval()
        bank = ProxyBank(proxies.shape[0], proxies.shape[1])
        with torch.no_grad():
            bank.proxies.copy_(torch.from_numpy(proxies))
        return cls(attribute, net, bank)


@dataclass
class TeamRegistry:
    """Snapshot of the expert pool; add_expert returns a new snapshot."""

    experts: list[ExpertDescriptor] = field(default_factory=list)
    gates: dict[str, AttributeGate] = field(default_factory=dict)
    routing_policy: str = "single_best"
    dimension_priority: tuple[str, ...] = DIMENSIONS
    confidence_threshold: float = 0.0
    forward_counts: dict[str, int] = field(default_factory=dict)
    _model_cache: dict[str, EmbeddingModel] = field(default_factory=dict, repr=False)

    def validate(self) -> None:
        if self.routing_policy not in ROUTING_POLICIES:
            raise RegistryError(f"unknown routing policy {self.routing_policy!r}")
        if not any(e.subspace.values is None for e in self.experts):
            raise RegistryError("registry has no default (universal) expert")
        by_dim: dict[str, list[ExpertDescriptor]] = {}
        for e in self.experts:
            if e.subspace.values is not None:
                if e.subspace.dimension not in DIMENSIONS:
                    raise RegistryError(
                        f"expert {e.expert_id}: unknown dimension "
                        f"{e.subspace.dimension!r}")
                if e.subspace.dimension not in self.gates:
                    raise RegistryError(
                        f"expert {e.expert_id} needs a {e.subspace.dimension} "
                        f"gate, none registered")
                by_dim.setdefault(e.subspace.dimension, []).append(e)
        for dim, peers in by_dim.items():
            for i, a in enumerate(peers):
                for b in peers[i + 1:]:
                    if a.subspace.overlaps(b.subspace):
                        raise RegistryError(
                            f"experts {a.expert_id} and {b.expert_id} overlap "
                            f"in dimension {dim}")

    @property
    def default_expert(self) -> ExpertDescriptor:
        for e in self.experts:
            if e.subspace.values is None:
                return e
        raise RegistryError("registry has no default (universal) expert")

    def expert(self, expert_id: str) -> ExpertDescriptor:
        for e in self.experts:
            if e.expert_id == expert_id:
                return e
        raise KeyError(expert_id)

    def load_expert(self, expert_id: str) -> EmbeddingModel:
        if expert_id not in self._model_cache:
            net, digest = model_mod.load_checkpoint(
                self.expert(expert_id).checkpoint_path)
            if digest != self.expert(expert_id).checkpoint_ref:
                raise RegistryError(
                    f"expert {expert_id}: checkpoint hash drifted")
            self._model_cache[expert_id] = net
        return self._model_cache[expert_id]


def route(registry: TeamRegistry, sample) -> GateDecision:
    """Predict coarse attributes and assign structural one-hot/sparse weights."""
    registry.validate()
    evidence: dict[str, tuple[int, float]] = {}
    for dim in registry.dimension_priority:
        if dim in registry.gates:
            labels, conf = registry.gates[dim].predict([sample])
            evidence[dim] = (int(labels[0]), float(conf[0]))

    predicted = {dim: lab for dim, (lab, _) in evidence.items()}
    chosen: list[str] = []
    for dim in registry.dimension_priority:
        if dim not in evidence:
            continue
        label, conf = evidence[dim]
        if conf < registry.confidence_threshold:
            continue
        for e in registry.experts:
            if e.subspace.values is not None and e.subspace.dimension == dim \
                    and e.subspace.matches(predicted):
                chosen.append(e.expert_id)
                break
        if chosen and registry.routing_policy == "single_best":
            break
    if not chosen:
        chosen = [registry.default_expert.expert_id]
    w = 1.0 / len(chosen)
    return GateDecision(weights={c: w for c in chosen},
                        selected=tuple(chosen), gating_evidence=evidence)


def ensemble_embed(registry: TeamRegistry, sample,
                   decision: GateDecision) -> np.ndarray:
    """Weighted sum of selected experts' embeddings; unselected never run."""
    dims = {registry.expert(e).embedding_dim for e in decision.selected}
    if len(dims) > 1:
        raise RegistryError(
            f"selected experts disagree on embedding dim: {sorted(dims)}")
    out = None
    for expert_id in decision.selected:
        net = registry.load_expert(expert_id)
        registry.forward_counts[expert_id] = (
            registry.forward_counts.get(expert_id, 0) + 1)
        vec = embed(net, [sample], normalize=False)[0]
        contrib = decision.weights[expert_id] * vec
        out = contrib if out is None else out + contrib
    return out


def add_expert(registry: TeamRegistry,
               descriptor: ExpertDescriptor) -> TeamRegistry:
    """New registry snapshot with the expert added; existing experts untouched."""
    for e in registry.experts:
        if e.expert_id == descriptor.expert_id:
            raise RegistryError(f"expert id {descriptor.expert_id} already registered")
        if descriptor.subspace.values is not None \
                and e.subspace.values is not None \
                and e.subspace.overlaps(descriptor.subspace):
            raise RegistryError(
                f"subspace of {descriptor.expert_id} overlaps existing expert "
                f"{e.expert_id}")
    new = replace(registry, experts=registry.experts + [descriptor],
                  forward_counts={}, _model_cache={})
    new.validate()
    return new


def route_and_embed(registry: TeamRegistry, samples):
    """Route a batch and embed each sample with its selected expert team."""
    decisions = [route(registry, s) for s in samples]
    embs = np.stack([ensemble_embed(registry, s, d)
                     for s, d in zip(samples, decisions)])
    return decisions, embs


def train_gate(view, attribute: str, descriptor: ModelDescriptor,
               train_config, loss_config=None) -> AttributeGate:
    """Train a proxy-classifier gate for one coarse attribute.

    The brand gate is the attention-augmented backbone trained with proxy-NCA
    and classified by nearest proxy; color/type gates use the same machinery
    but any object with .attribute and .predict plugs into the registry.
    """
    from .losses import LossConfig
    from .train import train

    if attribute not in DIMENSIONS:
        raise ValueError(f"unknown attribute {attribute!r}")
    loss_config = loss_config or LossConfig()
    result = train(view, descriptor, loss_config,
                   replace(train_config, recipe="brand_proxynca"),
                   attribute=attribute)
    return AttributeGate(attribute, result.model, result.bank)


def save_registry(registry: TeamRegistry, path: str | Path,
                  gate_paths: dict[str, str]) -> None:
    """Line-oriented manifest: experts, gates, and policy records."""
    lines = ["# teamid registry v1",
             f"policy | {registry.routing_policy} | "
             f"threshold={registry.confidence_threshold}"]
    for e in registry.experts:
        lines.append(" | ".join([
            "expert", e.expert_id, e.subspace.dimension, str(e.subspace),
            e.checkpoint_ref, e.checkpoint_path, str(e.embedding_dim)]))
    for dim in registry.gates:
        lines.append(f"gate | {dim} | {gate_paths[dim]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_registry(path: str | Path) -> TeamRegistry:
    registry = TeamRegistry()
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("|")]
        if parts[0] == "policy":
            registry.routing_policy = parts[1]
            registry.confidence_threshold = float(parts[2].split("=")[1])
        elif parts[0] == "expert":
            _, eid, dim, pred, ref, ckpt, edim = parts
            ckpt_path = ckpt if Path(ckpt).is_absolute() else str(base / ckpt)
            registry.experts.append(ExpertDescriptor(
                expert_id=eid,
                subspace=SubspacePredicate.parse(dim, pred),
                checkpoint_ref=ref, checkpoint_path=ckpt_path,
                embedding_dim=int(edim)))
        elif parts[0] == "gate":
            gpath = parts[2] if Path(parts[2]).is_absolute() else str(base / parts[2])
            registry.gates[parts[1]] = AttributeGate.load(gpath)
        else:
            raise RegistryError(f"unrecognized manifest record: {line}")
    registry.validate()
    return registry
