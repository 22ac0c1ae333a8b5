"""Sparse mixture-of-experts: gating, thresholded top-m activation,
expert forward pass, and KL-triggered dynamic expansion.

Experts are two-linear-layer ReLU networks with softmax outputs. The
gating network is a single linear map followed by softmax; its input may
be the raw feature vector or the feature vector concatenated with a
retrieval context (see :func:`gate_enhanced`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointVersionError,
    InsufficientData,
    InvalidParameter,
    MissingExpert,
    ShapeMismatch,
)
from .numerics import as_vector, softmax

CHECKPOINT_VERSION = 1


@dataclass
class Expert:
    """Two-layer ReLU network with a softmax output head.

    ``frozen`` experts are skipped by every parameter update; their
    arrays must stay bit-identical until unfrozen.
    """

    id: int
    w1: np.ndarray  # (input_dim, hidden_dim)
    b1: np.ndarray  # (hidden_dim,)
    w2: np.ndarray  # (hidden_dim, output_dim)
    b2: np.ndarray  # (output_dim,)
    owning_cluster: int | None = None
    frozen: bool = False

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        hidden = np.maximum(x @ self.w1 + self.b1, 0.0)
        return softmax(hidden @ self.w2 + self.b2)


def init_expert(
    expert_id: int,
    input_dim: int,
    hidden_dim: int,
    output_dim: int,
    rng: np.random.Generator,
) -> Expert:
    return Expert(
        id=expert_id,
        w1=rng.normal(0.0, 1.0 / np.sqrt(input_dim), (input_dim, hidden_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, output_dim)),
        b2=np.zeros(output_dim),
    )


@dataclass
class GatingState:
    """Linear gating over K experts; weights rows are per-expert."""

    weights: np.ndarray  # (K, gating_input_dim)
    biases: np.ndarray  # (K,)
    m: int

    @property
    def num_experts(self) -> int:
        return self.weights.shape[0]

    def snapshot(self) -> "GatingState":
        return GatingState(self.weights.copy(), self.biases.copy(), self.m)


@dataclass
class ActiveSet:
    """The m experts whose gate values clear the m-th-largest threshold."""

    expert_ids: list[int]
    gate_values: np.ndarray
    threshold: float


def gate(state: GatingState, x) -> np.ndarray:
    """Softmax(W x + b) over the K experts."""
    xv = as_vector(x)
    if state.weights.shape[1] != xv.size:
        raise ShapeMismatch(
            f"gating expects dim {state.weights.shape[1]}, got {xv.size}"
        )
    return softmax(state.weights @ xv + state.biases)


def gate_enhanced(state: GatingState, x, d) -> np.ndarray:
    """Gating over the concatenated input [x; d].

    ``d`` is the retrieval context; the gating weights must be sized for
    the combined dimension.
    """
    xv = as_vector(x)
    dv = as_vector(d)
    return gate(state, np.concatenate([xv, dv]))


def select_top_m(gates, m: int) -> ActiveSet:
    """Pick the m largest gate values; ties broken by lower expert id.

    The recorded threshold is the m-th largest gate value, so membership
    is equivalent to ``gate >= threshold`` up to the tie rule.
    """
    g = as_vector(gates)
    if not 1 <= m <= g.size:
        raise InvalidParameter(f"m={m} out of range [1, {g.size}]")
    order = sorted(range(g.size), key=lambda i: (-g[i], i))
    chosen = order[:m]
    return ActiveSet(
        expert_ids=chosen,
        gate_values=g[chosen].copy(),
        threshold=float(g[chosen[-1]]),
    )


def forward(active: ActiveSet, experts: list[Expert], x) -> np.ndarray:
    """Gate-weighted sum of the active experts' softmax outputs.

    Gate values are renormalized over the active set, so the result is
    itself a distribution.
    """
    xv = as_vector(x)
    for idx in active.expert_ids:
        if not 0 <= idx < len(experts):
            raise MissingExpert(f"expert id {idx} not in [0, {len(experts)})")
    total = active.gate_values.sum()
    if total <= 0.0:
        raise InvalidParameter("active gate values sum to zero")
    out = np.zeros(experts[active.expert_ids[0]].output_dim)
    for idx, g in zip(active.expert_ids, active.gate_values / total):
        out += g * experts[idx].forward(xv)
    return out


def maybe_expand(
    decision,
    experts: list[Expert],
    gating: GatingState,
    gates,
    rng: np.random.Generator,
    init_noise: float = 0.01,
) -> bool:
    """Append one expert when the cluster-distance signal says to spawn.

    The new expert clones the currently highest-gated expert plus
    Gaussian noise, its gating row starts at zero, and no pre-existing
    expert is touched. Returns whether a spawn occurred.
    """
    if not decision.spawn:
        return False
    g = as_vector(gates, dim=len(experts))
    donor = experts[int(np.argmax(g))]
    new = Expert(
        id=len(experts),
        w1=donor.w1 + rng.normal(0.0, init_noise, donor.w1.shape),
        b1=donor.b1 + rng.normal(0.0, init_noise, donor.b1.shape),
        w2=donor.w2 + rng.normal(0.0, init_noise, donor.w2.shape),
        b2=donor.b2 + rng.normal(0.0, init_noise, donor.b2.shape),
        owning_cluster=None,
        frozen=False,
    )
    experts.append(new)
    gating.weights = np.vstack([gating.weights, np.zeros((1, gating.weights.shape[1]))])
    gating.biases = np.append(gating.biases, 0.0)
    return True


def convergence_gap(snapshots: list[GatingState]) -> list[float]:
    """L2 distance of each gating snapshot to the final snapshot.

    The final snapshot stands in for the limit point; the series is what
    the harness fits a C/t envelope to.
    """
    if len(snapshots) < 2:
        raise InsufficientData("need at least 2 gating snapshots")
    ref = snapshots[-1]
    shape = ref.weights.shape
    gaps = []
    for s in snapshots:
        if s.weights.shape != shape:
            raise ShapeMismatch("snapshots differ in expert count")
        delta2 = ((s.weights - ref.weights) ** 2).sum() + (
            (s.biases - ref.biases) ** 2
        ).sum()
        gaps.append(float(np.sqrt(delta2)))
    return gaps


def moe_to_dict(gating: GatingState, experts: list[Expert]) -> dict:
    """Serialize gating + experts to a flat-array JSON-ready dict."""
    return {
        "version": CHECKPOINT_VERSION,
        "K": len(experts),
        "m": gating.m,
        "gating_input_dim": int(gating.weights.shape[1]),
        "gating_weights": gating.weights.ravel().tolist(),
        "gating_biases": gating.biases.tolist(),
        "experts": [
            {
                "id": e.id,
                "input_dim": e.input_dim,
                "hidden_dim": int(e.w1.shape[1]),
                "output_dim": e.output_dim,
                "w1": e.w1.ravel().tolist(),
                "b1": e.b1.tolist(),
                "w2": e.w2.ravel().tolist(),
                "b2": e.b2.tolist(),
                "frozen": e.frozen,
                "owning_cluster": e.owning_cluster,
            }
            for e in experts
        ],
    }


def moe_from_dict(data: dict) -> tuple[GatingState, list[Expert]]:
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {data.get('version')!r}"
        )
    k = data["K"]
    gdim = data["gating_input_dim"]
    gating = GatingState(
        weights=np.array(data["gating_weights"], dtype=np.float64).reshape(k, gdim),
        biases=np.array(data["gating_biases"], dtype=np.float64),
        m=data["m"],
    )
    experts = []
    for ed in data["experts"]:
        din, dh, dout = ed["input_dim"], ed["hidden_dim"], ed["output_dim"]
        experts.append(
            Expert(
                id=ed["id"],
                w1=np.array(ed["w1"], dtype=np.float64).reshape(din, dh),
                b1=np.array(ed["b1"], dtype=np.float64),
                w2=np.array(ed["w2"], dtype=np.float64).reshape(dh, dout),
                b2=np.array(ed["b2"], dtype=np.float64),
                owning_cluster=ed["owning_cluster"],
                frozen=ed["frozen"],
            )
        )
    if len(experts) != k:
        raise CheckpointVersionError("expert count disagrees with K")
    return gating, experts
