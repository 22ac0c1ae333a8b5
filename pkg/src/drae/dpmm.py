"""Streaming Dirichlet-process mixture over task embeddings.

Sequential Chinese-restaurant assignment with conjugate diagonal-Gaussian
clusters and known observation variance: each point either joins an
existing cluster (weight n_k times its posterior predictive) or opens a
new one (weight alpha times the base predictive). Cluster ids are stable
and counts only grow, so nothing learned is ever overwritten.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch
from .numerics import as_vector, gauss_kl, log_normal_pdf, logsumexp


@dataclass
class Cluster:
    id: int
    count: int
    post_mean: np.ndarray
    post_var: np.ndarray
    created_at: int


@dataclass
class DpmmState:
    alpha: float
    base_mean: np.ndarray
    base_var: np.ndarray
    obs_var: np.ndarray
    tau: float
    clusters: list[Cluster] = field(default_factory=list)
    total_n: int = 0

    @property
    def dim(self) -> int:
        return self.base_mean.size


def make_state(
    dim: int,
    alpha: float = 1.0,
    base_mean: float | np.ndarray = 0.0,
    base_var: float | np.ndarray = 16.0,
    obs_var: float | np.ndarray = 1.0,
    tau_per_dim: float = 2.0,
) -> DpmmState:
    """Build a fresh state; the expansion threshold scales with dim so
    tau_per_dim is comparable across embedding sizes."""
    return DpmmState(
        alpha=float(alpha),
        base_mean=np.broadcast_to(np.asarray(base_mean, float), (dim,)).copy(),
        base_var=np.broadcast_to(np.asarray(base_var, float), (dim,)).copy(),
        obs_var=np.broadcast_to(np.asarray(obs_var, float), (dim,)).copy(),
        tau=float(tau_per_dim) * dim,
    )


@dataclass
class ExpansionDecision:
    spawn: bool
    min_kl: float
    nearest_cluster: int | None


def _posterior_update(
    mean: np.ndarray, var: np.ndarray, z: np.ndarray, obs_var: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate Normal-Normal update with known observation variance."""
    prec = 1.0 / var + 1.0 / obs_var
    new_var = 1.0 / prec
    new_mean = new_var * (mean / var + z / obs_var)
    return new_mean, new_var


def crp_prior(state: DpmmState) -> np.ndarray:
    """Seating prior [n_1, ..., n_K, alpha] / (N + alpha)."""
    counts = np.array([c.count for c in state.clusters] + [state.alpha])
    return counts / (state.total_n + state.alpha)


def _component_logliks(state: DpmmState, z: np.ndarray) -> np.ndarray:
    """Posterior-predictive log density of z under each cluster, then
    under the base distribution (last entry)."""
    logs = [
        log_normal_pdf(z, c.post_mean, c.post_var + state.obs_var)
        for c in state.clusters
    ]
    logs.append(log_normal_pdf(z, state.base_mean, state.base_var + state.obs_var))
    return np.array(logs)


def assign(
    state: DpmmState, z, rng: np.random.Generator, step: int | None = None
) -> int:
    """Sample a CRP seat for z and fold z into that cluster's posterior.

    Returns the chosen cluster id; a new cluster is seeded from the base
    posterior given z. Existing clusters are never renumbered.
    """
    zv = as_vector(z)
    if zv.size != state.dim:
        raise ShapeMismatch(f"expected dim {state.dim}, got {zv.size}")
    created_at = state.total_n if step is None else step
    log_w = np.log(crp_prior(state)) + _component_logliks(state, zv)
    probs = np.exp(log_w - logsumexp(log_w))
    probs /= probs.sum()
    choice = int(rng.choice(len(probs), p=probs))
    if choice == len(state.clusters):
        mean, var = _posterior_update(
            state.base_mean, state.base_var, zv, state.obs_var
        )
        cluster = Cluster(
            id=len(state.clusters),
            count=1,
            post_mean=mean,
            post_var=var,
            created_at=created_at,
        )
        state.clusters.append(cluster)
    else:
        cluster = state.clusters[choice]
        cluster.post_mean, cluster.post_var = _posterior_update(
            cluster.post_mean, cluster.post_var, zv, state.obs_var
        )
        cluster.count += 1
    state.total_n += 1
    return cluster.id


def predictive_loglik(state: DpmmState, z) -> float:
    """Log density of z under the CRP-weighted predictive mixture."""
    zv = as_vector(z)
    if zv.size != state.dim:
        raise ShapeMismatch(f"expected dim {state.dim}, got {zv.size}")
    log_w = np.log(crp_prior(state)) + _component_logliks(state, zv)
    return logsumexp(log_w)


def expansion_check(state: DpmmState, z) -> ExpansionDecision:
    """Spawn signal: is z's local distribution far from every cluster?

    z is modeled as a Gaussian at z with the observation variance; the
    divergence to each cluster's predictive is minimized. Cold start
    (no clusters) always spawns with an infinite sentinel.
    """
    zv = as_vector(z)
    if zv.size != state.dim:
        raise ShapeMismatch(f"expected dim {state.dim}, got {zv.size}")
    if not state.clusters:
        return ExpansionDecision(spawn=True, min_kl=math.inf, nearest_cluster=None)
    kls = [
        gauss_kl(zv, state.obs_var, c.post_mean, c.post_var + state.obs_var)
        for c in state.clusters
    ]
    best = int(np.argmin(kls))
    min_kl = float(kls[best])
    return ExpansionDecision(
        spawn=min_kl > state.tau,
        min_kl=min_kl,
        nearest_cluster=state.clusters[best].id,
    )


def dpmm_to_dict(state: DpmmState) -> dict:
    return {
        "alpha": state.alpha,
        "tau": state.tau,
        "base_mean": state.base_mean.tolist(),
        "base_var": state.base_var.tolist(),
        "obs_var": state.obs_var.tolist(),
        "total_n": state.total_n,
        "clusters": [
            {
                "id": c.id,
                "count": c.count,
                "post_mean": c.post_mean.tolist(),
                "post_var": c.post_var.tolist(),
                "created_at": c.created_at,
            }
            for c in state.clusters
        ],
    }


def dpmm_from_dict(data: dict) -> DpmmState:
    state = DpmmState(
        alpha=data["alpha"],
        base_mean=np.array(data["base_mean"], dtype=np.float64),
        base_var=np.array(data["base_var"], dtype=np.float64),
        obs_var=np.array(data["obs_var"], dtype=np.float64),
        tau=data["tau"],
        total_n=data["total_n"],
    )
    for cd in data["clusters"]:
        state.clusters.append(
            Cluster(
                id=cd["id"],
                count=cd["count"],
                post_mean=np.array(cd["post_mean"], dtype=np.float64),
                post_var=np.array(cd["post_var"], dtype=np.float64),
                created_at=cd["created_at"],
            )
        )
    return state
