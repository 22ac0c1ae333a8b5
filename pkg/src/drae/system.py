"""The integrated lifelong learner.

One object wires the pieces together per time step: retrieval context ->
retrieval-aware gating -> low-rank fusion -> sparse expert mixture, with
the DP mixture watching the task embedding stream to trigger expert
expansion and freezing, and the control-stack probes feeding the unified
loss. Two prediction paths exist side by side:

* the plain path gates on [x; 0] and runs experts on x;
* the retrieval path gates on [x; d_agg] and runs experts on the fused
  hidden state.

Both paths share one gating network and one expert bank; their
cross-entropies are the two adaptively-weighted prediction losses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dpmm as dp
from . import moe, prag
from .errors import CheckpointVersionError
from .numerics import as_vector, make_rng
from .rsho import control, memory as hyper, planning

CHECKPOINT_VERSION = 1

RETURNS_EMA = 0.9
PROBE_PLAN_ATTEMPTS = 3
PROBE_PLAN_BUDGET = 150


@dataclass
class SystemConfig:
    input_dim: int = 8
    classes: int = 2
    expert_hidden: int = 16
    num_experts: int = 2
    active_m: int = 2
    prag_enabled: bool = True
    embed_dim: int = 16
    rank: int = 4
    retrieve_lambda: float = 0.3
    dpmm_enabled: bool = True
    dpmm_alpha: float = 1.0
    tau_per_dim: float = 3.0
    base_var: float = 25.0
    obs_var: float = 0.08
    task_ema: float = 0.1
    spawn_cooldown: int = 30
    context_gain: float = 6.0
    fusion_lr_scale: float = 0.02
    gating_lr_scale: float = 1.0
    train_gating_bias: bool = False
    train_gating_x: bool = False
    route_noise: float = 0.5
    audition_bonus: float = 4.0
    audition_steps: int = 300
    expand: bool = True
    freeze_window: int = 50
    init_noise: float = 0.01
    memory_rows: int = 8
    lr: float = 0.05
    loss_alpha: float = 1.0
    loss_gamma: float = 1.0
    weight_step: float = 0.1
    probe_interval: int = 250
    kp: float = 6.0
    ki: float = 0.1
    kd: float = 0.05
    seed: int = 0


@dataclass
class StepRecord:
    step: int
    loss_pred: float
    correct: bool
    l_moe: float
    l_prag: float
    l_dpmm: float
    l_reflex: float
    l_schema: float
    l_hyper: float
    alpha: float
    gamma: float
    num_experts: int
    cluster_count: int
    spawned: bool
    stability: float | None


def margin_ranking_loss(confidences, returns, margin: float = 0.1) -> float:
    """Mean hinge over candidate pairs whose realized returns are ordered."""
    c = np.asarray(confidences, dtype=np.float64)
    r = np.asarray(returns, dtype=np.float64)
    losses = []
    for i in range(c.size):
        for j in range(c.size):
            if r[i] > r[j]:
                losses.append(max(0.0, margin - (c[i] - c[j])))
    return float(np.mean(losses)) if losses else 0.0


class DraeSystem:
    """Lifelong MoE learner with retrieval-aware routing and expansion."""

    def __init__(self, config: SystemConfig, corpus: prag.Corpus | None = None,
                 encoder: np.ndarray | None = None):
        self.config = config
        self.rng = make_rng(config.seed)
        self.probe_rng_seed = config.seed ^ 0x5EED5EED
        d = config.input_dim
        self.gating_input_dim = d + (config.embed_dim if config.prag_enabled else 0)
        self.gating = moe.GatingState(
            weights=np.zeros((config.num_experts, self.gating_input_dim)),
            biases=np.zeros(config.num_experts),
            m=config.active_m,
        )
        self.experts = [
            moe.init_expert(k, d, config.expert_hidden, config.classes, self.rng)
            for k in range(config.num_experts)
        ]
        if config.prag_enabled:
            # the query encoder must live in the corpus's embedding
            # space; callers with a known corpus projection supply it
            self.encoder = (
                np.asarray(encoder, dtype=np.float64)
                if encoder is not None
                else self.rng.normal(0.0, 1.0 / np.sqrt(d), (config.embed_dim, d))
            )
            self.fusion = prag.init_fusion(d, config.embed_dim, config.rank, self.rng)
        else:
            self.encoder = None
            self.fusion = None
        self.corpus = corpus
        self.dpmm = (
            dp.make_state(
                d,
                alpha=config.dpmm_alpha,
                base_var=config.base_var,
                obs_var=config.obs_var,
                tau_per_dim=config.tau_per_dim,
            )
            if config.dpmm_enabled
            else None
        )
        self.memory = hyper.init_memory(config.memory_rows, d, self.rng)
        self.returns = np.zeros(config.memory_rows)
        self.pid = control.PidController(
            kp=config.kp, ki=config.ki, kd=config.kd, noise_cov_diag=np.full(1, 1e-4)
        )
        self.plant = control.IntegratorPlant()
        self.probe_ruleset = planning.make_fetch_cup_ruleset()
        self.alpha_t = config.loss_alpha
        self.gamma_t = config.loss_gamma
        self.step_count = 0
        self.cluster_last_active: dict[int, int] = {}
        self.spawn_steps: list[int] = []
        self.task_embedding: np.ndarray | None = None
        self._pending_binds: list[tuple[int, int]] = []  # (expert idx, bind step)
        self._probe_losses = {"l_reflex": 0.0, "l_schema": 0.0, "l_hyper": 0.0}
        self._probed_once = False
        self._ref_pred: float | None = None
        self._ref_mem: float | None = None
        self._prev_hidden: np.ndarray | None = None
        self._prev_selected: set | None = None

    # ------------------------------------------------------------------
    # parameter registry

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "gating.weights": self.gating.weights,
            "gating.biases": self.gating.biases,
        }
        for e in self.experts:
            out[f"expert.{e.id}.w1"] = e.w1
            out[f"expert.{e.id}.b1"] = e.b1
            out[f"expert.{e.id}.w2"] = e.w2
            out[f"expert.{e.id}.b2"] = e.b2
        if self.fusion is not None:
            out["fusion.w0"] = self.fusion.w0
            out["fusion.bl"] = self.fusion.bl
            out["fusion.al"] = self.fusion.al
            out["fusion.ud"] = self.fusion.ud
        return out

    def frozen_param_names(self) -> set[str]:
        names = set()
        for e in self.experts:
            if e.frozen:
                names.update(
                    {
                        f"expert.{e.id}.w1",
                        f"expert.{e.id}.b1",
                        f"expert.{e.id}.w2",
                        f"expert.{e.id}.b2",
                    }
                )
        return names

    def _set_params(self, params: dict[str, np.ndarray]) -> None:
        self.gating.weights = params["gating.weights"]
        self.gating.biases = params["gating.biases"]
        for e in self.experts:
            e.w1 = params[f"expert.{e.id}.w1"]
            e.b1 = params[f"expert.{e.id}.b1"]
            e.w2 = params[f"expert.{e.id}.w2"]
            e.b2 = params[f"expert.{e.id}.b2"]
        if self.fusion is not None:
            self.fusion.w0 = params["fusion.w0"]
            self.fusion.bl = params["fusion.bl"]
            self.fusion.al = params["fusion.al"]
            self.fusion.ud = params["fusion.ud"]

    # ------------------------------------------------------------------
    # retrieval

    def retrieval_context(self, x) -> tuple[np.ndarray, list[str]]:
        """Aggregated document embedding and selected ids for one input."""
        if (
            not self.config.prag_enabled
            or self.corpus is None
            or len(self.corpus) == 0
        ):
            dim = self.config.embed_dim if self.config.prag_enabled else 0
            return np.zeros(dim), []
        q = prag.encode_query(self.encoder, x)
        if np.linalg.norm(q) == 0.0:
            return np.zeros(self.config.embed_dim), []
        result = prag.retrieve(self.corpus, q, self.config.retrieve_lambda)
        return result.aggregated, result.selected

    def _context_batch(self, xs: np.ndarray) -> tuple[np.ndarray, list[list[str]]]:
        if not self.config.prag_enabled:
            return np.zeros((xs.shape[0], 0)), [[] for _ in range(xs.shape[0])]
        aggs = np.zeros((xs.shape[0], self.config.embed_dim))
        sels = []
        for i, x in enumerate(xs):
            agg, sel = self.retrieval_context(x)
            aggs[i] = agg
            sels.append(sel)
        return aggs, sels

    # ------------------------------------------------------------------
    # vectorized mixture forward/backward

    def _mixture_forward(self, u: np.ndarray, cat: np.ndarray,
                         explore: bool = False,
                         logit_bonus: np.ndarray | None = None) -> dict:
        """Gate on ``cat``, run experts on ``u``, mix the top-m outputs.

        All arrays are batched (B rows); returns a cache reused by the
        backward pass. With ``explore`` the selection sees seeded logit
        noise (noisy top-m) plus any audition bonus: without those, a
        pair of entrenched experts can lock the active set shut and a
        newly spawned expert never receives gradient. Inference paths
        never explore.
        """
        logits = cat @ self.gating.weights.T + self.gating.biases
        if explore:
            if self.config.route_noise > 0:
                logits = logits + self.rng.normal(
                    0.0, self.config.route_noise, logits.shape)
            if logit_bonus is not None:
                logits = logits + logit_bonus
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        gates = shifted / shifted.sum(axis=1, keepdims=True)
        k = len(self.experts)
        m = min(self.gating.m, k)
        # stable argsort on -gates: ties resolve to the lower expert id
        order = np.argsort(-gates, axis=1, kind="stable")[:, :m]
        mask = np.zeros_like(gates)
        np.put_along_axis(mask, order, 1.0, axis=1)
        active_sum = (gates * mask).sum(axis=1, keepdims=True)
        gtil = gates * mask / active_sum
        z1s, hs, os_ = [], [], []
        y = np.zeros((u.shape[0], self.config.classes))
        for i, e in enumerate(self.experts):
            z1 = u @ e.w1 + e.b1
            h = np.maximum(z1, 0.0)
            z2 = h @ e.w2 + e.b2
            ez = np.exp(z2 - z2.max(axis=1, keepdims=True))
            o = ez / ez.sum(axis=1, keepdims=True)
            z1s.append(z1)
            hs.append(h)
            os_.append(o)
            y += gtil[:, i : i + 1] * o
        return {
            "u": u,
            "cat": cat,
            "gates": gates,
            "mask": mask,
            "active_sum": active_sum,
            "gtil": gtil,
            "z1s": z1s,
            "hs": hs,
            "os": os_,
            "y": y,
        }

    def _mixture_backward(
        self, cache: dict, labels: np.ndarray
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of the mean cross-entropy wrt gating, experts, and
        the expert input. Active-set membership is held fixed."""
        y = cache["y"]
        b = y.shape[0]
        rows = np.arange(b)
        dy = np.zeros_like(y)
        # clamp mirrors the loss's log clamp so a fully saturated wrong
        # prediction yields a large finite gradient instead of inf
        dy[rows, labels] = -1.0 / (np.maximum(y[rows, labels], 1e-12) * b)
        gtil = cache["gtil"]
        mask = cache["mask"]
        gates = cache["gates"]
        grads: dict[str, np.ndarray] = {}
        du = np.zeros_like(cache["u"])
        dgtil = np.zeros_like(gates)
        for i, e in enumerate(self.experts):
            o = cache["os"][i]
            dgtil[:, i] = (dy * o).sum(axis=1)
            do = gtil[:, i : i + 1] * dy
            dz2 = o * (do - (o * do).sum(axis=1, keepdims=True))
            h = cache["hs"][i]
            grads[f"expert.{e.id}.w2"] = h.T @ dz2
            grads[f"expert.{e.id}.b2"] = dz2.sum(axis=0)
            dh = dz2 @ e.w2.T
            dz1 = dh * (cache["z1s"][i] > 0)
            grads[f"expert.{e.id}.w1"] = cache["u"].T @ dz1
            grads[f"expert.{e.id}.b1"] = dz1.sum(axis=0)
            du += dz1 @ e.w1.T
        dgtil *= mask
        rowdot = (dgtil * gtil).sum(axis=1, keepdims=True)
        dgates = mask * (dgtil - rowdot) / cache["active_sum"]
        dlogits = gates * (dgates - (dgates * gates).sum(axis=1, keepdims=True))
        grads["gating.weights"] = dlogits.T @ cache["cat"]
        grads["gating.biases"] = dlogits.sum(axis=0)
        return grads, du

    def _fusion_forward(self, xs: np.ndarray, daggs: np.ndarray) -> dict:
        f = self.fusion
        p = xs @ f.al.T
        low = p @ f.bl.T
        sg = prag.sigmoid(daggs @ f.ud.T)
        return {"xs": xs, "daggs": daggs, "p": p, "low": low, "sg": sg,
                "h": xs @ f.w0.T + low * sg}

    def _fusion_backward(self, cache: dict, dh: np.ndarray) -> dict[str, np.ndarray]:
        f = self.fusion
        dlow = dh * cache["sg"]
        dsg = dh * cache["low"]
        dzu = dsg * cache["sg"] * (1.0 - cache["sg"])
        return {
            "fusion.w0": dh.T @ cache["xs"],
            "fusion.bl": dlow.T @ cache["p"],
            "fusion.al": (dlow @ f.bl).T @ cache["xs"],
            "fusion.ud": dzu.T @ cache["daggs"],
        }

    @staticmethod
    def _ce(y: np.ndarray, labels: np.ndarray) -> float:
        picked = y[np.arange(y.shape[0]), labels]
        return float(-np.log(np.maximum(picked, 1e-300)).mean())

    def _cat(self, xs: np.ndarray, daggs: np.ndarray) -> np.ndarray:
        # the gain puts unit-norm document embeddings on the same scale
        # as the raw features, so the gating can discriminate on context
        if daggs.shape[1] == 0:
            return xs
        return np.concatenate([xs, self.config.context_gain * daggs], axis=1)

    def plain_path(self, xs: np.ndarray) -> dict:
        """Forward on x with a zeroed retrieval half."""
        zeros = np.zeros((xs.shape[0], self.gating_input_dim - xs.shape[1]))
        return self._mixture_forward(xs, self._cat(xs, zeros))

    def retrieval_path(self, xs: np.ndarray, daggs: np.ndarray) -> tuple[dict, dict]:
        """Forward on the fused hidden state with retrieval-aware gating."""
        if self.fusion is None:
            cache = self._mixture_forward(xs, xs)
            return cache, {"h": xs}
        fcache = self._fusion_forward(xs, daggs)
        return self._mixture_forward(fcache["h"], self._cat(xs, daggs)), fcache

    def loss_moe(self, xs, labels) -> float:
        return self._ce(self.plain_path(np.atleast_2d(xs))["y"],
                        np.atleast_1d(labels))

    def loss_prag(self, xs, labels, daggs=None) -> float:
        xs = np.atleast_2d(xs)
        if daggs is None:
            daggs, _ = self._context_batch(xs)
        cache, _ = self.retrieval_path(xs, np.atleast_2d(daggs))
        return self._ce(cache["y"], np.atleast_1d(labels))

    def loss_and_grads_moe(self, xs, labels) -> tuple[float, dict]:
        xs = np.atleast_2d(xs)
        labels = np.atleast_1d(labels)
        cache = self.plain_path(xs)
        grads, _ = self._mixture_backward(cache, labels)
        return self._ce(cache["y"], labels), grads

    def loss_and_grads_prag(self, xs, labels, daggs) -> tuple[float, dict]:
        xs = np.atleast_2d(xs)
        labels = np.atleast_1d(labels)
        daggs = np.atleast_2d(daggs)
        cache, fcache = self.retrieval_path(xs, daggs)
        grads, du = self._mixture_backward(cache, labels)
        if self.fusion is not None:
            grads.update(self._fusion_backward(fcache, du))
        return self._ce(cache["y"], labels), grads

    # ------------------------------------------------------------------
    # prediction / evaluation

    def predict_proba(self, x) -> np.ndarray:
        xv = as_vector(x, dim=self.config.input_dim)
        dagg, _ = self.retrieval_context(xv)
        cache, _ = self.retrieval_path(xv[None, :], dagg[None, :] if dagg.size else
                                       np.zeros((1, 0)))
        return cache["y"][0]

    def predict_batch(self, xs: np.ndarray) -> np.ndarray:
        daggs, _ = self._context_batch(xs)
        cache, _ = self.retrieval_path(xs, daggs)
        return cache["y"]

    def accuracy(self, xs: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict_batch(xs).argmax(axis=1) == labels).mean())

    def hidden_state(self, x) -> tuple[np.ndarray, list[str]]:
        """Fused hidden vector and retrieval selection for one input."""
        xv = as_vector(x, dim=self.config.input_dim)
        dagg, selected = self.retrieval_context(xv)
        if self.fusion is None:
            return xv, selected
        return prag.fuse(self.fusion, xv, dagg), selected

    # ------------------------------------------------------------------
    # probes for the non-differentiable loss components

    def probe_reflex(self) -> float:
        return self.plant.episode(self.pid.kp, self.pid.ki, self.pid.kd)

    def probe_schema(self) -> float:
        rng = make_rng(self.probe_rng_seed + self.step_count)
        failures = 0
        for _ in range(PROBE_PLAN_ATTEMPTS):
            steps = planning.plan(self.probe_ruleset, frozenset(),
                                  PROBE_PLAN_BUDGET, rng)
            if steps is None:
                failures += 1
        return failures / PROBE_PLAN_ATTEMPTS

    def probe_hyper(self) -> float:
        confidences, _ = hyper.rank_candidates(self.memory)
        return margin_ranking_loss(confidences, self.returns)

    def refresh_probes(self) -> dict[str, float]:
        self._probe_losses = {
            "l_reflex": self.probe_reflex(),
            "l_schema": self.probe_schema(),
            "l_hyper": self.probe_hyper(),
        }
        self._probed_once = True
        return dict(self._probe_losses)

    # ------------------------------------------------------------------
    # the per-step pipeline

    def update_task_embedding(self, x: np.ndarray) -> np.ndarray:
        """Task descriptor: an exponential moving average of the inputs.

        Smoothing strips per-sample noise so the mixture sees regime
        centers; the first observation seeds the average directly.
        """
        if self.task_embedding is None:
            self.task_embedding = x.copy()
        else:
            rate = self.config.task_ema
            self.task_embedding = (1.0 - rate) * self.task_embedding + rate * x
        return self.task_embedding.copy()

    def _audition_bonus(self, t: int) -> np.ndarray | None:
        """Training-path routing bonus for unfrozen experts.

        Frozen experts cannot improve, so the training active-set favors
        the experts that can actually learn: the current spawn duels the
        entrenched champion every step and the gate records the outcome.
        Inference routing never sees this bonus, so predictions switch
        over only once the newcomer's real gate value wins on merit.
        """
        if self.config.audition_bonus <= 0:
            return None
        bonus = np.array([0.0 if e.frozen else self.config.audition_bonus
                          for e in self.experts])
        if not bonus.any():
            return None
        return bonus

    def _update_freeze(self, t: int) -> None:
        for e in self.experts:
            if e.owning_cluster is None:
                continue
            last = self.cluster_last_active.get(e.owning_cluster)
            if last is None:
                continue
            e.frozen = (t - last) > self.config.freeze_window

    def _adapt_loss_weights(self, l_moe: float, l_prag: float,
                            l_hyper: float, l_dpmm: float) -> None:
        pred = l_moe + l_prag
        mem = l_hyper + l_dpmm
        if self._ref_pred is None:
            self._ref_pred = pred
            self._ref_mem = mem
            return
        step = self.config.weight_step
        drive_a = np.clip(step * (pred - self._ref_pred)
                          / max(self._ref_pred, 1e-8), -50.0, 50.0)
        drive_g = np.clip(step * (mem - self._ref_mem)
                          / max(self._ref_mem, 1e-8), -50.0, 50.0)
        self.alpha_t = float(np.clip(self.alpha_t * np.exp(drive_a), 0.1, 10.0))
        self.gamma_t = float(np.clip(self.gamma_t * np.exp(drive_g), 0.1, 10.0))

    def train_step(self, x, label: int, learn: bool = True,
                   lr: float | None = None) -> StepRecord:
        from .trainer import sgd_step  # local import avoids a cycle

        t = self.step_count
        xv = as_vector(x, dim=self.config.input_dim)
        label = int(label)
        dagg, selected = self.retrieval_context(xv)
        daggs = dagg[None, :] if dagg.size else np.zeros((1, 0))
        l_dpmm = 0.0
        spawned = False
        if self.dpmm is not None:
            zv = self.update_task_embedding(xv)
            l_dpmm = -dp.predictive_loglik(self.dpmm, zv)
            # refractory window: while the smoothed embedding transits
            # between regimes the divergence stays high for many steps,
            # which must not spawn a train of near-identical experts
            cooled = (not self.spawn_steps
                      or t - self.spawn_steps[-1] > self.config.spawn_cooldown)
            if self.config.expand and cooled:
                decision = dp.expansion_check(self.dpmm, zv)
                gate_vec = self._mixture_forward(
                    xv[None, :], self._cat(xv[None, :], daggs))["gates"][0]
                spawned = moe.maybe_expand(decision, self.experts, self.gating,
                                           gate_vec, self.rng,
                                           self.config.init_noise)
                if spawned:
                    self.spawn_steps.append(t)
            cid = dp.assign(self.dpmm, zv, self.rng, step=t)
            if spawned:
                # bind once the embedding settles; an immediate bind
                # would tie the expert to a transient waypoint cluster
                self._pending_binds.append(
                    (len(self.experts) - 1, t + self.config.spawn_cooldown))
            still_pending = []
            for idx, bind_at in self._pending_binds:
                if t >= bind_at:
                    self.experts[idx].owning_cluster = cid
                else:
                    still_pending.append((idx, bind_at))
            self._pending_binds = still_pending
            if self.dpmm.total_n == 1:
                # the first regime adopts the initial expert bank, so
                # those experts freeze with it once it goes inactive
                for e in self.experts:
                    if e.owning_cluster is None:
                        e.owning_cluster = cid
            self.cluster_last_active[cid] = t
            self._update_freeze(t)

        # prequential prediction before any parameter update
        pcache, fcache = self.retrieval_path(xv[None, :], daggs)
        y_prag = pcache["y"][0]
        loss_pred = float(-np.log(max(y_prag[label], 1e-300)))
        correct = bool(int(y_prag.argmax()) == label)

        labels = np.array([label])
        xs = xv[None, :]
        bonus = self._audition_bonus(t)
        zeros = np.zeros((1, self.gating_input_dim - xs.shape[1]))
        mcache = self._mixture_forward(xs, self._cat(xs, zeros), explore=learn,
                                       logit_bonus=bonus)
        l_moe = self._ce(mcache["y"], labels)
        hidden = fcache["h"] if self.fusion is not None else xs
        tcache = self._mixture_forward(hidden, self._cat(xs, daggs),
                                       explore=learn, logit_bonus=bonus)
        l_prag = self._ce(tcache["y"], labels)
        if learn:
            g_moe, _ = self._mixture_backward(mcache, labels)
            g_prag, du = self._mixture_backward(tcache, labels)
            if self.fusion is not None:
                g_prag.update(self._fusion_backward(fcache, du))
            total_grads = self._combine_grads(g_moe, g_prag)
            new = sgd_step(self.params(), total_grads,
                           self.config.lr if lr is None else lr,
                           frozen=self.frozen_param_names())
            self._set_params(new)

        # meta-layer memory and realized-return bookkeeping
        self.memory = hyper.memory_update(self.memory, xv)
        _, best = hyper.rank_candidates(self.memory)
        self.returns[best] = (RETURNS_EMA * self.returns[best]
                              + (1.0 - RETURNS_EMA) * (1.0 if correct else 0.0))

        if t % self.config.probe_interval == 0 or not self._probed_once:
            self.refresh_probes()
            self._adapt_loss_weights(l_moe, l_prag,
                                     self._probe_losses["l_hyper"], l_dpmm)

        stability = None
        h_cur = fcache["h"][0] if self.fusion is not None else xv
        if (self._prev_hidden is not None
                and np.linalg.norm(self._prev_hidden) > 0
                and np.linalg.norm(h_cur) > 0):
            stability = prag.knowledge_stability(
                self._prev_hidden, h_cur, self._prev_selected, set(selected))
        self._prev_hidden = h_cur.copy()
        self._prev_selected = set(selected)

        self.step_count += 1
        return StepRecord(
            step=t,
            loss_pred=loss_pred,
            correct=correct,
            l_moe=l_moe,
            l_prag=l_prag,
            l_dpmm=l_dpmm,
            l_reflex=self._probe_losses["l_reflex"],
            l_schema=self._probe_losses["l_schema"],
            l_hyper=self._probe_losses["l_hyper"],
            alpha=self.alpha_t,
            gamma=self.gamma_t,
            num_experts=len(self.experts),
            cluster_count=len(self.dpmm.clusters) if self.dpmm else 0,
            spawned=spawned,
            stability=stability,
        )

    def fit_batch(self, xs: np.ndarray, labels: np.ndarray, epochs: int,
                  lr: float | None = None) -> float:
        """Full-batch gradient descent on the two prediction losses.

        Used for offline fitting (sample-complexity measurements); the
        retrieval context is computed once since the corpus is static.
        """
        from .trainer import sgd_step

        daggs, _ = self._context_batch(xs)
        lr = self.config.lr if lr is None else lr
        loss = float("nan")
        for _ in range(epochs):
            l_moe, g_moe = self.loss_and_grads_moe(xs, labels)
            l_prag, g_prag = self.loss_and_grads_prag(xs, labels, daggs)
            new = sgd_step(self.params(), self._combine_grads(g_moe, g_prag),
                           lr, frozen=self.frozen_param_names())
            self._set_params(new)
            loss = l_moe + l_prag
        return loss

    def _combine_grads(self, g_moe: dict, g_prag: dict) -> dict[str, np.ndarray]:
        """Sum the two path gradients, scaled by the adaptive prediction
        weight; the shared fusion adapter moves slower than the experts
        so task fitting lands in expert parameters."""
        total: dict[str, np.ndarray] = {}
        for grads in (g_moe, g_prag):
            for name, g in grads.items():
                if name == "gating.biases" and not self.config.train_gating_bias:
                    # plastic routing biases suppress inactive experts
                    # globally; keeping them fixed preserves old routes
                    continue
                if name.startswith("fusion."):
                    scale = self.config.fusion_lr_scale
                elif name.startswith("gating."):
                    scale = self.config.gating_lr_scale
                    if (not self.config.train_gating_x
                            and name == "gating.weights"
                            and self.gating_input_dim > self.config.input_dim):
                        # routing learns on the retrieval context only:
                        # the context is constant within a task, so the
                        # gate ranks experts per task instead of acting
                        # as a per-sample classifier that later tasks
                        # would rewire
                        g = g.copy()
                        g[:, :self.config.input_dim] = 0.0
                else:
                    scale = 1.0
                total[name] = total.get(name, 0.0) + self.alpha_t * scale * g
        return total

    # ------------------------------------------------------------------
    # checkpointing

    def to_checkpoint(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "moe": moe.moe_to_dict(self.gating, self.experts),
            "encoder": None if self.encoder is None else self.encoder.tolist(),
            "fusion": None if self.fusion is None else {
                "w0": self.fusion.w0.tolist(),
                "bl": self.fusion.bl.tolist(),
                "al": self.fusion.al.tolist(),
                "ud": self.fusion.ud.tolist(),
            },
            "dpmm": None if self.dpmm is None else dp.dpmm_to_dict(self.dpmm),
            "pid": {"kp": self.pid.kp, "ki": self.pid.ki, "kd": self.pid.kd},
            "alpha_t": self.alpha_t,
            "gamma_t": self.gamma_t,
            "step_count": self.step_count,
            "cluster_last_active": {str(k): v for k, v
                                    in self.cluster_last_active.items()},
            "returns": self.returns.tolist(),
            "task_embedding": None if self.task_embedding is None
            else self.task_embedding.tolist(),
        }

    def save_checkpoint(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_checkpoint(), fh, sort_keys=True)

    @classmethod
    def from_checkpoint(cls, data: dict,
                        corpus: prag.Corpus | None = None) -> "DraeSystem":
        if data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"unsupported checkpoint version {data.get('version')!r}")
        config = SystemConfig(**data["config"])
        system = cls(config, corpus=corpus)
        system.gating, system.experts = moe.moe_from_dict(data["moe"])
        if data["encoder"] is not None:
            system.encoder = np.array(data["encoder"], dtype=np.float64)
        if data["fusion"] is not None:
            system.fusion = prag.FusionParams(
                w0=np.array(data["fusion"]["w0"], dtype=np.float64),
                bl=np.array(data["fusion"]["bl"], dtype=np.float64),
                al=np.array(data["fusion"]["al"], dtype=np.float64),
                ud=np.array(data["fusion"]["ud"], dtype=np.float64),
            )
        if data["dpmm"] is not None:
            system.dpmm = dp.dpmm_from_dict(data["dpmm"])
        system.pid = control.PidController(
            kp=data["pid"]["kp"], ki=data["pid"]["ki"], kd=data["pid"]["kd"],
            noise_cov_diag=np.full(1, 1e-4))
        system.alpha_t = data["alpha_t"]
        system.gamma_t = data["gamma_t"]
        system.step_count = data["step_count"]
        system.cluster_last_active = {int(k): v for k, v
                                      in data["cluster_last_active"].items()}
        system.returns = np.array(data["returns"], dtype=np.float64)
        if data.get("task_embedding") is not None:
            system.task_embedding = np.array(data["task_embedding"],
                                             dtype=np.float64)
        return system

    @classmethod
    def load_checkpoint(cls, path,
                        corpus: prag.Corpus | None = None) -> "DraeSystem":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_checkpoint(json.load(fh), corpus=corpus)
