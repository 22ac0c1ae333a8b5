"""Retrieval-augmented pathway: embedded corpus, size-penalized subset
selection, and low-rank gated fusion into the hidden state.

The retrieval objective sum_d sim(q, d) - lambda * |subset| is modular,
so the exact maximizer is simply every document whose similarity clears
lambda; no search is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CorpusFormatError, ShapeMismatch
from .numerics import as_matrix, as_vector, cosine_sim


@dataclass
class Document:
    id: str
    embedding: np.ndarray
    text: str | None = None


class Corpus:
    """Immutable id-indexed document store with a uniform embedding dim."""

    def __init__(self, documents: list[Document]):
        self.documents = list(documents)
        self.by_id = {}
        self.dim_e = self.documents[0].embedding.size if self.documents else 0
        for doc in self.documents:
            if doc.id in self.by_id:
                raise CorpusFormatError(f"duplicate document id {doc.id!r}")
            if doc.embedding.size != self.dim_e:
                raise CorpusFormatError(
                    f"document {doc.id!r} has dim {doc.embedding.size}, "
                    f"expected {self.dim_e}"
                )
            self.by_id[doc.id] = doc

    def __len__(self) -> int:
        return len(self.documents)


def load_corpus_jsonl(path) -> Corpus:
    """Read a JSONL corpus: one {"id", "embedding", "text"?} per line."""
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                doc = Document(
                    id=str(record["id"]),
                    embedding=as_vector(record["embedding"]),
                    text=record.get("text"),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusFormatError(
                    f"line {lineno}: {exc}", line=lineno
                ) from exc
            docs.append(doc)
    try:
        return Corpus(docs)
    except CorpusFormatError as exc:
        raise CorpusFormatError(str(exc)) from exc


@dataclass
class FusionParams:
    """Base projection plus a rank-r pathway gated by the document signal.

    w0: (hidden, input); bl: (hidden, r); al: (r, input); ud: (hidden, dim_e).
    """

    w0: np.ndarray
    bl: np.ndarray
    al: np.ndarray
    ud: np.ndarray


def init_fusion(
    input_dim: int, dim_e: int, rank: int, rng: np.random.Generator
) -> FusionParams:
    # bl starts at zero so the low-rank pathway is initially silent and
    # the fused state reduces to the identity map.
    return FusionParams(
        w0=np.eye(input_dim),
        bl=np.zeros((input_dim, rank)),
        al=rng.normal(0.0, 1.0 / np.sqrt(input_dim), (rank, input_dim)),
        ud=rng.normal(0.0, 1.0 / np.sqrt(dim_e), (input_dim, dim_e)),
    )


@dataclass
class RetrievalResult:
    selected: list[str]
    aggregated: np.ndarray
    objective: float
    similarities: dict[str, float]


def encode_query(enc_weights, x) -> np.ndarray:
    """Single linear map from the input into the embedding space."""
    w = as_matrix(enc_weights)
    xv = as_vector(x)
    if w.shape[1] != xv.size:
        raise ShapeMismatch(f"encoder expects dim {w.shape[1]}, got {xv.size}")
    return w @ xv


def retrieve(corpus: Corpus, q, lam: float) -> RetrievalResult:
    """Exact maximizer of sum_d sim(q, d) - lam * |subset|.

    Because the objective is modular the answer is {d : sim(q, d) > lam}
    (ties at exactly lam excluded). The selected list is sorted by
    descending similarity, then id; the aggregate is the unweighted mean
    of the selected embeddings, or the zero vector when nothing clears
    the penalty.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    qv = as_vector(q, dim=corpus.dim_e)
    sims = {doc.id: cosine_sim(qv, doc.embedding) for doc in corpus.documents}
    selected = sorted(
        (d for d, s in sims.items() if s > lam),
        key=lambda d: (-sims[d], d),
    )
    if selected:
        aggregated = np.mean(
            [corpus.by_id[d].embedding for d in selected], axis=0
        )
    else:
        aggregated = np.zeros(corpus.dim_e)
    objective = float(sum(sims[d] for d in selected) - lam * len(selected))
    return RetrievalResult(selected, aggregated, objective, sims)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fuse(params: FusionParams, x, d_agg) -> np.ndarray:
    """Fused hidden state: w0 x + (bl al x) ⊙ sigmoid(ud d_agg).

    A zero aggregate leaves the gate at 0.5 elementwise, so the fusion
    degrades gracefully when retrieval selects nothing.
    """
    xv = as_vector(x)
    dv = as_vector(d_agg)
    if params.w0.shape[1] != xv.size:
        raise ShapeMismatch(f"fusion expects dim {params.w0.shape[1]}, got {xv.size}")
    if params.ud.shape[1] != dv.size:
        raise ShapeMismatch(
            f"fusion gate expects dim {params.ud.shape[1]}, got {dv.size}"
        )
    return params.w0 @ xv + (params.bl @ (params.al @ xv)) * sigmoid(params.ud @ dv)


def jaccard(a: set, b: set) -> float:
    """Jaccard overlap of two id sets; two empty sets count as identical."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def knowledge_stability(h_prev, h_cur, sel_prev, sel_cur) -> float:
    """Hidden-state similarity plus retrieval-set overlap, in [-1, 2].

    High values mean consecutive steps kept both their internal state
    and their retrieved context; the harness averages this per run.
    """
    return cosine_sim(h_prev, h_cur) + jaccard(set(sel_prev), set(sel_cur))
