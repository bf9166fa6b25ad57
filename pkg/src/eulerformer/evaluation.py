"""Ranking metrics, encoder comparison and diagnostic CSV exports."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import AdaptiveParams, EncodingSpec, FrequencySchedule, decay_gradient, decay_score, euler_rotate
from .data import Split, Splits, make_batch
from .euler import canonicalize, euler_transform
from .model import ModelConfig, SequenceEncoder

PHASE_HEADER = ["layer", "position", "dimension", "phase"]
DECAY_HEADER = ["D", "score", "gradient"]
COMPARE_HEADER = ["encoding", "recall_at_10", "mrr", "ndcg_at_10", "hit_at_1", "epoch_latency_s"]


def rank_of(scores: np.ndarray, target: int) -> int:
    """1-based rank of item ``target`` (ids start at 1 at column 0).

    Ties are broken by ascending item id.
    """
    scores = np.asarray(scores)
    s = scores[target - 1]
    higher = int(np.sum(scores > s))
    tied_before = int(np.sum(scores[: target - 1] == s))
    return 1 + higher + tied_before


def metrics_from_rank(rank: int, k: int = 10) -> tuple[float, float, float]:
    hit = rank <= k
    return float(hit), 1.0 / rank, (1.0 / math.log2(rank + 1) if hit else 0.0)


def rank_metrics(scores, target: int, k: int = 10) -> tuple[float, float, float]:
    """(recall@k, reciprocal rank, ndcg@k) for a single ground-truth item."""
    return metrics_from_rank(rank_of(scores, target), k)


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(len(targets))
    tgt = scores[rows, targets - 1][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    higher = (scores > tgt).sum(axis=1)
    tied = ((scores == tgt) & (ids < (targets - 1)[:, None])).sum(axis=1)
    return 1 + higher + tied


@dataclass
class MetricsReport:
    recall_at_10: float
    mrr: float
    ndcg_at_10: float
    hit_at_1: float
    count: int
    buckets: dict[str, dict] = field(default_factory=dict)
    latency_s: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path, **extra) -> None:
        doc = self.as_dict()
        doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _bucket_label(n: int, width: int) -> str:
    lo = (n // width) * width
    return f"[{lo},{lo + width})"


def evaluate(
    model: SequenceEncoder, split: Split, k: int = 10, batch_size: int = 256, bucket_width: int = 10
) -> MetricsReport:
    """Rank each held-out target against every item; average over users."""
    start = time.perf_counter()
    ranks = []
    with T.no_grad():
        for lo in range(0, len(split.contexts), batch_size):
            ctx = split.contexts[lo:lo + batch_size]
            tgt = np.asarray(split.targets[lo:lo + batch_size])
            batch = make_batch(ctx, None, model.cfg.max_len)
            hidden = model.forward(batch.item_ids).hidden
            scores = model.logits(hidden[:, -1]).data
            ranks.append(batch_ranks(scores, tgt))
    latency = time.perf_counter() - start
    ranks = np.concatenate(ranks) if ranks else np.zeros(0, dtype=int)
    per = np.array([metrics_from_rank(int(r), k) for r in ranks]).reshape(-1, 3)
    lengths = np.array([len(c) for c in split.contexts])
    buckets = {}
    for label in sorted({_bucket_label(n, bucket_width) for n in lengths}, key=lambda s: int(s[1:].split(",")[0])):
        sel = np.array([_bucket_label(n, bucket_width) == label for n in lengths])
        buckets[label] = {
            "count": int(sel.sum()),
            "recall_at_10": float(per[sel, 0].mean()),
            "mrr": float(per[sel, 1].mean()),
            "ndcg_at_10": float(per[sel, 2].mean()),
        }
    return MetricsReport(
        recall_at_10=float(per[:, 0].mean()),
        mrr=float(per[:, 1].mean()),
        ndcg_at_10=float(per[:, 2].mean()),
        hit_at_1=float(np.mean(ranks == 1)),
        count=int(len(ranks)),
        buckets=buckets,
        latency_s=latency,
    )


# ----------------------------------------------------------------------
# comparison


@dataclass
class ComparisonRow:
    name: str
    report: MetricsReport
    epoch_latency: float

    def csv_row(self) -> list:
        r = self.report
        return [self.name, r.recall_at_10, r.mrr, r.ndcg_at_10, r.hit_at_1, self.epoch_latency]


def compare_encodings(
    data: Splits,
    base: ModelConfig,
    variants: Sequence[tuple[str, EncodingSpec] | tuple[str, EncodingSpec, Sequence[str]]],
    run=None,
    pcl=None,
) -> list[ComparisonRow]:
    """Train one model per variant with identical seeds and data order."""
    from .training import PCLConfig, TrainConfig, apply_ablations, train

    run = run or TrainConfig()
    pcl = pcl or PCLConfig()
    rows = []
    for variant in variants:
        name, spec = variant[0], variant[1]
        ablations = variant[2] if len(variant) > 2 else ()
        cfg, pcl_v = apply_ablations(base.with_encoding(spec), pcl, ablations)
        result = train(data, cfg, pcl_v, run)
        rows.append(ComparisonRow(name, evaluate(result.model, data.test), result.epoch_latency))
    return rows


def write_comparison(rows: Sequence[ComparisonRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        for row in rows:
            w.writerow(row.csv_row())


# ----------------------------------------------------------------------
# exports


def attention_map(model: SequenceEncoder, context: Sequence[int], layer: int = 0, head: int = 0) -> np.ndarray:
    """Attention weights (query x key) for one sequence, padding stripped."""
    batch = make_batch([list(context)], None, model.cfg.max_len)
    with T.no_grad():
        out = model.forward(batch.item_ids)
    n = int(batch.lengths[0])
    w = out.records[layer].weights.data[0, head]
    return w[-n:, -n:]


def export_attention(model: SequenceEncoder, context: Sequence[int], path, layer: int = 0, head: int = 0) -> np.ndarray:
    w = attention_map(model, context, layer, head)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["query"] + [f"key_{j}" for j in range(w.shape[1])])
        for i, row in enumerate(w):
            out.writerow([i] + [repr(float(v)) for v in row])
    return w


def phase_rows(model: SequenceEncoder, contexts: Sequence[Sequence[int]]) -> list[tuple[int, int, int, float]]:
    """Canonical adapted query phases, one row per (layer, position, dimension) and sequence.

    Heads are laid side by side along the dimension axis; positions count
    from the first real item of each sequence.
    """
    if not model.cfg.encoding.is_euler:
        raise ValueError("phase export needs an Euler encoding")
    batch = make_batch([list(c) for c in contexts], None, model.cfg.max_len)
    with T.no_grad():
        out = model.forward(batch.item_ids)
    width = batch.item_ids.shape[1]
    rows = []
    for layer, rec in enumerate(out.records):
        theta = canonicalize(rec.theta_q.data)  # (B, h, N, P)
        B, h, N, P = theta.shape
        for b in range(B):
            n = int(batch.lengths[b])
            for pos in range(n):
                col = width - n + pos
                for head in range(h):
                    for t in range(P):
                        rows.append((layer, pos, head * P + t, float(theta[b, head, col, t])))
    return rows


def export_phase_distribution(model: SequenceEncoder, contexts, path) -> list[tuple]:
    rows = phase_rows(model, contexts)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(PHASE_HEADER)
        for layer, pos, dim, phase in rows:
            out.writerow([layer, pos, dim, repr(phase)])
    return rows


def circular_variance(phases: np.ndarray) -> float:
    phases = np.asarray(phases)
    return float(1.0 - np.hypot(np.cos(phases).mean(), np.sin(phases).mean()))


def position_phase_spread(rows) -> float:
    """Circular variance of the per-position mean phase direction."""
    arr = np.asarray([(r[1], r[3]) for r in rows])
    means = []
    for pos in np.unique(arr[:, 0]):
        ph = arr[arr[:, 0] == pos, 1]
        means.append(math.atan2(np.sin(ph).mean(), np.cos(ph).mean()))
    return circular_variance(np.asarray(means))


@dataclass
class DecayContent:
    """Polar content of one query/key pair in one head."""

    lambda_q: np.ndarray
    lambda_k: np.ndarray
    theta_q: np.ndarray
    theta_k: np.ndarray
    delta: np.ndarray
    bias: np.ndarray
    g: np.ndarray


def decay_content(model: SequenceEncoder, query_item: int, key_item: int, layer: int = 0, head: int = 0) -> DecayContent:
    """Project two item embeddings into one head's polar query/key space."""
    cfg = model.cfg
    if not cfg.encoding.is_euler:
        raise ValueError("decay curve needs an Euler encoding")
    p = f"layer{layer}."
    emb = model.params["item_emb"].data
    dh = cfg.d_head
    sl = slice(head * dh, (head + 1) * dh)
    q = emb[query_item] @ model.params[p + "wq"].data[:, sl] + model.params[p + "bq"].data[sl]
    k = emb[key_item] @ model.params[p + "wk"].data[:, sl] + model.params[p + "bk"].data[sl]
    pq, pk = euler_transform(q), euler_transform(k)
    freq = model.tensor(p + "freq")
    if freq is None:
        g = np.zeros(dh // 2)
    else:
        g = freq.data if freq.data.ndim == 1 else freq.data[head]
    return DecayContent(
        pq.modulus.data,
        pk.modulus.data,
        pq.phase.data,
        pk.phase.data,
        model.tensor(p + "delta").data[head],
        model.tensor(p + "phase_bias").data[head],
        np.asarray(g),
    )


def decay_curve(content: DecayContent, distances: Sequence[float]) -> list[tuple[float, float, float]]:
    """(D, unscaled score, closed-form d score / dD) for each distance."""
    c = content
    rows = []
    for D in distances:
        score = decay_score(c.lambda_q, c.lambda_k, c.theta_q, c.theta_k, c.delta, c.bias, c.g, D)
        grad = decay_gradient(c.lambda_q, c.lambda_k, c.theta_q, c.theta_k, (c.delta, c.bias), c.g, D)
        rows.append((float(D), score, grad))
    return rows


def export_decay_curve(content: DecayContent, distances: Sequence[float], path) -> list[tuple]:
    rows = decay_curve(content, distances)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(DECAY_HEADER)
        for row in rows:
            out.writerow([repr(v) for v in row])
    return rows


# ----------------------------------------------------------------------
# latency


def encoding_latency(n: int, d: int = 64, heads: int = 2, batch: int = 16, repeats: int = 5, seed: int = 0) -> float:
    """Median wall time of the Euler positional encoding of Q and K.

    Covers the transformation, adaptive and differential rotation and the
    inverse transformation; one warmup pass precedes the timed passes.
    """
    rng = np.random.default_rng(seed)
    dh = d // heads
    Q = rng.normal(size=(batch, heads, n, dh))
    K = rng.normal(size=(batch, heads, n, dh))
    adapt = AdaptiveParams.init(heads, dh // 2)
    sched = FrequencySchedule.build(dh)
    times = []
    with T.no_grad():
        euler_rotate(Q, K, adapt, sched)
        for _ in range(repeats):
            t0 = time.perf_counter()
            euler_rotate(Q, K, adapt, sched)
            times.append(time.perf_counter() - t0)
    return statistics.median(times)
