"""Losses, optimizer and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, EncodingKind
from .data import InteractionDataset, Splits, iterate_batches, leave_one_out, make_batch
from .model import ModelConfig, SequenceEncoder
from .tensor import Tensor

log = logging.getLogger(__name__)

ABLATIONS = ("no-adapt", "learnable-g", "no-relative", "no-rotary", "no-pcl")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PCLConfig:
    tau: float = 1.0
    epsilon: float = 1e-5
    mask_ratio: float = 0.2

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    eval_every: int = 0
    seed: int = 0


# ----------------------------------------------------------------------
# losses


def ce_loss(logits, targets) -> Tensor:
    """Mean next-item cross entropy over positions with a non-zero target.

    ``logits`` is (..., |V|) with column ``j`` scoring item ``j + 1``;
    ``targets`` has the leading shape of ``logits`` and holds item ids.
    """
    logits = T.as_tensor(logits)
    targets = np.asarray(targets)
    if targets.ndim == 0:
        logits = T.reshape(logits, (1, -1))
        targets = targets.reshape(1)
    lsm = T.log_softmax(logits, axis=-1)
    idx = np.nonzero(targets > 0)
    if not len(idx[0]):
        raise ValueError("no valid target positions")
    picked = lsm[idx + (targets[idx] - 1,)]
    return -picked.mean()


def _phase_contrast(theta: Tensor, valid: np.ndarray, w: Tensor, cfg: PCLConfig, rng) -> Tensor:
    # theta: (B, h, N, P); valid: (B, N)
    keep = np.ones(theta.shape) if cfg.mask_ratio == 0 else (rng.random(theta.shape) >= cfg.mask_ratio)
    aug = theta * keep
    wc, ws = T.cos(theta) * w, T.sin(theta) * w
    logits = (wc @ T.cos(aug).T + ws @ T.sin(aug).T) * (1.0 / cfg.tau)
    cand = valid[:, None, None, :]
    lsm = T.log_softmax(T.where(cand, logits, -1e30), axis=-1)
    n = theta.shape[-2]
    diag = lsm[:, :, np.arange(n), np.arange(n)]  # (B, h, N)
    weight = np.broadcast_to(valid[:, None, :], diag.shape).astype(np.float64)
    return -(diag * weight).sum() * (1.0 / weight.sum())


def pcl_loss(
    records: Sequence[AttentionRecord],
    valid: np.ndarray,
    weights: Sequence[Tensor],
    cfg: PCLConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Phase-contrastive loss, query term plus key term, averaged over layers.

    Positives are randomly phase-masked copies of the same position; the
    other valid positions of the sequence are negatives.  Only phases are
    read, so the loss ignores moduli entirely.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("phase-contrastive loss needs at least one valid position")
    terms = []
    for rec, w in zip(records, weights):
        if rec.theta_q is None:
            continue
        terms.append(
            _phase_contrast(rec.theta_q, valid, w, cfg, rng) + _phase_contrast(rec.theta_k, valid, w, cfg, rng)
        )
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def total_loss(ce, con, epsilon: float) -> Tensor:
    return T.as_tensor(ce) + T.as_tensor(con) * epsilon


# ----------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ----------------------------------------------------------------------
# ablations


def apply_ablations(cfg: ModelConfig, pcl: PCLConfig, ablations: Sequence[str] = ()) -> tuple[ModelConfig, PCLConfig]:
    """Map ablation names onto config changes; each switch touches one knob."""
    enc = cfg.encoding
    for name in ablations:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        if name == "no-pcl":
            pcl = replace(pcl, epsilon=0.0)
            continue
        if not enc.is_euler:
            raise ValueError(f"ablation {name!r} needs an Euler encoding")
        if name == "no-adapt":
            enc = replace(enc, kind=EncodingKind.EULER_VANILLA)
        elif name == "learnable-g":
            enc = replace(enc, kind=EncodingKind.EULER_VANILLA, learnable_frequencies=True)
        elif name == "no-relative":
            enc = replace(enc, differential_rotation=False)
        elif name == "no-rotary":
            enc = replace(enc, use_rotary_input_embedding=False)
    return cfg.with_encoding(enc), pcl


# ----------------------------------------------------------------------
# training loop


@dataclass
class LossRecord:
    step: int
    ce: float
    pcl: float
    total: float


@dataclass
class TrainResult:
    model: SequenceEncoder
    curve: list[LossRecord] = field(default_factory=list)
    validation: list[tuple[int, dict]] = field(default_factory=list)
    seconds: float = 0.0
    steps_per_epoch: int = 1

    @property
    def epoch_latency(self) -> float:
        steps = max(len(self.curve), 1)
        return self.seconds / steps * self.steps_per_epoch


def pcl_weights(model: SequenceEncoder) -> list[Tensor]:
    return [model.params.get(f"layer{l}.pcl_w") for l in range(model.num_layers)]


def batch_loss(
    model: SequenceEncoder,
    ids: np.ndarray,
    targets: np.ndarray,
    pcl: PCLConfig,
    dropout_rng=None,
    mask_rng=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Return (total, ce, pcl) for one batch."""
    out = model.forward(ids, dropout_rng)
    ce = ce_loss(model.logits(out.hidden), targets)
    if pcl.epsilon > 0 and model.cfg.encoding.is_euler:
        con = pcl_loss(out.records, ids > 0, pcl_weights(model), pcl, mask_rng)
    else:
        con = Tensor(0.0)
    return total_loss(ce, con, pcl.epsilon), ce, con


def train(
    data: InteractionDataset | Splits,
    cfg: ModelConfig,
    pcl: PCLConfig = PCLConfig(),
    run: TrainConfig = TrainConfig(),
    on_validate: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Train a :class:`SequenceEncoder` with next-item CE plus weighted PCL.

    All randomness derives from ``run.seed``: initialisation, batch order,
    dropout and phase masks each get their own child stream.
    """
    splits = data if isinstance(data, Splits) else leave_one_out(data)
    rows = [i for i, s in enumerate(splits.train.inputs) if len(s) > 0]
    if not rows:
        raise ValueError("dataset has no training rows")
    init_ss, order_ss, drop_ss, mask_ss = np.random.SeedSequence(run.seed).spawn(4)
    model = SequenceEncoder(cfg, init_ss)
    result = TrainResult(model, steps_per_epoch=max(1, -(-len(rows) // run.batch_size)))
    if run.steps <= 0:
        return result

    from .evaluation import evaluate

    opt = Adam(model.params, lr=run.lr)
    order_rng = np.random.default_rng(order_ss)
    drop_rng = np.random.default_rng(drop_ss)
    mask_rng = np.random.default_rng(mask_ss)
    batches = iterate_batches(len(rows), run.batch_size, order_rng)
    start = time.perf_counter()
    for step in range(1, run.steps + 1):
        picked = [rows[i] for i in next(batches)]
        batch = make_batch(
            [splits.train.inputs[i] for i in picked], [splits.train.targets[i] for i in picked], cfg.max_len
        )
        try:
            total, ce, con = batch_loss(model, batch.item_ids, batch.targets, pcl, drop_rng, mask_rng)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        if not np.isfinite(total.item()):
            raise TrainingDiverged(f"loss is {total.item()} at step {step} (ce={ce.item()}, pcl={con.item()})")
        opt.zero_grad()
        total.backward()
        opt.step()
        result.curve.append(LossRecord(step, ce.item(), con.item(), total.item()))
        if run.eval_every and step % run.eval_every == 0:
            report = evaluate(model, splits.valid).as_dict()
            result.validation.append((step, report))
            log.info("step %d valid %s", step, report)
            if on_validate is not None:
                on_validate(step, report)
    result.seconds = time.perf_counter() - start
    return result
