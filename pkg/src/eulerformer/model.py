"""Causal transformer encoder (SASRec layout) with pluggable positional encoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    AdaptiveParams,
    AttentionRecord,
    EncodingKind,
    EncodingSpec,
    FrequencySchedule,
    RotaryInputEmbedding,
    attend,
    attention_mask,
    baseline_scores,
    encode_input,
    euler_rotate,
    sinusoidal_table,
)
from .euler import ConfigurationError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    max_len: int = 50
    d: int = 64
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 256
    dropout: float = 0.2
    encoding: EncodingSpec = field(default_factory=EncodingSpec)
    delta_init: float = 1.0

    def __post_init__(self):
        if isinstance(self.encoding, dict):
            object.__setattr__(self, "encoding", EncodingSpec.from_dict(self.encoding))
        if self.d % (2 * self.heads):
            raise ConfigurationError(f"d={self.d} must be divisible by 2*heads={2 * self.heads}")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be >= 1")
        if self.vocab < 2:
            raise ConfigurationError("vocab must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "max_len": self.max_len,
            "d": self.d,
            "heads": self.heads,
            "layers": self.layers,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "encoding": self.encoding.to_dict(),
            "delta_init": self.delta_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_encoding(self, encoding: EncodingSpec) -> "ModelConfig":
        return replace(self, encoding=encoding)


@dataclass
class SequenceBatch:
    item_ids: np.ndarray  # (B, N) int, 0 = padding, left-padded
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B, N) next item, 0 where undefined

    @property
    def valid(self) -> np.ndarray:
        return self.item_ids > 0


@dataclass
class ForwardOutput:
    hidden: Tensor
    records: list[AttentionRecord]


class SequenceEncoder:
    """Stack of post-norm transformer blocks over item sequences.

    Trainable tensors live in ``params``; frozen tensors (e.g. the unit scale
    of vanilla Euler rotation) in ``buffers``.  Both are written to
    checkpoints.
    """

    def __init__(self, cfg: ModelConfig, seed: int | np.random.SeedSequence = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        spec = cfg.encoding
        d, h, half = cfg.d, cfg.heads, cfg.d_head // 2
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

        def normal(*shape):
            return rng.normal(0.0, INIT_STD, size=shape)

        self._param("item_emb", normal(cfg.vocab + 1, d))
        if spec.additive_position == "learned":
            self._param("pos_emb", normal(cfg.max_len, d))
        elif spec.additive_position == "sinusoidal":
            self.buffers["pos_emb"] = Tensor(sinusoidal_table(cfg.max_len, d))
        if spec.is_euler and spec.use_rotary_input_embedding:
            self._param("psi", np.zeros((cfg.max_len, d // 2)))
        self._param("emb_ln.w", np.ones(d))
        self._param("emb_ln.b", np.zeros(d))

        sched = FrequencySchedule.build(cfg.d_head, spec.angle_base)
        for l in range(cfg.layers):
            p = f"layer{l}."
            for name in ("q", "k", "v", "o"):
                self._param(p + "w" + name, normal(d, d))
                self._param(p + "b" + name, np.zeros(d))
            self._param(p + "ln1.w", np.ones(d))
            self._param(p + "ln1.b", np.zeros(d))
            self._param(p + "ffn.w1", normal(d, cfg.ffn_dim))
            self._param(p + "ffn.b1", np.zeros(cfg.ffn_dim))
            self._param(p + "ffn.w2", normal(cfg.ffn_dim, d))
            self._param(p + "ffn.b2", np.zeros(d))
            self._param(p + "ln2.w", np.ones(d))
            self._param(p + "ln2.b", np.zeros(d))
            if not spec.is_euler:
                continue
            adaptive = spec.kind is EncodingKind.EULER_ADAPTIVE and not spec.learnable_frequencies
            store = self._param if adaptive else self._buffer
            store(p + "delta", np.full((h, half), cfg.delta_init if not adaptive else 1.0))
            store(p + "phase_bias", np.zeros((h, half)))
            if spec.differential_rotation:
                if spec.learnable_frequencies:
                    self._param(p + "freq", np.tile(sched.g, (h, 1)))
                else:
                    self.buffers[p + "freq"] = Tensor(sched.g.copy())
            self._param(p + "pcl_w", np.ones(half))

    def _param(self, name: str, value) -> None:
        self.params[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def _buffer(self, name: str, value) -> None:
        self.buffers[name] = Tensor(np.array(value, dtype=np.float64), name=name)

    def tensor(self, name: str) -> Tensor | None:
        return self.params.get(name, self.buffers.get(name))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.buffers.items()}
        out.update({k: v.data.copy() for k, v in self.params.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            target = self.tensor(k)
            if target.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {target.shape} vs {v.shape}")
            target.data = np.array(v, dtype=np.float64)

    @property
    def num_layers(self) -> int:
        return self.cfg.layers

    # ------------------------------------------------------------------
    def embed(self, item_ids: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.cfg
        ids = np.asarray(item_ids)
        if ids.ndim != 2:
            raise ValueError("item_ids must have shape (B, N)")
        n = ids.shape[1]
        if n > cfg.max_len:
            raise ConfigurationError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        if ids.min() < 0 or ids.max() > cfg.vocab:
            raise ValueError(f"item id out of range [0, {cfg.vocab}]")
        x = T.embedding(self.params["item_emb"], ids)
        pos = self.tensor("pos_emb")
        P = pos[:n] if pos is not None else None
        psi = self.params.get("psi")
        if psi is not None:
            x = encode_input(x, P, RotaryInputEmbedding(psi))
        elif P is not None:
            x = x + P
        x = T.layer_norm(x, self.params["emb_ln.w"], self.params["emb_ln.b"])
        return T.dropout(x, cfg.dropout, rng)

    def _attention(self, l: int, x: Tensor, mask: np.ndarray) -> tuple[Tensor, AttentionRecord]:
        cfg, spec = self.cfg, self.cfg.encoding
        p = f"layer{l}."
        B, n, d = x.shape
        h, dh = cfg.heads, cfg.d_head

        def heads(name):
            y = x @ self.params[p + "w" + name] + self.params[p + "b" + name]
            return y.reshape(B, n, h, dh).transpose(0, 2, 1, 3)

        Q, K, V = heads("q"), heads("k"), heads("v")
        theta_q = theta_k = None
        if spec.is_euler:
            adapt = AdaptiveParams(self.tensor(p + "delta"), self.tensor(p + "phase_bias"))
            freqs = self.tensor(p + "freq")
            if freqs is not None and freqs.ndim == 1 and not freqs.requires_grad:
                freqs = FrequencySchedule(freqs.data)
            q_vec, k_vec, theta_q, theta_k = euler_rotate(Q, K, adapt, freqs)
            scores = (q_vec @ k_vec.T) * (1.0 / math.sqrt(dh))
        else:
            scores = baseline_scores(Q, K, spec)
        ctx, weights = attend(scores, V, mask=mask)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, n, d)
        out = ctx @ self.params[p + "wo"] + self.params[p + "bo"]
        return out, AttentionRecord(weights, theta_q, theta_k)

    def forward(
        self, item_ids: np.ndarray, rng: np.random.Generator | None = None, causal: bool = True
    ) -> ForwardOutput:
        """Hidden states (B, N, d) plus per-layer attention records.

        ``rng`` enables dropout; pass ``None`` for deterministic evaluation.
        """
        cfg = self.cfg
        ids = np.asarray(item_ids)
        x = self.embed(ids, rng)
        mask = attention_mask(ids.shape[1], ids > 0, causal)[:, None]
        records = []
        for l in range(cfg.layers):
            p = f"layer{l}."
            attn, rec = self._attention(l, x, mask)
            records.append(rec)
            x = T.layer_norm(x + T.dropout(attn, cfg.dropout, rng), self.params[p + "ln1.w"], self.params[p + "ln1.b"])
            hid = T.relu(x @ self.params[p + "ffn.w1"] + self.params[p + "ffn.b1"])
            hid = T.dropout(hid, cfg.dropout, rng)
            ffn = hid @ self.params[p + "ffn.w2"] + self.params[p + "ffn.b2"]
            x = T.layer_norm(x + T.dropout(ffn, cfg.dropout, rng), self.params[p + "ln2.w"], self.params[p + "ln2.b"])
        return ForwardOutput(x, records)

    def item_table(self) -> Tensor:
        """Embeddings of real items (ids 1..|V|), shared with the input table."""
        return self.params["item_emb"][1:]

    def logits(self, hidden) -> Tensor:
        return score_items(hidden, self.item_table())


def score_items(hidden_t, item_embeddings) -> Tensor:
    """Dot product of hidden state(s) with every item embedding.

    ``item_embeddings`` is (|V|, d) with row ``j`` holding item id ``j + 1``;
    the returned scores follow the same indexing.
    """
    hidden_t = T.as_tensor(hidden_t)
    if hidden_t.ndim == 1:
        return (T.reshape(hidden_t, (1, -1)) @ T.as_tensor(item_embeddings).T).reshape(-1)
    return hidden_t @ T.as_tensor(item_embeddings).T


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: SequenceEncoder, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "params": sorted(model.params), "extra": extra or {}}
    arrays = {f"tensor/{k}": v for k, v in model.state_dict().items()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[SequenceEncoder, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        state = {k[len("tensor/"):]: z[k] for k in z.files if k.startswith("tensor/")}
    model = SequenceEncoder(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta.get("extra", {})
