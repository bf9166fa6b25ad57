"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or input, 2 failure while
running (failed verification, divergence, I/O).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import EncodingKind, EncodingSpec
from .data import DataError, ingest, leave_one_out, synth_positional
from .euler import ConfigurationError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import ABLATIONS, PCLConfig, TrainConfig, TrainingDiverged, apply_ablations, train

log = logging.getLogger("eulerformer")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOSS_HEADER = ["step", "ce", "pcl", "total"]


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every knob of every command; config files may set any subset."""

    seed: int = 0
    data: str = ""
    out: str = "runs"
    checkpoint: str = ""
    # model
    d: int = 64
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 256
    max_len: int = 50
    dropout: float = 0.2
    encoding: str = EncodingKind.EULER_ADAPTIVE.value
    angle_base: float = 10000.0
    rotary_input: bool = True
    ablation: list = field(default_factory=list)
    # training
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    eval_every: int = 0
    tau: float = 1.0
    epsilon: float = 1e-5
    mask_ratio: float = 0.2
    # evaluation / export
    split: str = "test"
    encodings: list = field(default_factory=lambda: ["learned_abs", "rope", "euler_vanilla", "euler_adaptive"])
    user: int = 0
    users: int = 32
    layer: int = 0
    head: int = 0
    query_item: int = 1
    key_item: int = 1
    d_min: float = 0.0
    d_max: float = 20.0
    d_step: float = 0.1
    # synthetic data
    task: str = "copy_offset"
    k: int = 2
    num_users: int = 2000
    vocab: int = 50
    length: int = 20

    @classmethod
    def from_file(cls, path: str | Path) -> dict:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError(f"config {path} must hold a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return doc

    def model_config(self, vocab: int) -> ModelConfig:
        spec = EncodingSpec(self.encoding, use_rotary_input_embedding=self.rotary_input, angle_base=self.angle_base)
        return ModelConfig(vocab=vocab, max_len=self.max_len, d=self.d, heads=self.heads, layers=self.layers,
                           ffn_dim=self.ffn_dim, dropout=self.dropout, encoding=spec)

    def pcl_config(self) -> PCLConfig:
        return PCLConfig(tau=self.tau, epsilon=self.epsilon, mask_ratio=self.mask_ratio)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, eval_every=self.eval_every,
                           seed=self.seed)


# ----------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="TSV of user, item, timestamp")
    p.add_argument("--d", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--ffn-dim", type=int, dest="ffn_dim")
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--dropout", type=float)
    p.add_argument("--encoding", choices=[k.value for k in EncodingKind])
    p.add_argument("--angle-base", type=float, dest="angle_base")
    p.add_argument("--rotary-input", type=_bool, dest="rotary_input")
    p.add_argument("--ablation", action="append", choices=ABLATIONS,
                   help="repeatable; one of the five ablation variants")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eulerformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant checks")
    _add_common(p)
    p.add_argument("--fault-delta-init", type=float, default=1.0, dest="fault_delta_init",
                   help="negative control: initial scale used by the vanilla special-case check")

    p = sub.add_parser("synth", help="write a synthetic positional dataset as TSV")
    _add_common(p)
    p.add_argument("--task", choices=["copy_offset", "position_parity"])
    p.add_argument("--k", type=int)
    p.add_argument("--num-users", type=int, dest="num_users")
    p.add_argument("--vocab", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("train", help="train a model and write checkpoint + loss curve")
    _add_common(p)
    _add_model(p)

    p = sub.add_parser("eval", help="rank held-out items with a checkpoint")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=["test", "valid"])

    p = sub.add_parser("compare", help="train and evaluate several encodings")
    _add_common(p)
    _add_model(p)
    p.add_argument("--encodings", type=_csv_list, help="comma-separated encoding kinds")

    for name, helptext in (
        ("export-attention", "attention map of one user as CSV"),
        ("export-phases", "adapted query phases as CSV"),
        ("export-decay", "score and decay gradient versus distance as CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--checkpoint")
        p.add_argument("--data")
        p.add_argument("--layer", type=int)
        p.add_argument("--head", type=int)
        if name == "export-attention":
            p.add_argument("--user", type=int)
        elif name == "export-phases":
            p.add_argument("--users", type=int)
        else:
            p.add_argument("--query-item", type=int, dest="query_item")
            p.add_argument("--key-item", type=int, dest="key_item")
            p.add_argument("--d-min", type=float, dest="d_min")
            p.add_argument("--d-max", type=float, dest="d_max")
            p.add_argument("--d-step", type=float, dest="d_step")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file, then command-line flags."""
    values = asdict(RunConfig())
    if getattr(args, "config", None):
        values.update(RunConfig.from_file(args.config))
    for key in values:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


# ----------------------------------------------------------------------
# commands


def _load_splits(cfg: RunConfig):
    if not cfg.data:
        raise ValidationError("--data is required")
    ds = ingest(cfg.data)
    return ds, leave_one_out(ds)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_verify(cfg: RunConfig, fault_delta_init: float = 1.0) -> int:
    from .checks import run_all

    results = run_all(seed=cfg.seed, delta_init=fault_delta_init)
    print(f"seed={cfg.seed}")
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    ds = synth_positional(cfg.task, cfg.num_users, cfg.vocab, cfg.length, cfg.seed, k=cfg.k)
    out = Path(cfg.out)
    if out.suffix != ".tsv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{cfg.task}.tsv"
    ds.to_tsv(out)
    print(f"seed={cfg.seed} wrote {len(ds)} users to {out}")
    return EXIT_OK


def write_loss_curve(curve, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for r in curve:
            w.writerow([r.step, repr(r.ce), repr(r.pcl), repr(r.total)])


def cmd_train(cfg: RunConfig) -> int:
    ds, splits = _load_splits(cfg)
    model_cfg, pcl = apply_ablations(cfg.model_config(ds.num_items), cfg.pcl_config(), cfg.ablation)
    result = train(splits, model_cfg, pcl, cfg.train_config())
    out = _out_dir(cfg)
    save_checkpoint(out / "checkpoint.npz", result.model, {"seed": cfg.seed, "ablation": list(cfg.ablation)})
    write_loss_curve(result.curve, out / "loss.csv")
    (out / "run.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    final = result.curve[-1].total if result.curve else float("nan")
    print(f"seed={cfg.seed} steps={len(result.curve)} final_loss={final:.6f} out={out}")
    return EXIT_OK


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ValidationError("--checkpoint is required")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def cmd_eval(cfg: RunConfig) -> int:
    model = _load_model(cfg)
    _, splits = _load_splits(cfg)
    from .evaluation import evaluate

    report = evaluate(model, getattr(splits, cfg.split))
    out = _out_dir(cfg)
    report.write_json(out / f"metrics_{cfg.split}.json", seed=cfg.seed, split=cfg.split)
    print(f"seed={cfg.seed} split={cfg.split} recall@10={report.recall_at_10:.4f} "
          f"mrr={report.mrr:.4f} ndcg@10={report.ndcg_at_10:.4f}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    from .evaluation import compare_encodings, write_comparison

    ds, splits = _load_splits(cfg)
    base = cfg.model_config(ds.num_items)
    variants = [(name, EncodingSpec(name, use_rotary_input_embedding=cfg.rotary_input, angle_base=cfg.angle_base),
                 cfg.ablation if EncodingKind(name) in (EncodingKind.EULER_ADAPTIVE, EncodingKind.EULER_VANILLA) else ())
                for name in cfg.encodings]
    rows = compare_encodings(splits, base, variants, cfg.train_config(), cfg.pcl_config())
    out = _out_dir(cfg)
    write_comparison(rows, out / "compare.csv")
    print(f"seed={cfg.seed}")
    for row in rows:
        r = row.report
        print(f"{row.name:16s} recall@10={r.recall_at_10:.4f} mrr={r.mrr:.4f} ndcg@10={r.ndcg_at_10:.4f} "
              f"epoch_latency={row.epoch_latency:.3f}s")
    return EXIT_OK


def cmd_export_attention(cfg: RunConfig) -> int:
    from .evaluation import export_attention

    model = _load_model(cfg)
    _, splits = _load_splits(cfg)
    context = splits.test.contexts[cfg.user]
    path = _out_dir(cfg) / f"attention_u{cfg.user}_l{cfg.layer}_h{cfg.head}.csv"
    export_attention(model, context, path, cfg.layer, cfg.head)
    print(f"seed={cfg.seed} wrote {path}")
    return EXIT_OK


def cmd_export_phases(cfg: RunConfig) -> int:
    from .evaluation import export_phase_distribution

    model = _load_model(cfg)
    _, splits = _load_splits(cfg)
    path = _out_dir(cfg) / "phases.csv"
    export_phase_distribution(model, splits.test.contexts[: cfg.users], path)
    print(f"seed={cfg.seed} wrote {path}")
    return EXIT_OK


def cmd_export_decay(cfg: RunConfig) -> int:
    from .evaluation import decay_content, export_decay_curve

    model = _load_model(cfg)
    if cfg.d_step <= 0 or cfg.d_max < cfg.d_min:
        raise ValidationError("need d_step > 0 and d_max >= d_min")
    for item in (cfg.query_item, cfg.key_item):
        if not 1 <= item <= model.cfg.vocab:
            raise ValidationError(f"item id {item} outside [1, {model.cfg.vocab}]")
    distances = np.round(np.arange(cfg.d_min, cfg.d_max + cfg.d_step / 2, cfg.d_step), 12)
    content = decay_content(model, cfg.query_item, cfg.key_item, cfg.layer, cfg.head)
    path = _out_dir(cfg) / "decay.csv"
    export_decay_curve(content, distances, path)
    print(f"seed={cfg.seed} wrote {path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "export-attention": cmd_export_attention,
    "export-phases": cmd_export_phases,
    "export-decay": cmd_export_decay,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "verify":
            return cmd_verify(cfg, args.fault_delta_init)
        return COMMANDS[args.command](cfg)
    except (ValidationError, ConfigurationError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
