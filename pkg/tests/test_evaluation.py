import csv
import math

import numpy as np
import pytest

from eulerformer.attention import EncodingSpec, FrequencySchedule
from eulerformer.data import Split, leave_one_out, synth_copy_offset
from eulerformer.evaluation import (
    COMPARE_HEADER,
    DECAY_HEADER,
    PHASE_HEADER,
    DecayContent,
    attention_map,
    batch_ranks,
    circular_variance,
    compare_encodings,
    decay_content,
    decay_curve,
    encoding_latency,
    evaluate,
    export_attention,
    export_decay_curve,
    export_phase_distribution,
    rank_metrics,
    rank_of,
    write_comparison,
)
from eulerformer.model import ModelConfig, SequenceEncoder
from eulerformer.training import TrainConfig


def cfg(kind="euler_adaptive", **kw):
    base = dict(vocab=15, max_len=10, d=16, heads=2, layers=2, ffn_dim=32, dropout=0.0, encoding=EncodingSpec(kind))
    base.update(kw)
    return ModelConfig(**base)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- ranking


def scores_with_rank(rank, n=20, target=5):
    order = [i for i in range(n) if i != target - 1]
    s = np.empty(n)
    s[order] = np.arange(n - 1, 0, -1, dtype=float)
    s[target - 1] = n - rank + 0.5
    return s


@pytest.mark.parametrize(
    "rank, expected",
    [(1, (1.0, 1.0, 1.0)), (4, (1.0, 0.25, 0.4307)), (11, (0.0, 1 / 11, 0.0))],
)
def test_rank_metric_examples(rank, expected):
    s = scores_with_rank(rank)
    assert rank_of(s, 5) == rank
    got = rank_metrics(s, 5, k=10)
    np.testing.assert_allclose(got, expected, atol=5e-5)
    if rank == 4:
        assert got[2] == pytest.approx(1 / math.log2(5), abs=1e-15)


def test_ties_break_by_item_id():
    s = np.array([0.5, 0.9, 0.5, 0.5])
    assert [rank_of(s, t) for t in (1, 3, 4)] == [2, 3, 4]
    np.testing.assert_array_equal(batch_ranks(np.tile(s, (3, 1)), np.array([1, 3, 4])), [2, 3, 4])


def test_batch_ranks_match_scalar_ranks():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 5, size=(40, 12)).astype(float)
    targets = rng.integers(1, 13, size=40)
    np.testing.assert_array_equal(batch_ranks(scores, targets), [rank_of(s, t) for s, t in zip(scores, targets)])


# ---------------------------------------------------------------- evaluate


def test_evaluate_buckets_aggregate_to_total():
    model = SequenceEncoder(cfg("rope"), 0)
    rng = np.random.default_rng(1)
    contexts = [list(rng.integers(1, 16, size=n)) for n in rng.integers(1, 25, size=30)]
    split = Split(contexts, list(rng.integers(1, 16, size=30)))
    report = evaluate(model, split, bucket_width=10, batch_size=7)
    assert report.count == 30
    assert sum(b["count"] for b in report.buckets.values()) == 30
    assert set(report.buckets) <= {"[0,10)", "[10,20)", "[20,30)"}
    weighted = sum(b["count"] * b["mrr"] for b in report.buckets.values()) / 30
    assert weighted == pytest.approx(report.mrr, abs=1e-12)
    assert 0 <= report.hit_at_1 <= report.recall_at_10 <= 1


def test_evaluate_report_json(tmp_path):
    model = SequenceEncoder(cfg(), 0)
    report = evaluate(model, Split([[1, 2, 3]], [4]))
    report.write_json(tmp_path / "m.json", seed=3)
    text = (tmp_path / "m.json").read_text()
    assert '"seed": 3' in text and '"recall_at_10"' in text


# ---------------------------------------------------------------- comparison


def test_identical_specs_give_identical_rows(tmp_path):
    data = leave_one_out(synth_copy_offset(2, 30, 15, 8, seed=0))
    spec = EncodingSpec("euler_adaptive")
    rows = compare_encodings(data, cfg(), [("a", spec), ("b", spec), ("c", EncodingSpec("learned_abs"))],
                             TrainConfig(steps=3, batch_size=8))
    assert rows[0].report.as_dict() | {"latency_s": 0} == rows[1].report.as_dict() | {"latency_s": 0}
    write_comparison(rows, tmp_path / "c.csv")
    table = read_csv(tmp_path / "c.csv")
    assert table[0] == COMPARE_HEADER
    assert [r[0] for r in table[1:]] == ["a", "b", "c"]


# ---------------------------------------------------------------- exports


def test_attention_export(tmp_path):
    model = SequenceEncoder(cfg(), 0)
    w = export_attention(model, [3, 1, 4, 1, 5], tmp_path / "a.csv", layer=1, head=1)
    rows = read_csv(tmp_path / "a.csv")
    assert rows[0] == ["query", "key_0", "key_1", "key_2", "key_3", "key_4"]
    assert len(rows) == 6
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.triu(w, 1) == 0)
    np.testing.assert_array_equal(attention_map(model, [3, 1, 4, 1, 5], 1, 1), w)


def test_phase_export_header_and_range(tmp_path):
    model = SequenceEncoder(cfg(), 0)
    for p in model.params.values():
        p.data = p.data + np.random.default_rng(0).normal(0, 0.5, size=p.shape)
    rows = export_phase_distribution(model, [[1, 2, 3], [4, 5, 6, 7, 8]], tmp_path / "p.csv")
    table = read_csv(tmp_path / "p.csv")
    assert table[0] == PHASE_HEADER
    assert len(rows) == len(table) - 1 == 2 * (3 + 5) * 8
    phases = np.array([r[3] for r in rows])
    assert np.all(phases > -math.pi) and np.all(phases <= math.pi)


def test_zero_embeddings_give_zero_phases(tmp_path):
    model = SequenceEncoder(cfg(), 0)
    for name, p in model.params.items():
        if not name.endswith(("ln.w", "ln1.w", "ln2.w", "delta", "pcl_w")):
            p.data = np.zeros_like(p.data)
    rows = export_phase_distribution(model, [[1, 2, 3]], tmp_path / "p.csv")
    assert all(r[3] == 0.0 for r in rows)


def test_phase_export_needs_euler_model(tmp_path):
    with pytest.raises(ValueError):
        export_phase_distribution(SequenceEncoder(cfg("rope"), 0), [[1, 2]], tmp_path / "p.csv")


def test_circular_variance():
    assert circular_variance(np.zeros(10)) == pytest.approx(0.0, abs=1e-15)
    assert circular_variance(np.array([0.0, math.pi])) == pytest.approx(1.0, abs=1e-12)


def random_content(seed=0, half=4):
    rng = np.random.default_rng(seed)
    return DecayContent(
        rng.uniform(0.5, 2, half), rng.uniform(0.5, 2, half),
        rng.uniform(-3, 3, half), rng.uniform(-3, 3, half),
        rng.uniform(0.5, 1.5, half), rng.uniform(-1, 1, half),
        FrequencySchedule.build(2 * half).g,
    )


def test_decay_curve_slope_matches_gradient(tmp_path):
    content = random_content()
    distances = np.round(np.arange(0, 20.05, 0.1), 10)
    rows = export_decay_curve(content, distances, tmp_path / "d.csv")
    assert read_csv(tmp_path / "d.csv")[0] == DECAY_HEADER
    arr = np.array(rows)
    numeric = np.diff(arr[:, 1]) / np.diff(arr[:, 0])
    midpoint = 0.5 * (arr[1:, 2] + arr[:-1, 2])
    assert np.linalg.norm(numeric - midpoint) / np.linalg.norm(midpoint) < 0.05


def test_decay_curve_zero_gradient_at_origin():
    c = random_content(1)
    c.theta_k = c.theta_q.copy()
    c.bias = np.zeros_like(c.bias)
    assert decay_curve(c, [0.0])[0][2] == 0.0


def test_decay_curve_frequency_scaling():
    c = random_content(2)
    doubled = DecayContent(**{**c.__dict__, "g": 2 * c.g})
    for D in (0.5, 3.0, 11.0):
        assert decay_curve(doubled, [D])[0][1] == pytest.approx(decay_curve(c, [2 * D])[0][1], abs=1e-12)


def test_decay_content_from_model():
    model = SequenceEncoder(cfg(), 0)
    c = decay_content(model, 3, 4, layer=1, head=1)
    assert c.lambda_q.shape == c.g.shape == (4,)
    np.testing.assert_array_equal(c.delta, 1.0)
    with pytest.raises(ValueError):
        decay_content(SequenceEncoder(cfg("alibi"), 0), 1, 2)


# ---------------------------------------------------------------- latency


def test_latency_grows_at_most_linearly_per_doubling():
    t64 = encoding_latency(64, batch=16, repeats=5)
    t128 = encoding_latency(128, batch=16, repeats=5)
    assert t128 / t64 <= 2.5
