import numpy as np
import pytest

from acre import dsp, encoder, retrieval, space
from conftest import make_latent_pairs


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------- rank

def test_rank_exact_match_first():
    index = retrieval.RetrievalIndex.build(["a", "b", "c"], np.eye(3))
    result = retrieval.rank(np.array([0.0, 1.0, 0.0]), index, target_id="b")
    assert result.ranked_ids[0] == "b"
    assert result.rank_of_target == 1


def test_rank_tie_breaks_by_ascending_id():
    vecs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    index = retrieval.RetrievalIndex.build(["zz", "aa", "mm"], vecs)
    result = retrieval.rank(np.array([1.0, 0.0]), index)
    assert result.ranked_ids == ("aa", "zz", "mm")


def test_rank_returns_full_permutation():
    rng = np.random.default_rng(0)
    ids = [f"c{i:02d}" for i in range(17)]
    index = retrieval.RetrievalIndex.build(ids, rng.normal(size=(17, 6)))
    result = retrieval.rank(rng.normal(size=6), index)
    assert sorted(result.ranked_ids) == sorted(ids)


def test_rank_matches_sort_by_scalar_loop_oracle():
    rng = np.random.default_rng(4)
    ids = [f"c{i:02d}" for i in range(20)]
    vecs = rng.normal(size=(20, 8))
    q = rng.normal(size=8)
    index = retrieval.RetrievalIndex.build(ids, vecs)
    got = retrieval.rank(q, index).ranked_ids
    sims = {}
    for cid, v in zip(ids, vecs):
        sims[cid] = float(np.dot(unit(v), unit(q)))
    expected = tuple(sorted(ids, key=lambda c: (-sims[c], c)))
    assert got == expected


def test_rank_errors():
    index = retrieval.RetrievalIndex.build(["a"], np.ones((1, 3)))
    with pytest.raises(retrieval.DimMismatch):
        retrieval.rank(np.ones(4), index)
    with pytest.raises(retrieval.UnknownTargetId):
        retrieval.rank(np.ones(3), index, target_id="nope")
    with pytest.raises(retrieval.EmptyIndex):
        retrieval.RetrievalIndex.build([], np.zeros((0, 3)))


def test_index_rows_are_unit_norm():
    rng = np.random.default_rng(1)
    index = retrieval.RetrievalIndex.build(["a", "b"], rng.normal(size=(2, 5)) * 100)
    assert np.allclose(np.linalg.norm(index.vectors, axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- metrics

@pytest.mark.parametrize("r,expected", [(1, 1.0), (2, 0.5), (10, 0.1), (11, 0.0), (500, 0.0)])
def test_average_precision_truncation(r, expected):
    assert retrieval.average_precision_at_10(r) == expected


def orthogonal_queries_with_ranks(ranks):
    """Build an index and queries whose target lands at the requested rank."""
    m = max(ranks) + 1
    ids = [f"c{i:03d}" for i in range(m)]
    index = retrieval.RetrievalIndex.build(ids, np.eye(m))
    queries = []
    for qi, r in enumerate(ranks):
        # query aligned with r-1 decoys more than with the target
        v = np.zeros(m)
        target = ids[-1 - qi]
        t_idx = ids.index(target)
        v[t_idx] = 0.5
        decoys = [i for i in range(m) if i != t_idx][: r - 1]
        for d in decoys:
            v[d] = 1.0
        queries.append(retrieval.Query(f"q{qi}", v, target))
    return queries, index


def test_evaluate_hand_case():
    queries, index = orthogonal_queries_with_ranks([1, 2, 11, 20])
    report = retrieval.evaluate(queries, index)
    assert report.map_at_10 == pytest.approx(0.375)
    assert report.r_at_1 == 0.25
    assert report.r_at_5 == 0.5
    assert report.r_at_10 == 0.5
    assert report.n_queries == 4


def test_evaluate_all_rank_one():
    ids = ["a", "b", "c"]
    index = retrieval.RetrievalIndex.build(ids, np.eye(3))
    queries = [retrieval.Query(f"q{i}", np.eye(3)[i], ids[i]) for i in range(3)]
    report = retrieval.evaluate(queries, index)
    assert (report.map_at_10, report.r_at_1, report.r_at_5, report.r_at_10) == (1.0, 1.0, 1.0, 1.0)


def brute_force_report(queries, index):
    """Independent recomputation of every metric from raw similarities."""
    per_query = {}
    for q in queries:
        sims = [(float(np.dot(unit(v), unit(q.vector))), cid) for cid, v in zip(index.ids, index.vectors)]
        ordered = sorted(sims, key=lambda t: (-t[0], t[1]))
        per_query[q.query_id] = [cid for _, cid in ordered].index(q.target_id) + 1
    ap = 0.0
    h1 = h5 = h10 = 0
    for qid in sorted(per_query):
        r = per_query[qid]
        ap += (1.0 / r) if r <= 10 else 0.0
        h1 += r <= 1
        h5 += r <= 5
        h10 += r <= 10
    n = len(per_query)
    return (ap / n, h1 / n, h5 / n, h10 / n)


def test_evaluate_matches_brute_force_oracle_exactly():
    rng = np.random.default_rng(99)
    ids = [f"c{i:03d}" for i in range(30)]
    index = retrieval.RetrievalIndex.build(ids, rng.normal(size=(30, 12)))
    queries = [
        retrieval.Query(f"q{k:03d}", rng.normal(size=12), ids[int(rng.integers(30))]) for k in range(50)
    ]
    report = retrieval.evaluate(queries, index)
    expected = brute_force_report(queries, index)
    assert (report.map_at_10, report.r_at_1, report.r_at_5, report.r_at_10) == expected


def test_evaluate_invariant_to_query_and_index_order():
    rng = np.random.default_rng(5)
    ids = [f"c{i:02d}" for i in range(12)]
    vecs = rng.normal(size=(12, 7))
    queries = [retrieval.Query(f"q{k}", rng.normal(size=7), ids[k]) for k in range(12)]
    a = retrieval.evaluate(queries, retrieval.RetrievalIndex.build(ids, vecs))
    perm = rng.permutation(12)
    shuffled_index = retrieval.RetrievalIndex.build([ids[i] for i in perm], vecs[perm])
    b = retrieval.evaluate(list(reversed(queries)), shuffled_index)
    assert a == b


def test_untrained_heads_score_at_chance_level():
    # 100 clips of pure noise through random heads: expected mAP@10 is the
    # mean truncated reciprocal rank of a uniform permutation,
    # sum(1/r for r <= 10) / 100 ~= 0.029; the band allows seed noise
    rng = np.random.default_rng(17)
    pairs = [
        space.TrainPair(f"c{i:03d}", rng.normal(size=24), (rng.normal(size=20),)) for i in range(100)
    ]
    audio_head = space.ProjectionHead.initialize(24, 48, rng)
    text_head = space.ProjectionHead.initialize(20, 48, rng)
    queries, index = retrieval.build_eval(pairs, audio_head, text_head)
    report = retrieval.evaluate(queries, index)
    assert 0.01 <= report.map_at_10 <= 0.12


def test_metrics_report_invariants():
    with pytest.raises(ValueError):
        retrieval.MetricsReport(map_at_10=0.5, r_at_1=0.9, r_at_5=0.5, r_at_10=0.9, n_queries=1)
    with pytest.raises(ValueError):
        retrieval.MetricsReport(map_at_10=0.95, r_at_1=0.1, r_at_5=0.5, r_at_10=0.9, n_queries=1)


def test_report_formats():
    report = retrieval.MetricsReport(0.375, 0.25, 0.5, 0.5, 4)
    table = retrieval.format_metrics_table(report)
    assert "mAP@10" in table and "0.3750" in table
    csv = retrieval.metrics_csv(report)
    assert csv.splitlines()[0] == "metric,value"
    assert "map_at_10,0.375" in csv


# ---------------------------------------------------------------- ablation

def fast_cfg(seed=0):
    return space.TrainConfig(
        batch_size=32, pretrain_epochs=30, warmup_epochs=1, lr_max=1e-2, lr_min=1e-5, out_dim=32, seed=seed
    )


def test_ablation_single_combo_row():
    train_pairs, eval_pairs = make_latent_pairs(0, n_train=64, n_eval=16)
    rows = retrieval.ablation_run({"A": train_pairs}, [("A",)], eval_pairs, fast_cfg())
    assert len(rows) == 1
    assert rows[0].datasets == ("A",)
    assert 0.0 <= rows[0].map_at_10 <= 1.0


def test_ablation_combined_data_helps():
    # A and B drawn from one latent model; the union cannot hurt a linear probe
    deltas = []
    for seed in (0, 1, 2):
        train_pairs, eval_pairs = make_latent_pairs(seed, n_train=128, n_eval=24)
        datasets = {"A": train_pairs[:64], "B": train_pairs[64:]}
        rows = retrieval.ablation_run(
            datasets, [("A",), ("B",), ("A", "B")], eval_pairs, fast_cfg(seed)
        )
        scores = {row.datasets: row.map_at_10 for row in rows}
        deltas.append(scores[("A", "B")] - max(scores[("A",)], scores[("B",)]))
    assert sorted(deltas)[1] >= -0.02


def test_ablation_table_footer_mentions_reference():
    rows = [retrieval.AblationRow(("A", "B"), 0.5)]
    table = retrieval.format_ablation_table(rows)
    assert "35.22" in table and "not reproducible" in table
    assert retrieval.ablation_csv(rows).splitlines()[1] == "A+B,0.5"


def test_ablation_unknown_dataset():
    with pytest.raises(KeyError):
        retrieval.ablation_run({"A": []}, [("B",)], [], fast_cfg())


# ---------------------------------------------------------------- sweep

def tone_clip(clip_id, seconds, freq, caption_dim=16, seed=0):
    t = np.arange(int(seconds * 32000)) / 32000
    w = dsp.Waveform(0.4 * np.sin(2 * np.pi * freq * t), 32000)
    rng = np.random.default_rng(seed)
    return retrieval.SweepClip(clip_id, w, (rng.normal(size=caption_dim),))


@pytest.fixture(scope="module")
def sweep_setup():
    clips = [tone_clip(f"c{i}", 30.0, 300 + 150 * i, seed=i) for i in range(4)]
    params = encoder.EncoderParams(seed=2)
    geometry = encoder.PRESETS["passt-n"]
    rng = np.random.default_rng(8)
    audio_head = space.ProjectionHead.initialize(64, 24, rng)
    text_head = space.ProjectionHead.initialize(16, 24, rng)
    stats = dsp.WhiteningStats(-10.0, 6.0)
    return clips, audio_head, text_head, params, geometry, stats


def test_sweep_segment_counts(sweep_setup):
    clips, audio_head, text_head, params, geometry, stats = sweep_setup
    rows = retrieval.segment_length_sweep([10.0], clips, audio_head, text_head, params, geometry, stats)
    # 30 s -> 2997 frames -> three 1000-frame segments per clip
    assert rows[0].segments_per_clip == (3, 3, 3, 3)


def test_sweep_multiple_lengths_shape(sweep_setup):
    clips, audio_head, text_head, params, geometry, stats = sweep_setup
    rows = retrieval.segment_length_sweep([2.0, 10.0], clips, audio_head, text_head, params, geometry, stats)
    assert [r.length_seconds for r in rows] == [2.0, 10.0]
    assert all(np.isfinite(r.map_at_10) for r in rows)
    assert rows[0].segments_per_clip == (15, 15, 15, 15)


def test_sweep_full_length_equals_unsegmented(sweep_setup):
    _, audio_head, text_head, params, geometry, stats = sweep_setup
    # duration chosen so the spectrogram length is an exact multiple of the hop rate
    samples = 1024 + (1500 - 1) * 320
    seconds = samples / 32000
    t = np.arange(samples) / 32000
    clips = [
        retrieval.SweepClip(
            f"c{i}",
            dsp.Waveform(0.3 * np.sin(2 * np.pi * (200 + 100 * i) * t), 32000),
            (np.random.default_rng(i).normal(size=16),),
        )
        for i in range(3)
    ]
    rows = retrieval.segment_length_sweep([15.0], clips, audio_head, text_head, params, geometry, stats)
    assert rows[0].segments_per_clip == (1, 1, 1)

    # no-segmentation baseline: encode the whole spectrogram in one grid
    vecs = []
    for clip in clips:
        spec = dsp.whiten(dsp.logmel(clip.waveform), stats)
        assert spec.frames == 1500 and dsp.seconds_to_frames(15.0) == 1500
        vecs.append(encoder.audio_encode(encoder.extract_patches(spec, geometry), params))
    index = retrieval.RetrievalIndex.build([c.clip_id for c in clips], space.project(np.stack(vecs), audio_head))
    queries = [
        retrieval.Query(f"{c.clip_id}#0", space.project(c.caption_vecs[0], text_head), c.clip_id) for c in clips
    ]
    baseline = retrieval.evaluate(queries, index)
    assert abs(rows[0].map_at_10 - baseline.map_at_10) < 1e-9
