import math
import random
import struct

import numpy as np
import pytest

from beeplan.errors import (
    BadDistribution,
    CorruptOffsets,
    DimMismatch,
    IndexOutOfRegion,
    NotFp16,
    ParseError,
    ShapeMismatch,
)
from beeplan.specdec import (
    CandidateScore,
    KvCache,
    KvCacheState,
    MlpScorer,
    PackedBatch,
    PruneConfig,
    decode_packed,
    encode_packed,
    kv_append,
    kv_commit,
    kv_compact,
    kv_visible,
    load_mlp,
    pack,
    prune,
    prune_request,
    retention_threshold,
    save_mlp,
    score_candidates,
    unpack,
)

P = np.array([0.5, 0.3, 0.2])


def test_confidence_scores():
    scores = score_candidates(P, [0, 2])
    assert [s.candidate_id for s in scores] == [0, 2]
    assert [s.score for s in scores] == [0.5, 0.2]
    top, mine, entropy = scores[1].features
    assert top == 0.5 and mine == 0.2
    expect = -sum(p * math.log2(p) for p in P)
    assert entropy == pytest.approx(expect)


def test_per_candidate_distributions():
    rows = np.array([[1.0, 0.0], [0.25, 0.75]])
    scores = score_candidates(rows, [0, 0])
    assert [s.score for s in scores] == [1.0, 0.25]
    # A one-hot distribution has no entropy.
    assert scores[0].features[2] == 0.0


@pytest.mark.parametrize(
    "p, error",
    [
        (np.array([0.5, 0.4]), BadDistribution),
        (np.array([1.2, -0.2]), BadDistribution),
        (np.ones((3, 2)) / 2, ShapeMismatch),
    ],
)
def test_score_errors(p, error):
    with pytest.raises(error):
        score_candidates(p, [0, 1])


def test_candidate_out_of_vocabulary():
    with pytest.raises(ShapeMismatch):
        score_candidates(P, [3])


def test_mlp_scorer():
    # All-zero weights put every candidate at sigmoid(0).
    cfg = PruneConfig(scorer=MlpScorer.zeros())
    scores = score_candidates(P, [0, 1, 2], cfg)
    assert [s.score for s in scores] == pytest.approx([0.5, 0.5, 0.5])


def test_mlp_weights_round_trip():
    rng = np.random.default_rng(0)
    scorer = MlpScorer(
        rng.standard_normal((3, 8)).astype(np.float32),
        rng.standard_normal(8).astype(np.float32),
        rng.standard_normal((8, 1)).astype(np.float32),
        rng.standard_normal(1).astype(np.float32),
    )
    again = load_mlp(save_mlp(scorer))
    for a, b in zip(
        (scorer.w1, scorer.b1, scorer.w2, scorer.b2),
        (again.w1, again.b1, again.w2, again.b2),
    ):
        assert np.array_equal(a, b)
    feats = np.array([[0.5, 0.3, 1.2], [0.9, 0.9, 0.1]], dtype=np.float32)
    assert np.array_equal(scorer(feats), again(feats))


def test_mlp_file_errors():
    good = save_mlp(MlpScorer.zeros(4))
    with pytest.raises(ParseError):
        load_mlp(b"NOPE" + good[4:])
    with pytest.raises(ParseError):
        load_mlp(good[:8])
    with pytest.raises(ShapeMismatch):
        load_mlp(good[:-4])
    with pytest.raises(ShapeMismatch):
        load_mlp(struct.pack("<4sIII", b"BBMS", 4, 4, 1) + good[16:])


def test_prune():
    scores = score_candidates(P, [0, 1, 2])
    assert prune(scores, 0.3) == [0, 1]
    assert prune(scores, 0.0) == [0, 1, 2]
    assert prune(scores, 0.9) == []
    # A request always keeps its best candidate.
    assert prune_request(scores, 0.9) == [0]
    assert prune_request([], 0.9) == []


def test_retention_threshold():
    scores = [0.9, 0.1, 0.5, 0.7]
    assert retention_threshold(scores, 0.5) == 0.7
    assert retention_threshold(scores, 0.6) == 0.5
    assert retention_threshold(scores, 1.0) == 0.1
    assert retention_threshold(scores, 0.01) == 0.9


def random_requests(rng, dim):
    return [
        [
            rng.standard_normal(dim).astype(np.float16)
            for _ in range(int(rng.integers(0, 5)))
        ]
        for _ in range(int(rng.integers(0, 6)))
    ]


def same_layout(a, b):
    return len(a) == len(b) and all(
        len(x) == len(y) and all(np.array_equal(u, v) for u, v in zip(x, y))
        for x, y in zip(a, b)
    )


def test_pack_unpack_randomized():
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        dim = int(rng.integers(1, 9))
        reqs = random_requests(rng, dim)
        pb = pack(reqs, dim)
        assert pb.payload.shape == (1, sum(len(r) for r in reqs), dim)
        assert pb.counts == [len(r) for r in reqs]
        assert same_layout(unpack(pb), reqs)


def test_packed_wire_encoding():
    rng = np.random.default_rng(5)
    for _ in range(200):
        dim = int(rng.integers(1, 9))
        reqs = random_requests(rng, dim)
        pb = pack(reqs, dim)
        buf = encode_packed(pb)
        (count,) = struct.unpack_from("<I", buf)
        assert count == len(reqs) + 1
        assert same_layout(unpack(decode_packed(buf)), reqs)


def test_pack_example():
    reqs = [[np.ones(2), np.zeros(2)], [], [np.full(2, 3.0)]]
    pb = pack(reqs)
    assert pb.offsets.tolist() == [0, 2, 2, 3]
    assert pb.dim == 2
    assert pb.payload.dtype == np.float16
    assert encode_packed(pb)[:20] == struct.pack("<IIIII", 4, 0, 2, 2, 3)


def test_pack_dim_mismatch():
    with pytest.raises(DimMismatch):
        pack([[np.zeros(4)], [np.zeros(3)]])
    with pytest.raises(DimMismatch):
        pack([[np.zeros(4)]], dim=8)


def test_pack_refuses_lossy_vectors():
    for bad in ([0.1, 1.0], [1e-9, 0.0], [70000.0, 0.0]):
        with pytest.raises(NotFp16):
            pack([[np.array(bad, dtype=np.float32)]])
    with pytest.raises(NotFp16):
        pack([[np.array([1, 2])]])
    # Values FP16 holds exactly pass through from any float dtype.
    exact = np.array([0.5, -2.0, np.inf, 65504.0], dtype=np.float32)
    (vectors,) = unpack(pack([[exact]]))
    assert vectors[0].dtype == np.float16
    assert np.array_equal(vectors[0], exact)


def test_corrupt_offsets():
    payload = np.zeros((1, 3, 2), dtype=np.float16)
    for offsets in ([0, 2], [1, 3], [0, 2, 1, 3], []):
        pb = PackedBatch(payload, np.asarray(offsets, dtype=np.int64))
        with pytest.raises(CorruptOffsets):
            unpack(pb)
    buf = encode_packed(pack([[np.zeros(2)] * 3]))
    with pytest.raises(CorruptOffsets):
        decode_packed(buf[:-1])
    with pytest.raises(CorruptOffsets):
        decode_packed(buf[:6])


class FlatKv:
    """The KV cache as two plain lists."""

    def __init__(self):
        self.committed = []
        self.pending = []
        self.next = 0

    def append(self, n):
        self.pending += list(range(self.next, self.next + n))
        self.next += n

    def commit(self, accepted):
        self.committed += [t for k, t in enumerate(self.pending) if k in accepted]
        self.pending = []

    def visible(self):
        return self.committed + self.pending


def test_kv_matches_flat_oracle():
    rng = random.Random(3)
    for _ in range(1000):
        state, oracle = KvCacheState(), FlatKv()
        for _ in range(100):
            op = rng.random()
            if op < 0.5:
                n = rng.randint(0, 3)
                state = kv_append(state, n)
                oracle.append(n)
            elif op < 0.85:
                accepted = {k for k in range(state.new_len) if rng.random() < 0.6}
                state = kv_commit(state, sorted(accepted))
                oracle.commit(accepted)
            else:
                state = kv_compact(state)
                assert state.hole_len == 0 and not state.holes
            assert kv_visible(state) == oracle.visible()
            assert state.committed_len == len(oracle.committed)
            assert int(state.attention_mask().sum()) == len(oracle.visible())


def test_kv_commit_outside_new_region():
    state = kv_append(KvCacheState(), 2)
    with pytest.raises(IndexOutOfRegion):
        kv_commit(state, [2])
    with pytest.raises(IndexOutOfRegion):
        kv_commit(state, [-1])


def test_kv_example():
    state = kv_append(KvCacheState(), 4, ["a", "b", "c", "d"])
    state = kv_commit(state, [0, 2])
    assert state.holes == frozenset({1, 3})
    assert kv_visible(state) == ["a", "c"]
    assert state.attention_mask().tolist() == [True, False, True, False]
    state = kv_append(state, 1, ["e"])
    state = kv_compact(state)
    assert state.entries == ("a", "c", "e")
    assert (state.prefix_len, state.hole_len, state.new_len) == (2, 0, 1)


def test_kv_cache_background_compaction():
    oracle = FlatKv()
    with KvCache() as cache:
        rng = random.Random(8)
        for _ in range(200):
            n = rng.randint(1, 4)
            cache.append(n)
            oracle.append(n)
            accepted = {k for k in range(n) if rng.random() < 0.5}
            cache.commit(sorted(accepted))
            oracle.commit(accepted)
            cache.compact_async()
            # Appends and reads do not wait for the compaction.
            cache.append(1)
            oracle.append(1)
            assert cache.visible() == oracle.visible()
            cache.commit([0])
            oracle.commit({0})
        cache.compact()
        assert cache.state.hole_len == 0
        assert cache.visible() == oracle.visible()


def test_entropy_feature_example():
    (score,) = score_candidates(np.array([0.5, 0.25, 0.25]), [0])
    assert score.features == (0.5, 0.5, 1.5)
    assert score.score == 0.5


def test_prune_example():
    values = [0.9, 0.2, 0.5]
    scores = [CandidateScore(k, (0.0, 0.0, 0.0), s) for k, s in enumerate(values)]
    assert prune(scores, 0.4) == [0, 2]
    assert prune(scores, 1.0) == []


def test_pack_offsets_are_prefix_sums():
    reqs = [[np.zeros(4)] * n for n in (3, 1, 2)]
    pb = pack(reqs)
    assert pb.offsets.tolist() == [0, 3, 4, 6]
    assert pb.payload.size == 6 * 4


def test_keeping_top_scores_keeps_accepted_candidates():
    # Synthetic drafts whose acceptance grows steeply with their score.
    rng = np.random.default_rng(2)
    scores = rng.random(100_000)
    accepted = rng.random(scores.size) < scores**8
    tau = retention_threshold(scores.tolist(), 0.4)
    kept = scores >= tau
    assert kept.mean() == pytest.approx(0.4, abs=1e-3)
    assert accepted[kept].sum() / accepted.sum() >= 0.96
