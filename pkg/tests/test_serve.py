import pytest
import torch

from hisam.hmat import HMAT, ModelConfig
from hisam.seqstream import TokenKind, Vocab, build_stream, item_segment
from hisam.serve import (BlockTooLongError, CoordinateError, _score_uncached, bench_model, bench_serving,
                         history_keys, incremental_decode, ma_visible_pairs, new_cache, prefill, random_stream,
                         rank_candidates, rank_one_pass)

VOCAB = Vocab(6, 16)


@pytest.fixture(scope="module")
def model():
    return bench_model(VOCAB, width=32).eval()


def stream(K, seed=0):
    return random_stream(K, 6, VOCAB, torch.Generator().manual_seed(seed))


def test_cache_keeps_profile_and_anchors(model):
    s = stream(3)
    cache = prefill(model, s)
    assert len(s) == 30 and len(cache) == 9
    entries = cache.entries(0)
    assert [e.kind for e in entries] == [TokenKind.PROFILE] * 6 + [TokenKind.ANCHOR] * 3
    assert [(e.m, e.n) for e in entries[6:]] == [(1, 7), (2, 7), (3, 7)]
    assert cache.n_items == 3 and cache.at_boundary
    cfg = model.cfg
    assert cache.nbytes() == 9 * cfg.n_layers * 2 * cfg.n_kv_heads * cfg.head_dim * 4


def test_profile_only_cache(model):
    cache = prefill(model, stream(0), token_by_token=True)
    assert len(cache) == 6 and cache.n_items == 0
    assert cache.visible_pairs == ma_visible_pairs(6, 0, 6) == 21


@pytest.mark.parametrize("K", [1, 2, 5])
def test_decode_pair_count_matches_formula(model, K):
    assert prefill(model, stream(K), token_by_token=True).visible_pairs == ma_visible_pairs(6, K, 6)


def test_incremental_matches_dense(model):
    s = stream(4, 3)
    cache = new_cache(model)
    got = torch.cat([incremental_decode(model, cache, s.tokens[i:i + 5]) for i in range(0, len(s), 5)])
    with torch.no_grad():
        want = model.forward_stream(s)
    assert torch.allclose(got, want, atol=1e-5)


def test_cache_mid_item_keeps_segment_until_action(model):
    s = stream(2)
    cache = prefill(model, type(s)(s.tokens[:-1]))  # ends at the second Anchor
    assert len(cache) == 6 + 1 + 7 and not cache.at_boundary
    with pytest.raises(CoordinateError):
        rank_one_pass(model, cache, [[0] * 6], VOCAB)
    incremental_decode(model, cache, [s.tokens[-1]])
    assert len(cache) == 8 and cache.at_boundary


def test_out_of_order_coordinates_rejected(model):
    s = stream(2)
    cache = prefill(model, s)
    with pytest.raises(CoordinateError):
        incremental_decode(model, cache, [s.tokens[-1]])
    with pytest.raises(CoordinateError):
        incremental_decode(model, new_cache(model), [s.tokens[7], s.tokens[6]])


def test_one_pass_matches_uncached(model):
    s = stream(3, 5)
    cands = [[(i * 3 + k) % 16 for k in range(6)] for i in range(5)]
    got = rank_one_pass(model, prefill(model, s), cands, VOCAB)
    assert got == pytest.approx(_score_uncached(model, s, cands, VOCAB), abs=1e-6)
    assert rank_one_pass(model, prefill(model, s), cands[::-1], VOCAB) == pytest.approx(got[::-1], abs=1e-6)


def test_ranking_does_not_touch_the_cache(model):
    cache = prefill(model, stream(2))
    before = (len(cache), cache.last, cache.visible_pairs)
    rank_one_pass(model, cache, [[1] * 6, [2] * 6], VOCAB)
    assert (len(cache), cache.last, cache.visible_pairs) == before


def test_block_too_long_and_chunking():
    small = HMAT(ModelConfig(vocab_size=VOCAB.size, width=16, n_layers=1, n_heads=2, n_kv_heads=1, max_len=40),
                 seed=1).eval()
    s = stream(2, 1)
    cache = prefill(small, s)  # 8 entries, leaves room for 4 candidates of 7 tokens
    cands = [[i % 16] * 6 for i in range(10)]
    with pytest.raises(BlockTooLongError):
        rank_one_pass(small, cache, cands, VOCAB)
    chunked = rank_candidates(small, cache, cands, VOCAB)
    single = [rank_one_pass(small, cache, [c], VOCAB)[0] for c in cands]
    assert chunked == pytest.approx(single, abs=1e-6)
    assert rank_candidates(small, cache, cands, VOCAB, max_candidates=3) == pytest.approx(chunked, abs=1e-6)


def test_empty_candidates(model):
    with pytest.raises(ValueError):
        rank_one_pass(model, prefill(model, stream(1)), [], VOCAB)


def test_evict_segment_zero_is_noop(model):
    cache = prefill(model, stream(1))
    n = len(cache)
    cache.evict_segment(0)
    assert len(cache) == n


def test_history_keys():
    assert history_keys(6, 10, 6) == {"memory_anchor": 16, "full_stream": 86, "flat_codes": 66}


def test_ma_visible_pairs_hand_case():
    # L_u=1, one item with one code: profile sees 1; code sees 2; anchor 3; action 4
    assert ma_visible_pairs(1, 1, 1) == 10
    # second item: each of its 3 tokens sees profile + 1 anchor + own prefix
    assert ma_visible_pairs(1, 2, 1) == 10 + (3 + 4 + 5)


def test_bench_rows(model):
    rows = bench_serving(model, VOCAB, [(0, 6, 2), (4, 6, 3)], repeats=1)
    for r in rows:
        assert r.ma_pairs_counted == r.ma_pairs_formula == r.decode_pairs
        assert r.cache_entries == 6 + r.K
        assert r.full_pairs >= r.ma_pairs_counted
    assert rows[1].history_ratio_full == pytest.approx((6 + 4 * 8) / 10)
    with pytest.raises(ValueError):
        bench_serving(model, VOCAB, [(1, 7, 1)])


def test_item_segment_matches_stream_layout():
    s = build_stream([], [([1, 2, 3, 4, 5, 6], 1)], VOCAB)
    assert item_segment([1, 2, 3, 4, 5, 6], 1, VOCAB) == list(s.tokens[:-1])
