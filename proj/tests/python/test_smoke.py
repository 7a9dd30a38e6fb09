"""Smoke tests for the python bindings."""

import itertools

import numpy as np
import pytest

import wpca


def reduced_space():
    s = wpca.SpaceSpec.tiny()
    s.m = 3
    s.n = 2
    s.embed_dim = 32
    s.dim_step = 16
    s.token_embed_dim = 16
    s.vocab_size = 211
    s.max_seq_len = 16
    s.param_cap = 1 << 60
    return s


def test_version_and_proxy_table():
    assert isinstance(wpca.__version__, str) and wpca.__version__
    names = wpca.proxies()
    assert len(names) == 11
    assert "w-pca" in names and "params" in names and "v-pca" in names


def test_presets():
    small = wpca.SpaceSpec.small()
    tiny = wpca.SpaceSpec.tiny()
    assert small.m == 12 and small.param_cap == 15_700_000
    assert tiny.m == 6 and tiny.param_cap == 10_000_000
    assert tiny.genome_count() == 12**6


def test_genome_text_roundtrip():
    assert wpca.parse_genome("0,1,2") == [0, 1, 2]
    assert wpca.format_genome([0, 1, 2]) == "0,1,2"
    with pytest.raises(ValueError):
        wpca.parse_genome("0,x,2")


def test_decode_and_params():
    space = reduced_space()
    cfg = wpca.decode_json([0, 1, 2], space)
    assert '"layers"' in cfg and '"embed_dim"' in cfg
    breakdown = wpca.param_breakdown([0, 1, 2], space)
    assert breakdown.total == wpca.genome_params([0, 1, 2], space)
    assert breakdown.total == (
        breakdown.embeddings
        + breakdown.attention
        + breakdown.ffn
        + breakdown.norms
        + breakdown.projections
    )
    assert wpca.feasible([0, 1, 2], space)
    space.param_cap = 1
    assert not wpca.feasible([0, 1, 2], space)
    with pytest.raises(ValueError):
        wpca.decode_json([9, 0, 0], space)


def test_random_batch_shape():
    batch = wpca.random_batch(2, 8, 211, seed=5)
    assert batch.b == 2 and batch.n == 8
    assert len(batch.ids) == 16
    assert all(0 <= t < 211 for t in batch.ids)


def test_score_identity():
    space = reduced_space()
    batch = wpca.random_batch(2, 8, space.vocab_size, seed=5)
    rows = wpca.score([0, 1, 2], space, ["params", "v-pca", "w-pca"], batch, eta=0.9, seed=7)
    by_name = {r.proxy: r for r in rows}
    assert by_name["params"].value == wpca.genome_params([0, 1, 2], space)
    assert by_name["w-pca"].value == by_name["params"].value * by_name["v-pca"].value
    assert by_name["w-pca"].eta == 0.9
    again = wpca.score([0, 1, 2], space, ["w-pca"], batch, eta=0.9, seed=7)
    assert again[0].value == by_name["w-pca"].value
    with pytest.raises(ValueError):
        wpca.score([0, 1, 2], space, ["bogus"], batch)


def test_search_deterministic():
    space = reduced_space()
    batch = wpca.random_batch(2, 8, space.vocab_size, seed=5)
    kwargs = dict(
        fitness="params", population=6, generations=3, seed=3, batch=batch, eta=0.99
    )
    one = wpca.search(space, **kwargs)
    two = wpca.search(space, **kwargs)
    for key in one:
        if key != "wall_seconds":
            assert one[key] == two[key]
    assert one["fitness"] == "params"
    assert one["best_fitness"] == wpca.genome_params(one["best_genome"], space)
    assert one["best_total_params"] <= space.param_cap
    assert len(one["fitness_trace"]) == 3
    exhaustive = max(
        wpca.genome_params(list(g), space) for g in itertools.product(range(4), repeat=3)
    )
    assert one["best_fitness"] <= exhaustive


def test_pca_dim_numpy():
    rng = np.random.default_rng(0)
    coef = rng.standard_normal((100, 3))
    basis = np.linalg.qr(rng.standard_normal((12, 12)))[0][:3]
    h = coef @ basis
    assert wpca.pca_dim(h, eta=0.999) == 3
    noisy = rng.standard_normal((50, 12))
    dims = [wpca.pca_dim(noisy, eta=e) for e in (0.9, 0.99, 1.0)]
    assert dims == sorted(dims)
    assert 1 <= dims[0] <= 12
    with pytest.raises(ValueError):
        wpca.pca_dim(np.zeros(4))


def test_rank_correlations():
    x = [1.0, 2.0, 3.0, 4.0]
    assert wpca.kendall_tau(x, [2.0, 4.0, 6.0, 8.0]) == 1.0
    assert wpca.kendall_tau(x, [4.0, 3.0, 2.0, 1.0]) == -1.0
    assert wpca.spearman_rho(x, [1.0, 4.0, 9.0, 16.0]) == 1.0
    with pytest.raises(ValueError):
        wpca.kendall_tau([1.0], [2.0])
