import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hisam.cga import AlignConfig, AlignedCorpus, train_alignment
from hisam.dmrq import (PSGR, CodebookStack, DMRQConfig, Fuse, VariationalEstimator, dmrq_loss, encode,
                        fit_estimator_step, fuse, kmeans_pp, linear_cka, load_stack, make_estimators,
                        nearest_entry, quantize_specific, read_codes, reconstruct, residual_quantize_shared,
                        save_stack, shared_specific_cka, tokenize, train_dmrq, vclub_estimate, write_codes)
from hisam.ingest import SyntheticSpec, synth_corpus
from hisam.tensorio import FormatError


def test_fuse_mean():
    e = torch.eye(4)
    assert torch.equal(fuse(torch.stack([e[0], e[1]])), torch.tensor([0.5, 0.5, 0.0, 0.0]))
    v = torch.randn(4)
    assert torch.allclose(fuse(torch.stack([v, v])), v)


def test_linear_fuse_starts_at_mean():
    z = torch.randn(5, 3, 4)
    assert torch.allclose(Fuse(3, 4, "linear")(z), z.mean(1), atol=1e-6)


def test_two_entry_residual_hand_case():
    books = [torch.tensor([[1.0, 0.0], [0.0, 1.0]])]
    codes, z_hat, r = residual_quantize_shared(torch.tensor([[0.9, 0.2]]), books)
    assert codes.tolist() == [[0]]
    assert torch.allclose(r, torch.tensor([[-0.1, 0.2]], dtype=torch.float64))
    assert torch.allclose(z_hat, torch.tensor([[1.0, 0.0]], dtype=torch.float64))


def test_exact_entry_zeroes_residual():
    f = torch.tensor([[0.3, -0.7, 0.2]])
    books = [torch.cat([torch.randn(3, 3), f]), torch.randn(4, 3)]
    codes, _, r = residual_quantize_shared(f, books)
    assert codes[0, 0] == 3
    assert codes[0, 1] == nearest_entry(torch.zeros(1, 3), books[1])[0]


def test_zero_codebooks_keep_everything_in_the_residual():
    f = torch.randn(4, 3)
    codes, z_hat, r = residual_quantize_shared(f, [torch.zeros(5, 3)] * 3)
    assert codes.eq(0).all() and z_hat.eq(0).all() and torch.equal(r, f.double())


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 64), st.integers(1, 6), st.integers(0, 10_000))
def test_nearest_entry_is_exhaustive_argmin(V, d, seed):
    g = torch.Generator().manual_seed(seed)
    entries = torch.randn(V, d, generator=g)
    x = torch.randn(8, d, generator=g)
    got = nearest_entry(x, entries)
    dist = ((x[:, None].double() - entries.double()) ** 2).sum(-1)
    for row, c in zip(dist, got):
        assert row[c] == row.min() and int(c) == int(torch.nonzero(row == row.min())[0])


def test_specific_quantizer_ties_and_exact_hits():
    book = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0]])
    code, q = quantize_specific(torch.tensor([0.0, 0.0]), book)
    assert code == 0  # equidistant from entries 0 and 1
    code, q = quantize_specific(torch.tensor([0.0, 2.0]), book)
    assert code == 2 and torch.equal(q, book[2])


def test_psgr_single_head_ignores_probe():
    psgr = PSGR(4, 1, generator=torch.Generator().manual_seed(0))
    r = torch.randn(3, 4)
    a = psgr(r, torch.randn(3, 4))
    b = psgr(r, torch.randn(3, 4))
    assert torch.allclose(a, b)
    assert torch.allclose(a, psgr.o(psgr.v(r)))


def test_psgr_matches_hand_reference():
    psgr = PSGR(4, 2)
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for lin in (psgr.q, psgr.k, psgr.v, psgr.o):
            lin.weight.copy_(torch.randn(4, 4, generator=g))
            lin.bias.copy_(torch.randn(4, generator=g))
    r = torch.randn(4, generator=g)
    p = torch.randn(4, generator=g)

    def lin(layer, x):
        return [sum(layer.weight[i, j].item() * x[j] for j in range(4)) + layer.bias[i].item() for i in range(4)]

    q, k, v = lin(psgr.q, p.tolist()), lin(psgr.k, r.tolist()), lin(psgr.v, r.tolist())
    scores = [(q[0] * k[0] + q[1] * k[1]) / math.sqrt(2), (q[2] * k[2] + q[3] * k[3]) / math.sqrt(2)]
    w = [math.exp(s) / sum(math.exp(t) for t in scores) for s in scores]
    gated = [w[0] * v[0], w[0] * v[1], w[1] * v[2], w[1] * v[3]]
    want = lin(psgr.o, gated)
    assert torch.allclose(psgr(r, p), torch.tensor(want), atol=1e-6)


def test_psgr_same_probe_same_output():
    psgr = PSGR(8, 4, generator=torch.Generator().manual_seed(1))
    r, p = torch.randn(8), torch.randn(8)
    assert torch.equal(psgr(r, p), psgr(r, p))


def test_vclub_single_sample_is_zero():
    est = VariationalEstimator(3, 8, generator=torch.Generator().manual_seed(0))
    assert vclub_estimate(torch.randn(1, 3), torch.randn(1, 3), est).item() == 0.0


def test_vclub_matches_two_term_formula():
    est = VariationalEstimator(3, 8, generator=torch.Generator().manual_seed(0)).double()
    x, z = torch.randn(5, 3, dtype=torch.float64), torch.randn(5, 3, dtype=torch.float64)
    mu, logvar = (t.detach() for t in est.params(z))

    def logq(xl, k):
        return sum(-0.5 * ((xl[i] - mu[k, i]) ** 2 / math.exp(logvar[k, i]) + logvar[k, i] + math.log(2 * math.pi))
                   for i in range(3)).item()

    pos = sum(logq(x[k], k) for k in range(5)) / 5
    allp = sum(logq(x[l], k) for k in range(5) for l in range(5)) / 25
    assert vclub_estimate(z, x, est).item() == pytest.approx(pos - allp, abs=1e-9)


def test_estimator_step_with_zero_lr_changes_nothing():
    est = VariationalEstimator(3, 8, generator=torch.Generator().manual_seed(0))
    before = [p.clone() for p in est.parameters()]
    fit_estimator_step(est, torch.randn(16, 3), torch.randn(16, 3), torch.optim.SGD(est.parameters(), lr=0.0))
    assert all(torch.equal(a, b) for a, b in zip(before, est.parameters()))
    with pytest.raises(ValueError):
        fit_estimator_step(est, torch.zeros(0, 3), torch.zeros(0, 3), torch.optim.SGD(est.parameters(), lr=0.0))


def test_estimator_likelihood_rises_on_linear_dependence():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(256, 4, generator=g)
    x = z @ torch.randn(4, 4, generator=g) + 0.1 * torch.randn(256, 4, generator=g)
    est = VariationalEstimator(4, 32, generator=torch.Generator().manual_seed(1))
    opt = torch.optim.SGD(est.parameters(), lr=1e-3)
    lls = [fit_estimator_step(est, z, x, opt) for _ in range(100)]
    assert all(b > a for a, b in zip(lls, lls[1:]))


def test_perfect_reconstruction_has_zero_loss():
    # identical modality vectors stored in the shared codebook leave a zero residual;
    # PSGR maps zero to zero (value/output biases start at 0) and a zero specific entry quantizes it exactly
    v = torch.nn.functional.normalize(torch.randn(3, 4), dim=-1)
    z = v[:, None].repeat(1, 2, 1)
    stack = CodebookStack(1, 2, 3, 4, 2, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        stack.shared[0].copy_(v)
        for book in stack.specific:
            book[0].zero_()
    total, parts = dmrq_loss(z, stack, None, lam=0.0)
    assert parts["reconstruction"].item() == 0.0
    assert parts["vq_shared"].item() == 0.0 and parts["vq_specific"].item() == 0.0
    assert total.item() == 0.0


def test_component_sum_matches_independent_recomputation():
    g = torch.Generator().manual_seed(5)
    stack = CodebookStack(2, 3, 6, 8, 2, generator=g)
    est = make_estimators(3, 8, DMRQConfig(estimator_hidden=8))
    z = torch.nn.functional.normalize(torch.randn(10, 3, 8, generator=g), dim=-1)
    beta, lam, gamma = 0.7, 0.3, 0.25
    total, parts = dmrq_loss(z, stack, est, beta, lam, gamma)

    zd = z.double()
    f = zd.mean(1)
    r = f.clone()
    z_hat = torch.zeros_like(f)
    vq_sh = 0.0
    for book in stack.shared:
        b = book.detach().double()
        e = b[((r[:, None] - b) ** 2).sum(-1).argmin(-1)]
        vq_sh += (1 + gamma) * ((r - e) ** 2).sum(-1).mean().item()
        z_hat, r = z_hat + e, r - e
    recon, vq_sp = 0.0, 0.0
    mi = 0.0
    with torch.no_grad():
        for j in range(3):
            sp = stack.psgr(r.float(), z[:, j]).double()
            b = stack.specific[j].detach().double()
            e = b[((sp[:, None] - b) ** 2).sum(-1).argmin(-1)]
            recon += ((zd[:, j] - z_hat - e) ** 2).sum(-1).mean().item()
            vq_sp += (1 + gamma) * ((sp - e) ** 2).sum(-1).mean().item()
            mi += vclub_estimate(z_hat, sp, est[j]).item()
    assert parts["reconstruction"].item() == pytest.approx(recon, abs=1e-6)
    assert parts["vq_shared"].item() == pytest.approx(vq_sh, abs=1e-6)
    assert parts["vq_specific"].item() == pytest.approx(vq_sp, abs=1e-6)
    assert parts["mi"].item() == pytest.approx(mi, abs=1e-5)
    assert total.item() == pytest.approx(recon + beta * (vq_sh + vq_sp) + lam * mi, abs=1e-5)


def test_negative_weights_rejected():
    stack = CodebookStack(1, 2, 4, 4, 1)
    with pytest.raises(ValueError):
        dmrq_loss(torch.randn(2, 2, 4), stack, None, beta=-1.0)
    with pytest.raises(ValueError):
        DMRQConfig(beta=-1).validate()
    with pytest.raises(ValueError):
        DMRQConfig(n_heads=3).validate(8)


def test_kmeans_pp_picks_data_points():
    pts = torch.randn(50, 3)
    centers = kmeans_pp(pts, 5, torch.Generator().manual_seed(0))
    for c in centers:
        assert ((pts.double() - c) ** 2).sum(-1).min() == 0


def test_linear_cka_basics():
    x = np.random.default_rng(0).standard_normal((100, 5))
    assert linear_cka(x, x) == pytest.approx(1.0)
    assert linear_cka(x, 3 * x @ np.linalg.qr(np.random.default_rng(1).standard_normal((5, 5)))[0]) == \
        pytest.approx(1.0)


@pytest.fixture(scope="module")
def four_cluster():
    spec = SyntheticSpec(n_items=500, n_users=1, cluster_count=4, style_count=4, style_scale=2.0, seed=0)
    corpus = synth_corpus(spec)[0]
    return train_alignment(corpus, AlignConfig(d=32, steps=300, seed=0)).aligned


def test_reconstruction_strictly_decreases_for_ten_epochs(four_cluster):
    result = train_dmrq(four_cluster, DMRQConfig(codebook_size=32, epochs=10, seed=0))
    recon = [h["eval_reconstruction"] for h in result.history]
    assert all(b < a for a, b in zip(recon, recon[1:])), recon


@pytest.mark.slow
def test_mi_penalty_lowers_shared_specific_correlation(four_cluster):
    def cka(lam):
        stack = train_dmrq(four_cluster, DMRQConfig(codebook_size=32, epochs=20, lam=lam, seed=0)).stack
        return shared_specific_cka(four_cluster, stack)

    assert cka(0.3) < cka(0.0)


def test_zero_epochs_leaves_initialization():
    aligned = AlignedCorpus(["a", "b"], torch.nn.functional.normalize(torch.randn(2, 2, 4), dim=-1))
    cfg = DMRQConfig(codebook_size=2, n_heads=2, epochs=0, seed=3)
    stack = train_dmrq(aligned, cfg).stack
    fresh = CodebookStack.from_config(cfg, 2, 4)
    assert all(torch.equal(a, b) for a, b in zip(stack.state_dict().values(), fresh.state_dict().values()))


@pytest.fixture(scope="module")
def trained(four_cluster):
    small = AlignedCorpus(four_cluster.ids[:200], four_cluster.z[:200])
    return small, train_dmrq(small, DMRQConfig(codebook_size=16, epochs=2, seed=1)).stack


def test_tokenize_is_stable_and_reconstructs(trained):
    aligned, stack = trained
    codes = tokenize(aligned, stack)
    again = tokenize(AlignedCorpus(aligned.ids[:1] * 2, aligned.z[:1].repeat(2, 1, 1)), stack)
    assert again[0].codes == again[1].codes == codes[0].codes
    for ic in codes[:20]:
        sh, sp = reconstruct(ic, stack)
        np.testing.assert_array_equal(sh, ic.z_hat_sh)
        for a, b in zip(sp, ic.z_hat_sp):
            np.testing.assert_array_equal(a, b)
    assert len(codes[0].codes) == stack.n_codes


def test_stack_and_codes_round_trip(trained, tmp_path):
    aligned, stack = trained
    save_stack(tmp_path / "s.cb", stack)
    back = load_stack(tmp_path / "s.cb")
    assert all(torch.equal(a, b) for a, b in zip(stack.state_dict().values(), back.state_dict().values()))
    codes = tokenize(aligned, stack)
    write_codes(tmp_path / "c.tsv", codes)
    table = read_codes(tmp_path / "c.tsv", stack.n_shared)
    assert table == {ic.item_id: ic.codes for ic in codes}
    assert [ic.codes for ic in tokenize(aligned, back)] == [ic.codes for ic in codes]


def test_bad_codebook_file(tmp_path):
    (tmp_path / "x.cb").write_bytes(b"HISAM-CB v9 1 1\n")
    with pytest.raises(FormatError):
        load_stack(tmp_path / "x.cb")
    (tmp_path / "c.tsv").write_text("a\t1,x\n")
    with pytest.raises(FormatError):
        read_codes(tmp_path / "c.tsv", 1)


def test_encode_with_pinned_codes_matches_search(trained):
    aligned, stack = trained
    z = aligned.z[:10]
    enc = encode(z, stack)
    codes = torch.cat([enc.shared.codes, enc.sp_codes], dim=1)
    pinned = encode(z, stack, codes)
    assert torch.equal(pinned.shared.z_hat, enc.shared.z_hat)
    assert torch.equal(pinned.z_hat_sp, enc.z_hat_sp)
