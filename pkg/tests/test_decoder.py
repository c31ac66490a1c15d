import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lipvsr.decoder import (VOCAB, DecoderConfig, InfeasibleAlignmentError, TransformerDecoder, Vocabulary,
                            beam_search, ce_loss, ctc_brute_force, ctc_loss, ctc_loss_batch, greedy_decode,
                            teacher_forcing, vsr_loss)
from lipvsr.tensor import grad_check, init_uniform_


def test_vocabulary():
    v = Vocabulary()
    assert len(v) == 40 and v.blank == 0 and len({v.blank, v.sos, v.eos}) == 3
    assert len(set(v.tokens)) == 40
    assert v.decode(v.encode("bin blue at a 1")) == "bin blue at a 1"
    with pytest.raises(ValueError):
        v.encode("A")


def test_ctc_examples():
    assert ctc_loss(torch.zeros(1, 3, dtype=torch.float64), [1]).item() == pytest.approx(math.log(3), abs=1e-12)
    assert ctc_loss(torch.zeros(2, 3, dtype=torch.float64), [1]).item() == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(torch.zeros(2, 3), [1, 1])
    assert ctc_loss(torch.zeros(3, 3, dtype=torch.float64), [1, 1]).item() == pytest.approx(3 * math.log(3))


@settings(max_examples=150, deadline=None)
@given(T=st.integers(1, 5), V=st.integers(2, 4), data=st.data())
def test_ctc_matches_enumeration(T, V, data):
    y = data.draw(st.lists(st.integers(1, V - 1), max_size=3))
    seed = data.draw(st.integers(0, 2 ** 16))
    logits = torch.randn(T, V, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * 2
    brute = ctc_brute_force(logits, y)
    if math.isinf(brute):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(logits, y)
    else:
        assert abs(ctc_loss(logits, y).item() - brute) <= 1e-9


def test_ctc_empty_target_is_all_blank():
    logits = torch.randn(4, 3, dtype=torch.float64)
    logp = torch.log_softmax(logits, -1)
    assert ctc_loss(logits, []).item() == pytest.approx(-logp[:, 0].sum().item(), abs=1e-12)
    assert ctc_brute_force(logits, []) == pytest.approx(-logp[:, 0].sum().item(), abs=1e-12)


def test_ctc_one_hot_logits():
    path = [1, 1, 0, 2]
    logits = torch.full((4, 3), -1e4, dtype=torch.float64)
    logits[torch.arange(4), torch.tensor(path)] = 0.0
    assert ctc_loss(logits, [1, 2]).item() == pytest.approx(0.0, abs=1e-9)
    assert ctc_loss(logits, [1, 1, 2]).item() > 100


def test_ctc_batch_mixed_lengths_and_gradient():
    logits = torch.randn(3, 5, 4, dtype=torch.float64)
    targets = [[1, 2], [], [3, 3, 1]]
    batch = ctc_loss_batch(logits, targets)
    for b, y in enumerate(targets):
        assert batch[b].item() == pytest.approx(ctc_loss(logits[b], y).item(), abs=1e-12)
    assert grad_check(lambda z: ctc_loss_batch(z, targets).sum(), logits) <= 1e-4


def test_brute_force_guard():
    with pytest.raises(ValueError):
        ctc_brute_force(torch.zeros(12, 4), [1])


def _decoder(seed=0, dim=16):
    dec = TransformerDecoder(DecoderConfig(layers=2, model_dim=dim, ff_dim=32, heads=2), len(VOCAB)).double()
    init_uniform_(dec, torch.Generator().manual_seed(seed))
    return dec.eval()


def test_decoder_causality_and_cross_attention():
    dec = _decoder()
    mem = torch.randn(1, 6, 16, dtype=torch.float64)
    prefix = torch.tensor([[VOCAB.sos, 5, 9, 12, 3]])
    logits, maps = dec(prefix, mem, return_attention=True)
    assert logits.shape == (1, 5, 40)
    for j in range(1, 5):
        changed = prefix.clone()
        changed[0, j] = 20
        other = dec(changed, mem)
        assert torch.equal(other[0, :j], logits[0, :j])
        assert not torch.allclose(other[0, j], logits[0, j])
    for m in maps:
        assert m.shape == (1, 2, 5, 6)
        assert (m.sum(-1) - 1).abs().max() <= 1e-6


def test_ce_loss_values():
    target = torch.tensor([[4, 7, VOCAB.eos]])
    assert ce_loss(torch.zeros(1, 3, 40, dtype=torch.float64), target).item() == pytest.approx(math.log(40))
    onehot = torch.full((1, 3, 40), -50.0, dtype=torch.float64)
    onehot[0, torch.arange(3), target[0]] = 50.0
    assert ce_loss(onehot, target).item() < 1e-30
    # two tokens, logits (0, ln 3) over a 2-symbol toy vocabulary: targets 1 then 0
    logits = torch.tensor([[[0.0, math.log(3)], [0.0, math.log(3)]]], dtype=torch.float64)
    expected = (-math.log(0.75) - math.log(0.25)) / 2
    assert ce_loss(logits, torch.tensor([[1, 0]])).item() == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        ce_loss(logits, torch.tensor([[1, 0, 1]]))


def test_ce_loss_ignores_padding():
    dec_in, dec_out = teacher_forcing([[4, 5], [6]])
    assert dec_in.tolist() == [[VOCAB.sos, 4, 5], [VOCAB.sos, 6, VOCAB.eos]]
    assert dec_out.tolist() == [[4, 5, VOCAB.eos], [6, VOCAB.eos, -1]]
    logits = torch.randn(2, 3, 40, dtype=torch.float64)
    full = ce_loss(logits, dec_out)
    logits2 = logits.clone()
    logits2[1, 2] = torch.randn(40, dtype=torch.float64)
    assert ce_loss(logits2, dec_out).item() == full.item()


def test_vsr_loss():
    assert vsr_loss(2.0, 1.0, 0.1) == pytest.approx(1.1)
    assert vsr_loss(2.0, 1.0, 0.0) == 1.0 and vsr_loss(2.0, 1.0, 1.0) == 2.0
    with pytest.raises(ValueError):
        vsr_loss(1.0, 1.0, 1.5)


def test_width_one_is_greedy_and_deterministic():
    for seed in range(4):
        dec = _decoder(seed)
        mem = torch.randn(2, 5, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        greedy = greedy_decode(dec, mem, max_len=7)
        for b in range(2):
            assert beam_search(dec, mem[b], 1, max_len=7)[0] == greedy[b]
            assert beam_search(dec, mem[b], 4, max_len=7) == beam_search(dec, mem[b], 4, max_len=7)
    with pytest.raises(ValueError):
        beam_search(dec, mem[0], 0)


@pytest.mark.xfail(strict=True, reason="beam search with pruning and length normalization is not monotone in "
                                        "width; counterexamples exist among these seeds")
def test_beam_score_monotone_in_width():
    for seed in range(30):
        dec = TransformerDecoder(DecoderConfig(1, 16, 32, 2), len(VOCAB)).double().eval()
        init_uniform_(dec, torch.Generator().manual_seed(seed))
        with torch.no_grad():
            for p in dec.out.parameters():
                p.mul_(8)
        mem = torch.randn(6, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
        scores = [beam_search(dec, mem, k, max_len=8)[1] for k in range(1, 8)]
        assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:])), (seed, scores)


def test_overfit_decoder_returns_transcript():
    torch.manual_seed(0)
    dec = TransformerDecoder(DecoderConfig(layers=1, model_dim=32, ff_dim=64, heads=2), len(VOCAB))
    mem = torch.randn(1, 8, 32)
    text = "bin blue at f two now"
    dec_in, dec_out = teacher_forcing([VOCAB.encode(text)])
    opt = torch.optim.Adam(dec.parameters(), lr=3e-3)
    for _ in range(300):
        opt.zero_grad()
        ce_loss(dec(dec_in, mem), dec_out).backward()
        opt.step()
    dec.eval()
    tokens, _ = beam_search(dec, mem[0], 10, max_len=30)
    assert VOCAB.decode(tokens) == text
