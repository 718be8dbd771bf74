import math

import numpy as np
import pytest
import torch

from helpers import check_gradients
from icmlm.captions import tokenize_dataset
from icmlm.common import ContractViolation
from icmlm.corpus import generate_synthetic
from icmlm.fusion import AttFcHead, TfmHead, TpHead, extract_attention
from icmlm.objectives import tp_loss
from icmlm.textenc import LmConfig, ReferenceLm, build_vocabulary


@pytest.fixture(scope="module")
def vocab64():
    ds = generate_synthetic(30, seed=8)
    seqs, _ = tokenize_dataset(ds)
    torch.manual_seed(0)
    lm = ReferenceLm(build_vocabulary(seqs), LmConfig(seed=0))
    return lm.vocab


def make_attfc(vocab, d_x=12, d_z=6, n_heads=3, seed=0):
    torch.manual_seed(seed)
    return AttFcHead(d_x=d_x, d_w=64, vocab=vocab, d_z=d_z, n_heads=n_heads, fc_hidden=16)


class TestTpHead:
    def test_softmax_sums_to_one(self):
        torch.manual_seed(1)
        head = TpHead(d_x=8, k=4, width=8)
        logits = head(torch.rand(5, 8, 4, 4))
        probs = torch.softmax(logits, dim=-1)
        np.testing.assert_allclose(probs.sum(dim=-1).detach().numpy(), 1.0, rtol=1e-6)

    def test_loss_shift_invariant(self):
        torch.manual_seed(1)
        head = TpHead(d_x=8, k=4, width=8)
        logits = head(torch.rand(5, 8, 4, 4))
        labels = torch.full((5, 4), 0.25)
        a = tp_loss(logits, labels)
        b = tp_loss(logits + 3.0, labels)
        assert float(a) == pytest.approx(float(b), abs=1e-5)

    def test_random_init_uniform_target_near_ln_k(self):
        torch.manual_seed(2)
        head = TpHead(d_x=8, k=4, width=8)
        logits = head(torch.rand(64, 8, 4, 4))
        labels = torch.full((64, 4), 0.25)
        loss = float(tp_loss(logits, labels))
        assert abs(loss - math.log(4)) < 0.1


class TestAttScores:
    def test_zero_visual_features_give_zero_scores(self, vocab64):
        head = make_attfc(vocab64)
        S = head.att_scores(torch.zeros(2, 4, 12), torch.randn(2, 5, 64))
        assert torch.equal(S, torch.zeros_like(S))

    def test_hand_computed_identity_projections(self, vocab64):
        # 2 cells x 2 tokens, d_x = d_w = d_z = 2, single head, identity maps:
        # the whole of Eq. 3 recomputed with plain numpy
        torch.manual_seed(0)
        head = AttFcHead(d_x=2, d_w=2, vocab=vocab64, d_z=2, n_heads=1, fc_hidden=4)
        with torch.no_grad():
            head.sigma_x[0] = torch.eye(2)
            head.sigma_w[0] = torch.eye(2)
        X = torch.tensor([[[1.0, 3.0], [2.0, -1.0]]])
        W = torch.tensor([[[0.5, 1.5], [-2.0, 4.0]]])

        def ln_relu(m):
            mu = m.mean(axis=1, keepdims=True)
            var = m.var(axis=1, keepdims=True)
            return np.maximum((m - mu) / np.sqrt(var + 1e-5), 0.0)

        xt = ln_relu(X[0].numpy())
        wt = ln_relu(W[0].numpy())
        expected = xt @ wt.T / np.sqrt(2.0)
        S = head.att_scores(X, W)
        np.testing.assert_allclose(S[0, 0].detach().numpy(), expected, rtol=1e-5, atol=1e-6)

    def test_nonnegativity_property(self, vocab64):
        head = make_attfc(vocab64)
        for seed in range(5):
            torch.manual_seed(seed)
            S = head.att_scores(torch.randn(2, 6, 12), torch.randn(2, 7, 64))
            assert float(S.min()) >= 0.0

    def test_dimension_mismatch(self, vocab64):
        head = make_attfc(vocab64)
        with pytest.raises(ContractViolation):
            head.att_scores(torch.zeros(1, 4, 13), torch.zeros(1, 5, 64))


class TestAttPool:
    def test_single_token_softmax_is_identity(self, vocab64):
        head = make_attfc(vocab64, n_heads=1)
        with torch.no_grad():
            head.head_weights.fill_(1.0)
            head.head_bias.zero_()
        S = torch.randn(1, 1, 6, 1)  # T = 1
        _, _, combined = head.att_pool(S, torch.randn(1, 6, 12))
        assert torch.equal(combined, S[:, 0, :, 0])

    def test_row_of_zeros_gives_ln2(self, vocab64):
        head = make_attfc(vocab64, n_heads=1)
        with torch.no_grad():
            head.head_weights.fill_(1.0)
            head.head_bias.zero_()
        S = torch.zeros(1, 1, 3, 2)
        _, _, combined = head.att_pool(S, torch.randn(1, 3, 12))
        np.testing.assert_allclose(combined.detach().numpy(), math.log(2.0), rtol=1e-6)

    def test_uniform_scores_give_uniform_attention_and_mean_pooling(self, vocab64):
        head = make_attfc(vocab64)
        X = torch.randn(1, 8, 12)
        S = torch.full((1, 3, 8, 4), 0.7)
        x_hat, p_att, _ = head.att_pool(S, X)
        np.testing.assert_allclose(p_att.detach().numpy(), 1.0 / 8, rtol=1e-6)
        np.testing.assert_allclose(x_hat[0].detach().numpy(),
                                   X[0].mean(dim=0).numpy(), rtol=1e-5, atol=1e-6)

    def test_p_att_is_distribution_and_xhat_in_hull(self, vocab64):
        head = make_attfc(vocab64)
        torch.manual_seed(3)
        X = torch.randn(4, 9, 12)
        W = torch.randn(4, 6, 64)
        S = head.att_scores(X, W)
        x_hat, p_att, _ = head.att_pool(S, X)
        sums = p_att.sum(dim=-1)
        assert torch.all((sums - 1.0).abs() <= 1e-6)
        assert float(p_att.min()) >= 0.0
        # independent recomputation of the convex combination
        np.testing.assert_allclose(
            x_hat.detach().numpy(),
            np.einsum("bnd,bn->bd", X.numpy(), p_att.detach().numpy()),
            rtol=1e-5, atol=1e-6,
        )
        assert torch.all(x_hat <= X.max(dim=1).values + 1e-6)
        assert torch.all(x_hat >= X.min(dim=1).values - 1e-6)

    def test_stable_for_huge_scores(self, vocab64):
        head = make_attfc(vocab64, n_heads=1)
        S = torch.tensor([1.0, 1e4])[None, None, None, :].expand(1, 1, 5, 2).clone()
        x_hat, p_att, combined = head.att_pool(S, torch.randn(1, 5, 12))
        assert torch.isfinite(combined).all() and torch.isfinite(x_hat).all()

    def test_single_head_reduction_bit_exact(self, vocab64):
        head = make_attfc(vocab64, n_heads=1)
        with torch.no_grad():
            head.head_weights.fill_(1.0)
            head.head_bias.zero_()
        torch.manual_seed(4)
        X = torch.randn(2, 6, 12)
        W = torch.randn(2, 5, 64)
        S = head.att_scores(X, W)
        from icmlm.attention import masked_logsumexp
        s_single = masked_logsumexp(S[:, 0], dim=-1)  # the single head's s_i
        _, _, combined = head.att_pool(S, X)
        assert torch.equal(combined, s_single)

    def test_length_mask_excludes_padding(self, vocab64):
        head = make_attfc(vocab64, n_heads=1)
        X = torch.randn(1, 4, 12)
        W = torch.randn(1, 6, 64)
        S = head.att_scores(X, W)
        _, _, c_masked = head.att_pool(S, X, lengths=torch.tensor([3]))
        _, _, c_short = head.att_pool(S[:, :, :, :3], X)
        assert torch.allclose(c_masked, c_short, atol=1e-6)


class TestFcClassify:
    def test_probabilities_sum_to_one(self, vocab64):
        head = make_attfc(vocab64)
        probs = head.fc_classify(torch.randn(3, 12))
        np.testing.assert_allclose(probs.sum(dim=-1).detach().numpy(), 1.0, rtol=1e-6)

    def test_zero_fc_output_uniform(self, vocab64):
        head = make_attfc(vocab64)
        with torch.no_grad():
            head.fc[-1].weight.zero_()
            head.fc[-1].bias.zero_()
        probs = head.fc_classify(torch.randn(2, 12))
        np.testing.assert_allclose(probs.detach().numpy(), 1.0 / len(vocab64), rtol=1e-5)

    def test_embedding_row_wins_argmax(self, vocab64):
        # Eq. 6 scoring: a feature equal to the k-th table row picks k
        table = vocab64.embedding.weight
        for k in (3, 17):
            probs = torch.softmax(vocab64.logits(table[k]), dim=-1)
            assert int(probs.argmax()) == k


class TestTfmHead:
    def _head(self, vocab, **kw):
        torch.manual_seed(5)
        return TfmHead(d_x=12, d_w=64, vocab=vocab, grid_cells=64,
                       n_heads=2, dropout=0.0, **kw)

    def test_log_probs_normalized(self, vocab64):
        head = self._head(vocab64).eval()
        X = torch.randn(2, 64, 12)
        W = torch.randn(2, 7, 64)
        log_probs, _ = head(W=W, X=X, mask_indices=torch.tensor([1, 3]),
                            lengths=torch.tensor([7, 5]))
        sums = torch.exp(log_probs).sum(dim=-1)
        assert torch.all((sums - 1.0).abs() <= 1e-6)

    def test_sequence_bookkeeping_71_rows(self, vocab64):
        head = self._head(vocab64).eval()
        X = torch.randn(1, 64, 12)
        W = torch.randn(1, 7, 64)
        z, attn = head.encode(X, W, lengths=torch.tensor([7]), need_attn=True)
        assert z.shape == (1, 71, 64)
        assert attn.shape[-2:] == (71, 71)

    def test_mask_index_out_of_range(self, vocab64):
        head = self._head(vocab64).eval()
        with pytest.raises(ContractViolation):
            head(torch.randn(1, 64, 12), torch.randn(1, 7, 64),
                 mask_indices=torch.tensor([7]), lengths=torch.tensor([7]))

    def test_grid_cells_mismatch(self, vocab64):
        head = self._head(vocab64).eval()
        with pytest.raises(ContractViolation):
            head.encode(torch.randn(1, 32, 12), torch.randn(1, 7, 64))

    def test_attention_probs_renormalized_over_grid(self, vocab64):
        head = self._head(vocab64).eval()
        p = head.attention_probs(torch.randn(2, 64, 12), torch.randn(2, 6, 64),
                                 lengths=torch.tensor([6, 6]),
                                 mask_indices=torch.tensor([0, 2]))
        assert p.shape == (2, 64)
        np.testing.assert_allclose(p.sum(dim=-1).numpy(), 1.0, rtol=1e-6)


class TestExtractAttention:
    def test_attfc_map_equals_att_pool_output(self, vocab64):
        head = make_attfc(vocab64).eval()
        torch.manual_seed(6)
        X = torch.randn(1, 16, 12)
        W = torch.randn(1, 5, 64)
        maps = extract_attention(head, X, W, torch.tensor([5]), torch.tensor([2]),
                                 (4, 4), [("img", "cap", 2)])
        S = head.att_scores(X, W)
        _, p_att, _ = head.att_pool(S, X, torch.tensor([5]))
        assert torch.equal(maps[0].p.reshape(-1), p_att[0])
        assert maps[0].image_id == "img" and maps[0].mask_index == 2

    def test_map_sums_to_one(self, vocab64):
        head = make_attfc(vocab64).eval()
        X = torch.randn(3, 16, 12)
        W = torch.randn(3, 5, 64)
        maps = extract_attention(head, X, W, torch.tensor([5, 5, 4]), torch.tensor([0, 1, 2]),
                                 (4, 4), [("a", "b", 0), ("c", "d", 1), ("e", "f", 2)])
        for m in maps:
            assert float(m.p.sum()) == pytest.approx(1.0, abs=1e-6)


def test_heads_share_the_vocabulary_table_object(vocab64):
    attfc = make_attfc(vocab64)
    torch.manual_seed(7)
    tfm = TfmHead(d_x=12, d_w=64, vocab=vocab64, grid_cells=16)
    assert attfc.vocab is tfm.vocab
    assert attfc.vocab.embedding.weight is tfm.vocab.embedding.weight


def test_attfc_gradients_match_finite_differences(vocab64):
    torch.manual_seed(8)
    head = AttFcHead(d_x=6, d_w=64, vocab=vocab64, d_z=4, n_heads=2, fc_hidden=8).double()
    X = torch.randn(2, 4, 6, dtype=torch.float64)
    W = torch.randn(2, 3, 64, dtype=torch.float64)
    targets = torch.tensor([1, 2])
    vocab64.embedding.double()

    def loss_fn():
        log_probs, _ = head(X, W)
        return -log_probs[torch.arange(2), targets].mean()

    errs = check_gradients(loss_fn, list(head.named_parameters()))
    vocab64.embedding.float()
    assert max(errs.values()) <= 1e-4, errs
