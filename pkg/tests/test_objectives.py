import math

import numpy as np
import pytest
import torch

from icmlm.common import ContractViolation
from icmlm.objectives import (
    LossReport, combined_loss, mlm_loss, mlm_loss_from_log_probs, tp_loss,
)


class TestTpLoss:
    def test_uniform_logits_one_hot_label_ln4(self):
        logits = torch.zeros(1, 4)
        labels = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
        assert float(tp_loss(logits, labels)) == pytest.approx(math.log(4), abs=1e-6)

    def test_label_equal_softmax_gives_entropy(self):
        torch.manual_seed(0)
        logits = torch.randn(3, 6)
        p = torch.softmax(logits, dim=-1)
        # independent entropy computation
        entropy = float((-p * torch.log(p)).sum(dim=-1).mean())
        assert float(tp_loss(logits, p)) == pytest.approx(entropy, abs=1e-6)

    def test_soft_label_uniform_logits_ln4(self):
        logits = torch.full((1, 4), 2.0)
        labels = torch.tensor([[0.5, 0.0, 0.5, 0.0]])
        assert float(tp_loss(logits, labels)) == pytest.approx(math.log(4), abs=1e-6)

    def test_unnormalized_label_rejected(self):
        with pytest.raises(ContractViolation):
            tp_loss(torch.zeros(1, 4), torch.tensor([[0.5, 0.0, 0.0, 0.0]]))

    def test_negative_label_rejected(self):
        with pytest.raises(ContractViolation):
            tp_loss(torch.zeros(1, 4), torch.tensor([[1.5, 0.0, -0.5, 0.0]]))

    def test_shift_invariance(self):
        torch.manual_seed(1)
        logits = torch.randn(4, 5)
        labels = torch.softmax(torch.randn(4, 5), dim=-1)
        a = float(tp_loss(logits, labels))
        b = float(tp_loss(logits - 11.0, labels))
        assert a == pytest.approx(b, abs=1e-5)


class TestMlmLoss:
    def test_uniform_probs_ln100(self):
        probs = torch.full((7, 100), 0.01)
        targets = torch.arange(7)
        assert float(mlm_loss(probs, targets)) == pytest.approx(math.log(100), abs=1e-6)

    def test_perfect_prediction_zero(self):
        probs = torch.zeros(1, 10)
        probs[0, 3] = 1.0
        assert float(mlm_loss(probs, torch.tensor([3]))) == 0.0

    def test_batch_mean_of_two(self):
        probs = torch.tensor([[0.5, 0.5, 0.0], [0.25, 0.25, 0.5]])
        targets = torch.tensor([0, 2])
        a, b = -math.log(0.5), -math.log(0.5)
        assert float(mlm_loss(probs, targets)) == pytest.approx((a + b) / 2, abs=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(ContractViolation):
            mlm_loss(torch.full((1, 4), 0.25), torch.tensor([4]))

    def test_unnormalized_probs_rejected(self):
        with pytest.raises(ContractViolation):
            mlm_loss(torch.full((1, 4), 0.3), torch.tensor([0]))

    def test_log_prob_path_agrees(self):
        torch.manual_seed(2)
        logits = torch.randn(5, 20)
        targets = torch.randint(0, 20, (5,))
        via_probs = float(mlm_loss(torch.softmax(logits, -1), targets))
        via_logs = float(mlm_loss_from_log_probs(torch.log_softmax(logits, -1), targets))
        assert via_probs == pytest.approx(via_logs, abs=1e-6)

    def test_monotone_in_target_mass(self):
        base = torch.tensor([[0.4, 0.3, 0.3]])
        better = torch.tensor([[0.5, 0.25, 0.25]])
        t = torch.tensor([0])
        assert float(mlm_loss(better, t)) < float(mlm_loss(base, t))


class TestCombinedLoss:
    def test_weighted_sum(self):
        assert combined_loss(2.0, 1.0, 1.0) == 3.0
        assert combined_loss(2.0, 1.0, 0.0) == 2.0
        assert combined_loss(2.0, 1.0, 0.1) == pytest.approx(2.1, abs=1e-12)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractViolation):
            combined_loss(1.0, 1.0, -0.5)

    def test_lambda_zero_decouples_tp_gradients(self):
        torch.manual_seed(3)
        tp_param = torch.randn(4, requires_grad=True)
        mlm_param = torch.randn(4, requires_grad=True)
        l_tp = (tp_param ** 2).sum()
        l_mlm = (mlm_param ** 2).sum()
        total = combined_loss(l_mlm, l_tp, 0.0)
        total.backward()
        assert torch.equal(tp_param.grad, torch.zeros_like(tp_param))
        assert not torch.equal(mlm_param.grad, torch.zeros_like(mlm_param))

    def test_gradient_linearity(self):
        # grad(combined) must equal grad(mlm) + lambda * grad(tp), checked
        # against central finite differences of the combined objective
        lam = 0.3
        w = torch.tensor([0.7, -1.2], dtype=torch.float64, requires_grad=True)

        def parts(wv):
            return (wv ** 2).sum(), (wv ** 3).sum()

        l_mlm, l_tp = parts(w)
        combined_loss(l_mlm, l_tp, lam).backward()
        analytic = w.grad.clone()
        eps = 1e-6
        for i in range(2):
            delta = torch.zeros_like(w.data)
            delta[i] = eps
            hi = combined_loss(*parts(w.data + delta), lam)
            lo = combined_loss(*parts(w.data - delta), lam)
            fd = float((hi - lo) / (2 * eps))
            assert float(analytic[i]) == pytest.approx(fd, rel=1e-6)

    def test_paper_default_lambdas_accepted(self):
        from icmlm.trainer import TrainConfig
        assert TrainConfig().lam == 1.0
        for lam in (0.0, 0.1, 1.0):
            TrainConfig(lam=lam, steps=10, warmup_steps=0)


def test_loss_report_round_trip():
    rec = LossReport(step=10, l_tp=0.5, l_mlm=2.0, l_total=2.5, lam=1.0, batch_size=32)
    again = LossReport.from_json(rec.to_json())
    assert again == rec
    assert abs(rec.l_total - (rec.l_mlm + rec.lam * rec.l_tp)) <= 1e-9
