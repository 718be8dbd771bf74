"""Training losses: tag prediction, masked-token prediction, and their combination."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .common import ContractViolation


@dataclass
class LossReport:
    step: int
    l_tp: float
    l_mlm: float
    l_total: float
    lam: float
    batch_size: int

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "l_tp": self.l_tp, "l_mlm": self.l_mlm,
            "l_total": self.l_total, "lambda": self.lam, "batch_size": self.batch_size,
        })

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        d = json.loads(line)
        return cls(d["step"], d["l_tp"], d["l_mlm"], d["l_total"], d["lambda"], d["batch_size"])


def tp_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy against normalized tag vectors, batch mean."""
    sums = labels.sum(dim=-1)
    if not bool(torch.all((sums - 1.0).abs() <= 1e-6)):
        raise ContractViolation("each label row must sum to 1")
    if bool((labels < 0).any()):
        raise ContractViolation("label entries must be nonnegative")
    log_p = torch.log_softmax(logits, dim=-1)
    return -(labels * log_p).sum(dim=-1).mean()


def mlm_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the masked token, from probability rows."""
    sums = probs.sum(dim=-1)
    if not bool(torch.all((sums - 1.0).abs() <= 1e-4)):
        raise ContractViolation("each probability row must sum to 1")
    if bool((targets < 0).any()) or bool((targets >= probs.shape[-1]).any()):
        raise ContractViolation("target id out of vocabulary range")
    picked = probs[torch.arange(probs.shape[0]), targets]
    return -torch.log(picked).mean()


def mlm_loss_from_log_probs(log_probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Same loss fed with log-probabilities; the training path uses this form
    so the log goes through a fused log-softmax rather than log(softmax(x))."""
    if bool((targets < 0).any()) or bool((targets >= log_probs.shape[-1]).any()):
        raise ContractViolation("target id out of vocabulary range")
    return -log_probs[torch.arange(log_probs.shape[0]), targets].mean()


def combined_loss(l_mlm, l_tp, lam: float):
    """Weighted sum of the masked-token and tag losses."""
    if lam < 0:
        raise ContractViolation("lambda must be nonnegative")
    return l_mlm + lam * l_tp
