from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossOutput:
    loss: torch.Tensor
    masked_nll: torch.Tensor
    unmasked_nll: torch.Tensor
    n_masked: int
    n_unmasked: int
    masked_correct: list = field(default_factory=list)
    unmasked_correct: list = field(default_factory=list)

    def accuracy(self, head=0):
        """``(masked, unmasked)`` argmax accuracy for one head; NaN when a region is empty."""
        m = self.masked_correct[head] / self.n_masked if self.n_masked else float("nan")
        u = self.unmasked_correct[head] / self.n_unmasked if self.n_unmasked else float("nan")
        return m, u


def masked_prediction_loss(logits, targets, mask, alpha=1.0) -> LossOutput:
    """Weighted cross-entropy over masked and unmasked frames, summed over heads.

    ``logits`` and ``targets`` are per-head lists of ``(B, T, C_k)`` scores
    and ``(B, T)`` integer labels; ``mask`` is a ``(B, T)`` boolean tensor.
    Returns ``alpha * NLL_masked + (1 - alpha) * NLL_unmasked`` in nats,
    summed (not averaged) over frames.
    """
    if len(logits) != len(targets):
        raise ValueError(f"{len(logits)} heads but {len(targets)} target sequences")
    masked_nll = logits[0].new_zeros(())
    unmasked_nll = logits[0].new_zeros(())
    m_correct, u_correct = [], []
    for k, (lg, z) in enumerate(zip(logits, targets)):
        if z.shape != lg.shape[:-1]:
            raise ValueError(f"head {k}: targets {tuple(z.shape)} vs logits {tuple(lg.shape[:-1])}")
        C = lg.shape[-1]
        if z.numel() and (int(z.max()) >= C or int(z.min()) < 0):
            raise ValueError(f"head {k}: label outside [0, {C})")
        nll = -F.log_softmax(lg, dim=-1).gather(-1, z.unsqueeze(-1)).squeeze(-1)
        masked_nll = masked_nll + nll[mask].sum()
        unmasked_nll = unmasked_nll + nll[~mask].sum()
        hit = lg.argmax(dim=-1) == z
        m_correct.append(int(hit[mask].sum()))
        u_correct.append(int(hit[~mask].sum()))
    if alpha == 1.0:
        loss = masked_nll
    elif alpha == 0.0:
        loss = unmasked_nll
    else:
        loss = alpha * masked_nll + (1.0 - alpha) * unmasked_nll
    n_m = int(mask.sum())
    return LossOutput(loss, masked_nll, unmasked_nll, n_m, int(mask.numel()) - n_m, m_correct, u_correct)
