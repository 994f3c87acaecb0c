"""Training objectives and their gradient-routing semantics.

Three losses drive the full model: next-token cross-entropy through the
fused path, next-concept MSE between predictions and the pooled concepts
one step ahead, and the quantizer loss that keeps the codebook tracking the
concept distribution. The quantizer loss detaches the concepts first (both
of its terms), so by default it trains the codebook parameters and nothing
else; `vq_commit_to_encoder` restores the textbook commitment gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .concept import Codebook, quantize
from .config import ModelConfig
from .model import ModelOutput


@dataclass
class LossBundle:
    """Scalar losses for one step; `total` is the unit-weight sum of the
    enabled components (and the only node backward runs from)."""

    total: DiffArray
    l_ntp: DiffArray | None = None
    l_ncp: DiffArray | None = None
    l_vq: DiffArray | None = None
    l_mtp: DiffArray | None = None
    token_count: int = 0
    concept_count: int = 0

    def component_values(self) -> dict[str, float | None]:
        return {
            "l_ntp": None if self.l_ntp is None else float(self.l_ntp.values),
            "l_ncp": None if self.l_ncp is None else float(self.l_ncp.values),
            "l_vq": None if self.l_vq is None else float(self.l_vq.values),
            "l_mtp": None if self.l_mtp is None else float(self.l_mtp.values),
            "total": float(self.total.values),
        }


def _flatten_positions(logits: DiffArray, start: int, length: int) -> DiffArray:
    window = ad.narrow(logits, -2, start, length)
    n_batch = window.shape[0]
    vocab = window.shape[-1]
    return ad.reshape(window, (n_batch * length, vocab))


def ntp_loss(logits: DiffArray, tokens: np.ndarray) -> DiffArray:
    """Mean next-token cross-entropy over positions 0..T-2.

    `tokens` is the unshifted input sequence; position t is scored against
    tokens[t+1], and the final position has no in-sequence target.
    """
    tokens = np.asarray(tokens)
    n_batch, seq_len = tokens.shape
    if seq_len < 2:
        raise ValueError("need at least 2 positions for a next-token target")
    flat_logits = _flatten_positions(logits, 0, seq_len - 1)
    targets = tokens[:, 1:].reshape(-1)
    return ad.cross_entropy(flat_logits, targets)


def ncp_loss(predicted: DiffArray, pooled: DiffArray, stop_grad_target: bool = False) -> DiffArray:
    """Mean over prediction rows of the squared L2 distance to the next
    pooled concept (summed over features, averaged over batch and rows)."""
    n_batch, n_concepts = pooled.shape[0], pooled.shape[-2]
    if n_concepts < 2:
        raise ValueError("sequence too short for NCP (needs at least 2 concepts)")
    targets = ad.narrow(pooled, -2, 1, n_concepts - 1)
    if stop_grad_target:
        targets = ad.stop_gradient(targets)
    diff = ad.sub(predicted, targets)
    return ad.mul(ad.sum_all(ad.mul(diff, diff)), 1.0 / (n_batch * (n_concepts - 1)))


def vq_loss(
    pooled: DiffArray,
    codebook: Codebook,
    beta: float = 0.25,
    commit_to_encoder: bool = False,
) -> DiffArray:
    """Quantizer loss: ||sg(c) - d||^2 + beta * ||c - sg(d)||^2, averaged
    over concepts (summed over features).

    By default the concepts are detached before anything else, confining the
    loss to the codebook parameters; the beta term is then gradient-inert but
    still reported. With `commit_to_encoder` the detach is skipped and the
    beta term pulls the encoder toward its assigned entries.
    """
    concepts = pooled if commit_to_encoder else ad.stop_gradient(pooled)
    _, quantized = quantize(concepts, codebook)
    n_rows = int(np.prod(concepts.shape[:-1]))

    d1 = ad.sub(ad.stop_gradient(concepts), quantized)
    codebook_term = ad.sum_all(ad.mul(d1, d1))
    d2 = ad.sub(concepts, ad.stop_gradient(quantized))
    commit_term = ad.sum_all(ad.mul(d2, d2))
    total = ad.add(codebook_term, ad.mul(commit_term, beta))
    return ad.mul(total, 1.0 / n_rows)


def mtp_loss(all_logits: list[DiffArray], tokens: np.ndarray) -> DiffArray:
    """Multi-offset objective: head o is scored against tokens o+1 ahead,
    each offset averaged over its valid positions, offsets summed."""
    tokens = np.asarray(tokens)
    n_batch, seq_len = tokens.shape
    total = None
    for o, logits in enumerate(all_logits, start=1):
        valid = seq_len - o
        if valid < 1:
            raise ValueError(f"sequence too short for offset {o}")
        flat = _flatten_positions(logits, 0, valid)
        targets = tokens[:, o:].reshape(-1)
        term = ad.cross_entropy(flat, targets)
        total = term if total is None else ad.add(total, term)
    return total


def compute_losses(config: ModelConfig, output: ModelOutput, tokens: np.ndarray, codebook: Codebook | None = None) -> LossBundle:
    """Assemble the enabled losses for one forward pass."""
    tokens = np.asarray(tokens)
    enabled = config.losses
    parts: dict[str, DiffArray] = {}

    if ("ncp" in enabled or "vq" in enabled) and output.states is None:
        raise ValueError("ncp/vq losses require the concept module")

    if "ntp" in enabled:
        parts["l_ntp"] = ntp_loss(output.logits, tokens)
    if "ncp" in enabled:
        if output.states.predicted is None:
            raise ValueError("sequence too short for NCP (needs at least 2 concepts)")
        parts["l_ncp"] = ncp_loss(
            output.states.predicted,
            output.states.pooled,
            stop_grad_target=config.ncp_target_stop_grad,
        )
    if "vq" in enabled:
        if codebook is None:
            raise ValueError("vq loss needs the model codebook")
        parts["l_vq"] = vq_loss(
            output.states.pooled,
            codebook,
            beta=config.commit_beta,
            commit_to_encoder=config.vq_commit_to_encoder,
        )
    if "mtp" in enabled:
        parts["l_mtp"] = mtp_loss(output.all_logits, tokens)

    total = None
    for key in ("l_ntp", "l_ncp", "l_vq", "l_mtp"):
        if key in parts:
            total = parts[key] if total is None else ad.add(total, parts[key])

    n_batch, seq_len = tokens.shape
    concept_count = 0
    if output.states is not None:
        concept_count = n_batch * output.states.pooled.shape[-2]
    return LossBundle(
        total=total,
        token_count=n_batch * (seq_len - 1),
        concept_count=concept_count,
        **parts,
    )
