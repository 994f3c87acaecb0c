"""Concept-level machinery: pooling, the product-quantized concept
vocabulary, next-concept prediction, soft decoding, and leakage-safe fusion.

A concept is the mean of `chunk_size` adjacent token states. Each concept
vector is split into `segments` feature slices; segment s is quantized
against its own codebook of `entries` learnable rows, which pass through a
per-segment two-layer ReLU MLP before any distance or decoding uses them
(the transform keeps the codebook from collapsing onto a few entries).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .layers import LayerNorm, TransformerLayer, normal_param, param


class Codebook:
    """`segments` independent codebooks of `entries` raw rows plus the
    per-segment MLP transform; effective entries are recomputed from the
    current parameters on every use."""

    def __init__(self, rng, segments: int, entries: int, segment_width: int, dtype: str):
        self.segments = segments
        self.entries = entries
        self.segment_width = segment_width
        w = segment_width
        self.raw = normal_param(rng, (segments, entries, w), dtype)
        self.mlp_fc_w = normal_param(rng, (segments, w, w), dtype)
        self.mlp_fc_b = param(np.zeros((segments, 1, w)), dtype)
        self.mlp_out_w = normal_param(rng, (segments, w, w), dtype)
        self.mlp_out_b = param(np.zeros((segments, 1, w)), dtype)

    def effective(self) -> DiffArray:
        """MLP-transformed entries, [segments, entries, segment_width]."""
        hidden = ad.relu(ad.add(ad.matmul(self.raw, self.mlp_fc_w), self.mlp_fc_b))
        return ad.add(ad.matmul(hidden, self.mlp_out_w), self.mlp_out_b)

    def effective_values(self) -> np.ndarray:
        with ad.no_grad():
            return self.effective().values

    def nearest(self, concept_values: np.ndarray) -> np.ndarray:
        """Per-segment nearest effective entry by squared Euclidean distance.

        Ties break to the lowest index. Distances use the direct
        (c - e)^2 form so constructed ties compare exactly equal.
        """
        eff = self.effective_values()
        lead = concept_values.shape[:-1]
        seg = concept_values.reshape(lead + (self.segments, 1, self.segment_width))
        diff = seg - eff
        d2 = (diff * diff).sum(axis=-1)
        return np.argmin(d2, axis=-1)

    def lookup(self, indices: np.ndarray) -> DiffArray:
        """Differentiable gather of effective entries, concatenated to full width."""
        eff = self.effective()
        picked = ad.segment_lookup(eff, indices)
        lead = indices.shape[:-1]
        return ad.reshape(picked, lead + (self.segments * self.segment_width,))

    def duplicate_entries(self, tol: float = 1e-6) -> list[int]:
        """Per-segment count of effective-entry pairs closer than tol."""
        eff = self.effective_values()
        counts = []
        for s in range(self.segments):
            diff = eff[s][:, None, :] - eff[s][None, :, :]
            dist = np.sqrt((diff * diff).sum(axis=-1))
            close = (dist < tol).sum() - self.entries  # drop the diagonal
            counts.append(int(close // 2))
        return counts

    def named_parameters(self) -> Iterator[tuple[str, DiffArray]]:
        yield "raw", self.raw
        yield "mlp_fc_w", self.mlp_fc_w
        yield "mlp_fc_b", self.mlp_fc_b
        yield "mlp_out_w", self.mlp_out_w
        yield "mlp_out_b", self.mlp_out_b


def pool_concepts(h: DiffArray, chunk_size: int) -> DiffArray:
    """Mean-pool token states into concepts: [B, T, d] -> [B, T/k, d]."""
    return ad.mean_pool_chunks(h, chunk_size)


def quantize(concepts: DiffArray, codebook: Codebook) -> tuple[np.ndarray, DiffArray]:
    """Hard assignment plus the quantized embeddings.

    The selection is non-differentiable, so the returned embeddings carry no
    gradient into `concepts`; gradient reaches the codebook parameters only.
    """
    indices = codebook.nearest(concepts.values)
    return indices, codebook.lookup(indices)


@dataclass
class ConceptStates:
    """Everything the concept module produced for one forward pass."""

    pooled: DiffArray  # [B, M, d] continuous concepts
    indices: np.ndarray | None  # [B, M, S] nearest-entry ids
    quantized: DiffArray | None  # [B, M, d]
    head_logits: DiffArray | None  # [B, M-1, S, N]
    predicted: DiffArray | None  # [B, M-1, d]


def soft_decode(head_logits: DiffArray, codebook: Codebook) -> DiffArray:
    """Decode head logits [B, M', S, N] into concept vectors [B, M', d].

    Each segment's logits are softmax-normalized, so the decoded segment is a
    convex combination of that segment's effective entries; segments are
    concatenated in order along the feature axis.
    """
    n_batch, n_rows, segments, entries = head_logits.shape
    weights = ad.softmax(head_logits)
    eff = codebook.effective()
    mixed = ad.matmul(ad.reshape(weights, (n_batch, n_rows, segments, 1, entries)), eff)
    return ad.reshape(mixed, (n_batch, n_rows, segments * codebook.segment_width))


def fusion_index_map(seq_len: int, chunk_size: int, n_concepts: int, broken: bool = False) -> np.ndarray:
    """Which prediction row each token position receives (-1 means zeros).

    Position t's target token x_{t+1} lives in concept j = (t+1) // k, and the
    prediction of concept j sits at row j-1, available from tokens up to
    j*k - 1 <= t. That assigns rows to exactly k positions each, leaves the
    first k-1 positions and the final position with zeros, and never lets a
    position see past its own target. `broken` drops the shift (position t
    receives the prediction for concept t//k + 1), the deliberately leaky
    variant used as the audit's negative control.
    """
    t = np.arange(seq_len)
    rows = (t // chunk_size) if broken else ((t + 1) // chunk_size - 1)
    rows = np.where((rows >= 0) & (rows <= n_concepts - 2), rows, -1)
    return rows.astype(np.int64)


def fuse(h: DiffArray, predicted: DiffArray, chunk_size: int, broken: bool = False) -> DiffArray:
    """Broadcast predictions over their token positions and add element-wise."""
    seq_len = h.shape[-2]
    n_concepts = seq_len // chunk_size
    if seq_len % chunk_size != 0:
        raise ValueError("sequence length must be a multiple of the chunk size")
    if predicted.shape[-2] != n_concepts - 1:
        raise ValueError(
            f"expected {n_concepts - 1} prediction rows, got {predicted.shape[-2]}"
        )
    index = fusion_index_map(seq_len, chunk_size, n_concepts, broken=broken)
    return ad.add(h, ad.gather_positions(predicted, index))


class ConceptModule:
    """Causal concept transformer, S prediction heads, and the codebook."""

    def __init__(self, rng, config):
        d = config.n_embd
        dtype = config.dtype
        self.config = config
        self.broken_fusion = False
        self.codebook = Codebook(
            rng, config.segments, config.codebook_entries, config.segment_width, dtype
        )
        self.pos_emb = normal_param(rng, (max(config.max_concepts - 1, 1), d), dtype)
        self.layers = [
            TransformerLayer(rng, d, config.n_heads, dtype)
            for _ in range(config.concept_layers)
        ]
        self.head_norm = LayerNorm(d, dtype)
        self.head_w = normal_param(rng, (config.segments, d, config.codebook_entries), dtype)
        self.head_b = param(np.zeros((config.segments, config.codebook_entries)), dtype)

    def predict(self, pooled: DiffArray) -> tuple[DiffArray, DiffArray]:
        """Predict each next concept from the concepts before it.

        Returns (head logits [B, M-1, S, N], predictions [B, M-1, d]); row m
        predicts concept m+1 as a softmax-weighted convex combination of each
        segment's effective entries.
        """
        n_batch, n_concepts, d = pooled.shape
        if n_concepts < 2:
            raise ValueError("sequence too short for NCP (needs at least 2 concepts)")
        n_in = n_concepts - 1
        x = ad.add(ad.narrow(pooled, -2, 0, n_in), ad.narrow(self.pos_emb, 0, 0, n_in))
        for layer in self.layers:
            x = layer(x)
        hidden = self.head_norm(x)

        segments = self.config.segments
        entries = self.config.codebook_entries
        stacked = ad.reshape(hidden, (n_batch, n_in, 1, 1, d))
        logits = ad.add(
            ad.reshape(ad.matmul(stacked, self.head_w), (n_batch, n_in, segments, entries)),
            self.head_b,
        )
        predicted = soft_decode(logits, self.codebook)
        return logits, predicted

    def forward(self, h: DiffArray, quantize_states: bool = True) -> tuple[DiffArray, ConceptStates]:
        """Pool, quantize, predict, fuse; returns (fused states, ConceptStates).

        With a single concept (T == k) there is nothing to predict and the
        token states pass through unchanged. `quantize_states=False` skips
        the hard-assignment bookkeeping (the quantizer loss recomputes it
        anyway; the fused path never consumes it).
        """
        pooled = pool_concepts(h, self.config.chunk_size)
        if quantize_states:
            indices, quantized = quantize(pooled, self.codebook)
        else:
            indices, quantized = None, None
        if pooled.shape[-2] < 2:
            states = ConceptStates(pooled, indices, quantized, None, None)
            return h, states
        logits, predicted = self.predict(pooled)
        fused = fuse(h, predicted, self.config.chunk_size, broken=self.broken_fusion)
        return fused, ConceptStates(pooled, indices, quantized, logits, predicted)

    def named_parameters(self) -> Iterator[tuple[str, DiffArray]]:
        for name, p in self.codebook.named_parameters():
            yield f"codebook.{name}", p
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"layers.{i}.{name}", p
        for name, p in self.head_norm.named_parameters():
            yield f"head_norm.{name}", p
        yield "head_w", self.head_w
        yield "head_b", self.head_b
