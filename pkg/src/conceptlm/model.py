"""Token-level backbone and the full model variants.

`ConceptLM` runs encode -> pool -> quantize -> predict -> fuse -> decode;
`BaselineLM` is the plain token-level stack used for the NTP, parameter-
matched, and multi-token-prediction baselines. Parameters are named, and
every name maps to one of six groups (encoder, concept_transformer, heads,
codebook, decoder, lm_head) so gradient-routing audits can ask which groups
a loss actually trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .concept import ConceptModule, ConceptStates
from .config import ModelConfig
from .layers import LayerNorm, Linear, TransformerLayer, normal_param

PARAM_GROUPS = (
    "encoder",
    "concept_transformer",
    "heads",
    "codebook",
    "decoder",
    "lm_head",
)


@dataclass
class ModelOutput:
    logits: DiffArray  # [B, T, V] next-token logits (primary head)
    states: ConceptStates | None = None
    all_logits: list | None = None  # per-offset heads (multi-token baseline)


class _TokenModelBase:
    config: ModelConfig

    def _embed(self, tokens: np.ndarray) -> DiffArray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError("tokens must be [B, T]")
        n_pos = tokens.shape[1]
        if n_pos > self.config.block_size:
            raise ValueError(f"sequence length {n_pos} exceeds block size")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id out of vocabulary range")
        tok = ad.embedding(self.tok_emb, tokens)
        pos = ad.narrow(self.pos_emb, 0, 0, n_pos)
        return ad.add(tok, pos)

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        raise NotImplementedError

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(int(p.values.size) for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.values) for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter '{name}'")
            p.assign_(np.asarray(arrays[name], dtype=p.values.dtype))


class ConceptLM(_TokenModelBase):
    """Causal LM whose decoder is conditioned on predicted next concepts."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d, dtype = config.n_embd, config.dtype
        self.tok_emb = normal_param(rng, (config.vocab_size, d), dtype)
        self.pos_emb = normal_param(rng, (config.block_size, d), dtype)
        self.encoder_layers = [
            TransformerLayer(rng, d, config.n_heads, dtype)
            for _ in range(config.encoder_layers)
        ]
        self.concept = ConceptModule(rng, config)
        self.decoder_layers = [
            TransformerLayer(rng, d, config.n_heads, dtype)
            for _ in range(config.decoder_layers)
        ]
        self.final_norm = LayerNorm(d, dtype)
        self.lm_head = Linear(rng, d, config.vocab_size, dtype)

    @property
    def broken_fusion(self) -> bool:
        return self.concept.broken_fusion

    @broken_fusion.setter
    def broken_fusion(self, value: bool) -> None:
        self.concept.broken_fusion = bool(value)

    def encode(self, tokens: np.ndarray) -> DiffArray:
        h = self._embed(tokens)
        for layer in self.encoder_layers:
            h = layer(h)
        return h

    def decode(self, fused: DiffArray) -> DiffArray:
        x = fused
        for layer in self.decoder_layers:
            x = layer(x)
        return self.lm_head(self.final_norm(x))

    def forward(self, tokens: np.ndarray, quantize_states: bool = True) -> ModelOutput:
        tokens = np.asarray(tokens)
        if tokens.shape[1] % self.config.chunk_size != 0:
            raise ValueError("sequence length must be a multiple of the chunk size")
        h = self.encode(tokens)
        fused, states = self.concept.forward(h, quantize_states=quantize_states)
        logits = self.decode(fused)
        return ModelOutput(logits=logits, states=states)

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.encoder_layers):
            out += [(f"enc.{i}.{n}", p) for n, p in layer.named_parameters()]
        out += [(f"concept.{n}", p) for n, p in self.concept.named_parameters()]
        for i, layer in enumerate(self.decoder_layers):
            out += [(f"dec.{i}.{n}", p) for n, p in layer.named_parameters()]
        out += [(f"final_norm.{n}", p) for n, p in self.final_norm.named_parameters()]
        out += [(f"lm_head.{n}", p) for n, p in self.lm_head.named_parameters()]
        return out

    @staticmethod
    def group_of(name: str) -> str:
        """Map a parameter name to its gradient-routing group."""
        if name.startswith(("tok_emb", "pos_emb", "enc.")):
            return "encoder"
        if name.startswith("concept.codebook."):
            return "codebook"
        if name.startswith(("concept.head_norm", "concept.head_w", "concept.head_b")):
            return "heads"
        if name.startswith("concept."):
            return "concept_transformer"
        if name.startswith(("dec.", "final_norm")):
            return "decoder"
        if name.startswith("lm_head"):
            return "lm_head"
        raise KeyError(f"unknown parameter '{name}'")


class BaselineLM(_TokenModelBase):
    """Plain token-level causal LM with one or more next-token heads.

    Head o (0-based) predicts the token o+1 positions ahead; evaluation and
    perplexity always use head 0.
    """

    def __init__(self, config: ModelConfig, n_layers: int, n_prediction_heads: int = 1, seed: int = 0):
        config.validate()
        self.config = config
        self.n_layers = n_layers
        rng = np.random.default_rng(seed)
        d, dtype = config.n_embd, config.dtype
        self.tok_emb = normal_param(rng, (config.vocab_size, d), dtype)
        self.pos_emb = normal_param(rng, (config.block_size, d), dtype)
        self.layers = [
            TransformerLayer(rng, d, config.n_heads, dtype) for _ in range(n_layers)
        ]
        self.final_norm = LayerNorm(d, dtype)
        self.heads = [
            Linear(rng, d, config.vocab_size, dtype) for _ in range(n_prediction_heads)
        ]

    def forward(self, tokens: np.ndarray) -> ModelOutput:
        h = self._embed(tokens)
        for layer in self.layers:
            h = layer(h)
        h = self.final_norm(h)
        all_logits = [head(h) for head in self.heads]
        return ModelOutput(logits=all_logits[0], all_logits=all_logits)

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for i, layer in enumerate(self.layers):
            out += [(f"layer.{i}.{n}", p) for n, p in layer.named_parameters()]
        out += [(f"final_norm.{n}", p) for n, p in self.final_norm.named_parameters()]
        for i, head in enumerate(self.heads):
            out += [(f"head.{i}.{n}", p) for n, p in head.named_parameters()]
        return out


def build_model(config: ModelConfig, seed: int = 0):
    """Instantiate the architecture a config's mode calls for."""
    token_layers = config.encoder_layers + config.decoder_layers
    if config.mode == "conceptlm":
        return ConceptLM(config, seed=seed)
    if config.mode == "ntp":
        return BaselineLM(config, n_layers=token_layers, seed=seed)
    if config.mode == "pm":
        return BaselineLM(
            config, n_layers=token_layers + config.concept_layers, seed=seed
        )
    if config.mode == "mtp":
        return BaselineLM(
            config,
            n_layers=token_layers,
            n_prediction_heads=config.mtp_heads,
            seed=seed,
        )
    raise ValueError(f"unknown mode '{config.mode}'")
