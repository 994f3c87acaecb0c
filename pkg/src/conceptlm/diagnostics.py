"""Evaluation and the mechanism audits: perplexity, exhaustive leakage
checks, per-loss gradient routing, codebook usage, analytic FLOPs, and
parameter matching.

Leakage and routing are hard audits (training is wrong if they fail);
codebook usage is a soft health indicator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .data import Corpus, eval_batches
from .layers import layer_param_count
from .losses import compute_losses, mtp_loss, ncp_loss, ntp_loss, vq_loss
from .model import PARAM_GROUPS, BaselineLM, ConceptLM

ROUTING_LOSSES = ("ntp", "ncp", "vq", "total")

# which parameter groups each loss is allowed to train (default config)
EXPECTED_ROUTING = {
    "ntp": {
        "encoder", "concept_transformer", "heads", "codebook", "decoder", "lm_head",
    },
    "ncp": {"encoder", "concept_transformer", "heads", "codebook"},
    "vq": {"codebook"},
    "total": {
        "encoder", "concept_transformer", "heads", "codebook", "decoder", "lm_head",
    },
}


# -- perplexity -----------------------------------------------------------------


def perplexity(model, corpus: Corpus, seq_len: int, batch_size: int = 16) -> float:
    """exp of the mean next-token cross-entropy over non-overlapping windows.

    Position scoring matches the training objective exactly: position t is
    scored against token t+1 within the window, the final position excluded.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    total_ce = 0.0
    count = 0
    for inputs in eval_batches(corpus, batch_size, seq_len):
        with ad.no_grad():
            logits = model.forward(inputs).logits.values
        x = logits[:, :-1]
        m = x.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(x - m).sum(axis=-1)) + m[..., 0]
        targets = inputs[:, 1:]
        picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
        total_ce += float((lse - picked).sum(dtype=np.float64))
        count += targets.size
    if count == 0:
        raise ValueError("corpus has no scorable positions")
    return math.exp(total_ce / count)


# -- leakage --------------------------------------------------------------------


def leakage_audit(model, seq_len: int, n_sequences: int = 2, seed: int = 0) -> float:
    """Max |logit change| at positions before a perturbed token.

    Exhaustive over every position of every sequence; must be exactly 0.0
    for a causal model (64-bit, bitwise).
    """
    vocab = model.config.vocab_size
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sequences):
        tokens = rng.integers(0, vocab, size=(1, seq_len))
        with ad.no_grad():
            base = model.forward(tokens).logits.values.copy()
        for u in range(seq_len):
            perturbed = tokens.copy()
            perturbed[0, u] = (perturbed[0, u] + 1 + rng.integers(0, vocab - 1)) % vocab
            with ad.no_grad():
                logits = model.forward(perturbed).logits.values
            if u > 0:
                dev = float(np.abs(logits[:, :u] - base[:, :u]).max())
                worst = max(worst, dev)
    return worst


# -- gradient routing -------------------------------------------------------------


def grad_isolation_audit(model: ConceptLM, seq_len: int = 8, seed: int = 0) -> dict:
    """Backward from each loss in isolation; report which parameter groups
    received any nonzero gradient. Rows: ntp, ncp, vq, total."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, seq_len))
    matrix: dict[str, dict[str, bool]] = {}

    for loss_name in ROUTING_LOSSES:
        model.zero_grad()
        output = model.forward(tokens)
        if loss_name == "ntp":
            loss = ntp_loss(output.logits, tokens)
        elif loss_name == "ncp":
            loss = ncp_loss(
                output.states.predicted, output.states.pooled,
                stop_grad_target=cfg.ncp_target_stop_grad,
            )
        elif loss_name == "vq":
            loss = vq_loss(
                output.states.pooled, model.concept.codebook,
                beta=cfg.commit_beta, commit_to_encoder=cfg.vq_commit_to_encoder,
            )
        else:
            bundle = compute_losses(cfg, output, tokens, codebook=model.concept.codebook)
            loss = bundle.total
        loss.backward()
        touched = {group: False for group in PARAM_GROUPS}
        for name, p in model.named_parameters():
            if p.grad is not None and np.any(p.grad != 0.0):
                touched[ConceptLM.group_of(name)] = True
        matrix[loss_name] = touched
    model.zero_grad()
    return matrix


def routing_matrix_ok(matrix: dict) -> bool:
    for loss_name, touched in matrix.items():
        expected = EXPECTED_ROUTING[loss_name]
        actual = {g for g, hit in touched.items() if hit}
        if actual != expected:
            return False
    return True


def routing_matrix_csv(matrix: dict) -> str:
    lines = ["loss," + ",".join(PARAM_GROUPS)]
    for loss_name in ROUTING_LOSSES:
        row = matrix[loss_name]
        lines.append(loss_name + "," + ",".join("1" if row[g] else "0" for g in PARAM_GROUPS))
    return "\n".join(lines) + "\n"


# -- codebook usage ----------------------------------------------------------------


@dataclass
class CodebookUsageReport:
    histogram: np.ndarray  # [segments, entries] selection counts
    total_concepts: int
    fraction_used: list[float]
    index_perplexity: list[float]
    duplicate_pairs: list[int]
    concept_space_size: int

    def csv(self) -> str:
        lines = ["segment,entry,count"]
        segments, entries = self.histogram.shape
        for s in range(segments):
            for n in range(entries):
                lines.append(f"{s},{n},{int(self.histogram[s, n])}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"concepts quantized: {self.total_concepts}"]
        for s, (frac, ppl) in enumerate(zip(self.fraction_used, self.index_perplexity)):
            lines.append(
                f"segment {s}: usage {frac:.3f}, index perplexity {ppl:.1f}, "
                f"duplicate pairs {self.duplicate_pairs[s]}"
            )
        lines.append(f"concept space size: {self.concept_space_size}")
        return "\n".join(lines) + "\n"


def codebook_usage(model: ConceptLM, corpus: Corpus, seq_len: int,
                   batch_size: int = 16) -> CodebookUsageReport:
    cfg = model.config
    histogram = np.zeros((cfg.segments, cfg.codebook_entries), dtype=np.int64)
    total = 0
    for inputs in eval_batches(corpus, batch_size, seq_len):
        with ad.no_grad():
            h = model.encode(inputs)
            pooled = ad.mean_pool_chunks(h, cfg.chunk_size)
        indices = model.concept.codebook.nearest(pooled.values)
        n_rows = indices.shape[0] * indices.shape[1]
        total += n_rows
        for s in range(cfg.segments):
            histogram[s] += np.bincount(
                indices[..., s].reshape(-1), minlength=cfg.codebook_entries
            )
    fraction = [(histogram[s] > 0).mean() for s in range(cfg.segments)]
    index_ppl = []
    for s in range(cfg.segments):
        p = histogram[s] / max(histogram[s].sum(), 1)
        nonzero = p[p > 0]
        index_ppl.append(float(np.exp(-(nonzero * np.log(nonzero)).sum())))
    return CodebookUsageReport(
        histogram=histogram,
        total_concepts=total,
        fraction_used=[float(f) for f in fraction],
        index_perplexity=index_ppl,
        duplicate_pairs=model.concept.codebook.duplicate_entries(),
        concept_space_size=cfg.codebook_entries**cfg.segments,
    )


# -- FLOPs accounting ---------------------------------------------------------------


@dataclass
class FlopsReport:
    """Closed-form per-step training FLOPs as a*T*d^2 + b*T^2*d.

    Embeddings and the LM head are excluded. A token layer contributes
    (12, 2); a concept layer runs on T/k positions, contributing
    (12/k, 2/k^2).
    """

    seq_len: int
    width: int
    chunk_size: int
    token_layers: int
    concept_layers: int
    conceptlm_coeffs: tuple[float, float] = field(init=False)
    pm_coeffs: tuple[float, float] = field(init=False)

    def __post_init__(self):
        k = self.chunk_size
        a = 12.0 * self.token_layers + self.concept_layers * 12.0 / k
        b = 2.0 * self.token_layers + self.concept_layers * 2.0 / (k * k)
        self.conceptlm_coeffs = (a, b)
        matched = self.token_layers + self.concept_layers
        self.pm_coeffs = (12.0 * matched, 2.0 * matched)

    @staticmethod
    def evaluate(coeffs: tuple[float, float], seq_len: int, width: int) -> float:
        a, b = coeffs
        return a * seq_len * width**2 + b * seq_len**2 * width

    @property
    def conceptlm_total(self) -> float:
        return self.evaluate(self.conceptlm_coeffs, self.seq_len, self.width)

    @property
    def pm_total(self) -> float:
        return self.evaluate(self.pm_coeffs, self.seq_len, self.width)

    @property
    def reduction_ratio(self) -> float:
        return (self.pm_total - self.conceptlm_total) / self.pm_total

    def summary(self) -> str:
        a, b = self.conceptlm_coeffs
        pa, pb = self.pm_coeffs
        return (
            f"token layer term: 12*T*d^2 + 2*T^2*d per layer\n"
            f"concept layer term: {12.0 / self.chunk_size}*T*d^2 + "
            f"{2.0 / self.chunk_size**2}*T^2*d per layer\n"
            f"conceptlm total: {a}*T*d^2 + {b}*T^2*d = {self.conceptlm_total:.6e}\n"
            f"pm total: {pa}*T*d^2 + {pb}*T^2*d = {self.pm_total:.6e}\n"
            f"reduction: {self.reduction_ratio * 100:.2f}%\n"
        )


def estimate_flops(cfg: ModelConfig, seq_len: int) -> FlopsReport:
    return FlopsReport(
        seq_len=seq_len,
        width=cfg.n_embd,
        chunk_size=cfg.chunk_size,
        token_layers=cfg.encoder_layers + cfg.decoder_layers,
        concept_layers=cfg.concept_layers,
    )


def token_layer_flops(seq_len: int, width: int) -> int:
    """12*T*d^2 + 2*T^2*d for one token layer."""
    return 12 * seq_len * width**2 + 2 * seq_len**2 * width


# -- parameter matching ----------------------------------------------------------------


@dataclass
class ParameterMatchReport:
    conceptlm_groups: dict[str, int]
    pm_groups: dict[str, int]

    @property
    def conceptlm_total(self) -> int:
        return sum(self.conceptlm_groups.values())

    @property
    def pm_total(self) -> int:
        return sum(self.pm_groups.values())

    @property
    def concept_extras(self) -> int:
        return sum(
            self.conceptlm_groups[g] for g in ("codebook", "heads", "concept_pos")
        )

    @property
    def conceptlm_matched(self) -> int:
        return self.conceptlm_total - self.concept_extras

    @property
    def relative_difference(self) -> float:
        return abs(self.conceptlm_matched - self.pm_total) / self.pm_total

    def passed(self, tolerance: float = 0.02) -> bool:
        return self.relative_difference <= tolerance

    def summary(self) -> str:
        lines = ["group,conceptlm,pm"]
        keys = sorted(set(self.conceptlm_groups) | set(self.pm_groups))
        for key in keys:
            lines.append(
                f"{key},{self.conceptlm_groups.get(key, 0)},{self.pm_groups.get(key, 0)}"
            )
        lines.append(f"total,{self.conceptlm_total},{self.pm_total}")
        lines.append(f"matched (excl codebook+heads+concept_pos),{self.conceptlm_matched},{self.pm_total}")
        lines.append(f"relative difference,{self.relative_difference:.6f},")
        return "\n".join(lines) + "\n"


def analytic_conceptlm_counts(cfg: ModelConfig) -> dict[str, int]:
    d, vocab = cfg.n_embd, cfg.vocab_size
    w = cfg.segment_width
    seg, entries = cfg.segments, cfg.codebook_entries
    return {
        "embeddings": vocab * d + cfg.block_size * d,
        "token_layers": (cfg.encoder_layers + cfg.decoder_layers) * layer_param_count(d),
        "concept_layers": cfg.concept_layers * layer_param_count(d),
        "final_norm": 2 * d,
        "lm_head": d * vocab + vocab,
        "concept_pos": max(cfg.max_concepts - 1, 1) * d,
        "heads": 2 * d + seg * d * entries + seg * entries,
        "codebook": seg * entries * w + 2 * seg * (w * w + w),
    }


def analytic_baseline_counts(cfg: ModelConfig, n_layers: int, n_heads_out: int = 1) -> dict[str, int]:
    d, vocab = cfg.n_embd, cfg.vocab_size
    return {
        "embeddings": vocab * d + cfg.block_size * d,
        "token_layers": n_layers * layer_param_count(d),
        "final_norm": 2 * d,
        "lm_head": n_heads_out * (d * vocab + vocab),
    }


def parameter_match_audit(cfg: ModelConfig) -> ParameterMatchReport:
    """Compare a full model against the parameter-matched token-only model
    (same stack plus concept_layers extra token layers)."""
    pm_layers = cfg.encoder_layers + cfg.decoder_layers + cfg.concept_layers
    return ParameterMatchReport(
        conceptlm_groups=analytic_conceptlm_counts(cfg),
        pm_groups=analytic_baseline_counts(cfg, pm_layers),
    )


# -- whole-model gradient check -----------------------------------------------------


def model_gradient_check(model, tokens: np.ndarray, eps: float = 1e-5,
                         max_coords_per_param: int | None = None,
                         oracle_dtype=None) -> float:
    """Central-difference check of the total training loss against the
    analytic gradient, over every parameter coordinate.

    Values passing through stop-gradient are captured at the base point and
    held fixed during perturbed evaluations: the quantity being verified is
    the gradient the sg semantics define. Returns the max relative error
    |analytic - central| / max(|analytic|, |central|, 1e-8).

    `oracle_dtype` (e.g. np.longdouble) runs the arithmetic in a wider float
    so the differencing noise floor sits below the metric's 1e-8 denominator
    floor; parameters are restored to their original dtype afterwards.
    Base points must be generic: a ReLU pre-activation or a nearest-entry
    margin within eps of zero makes the loss locally nonsmooth and the
    comparison meaningless at that coordinate.
    """
    cfg = model.config
    codebook = model.concept.codebook if isinstance(model, ConceptLM) else None
    original_dtype = None
    if oracle_dtype is not None:
        original_dtype = model.parameters()[0].values.dtype
        for _, p in model.named_parameters():
            p.cast_(oracle_dtype)

    def loss_fn():
        output = model.forward(tokens)
        return compute_losses(cfg, output, tokens, codebook=codebook).total

    captured: list = []
    model.zero_grad()
    with ad.capture_stop_gradients(captured):
        total = loss_fn()
    total.backward()
    grads = {name: np.array(p.grad) for name, p in model.named_parameters()}

    def eval_loss():
        # keep the evaluation dtype: differencing must not round through
        # a narrower float than the forward pass used
        with ad.no_grad(), ad.replay_stop_gradients(captured):
            return loss_fn().values[()]

    worst = 0.0
    for name, p in model.named_parameters():
        base = np.array(p.values)
        coords = list(np.ndindex(p.values.shape))
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            rng = np.random.default_rng(len(coords))
            chosen = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[i] for i in chosen]
        for idx in coords:
            bumped = base.copy()
            bumped[idx] = base[idx] + eps
            p.assign_(bumped)
            f_plus = eval_loss()
            bumped[idx] = base[idx] - eps
            p.assign_(bumped)
            f_minus = eval_loss()
            central = (f_plus - f_minus) / (2.0 * eps)
            a = grads[name][idx]
            err = float(abs(a - central) / max(abs(a), abs(central), 1e-8))
            worst = max(worst, err)
        p.assign_(base)
    if original_dtype is not None:
        for _, p in model.named_parameters():
            p.cast_(original_dtype)
    return worst
