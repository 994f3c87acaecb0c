"""Optimization loop: AdamW, linear-warmup cosine schedule, global-norm
gradient clipping, deterministic batching, and bit-exact checkpointing.

Checkpoint container format (version 1, little-endian):

    bytes 0..7    magic b"CLM1CKPT"
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes of canonical JSON (sorted keys, no whitespace)
    then          raw array bytes, concatenated in header["sections"] order

The header carries: version, step, the full config text (model + train),
the model/train/corpus digests, the metrics tail, and one section record
{name, dtype, shape, nbytes} per array. Parameters are stored under
"param/<name>", optimizer moments under "adam/m/<name>" and "adam/v/<name>".
Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
import time
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, format_config, parse_config_text
from .data import Corpus, batch_for_step
from .losses import LossBundle, compute_losses
from .model import ConceptLM, build_model

CHECKPOINT_MAGIC = b"CLM1CKPT"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,lr,l_ntp,l_ncp,l_vq,l_mtp,total"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to min_lr_ratio of it."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / span
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine)


def clip_gradients(params: list, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        g = p.grad
        if g is not None:
            total += float(np.sum(g * g, dtype=np.float64))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adam with decoupled weight decay; decay applies to rank >= 2 params
    only (matrices and embeddings, not biases or norm scales) and is
    multiplied by the learning rate, so lr = 0 leaves parameters untouched."""

    def __init__(self, named_params, train_cfg: TrainConfig):
        self.names = [name for name, _ in named_params]
        self.params = [p for _, p in named_params]
        self.beta1 = train_cfg.adam_beta1
        self.beta2 = train_cfg.adam_beta2
        self.eps = train_cfg.adam_eps
        self.weight_decay = train_cfg.weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.values) for n, p in zip(self.names, self.params)}
        self.v = {n: np.zeros_like(p.values) for n, p in zip(self.names, self.params)}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in zip(self.names, self.params):
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if p.values.ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * p.values
            p.assign_(p.values - lr * update)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.names:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.names:
            self.m[name] = np.array(arrays[f"m/{name}"], dtype=self.m[name].dtype)
            self.v[name] = np.array(arrays[f"v/{name}"], dtype=self.v[name].dtype)


def train_step(model, optimizer: AdamW, tokens: np.ndarray, model_cfg: ModelConfig,
               lr: float, grad_clip: float, step: int) -> LossBundle:
    """One forward/backward/clip/update cycle."""
    model.zero_grad()
    if isinstance(model, ConceptLM):
        output = model.forward(tokens, quantize_states=False)
        codebook = model.concept.codebook
    else:
        output = model.forward(tokens)
        codebook = None
    bundle = compute_losses(model_cfg, output, tokens, codebook=codebook)
    total = float(bundle.total.values)
    if not math.isfinite(total):
        raise TrainingError(
            f"non-finite loss at step {step}: {bundle.component_values()}"
        )
    bundle.total.backward()
    clip_gradients(optimizer.params, grad_clip)
    optimizer.step(lr)
    return bundle


# -- checkpoint io --------------------------------------------------------------


def save_checkpoint(path, model, optimizer: AdamW, step: int, model_cfg: ModelConfig,
                    train_cfg: TrainConfig, corpus_digest: str,
                    metrics_tail: list[str] | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.values
    for name, arr in optimizer.state_arrays().items():
        arrays[f"adam/{name}"] = arr

    sections = []
    blobs = []
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        blob = arr.astype(dtype, copy=False).tobytes()
        sections.append(
            {"name": name, "dtype": dtype.str, "shape": list(arr.shape), "nbytes": len(blob)}
        )
        blobs.append(blob)

    header = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "adam_t": int(optimizer.t),
        "config_text": format_config(model_cfg, train_cfg),
        "model_digest": model_cfg.digest(),
        "train_digest": train_cfg.digest(),
        "corpus_digest": corpus_digest,
        "metrics_tail": metrics_tail or [],
        "sections": sections,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict:
    """Parse a checkpoint into {header, arrays, model_cfg, train_cfg}."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (head_len,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    arrays = {}
    offset = 12 + head_len
    for sec in header["sections"]:
        blob = raw[offset : offset + sec["nbytes"]]
        if len(blob) != sec["nbytes"]:
            raise CheckpointError(f"{path}: truncated section {sec['name']}")
        arrays[sec["name"]] = np.frombuffer(blob, dtype=np.dtype(sec["dtype"])).reshape(
            sec["shape"]
        )
        offset += sec["nbytes"]
    model_cfg, train_cfg = parse_config_text(header["config_text"])
    return {
        "header": header,
        "arrays": arrays,
        "model_cfg": model_cfg,
        "train_cfg": train_cfg,
    }


def restore_model(ckpt: dict):
    """Build the checkpointed model and load its parameters."""
    model = build_model(ckpt["model_cfg"], seed=ckpt["train_cfg"].seed)
    params = {
        name[len("param/"):]: arr
        for name, arr in ckpt["arrays"].items()
        if name.startswith("param/")
    }
    model.load_state_arrays(params)
    return model


# -- training loop ----------------------------------------------------------------


def _format_metric(value) -> str:
    return "" if value is None else repr(value)


def metrics_row(step: int, lr: float, bundle: LossBundle) -> str:
    vals = bundle.component_values()
    fields = [str(step), repr(lr)]
    fields += [_format_metric(vals[k]) for k in ("l_ntp", "l_ncp", "l_vq", "l_mtp")]
    fields.append(repr(vals["total"]))
    return ",".join(fields)


def run_training(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Corpus,
                 out_dir, resume_path=None, log=print) -> Path:
    """Train to total_steps, writing metrics.csv and periodic checkpoints.

    Returns the final checkpoint path. Resuming restores parameters and
    optimizer moments and replays the exact batch schedule, so the result is
    bit-identical to an uninterrupted run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = AdamW(model.named_parameters(), train_cfg)
    start_step = 0

    if resume_path is not None:
        ckpt = load_checkpoint(resume_path)
        if ckpt["header"]["model_digest"] != model_cfg.digest():
            raise CheckpointError("checkpoint model config does not match this run")
        if ckpt["header"]["corpus_digest"] != corpus.source_digest:
            raise CheckpointError("checkpoint corpus digest does not match this run")
        params = {
            name[len("param/"):]: arr
            for name, arr in ckpt["arrays"].items()
            if name.startswith("param/")
        }
        model.load_state_arrays(params)
        moments = {
            name[len("adam/"):]: arr
            for name, arr in ckpt["arrays"].items()
            if name.startswith("adam/")
        }
        optimizer.load_state_arrays(moments, t=ckpt["header"]["adam_t"])
        start_step = int(ckpt["header"]["step"])

    metrics_path = out_dir / "metrics.csv"
    fresh = not metrics_path.exists()
    tail: list[str] = []
    tokens_per_step = train_cfg.batch_size * train_cfg.seq_len
    window_start = time.monotonic()

    with open(metrics_path, "a", encoding="utf-8") as metrics:
        if fresh:
            metrics.write(METRICS_HEADER + "\n")
        for step in range(start_step, train_cfg.total_steps):
            batch = batch_for_step(
                corpus,
                train_cfg.batch_size,
                train_cfg.seq_len,
                model_cfg.chunk_size,
                train_cfg.seed,
                step,
            )
            lr = lr_at(step, train_cfg)
            bundle = train_step(
                model, optimizer, batch.inputs, model_cfg, lr, train_cfg.grad_clip, step
            )
            row = metrics_row(step, lr, bundle)
            metrics.write(row + "\n")
            tail = (tail + [row])[-5:]

            done = step + 1
            if log is not None and done % train_cfg.log_every == 0:
                elapsed = max(time.monotonic() - window_start, 1e-9)
                rate = train_cfg.log_every * tokens_per_step / elapsed
                log(
                    f"step {done}/{train_cfg.total_steps} "
                    f"total {float(bundle.total.values):.4f} "
                    f"lr {lr:.3e} tokens/sec {rate:.0f}"
                )
                window_start = time.monotonic()
            if done % train_cfg.checkpoint_every == 0 and done < train_cfg.total_steps:
                save_checkpoint(
                    out_dir / f"ckpt_step{done:06d}.bin",
                    model, optimizer, done, model_cfg, train_cfg,
                    corpus.source_digest, tail,
                )

    final_path = out_dir / "ckpt_final.bin"
    save_checkpoint(
        final_path, model, optimizer, train_cfg.total_steps, model_cfg, train_cfg,
        corpus.source_digest, tail,
    )
    return final_path
