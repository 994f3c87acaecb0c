"""Command-line entry point: train / eval / audit / flops / sweep.

Every run directory receives a manifest and the fully resolved config so the
run can be reproduced exactly. Exit codes: 0 success, 1 an audit or metric
failed, 2 usage/config error. CONCEPTLM_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ModelConfig, TrainConfig, format_config, load_config
from . import data as data_mod
from . import diagnostics as diag
from .model import ConceptLM, build_model
from .trainer import CheckpointError, load_checkpoint, restore_model, run_training

USAGE_ERROR = 2
AUDIT_FAILURE = 1


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return USAGE_ERROR


def _resolve_seed(train_cfg: TrainConfig) -> TrainConfig:
    env = os.environ.get("CONCEPTLM_SEED")
    if env is None:
        return train_cfg
    try:
        seed = int(env)
    except ValueError:
        raise ConfigError(f"CONCEPTLM_SEED must be an integer, got '{env}'") from None
    return replace(train_cfg, seed=seed)


def _apply_mode(model_cfg: ModelConfig, mode: str | None) -> ModelConfig:
    if mode is None or mode == model_cfg.mode:
        return model_cfg
    losses = model_cfg.losses
    if mode in ("pm", "ntp"):
        losses = ("ntp",)
    elif mode == "mtp":
        losses = ("mtp",)
    return replace(model_cfg, mode=mode, losses=losses)


def _run_dir(out_dir: Path, digest: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{time.time_ns() % 1_000_000:06d}"
    return out_dir / f"{stamp}-{digest[:8]}"


def _write_manifest(run_dir: Path, argv: list[str], model_cfg: ModelConfig,
                    train_cfg: TrainConfig, corpus, data_paths: list[str]) -> None:
    (run_dir / "config.resolved.cfg").write_text(
        format_config(model_cfg, train_cfg), encoding="utf-8"
    )
    command = "conceptlm " + " ".join(argv)
    lines = [
        f"created = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        f"command = {command}",
        f"command_digest = {hashlib.sha256(command.encode()).hexdigest()}",
        f"model_digest = {model_cfg.digest()}",
        f"train_digest = {train_cfg.digest()}",
        f"corpus_digest = {corpus.source_digest}",
        f"out_dir = {run_dir}",
    ]
    lines += [f"data = {p}" for p in data_paths]
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args, argv: list[str]) -> int:
    try:
        model_cfg, train_cfg = load_config(args.config)
        model_cfg = _apply_mode(model_cfg, args.mode)
        train_cfg = _resolve_seed(train_cfg)
        corpus = data_mod.load_corpus(args.data)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))

    out_dir = Path(args.out)
    run_dir = _run_dir(out_dir, model_cfg.digest())
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(run_dir, argv, model_cfg, train_cfg, corpus, args.data)
    data_mod.write_manifest(run_dir / "corpus.manifest", corpus, args.data)
    print(f"run_dir: {run_dir}")

    try:
        final = run_training(
            model_cfg, train_cfg, corpus, run_dir,
            resume_path=args.resume, log=print,
        )
    except CheckpointError as exc:
        return _fail(str(exc))
    except ValueError as exc:
        return _fail(str(exc))
    print(f"final_checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        model = restore_model(ckpt)
        corpus = data_mod.load_corpus(args.data)
    except (CheckpointError, ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))
    seq_len = args.seq_len or ckpt["train_cfg"].seq_len
    try:
        ppl = diag.perplexity(model, corpus, seq_len, batch_size=args.batch_size)
    except ValueError as exc:
        return _fail(str(exc))
    print(f"ppl: {ppl:.4f}")

    if args.report == "usage":
        if not isinstance(model, ConceptLM):
            return _fail("usage report requires a conceptlm-mode checkpoint")
        report = diag.codebook_usage(model, corpus, seq_len, batch_size=args.batch_size)
        out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
        out_dir.mkdir(parents=True, exist_ok=True)
        usage_path = out_dir / "usage.csv"
        usage_path.write_text(report.csv(), encoding="utf-8")
        print(f"usage_csv: {usage_path}")
        print(report.summary(), end="")
    return 0


def cmd_audit(args) -> int:
    try:
        if args.ckpt:
            ckpt = load_checkpoint(args.ckpt)
            model = restore_model(ckpt)
            model_cfg = ckpt["model_cfg"]
            seed = ckpt["train_cfg"].seed
        else:
            model_cfg, train_cfg = load_config(args.config)
            train_cfg = _resolve_seed(train_cfg)
            seed = train_cfg.seed
            model = build_model(model_cfg, seed=seed)
        if not isinstance(model, ConceptLM):
            return _fail("audit requires a conceptlm-mode model")
    except (CheckpointError, ConfigError, OSError, ValueError) as exc:
        return _fail(str(exc))

    if args.break_fusion:
        model.broken_fusion = True

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    chunk = model_cfg.chunk_size
    seq_len = min(32, model_cfg.block_size) // chunk * chunk
    leakage = diag.leakage_audit(model, seq_len=seq_len, n_sequences=2, seed=seed)
    matrix = diag.grad_isolation_audit(model, seq_len=min(seq_len, 16), seed=seed)
    routing_ok = diag.routing_matrix_ok(matrix)
    match = diag.parameter_match_audit(model_cfg)

    (out_dir / "routing.csv").write_text(diag.routing_matrix_csv(matrix), encoding="utf-8")
    leak_ok = leakage == 0.0
    match_ok = match.passed(0.02)
    summary = [
        f"leakage_max_abs_delta = {leakage!r} ({'pass' if leak_ok else 'FAIL'})",
        f"gradient_routing = {'pass' if routing_ok else 'FAIL'}",
        f"parameter_match_rel_diff = {match.relative_difference:.6f} "
        f"({'pass' if match_ok else 'FAIL'})",
    ]
    (out_dir / "audit.txt").write_text(
        "\n".join(summary) + "\n\n" + match.summary(), encoding="utf-8"
    )
    print("\n".join(summary))
    return 0 if (leak_ok and routing_ok and match_ok) else AUDIT_FAILURE


def cmd_flops(args) -> int:
    try:
        model_cfg, _ = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    seq_len = args.seq_len or model_cfg.block_size
    report = diag.estimate_flops(model_cfg, seq_len)
    print(report.summary(), end="")
    return 0


def _parse_manifest(path: Path) -> dict:
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"sweep manifest line {lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def cmd_sweep(args) -> int:
    try:
        manifest = _parse_manifest(Path(args.manifest))
        for required in ("config", "data", "axis", "values", "out"):
            if required not in manifest:
                raise ConfigError(f"sweep manifest missing required key '{required}'")
        base_text = Path(manifest["config"]).read_text(encoding="utf-8")
        axis = manifest["axis"]
        values = [v.strip() for v in manifest["values"].split(",") if v.strip()]
        if not values:
            raise ConfigError("sweep manifest has an empty values grid")
        data_paths = [p.strip() for p in manifest["data"].split(",")]
        eval_paths = [
            p.strip() for p in manifest.get("eval_data", manifest["data"]).split(",")
        ]
        mode = manifest.get("mode")
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))

    out_dir = Path(manifest["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = ["axis,value,ppl,status"]
    for value in values:
        run_out = out_dir / f"{axis}-{value}".replace("+", "_")
        run_out.mkdir(parents=True, exist_ok=True)
        cfg_path = run_out / "config.cfg"
        lines = [
            line for line in base_text.splitlines()
            if line.strip().partition("=")[0].strip() != axis
        ]
        # '+' joins list-valued entries, e.g. a loss-combination axis with
        # values ntp, ntp+vq, ntp+ncp, ntp+ncp+vq
        lines.append(f"{axis} = {value.replace('+', ',')}")
        cfg_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

        cmd = [sys.executable, "-m", "conceptlm.cli", "train",
               "--config", str(cfg_path), "--out", str(run_out), "--data", *data_paths]
        if mode:
            cmd += ["--mode", mode]
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0:
            print(f"{axis}={value}: train failed\n{result.stderr}", file=sys.stderr)
            rows.append(f"{axis},{value},,error")
            continue
        final = None
        for line in result.stdout.splitlines():
            if line.startswith("final_checkpoint: "):
                final = line.split(": ", 1)[1]
        eval_cmd = [sys.executable, "-m", "conceptlm.cli", "eval",
                    "--ckpt", final, "--data", *eval_paths]
        eval_result = subprocess.run(eval_cmd, capture_output=True, text=True)
        if eval_result.returncode != 0 or final is None:
            rows.append(f"{axis},{value},,error")
            continue
        ppl = ""
        for line in eval_result.stdout.splitlines():
            if line.startswith("ppl: "):
                ppl = line.split(": ", 1)[1]
        rows.append(f"{axis},{value},{ppl},ok")
        print(f"{axis}={value}: ppl {ppl}")

    sweep_csv = out_dir / "sweep.csv"
    sweep_csv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"sweep_csv: {sweep_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptlm")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", nargs="+", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--mode", choices=["conceptlm", "pm", "ntp", "mtp"])
    p_train.add_argument("--resume", help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="perplexity of a checkpoint on data")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", nargs="+", required=True)
    p_eval.add_argument("--seq-len", type=int)
    p_eval.add_argument("--batch-size", type=int, default=16)
    p_eval.add_argument("--report", choices=["usage"])
    p_eval.add_argument("--out")

    p_audit = sub.add_parser("audit", help="leakage / routing / matching audits")
    p_audit.add_argument("--config")
    p_audit.add_argument("--ckpt")
    p_audit.add_argument("--out", default=".")
    p_audit.add_argument("--break-fusion", action="store_true",
                         help="negative control: deliberately leaky fusion")

    p_flops = sub.add_parser("flops", help="analytic FLOPs accounting")
    p_flops.add_argument("--config", required=True)
    p_flops.add_argument("--seq-len", type=int)

    p_sweep = sub.add_parser("sweep", help="grid of training runs from a manifest")
    p_sweep.add_argument("--manifest", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    if args.command == "train":
        return cmd_train(args, argv)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "audit":
        if not args.ckpt and not args.config:
            return _fail("audit needs --config or --ckpt")
        return cmd_audit(args)
    if args.command == "flops":
        return cmd_flops(args)
    if args.command == "sweep":
        return cmd_sweep(args)
    return _fail(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
