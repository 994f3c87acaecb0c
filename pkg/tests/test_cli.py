"""End-to-end tests of the command-line interface."""

import os

import numpy as np
import pytest

from conceptlm import cli
from conceptlm.trainer import load_checkpoint, restore_model

TINY_CFG = """\
d = 16
n_heads = 2
encoder_layers = 1
decoder_layers = 1
concept_layers = 1
chunk_size = 4
segments = 2
codebook_entries = 4
block_size = 16

learning_rate = 1e-3
warmup_steps = 2
total_steps = 6
batch_size = 2
seq_len = 16
checkpoint_every = 3
seed = 0
"""


@pytest.fixture
def workspace(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = tmp_path / "corpus.bin"
    data.write_bytes(bytes(range(256)) * 6)
    return tmp_path, cfg, data


def run_dir_from(capsys):
    out = capsys.readouterr().out
    run_dir = final = None
    for line in out.splitlines():
        if line.startswith("run_dir: "):
            run_dir = line.split(": ", 1)[1]
        if line.startswith("final_checkpoint: "):
            final = line.split(": ", 1)[1]
    return run_dir, final, out


class TestTrainCommand:
    def test_writes_artifacts(self, workspace, capsys):
        tmp, cfg, data = workspace
        code = cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "runs")])
        assert code == 0
        run_dir, final, _ = run_dir_from(capsys)
        assert run_dir and final
        for name in ("metrics.csv", "manifest.txt", "config.resolved.cfg",
                     "corpus.manifest", "ckpt_final.bin", "ckpt_step000003.bin"):
            assert os.path.exists(os.path.join(run_dir, name)), name

    def test_missing_required_key_names_it(self, workspace, capsys):
        tmp, _, data = workspace
        cfg = tmp / "broken.cfg"
        cfg.write_text("n_heads = 2\n")
        code = cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "runs")])
        assert code == 2
        assert "'d'" in capsys.readouterr().err

    def test_unknown_key_rejected(self, workspace, capsys):
        tmp, _, data = workspace
        cfg = tmp / "broken.cfg"
        cfg.write_text("d = 16\nn_headz = 2\n")
        code = cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "runs")])
        assert code == 2
        assert "n_headz" in capsys.readouterr().err

    def test_resume_continues_bit_exactly(self, workspace, capsys):
        tmp, cfg, data = workspace
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "full")]) == 0
        full_dir, full_final, _ = run_dir_from(capsys)
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "part")]) == 0
        part_dir, _, _ = run_dir_from(capsys)
        code = cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "resumed"),
                         "--resume", os.path.join(part_dir, "ckpt_step000003.bin")])
        assert code == 0
        _, resumed_final, _ = run_dir_from(capsys)
        a = load_checkpoint(full_final)["arrays"]
        b = load_checkpoint(resumed_final)["arrays"]
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_mode_flag_selects_variant(self, workspace, capsys):
        tmp, cfg, data = workspace
        for mode in ("pm", "ntp", "mtp", "conceptlm"):
            code = cli.main(["train", "--config", str(cfg), "--data", str(data),
                             "--out", str(tmp / mode), "--mode", mode])
            assert code == 0, mode
            _, final, _ = run_dir_from(capsys)
            ckpt = load_checkpoint(final)
            assert ckpt["model_cfg"].mode == mode

    def test_env_seed_override(self, workspace, capsys):
        tmp, cfg, data = workspace
        os.environ["CONCEPTLM_SEED"] = "7"
        try:
            assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                             "--out", str(tmp / "env")]) == 0
            _, final, _ = run_dir_from(capsys)
            assert load_checkpoint(final)["train_cfg"].seed == 7
        finally:
            del os.environ["CONCEPTLM_SEED"]

    def test_deterministic_metrics(self, workspace, capsys):
        tmp, cfg, data = workspace
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "a")]) == 0
        dir_a, _, _ = run_dir_from(capsys)
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "b")]) == 0
        dir_b, _, _ = run_dir_from(capsys)
        read = lambda d: open(os.path.join(d, "metrics.csv")).read()
        assert read(dir_a) == read(dir_b)


class TestEvalCommand:
    def test_prints_four_decimal_ppl(self, workspace, capsys):
        tmp, cfg, data = workspace
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "runs")]) == 0
        _, final, _ = run_dir_from(capsys)
        assert cli.main(["eval", "--ckpt", final, "--data", str(data)]) == 0
        out = capsys.readouterr().out
        line = [l for l in out.splitlines() if l.startswith("ppl: ")][0]
        value = line.split(": ")[1]
        assert len(value.split(".")[1]) == 4
        # printed value is the evaluator's number
        from conceptlm import diagnostics as diag
        from conceptlm.data import load_corpus

        ckpt = load_checkpoint(final)
        model = restore_model(ckpt)
        expected = diag.perplexity(model, load_corpus([data]), ckpt["train_cfg"].seq_len)
        assert value == f"{expected:.4f}"

    def test_corrupt_checkpoint_rejected(self, workspace, capsys):
        tmp, _, data = workspace
        bad = tmp / "bad.bin"
        bad.write_bytes(b"garbage")
        assert cli.main(["eval", "--ckpt", str(bad), "--data", str(data)]) == 2

    def test_usage_report_written(self, workspace, capsys):
        tmp, cfg, data = workspace
        assert cli.main(["train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp / "runs")]) == 0
        _, final, _ = run_dir_from(capsys)
        assert cli.main(["eval", "--ckpt", final, "--data", str(data),
                         "--report", "usage", "--out", str(tmp / "rep")]) == 0
        usage = tmp / "rep" / "usage.csv"
        assert usage.exists()
        lines = usage.read_text().strip().splitlines()
        assert lines[0] == "segment,entry,count"
        assert len(lines) == 1 + 2 * 4


class TestAuditCommand:
    def test_fresh_model_passes(self, workspace, capsys):
        tmp, cfg, _ = workspace
        code = cli.main(["audit", "--config", str(cfg), "--out", str(tmp / "audit")])
        assert code == 0
        assert (tmp / "audit" / "routing.csv").exists()
        assert (tmp / "audit" / "audit.txt").exists()

    def test_break_fusion_negative_control(self, workspace, capsys):
        tmp, cfg, _ = workspace
        code = cli.main(["audit", "--config", str(cfg), "--out", str(tmp / "neg"),
                         "--break-fusion"])
        assert code == 1
        # report written even on failure
        assert (tmp / "neg" / "routing.csv").exists()
        assert "FAIL" in (tmp / "neg" / "audit.txt").read_text()

    def test_routing_csv_shape(self, workspace, capsys):
        tmp, cfg, _ = workspace
        cli.main(["audit", "--config", str(cfg), "--out", str(tmp / "audit")])
        lines = (tmp / "audit" / "routing.csv").read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 loss rows
        assert all(len(l.split(",")) == 7 for l in lines)


class TestFlopsCommand:
    def test_reference_setting_prints_ratio(self, tmp_path, capsys):
        code = cli.main(["flops", "--config", "configs/llama8b_continual.cfg",
                         "--seq-len", "8192"])
        assert code == 0
        out = capsys.readouterr().out
        assert "4.69%" in out
        assert "408.0*T*d^2 + 68.0*T^2*d" in out
        assert "390.0*T*d^2 + 64.25*T^2*d" in out

    def test_chunk_one_prints_zero_reduction(self, tmp_path, capsys):
        cfg = tmp_path / "k1.cfg"
        cfg.write_text(TINY_CFG.replace("chunk_size = 4", "chunk_size = 1"))
        assert cli.main(["flops", "--config", str(cfg), "--seq-len", "64"]) == 0
        assert "reduction: 0.00%" in capsys.readouterr().out


class TestSweepCommand:
    def test_chunk_size_grid(self, workspace, capsys):
        tmp, cfg, data = workspace
        manifest = tmp / "sweep.txt"
        manifest.write_text(
            f"config = {cfg}\ndata = {data}\naxis = chunk_size\n"
            f"values = 2,4\nout = {tmp / 'sweep'}\n"
        )
        code = cli.main(["sweep", "--manifest", str(manifest)])
        assert code == 0
        rows = (tmp / "sweep" / "sweep.csv").read_text().strip().splitlines()
        assert rows[0] == "axis,value,ppl,status"
        assert len(rows) == 3
        assert all(r.endswith("ok") for r in rows[1:])

    def test_empty_grid_is_error(self, workspace, capsys):
        tmp, cfg, data = workspace
        manifest = tmp / "sweep.txt"
        manifest.write_text(
            f"config = {cfg}\ndata = {data}\naxis = chunk_size\n"
            f"values = \nout = {tmp / 'sweep'}\n"
        )
        assert cli.main(["sweep", "--manifest", str(manifest)]) == 2

    def test_loss_combination_axis(self, workspace, capsys):
        # the four training-objective combinations as one sweep
        tmp, cfg, data = workspace
        manifest = tmp / "sweep.txt"
        manifest.write_text(
            f"config = {cfg}\ndata = {data}\naxis = losses\n"
            f"values = ntp,ntp+vq,ntp+ncp,ntp+ncp+vq\nout = {tmp / 'sweep'}\n"
        )
        code = cli.main(["sweep", "--manifest", str(manifest)])
        assert code == 0
        rows = (tmp / "sweep" / "sweep.csv").read_text().strip().splitlines()
        assert len(rows) == 5
        assert all(r.endswith("ok") for r in rows[1:])
        # each child really trained with its own loss subset
        full_cfg = (tmp / "sweep" / "losses-ntp_ncp_vq" / "config.cfg").read_text()
        assert "losses = ntp,ncp,vq" in full_cfg

    def test_failed_child_recorded_and_continues(self, workspace, capsys):
        tmp, cfg, data = workspace
        manifest = tmp / "sweep.txt"
        # chunk_size 5 does not divide seq_len 16 -> that child fails
        manifest.write_text(
            f"config = {cfg}\ndata = {data}\naxis = chunk_size\n"
            f"values = 5,4\nout = {tmp / 'sweep'}\n"
        )
        code = cli.main(["sweep", "--manifest", str(manifest)])
        assert code == 0
        rows = (tmp / "sweep" / "sweep.csv").read_text().strip().splitlines()
        assert rows[1] == "chunk_size,5,,error"
        assert rows[2].endswith("ok")
