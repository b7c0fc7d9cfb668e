import json

import pytest
import torch

from smap import cli, gradcheck

TINY = {
    "n_per_class": 12, "image_size": 16, "tokenizer_steps": 4, "generator_steps": 4, "warmup_steps": 1,
    "batch_size": 4, "gen_batch_size": 4, "width": 16, "latent_count": 3, "latent_dim": 4,
    "enc_depth": 1, "dec_depth": 1, "heads": 2, "card_depth": 1, "card_width": 16, "card_heads": 2,
    "card_head_width": 16, "card_head_blocks": 1, "card_time_dim": 8, "card_steps": 2,
    "samples_per_class": 2, "cross_pairs": 4,
}
PIPELINE = ["train-tokenizer", "train-generator", "reconstruct", "generate", "sweep-prefix", "cross-swap"]


def write_config(path, **over):
    path.write_text(json.dumps({**TINY, **over}))
    return str(path)


def run_pipeline(root):
    cfg = write_config(root / "run.json", out_dir=str(root / "out"))
    for mode in PIPELINE:
        assert cli.main(["--config", cfg, "--mode", mode]) == 0, mode
    return root / "out"


def test_help(capsys):
    assert cli.main(["--help"]) == 0
    assert "--config" in capsys.readouterr().out


def test_missing_config_flag():
    assert cli.main([]) == 2


def test_nonexistent_config(tmp_path):
    assert cli.main(["--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"latent_count": 0}')
    assert cli.main(["--config", str(tmp_path / "c.json")]) == 2
    assert "K >= 1" in capsys.readouterr().err


def test_missing_checkpoint_is_a_config_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path / "out"))
    assert cli.main(["--config", cfg, "--mode", "reconstruct"]) == 2


def test_bad_seed_flag(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["--config", cfg, "--seed", str(2**64)]) == 2


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SMAP_THREADS", "many")
    assert cli.main(["--config", write_config(tmp_path / "c.json")]) == 2


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "tokenizer.ckpt").write_bytes(b"SMAPCKPT" + bytes(40))
    cfg = write_config(tmp_path / "c.json", out_dir=str(out))
    assert cli.main(["--config", cfg, "--mode", "sweep-prefix"]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("a"))


def test_pipeline_outputs(pipeline):
    names = {p.name for p in pipeline.iterdir()}
    expected = {"tokenizer.ckpt", "generator.ckpt", "tokenizer_loss.csv", "generator_loss.csv",
                "reconstruct.pgm", "reconstruct.csv", "generate.pgm", "samples", "sweep_prefix.csv",
                "cross_swap.pgm", "cross_swap.csv"} | {f"sweep_k{k}.pgm" for k in range(4)}
    assert expected <= names
    assert len(list((pipeline / "samples").glob("*.pgm"))) == 4 * 2
    assert (pipeline / "sweep_prefix.csv").read_text().count("\n") == 1 + 4
    assert len((pipeline / "tokenizer_loss.csv").read_text().splitlines()) == 1 + 4


def test_checkpoint_echoes_config(pipeline):
    from smap.io import load_checkpoint

    bundle = load_checkpoint(pipeline / "tokenizer.ckpt")
    assert bundle.kind == "tokenizer"
    assert bundle.config["latent_count"] == 3 and bundle.config["mode"] == "train-tokenizer"


def test_pipeline_is_deterministic(pipeline, tmp_path):
    again = run_pipeline(tmp_path)
    files = sorted(p.relative_to(pipeline) for p in pipeline.rglob("*") if p.is_file())
    for rel in files:
        if rel.suffix == ".ckpt":
            # the manifest echoes out_dir, which differs between the two runs
            from smap.io import load_checkpoint

            a, b = load_checkpoint(pipeline / rel), load_checkpoint(again / rel)
            assert a.tensors.keys() == b.tensors.keys()
            assert all((a.tensors[k] == b.tensors[k]).all() for k in a.tensors), rel
        else:
            assert (pipeline / rel).read_bytes() == (again / rel).read_bytes(), rel


def test_seed_flag_overrides(tmp_path, pipeline):
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path))
    (tmp_path / "tokenizer.ckpt").write_bytes((pipeline / "tokenizer.ckpt").read_bytes())
    (tmp_path / "generator.ckpt").write_bytes((pipeline / "generator.ckpt").read_bytes())
    assert cli.main(["--config", cfg, "--mode", "generate", "--seed", "5"]) == 0
    assert (tmp_path / "generate.pgm").read_bytes() != (pipeline / "generate.pgm").read_bytes()


def test_gradcheck_mode(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(gradcheck, "CHECKS", {k: gradcheck.CHECKS[k] for k in ("matmul", "gelu")})
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path))
    assert cli.main(["--config", cfg, "--mode", "gradcheck"]) == 0
    assert "PASS matmul" in capsys.readouterr().out
    assert (tmp_path / "gradcheck.csv").read_text().startswith("check,seeds,max_rel_error,passed\n")


def test_gradcheck_failure_exits_nonzero(tmp_path, monkeypatch):
    class WrongGrad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(3)

        @staticmethod
        def backward(ctx, g):
            return g

    def broken(seed):
        return (lambda x: WrongGrad.apply(x).sum()), torch.tensor([1.0, 2.0], dtype=torch.float64)

    monkeypatch.setattr(gradcheck, "CHECKS", {"broken": broken})
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path))
    assert cli.main(["--config", cfg, "--mode", "gradcheck"]) == 1
