import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from kgcap.data import Vocabulary, build_vocabulary
from kgcap.cli import build_parser, git_blob_sha1, main, read_caption_file
from kgcap.plotting import plot_ablation, plot_attention, plot_lambda_sweep, plot_training_log

FAST = ["--set", "max_epochs=40", "--set", "eval_every=20", "--set", "scst_epochs=1"]
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def trained(synthetic_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("xe")
    code = main(["train-xe", "--data", str(synthetic_dir / "dataset.jsonl"), "--triples", str(synthetic_dir / "triples.jsonl"),
                 "--out", str(out), *FAST])
    assert code == 0
    return out


class TestEvaluate:
    def test_identical_files(self, tmp_path, capsys):
        rows = [
            {"image_id": "a", "caption": "a dog runs on the grass"},
            {"image_id": "b", "caption": "a cat sleeps on the sofa"},
            {"image_id": "c", "caption": "a bird flies near the lake"},
        ]
        hyp = write_rows(tmp_path / "hyp.jsonl", rows)
        refs = write_rows(tmp_path / "refs.jsonl", [{"id": r["image_id"], "captions": [r["caption"]]} for r in rows])
        code, out, _ = run(["evaluate", "--hyp", hyp, "--refs", refs, "--out", tmp_path / "run"], capsys)
        assert code == 0
        (scores,) = json_lines(out)
        for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"):
            assert scores[k] == pytest.approx(1.0, abs=1e-12)
        assert scores["n_images"] == 3
        assert 0.0 < scores["cider_d"] <= 10.0
        assert json.loads((tmp_path / "run" / "metrics.json").read_text()) == scores

    def test_unreferenced_hypothesis_rejected(self, tmp_path, capsys):
        hyp = write_rows(tmp_path / "hyp.jsonl", [{"image_id": "a", "caption": "a dog"}, {"image_id": "b", "caption": "a cat"}])
        refs = write_rows(tmp_path / "refs.jsonl", [{"id": "a", "captions": ["a dog"]}])
        code, _, err = run(["evaluate", "--hyp", hyp, "--refs", refs], capsys)
        assert code == 1 and "b" in err and "Traceback" not in err

    def test_malformed_row(self, tmp_path, capsys):
        bad = tmp_path / "hyp.jsonl"
        bad.write_text('{"image_id": "a", "caption": "x"}\n{not json\n')
        with pytest.raises(Exception, match=":2:"):
            read_caption_file(bad, many=False)


class TestErrors:
    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_file_exits_one(self, tmp_path, capsys):
        code, _, err = run(["train-xe", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "o"], capsys)
        assert code == 1
        assert "nope.jsonl" in err and "Traceback" not in err

    def test_out_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--data", "x.jsonl"])
        assert exc.value.code == 2

    def test_bad_set_value(self, synthetic_dir, tmp_path, capsys):
        code, _, err = run(["train-xe", "--data", synthetic_dir / "dataset.jsonl", "--out", tmp_path, "--set", "lr=-1"], capsys)
        assert code == 1 and "learning rate" in err

    def test_caption_vocab_mismatch(self, trained, synthetic_dir, tmp_path, capsys):
        small = tmp_path / "vocab.txt"
        build_vocabulary([["a", "dog"]], 10).save(small)
        code, _, err = run(["caption", "--data", synthetic_dir / "dataset.jsonl", "--checkpoint", trained / "model.ckpt",
                            "--vocab", small], capsys)
        assert code == 1 and "vocabulary" in err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "kgcap", "bogus"], capture_output=True, text=True)
        assert proc.returncode == 2
        proc = subprocess.run([sys.executable, "-m", "kgcap", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for name in ("preprocess", "train-xe", "train-scst", "caption", "evaluate", "ablate", "sweep-lambda"):
            assert name in proc.stdout


class TestHelp:
    @pytest.mark.parametrize("command", ["train-xe", "caption", "evaluate", "sweep-lambda"])
    def test_shared_flags_documented(self, command):
        text = build_parser()._subparsers._group_actions[0].choices[command].format_help()
        for flag in ("--config", "--seed", "--lambda", "--beam", "--max-len", "--dump-attention", "--out"):
            assert flag in text


class TestPipeline:
    def test_train_outputs(self, trained):
        for name in ("manifest.json", "vocab.txt", "model.ckpt", "train_log.jsonl", "training_curve.png"):
            assert (trained / name).is_file(), name
        assert (trained / "training_curve.png").read_bytes()[:8] == PNG_MAGIC
        log = json_lines((trained / "train_log.jsonl").read_text())
        assert [e["epoch"] for e in log] == list(range(40))
        assert log[-1]["loss"] < log[0]["loss"]

    def test_manifest_hashes(self, trained, synthetic_dir):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train-xe" and manifest["seed"] == 0
        assert manifest["config"]["max_epochs"] == 40
        assert "finished_at" in manifest and "model.ckpt" in manifest["artifacts"]
        entry = manifest["inputs"]["data"]
        assert entry["sha1"] == git_blob_sha1(synthetic_dir / "dataset.jsonl")
        if shutil.which("git"):
            expected = subprocess.run(["git", "hash-object", entry["path"]], capture_output=True, text=True).stdout.strip()
            assert entry["sha1"] == expected

    def test_caption_with_attention(self, trained, synthetic_dir, tmp_path, capsys):
        out = tmp_path / "cap"
        code, stdout, _ = run(["caption", "--data", synthetic_dir / "dataset.jsonl", "--checkpoint", trained / "model.ckpt",
                               "--vocab", trained / "vocab.txt", "--triples", synthetic_dir / "triples.jsonl",
                               "--dump-attention", "--out", out], capsys)
        assert code == 0
        rows = json_lines(stdout)
        assert len(rows) == 10
        for row in rows:
            assert set(row) == {"image_id", "caption", "score", "alphas"}
            np.testing.assert_allclose(np.sum(row["alphas"], axis=1), 1.0, atol=1e-9)
            assert (out / "attention" / f"{row['image_id']}.png").read_bytes()[:8] == PNG_MAGIC
        assert json_lines((out / "captions.jsonl").read_text()) == rows

    def test_caption_is_deterministic(self, trained, synthetic_dir, capsys):
        argv = ["caption", "--data", synthetic_dir / "dataset.jsonl", "--checkpoint", trained / "model.ckpt",
                "--vocab", trained / "vocab.txt", "--beam", "2"]
        assert run(argv, capsys)[1] == run(argv, capsys)[1]

    def test_train_scst_warm_start(self, trained, synthetic_dir, tmp_path, capsys):
        out = tmp_path / "scst"
        code, _, _ = run(["train-scst", "--data", synthetic_dir / "dataset.jsonl", "--init", trained / "model.ckpt",
                          "--vocab", trained / "vocab.txt", "--out", out, *FAST], capsys)
        assert code == 0
        log = json_lines((out / "train_log.jsonl").read_text())
        assert len(log) == 1 and 0.0 <= log[0]["cider"] <= 10.0

    def test_preprocess(self, synthetic_dir, tmp_path, capsys):
        code, _, _ = run(["preprocess", "--data", synthetic_dir / "dataset.jsonl", "--out", tmp_path], capsys)
        assert code == 0
        vocab = Vocabulary.load(tmp_path / "vocab.txt")
        assert "dog" in vocab and vocab.n_docs == 10
        index = json.loads((tmp_path / "features.json").read_text())
        assert len(index) == 10 and all(v["L"] == 6 and v["D"] == 32 for v in index.values())

    def test_gradcheck(self, tmp_path, capsys):
        code, out, _ = run(["gradcheck", "--out", tmp_path], capsys)
        assert code == 0
        rows = json_lines(out)
        assert all(r["pass"] for r in rows)
        assert {r["tied_output"] for r in rows} == {True, False}


class TestPlotting:
    def test_figures(self, tmp_path):
        log = [{"epoch": e, "split": "train", "loss": 1.0 / (e + 1), "cider": None if e % 2 else e} for e in range(4)]
        paths = [
            plot_training_log(log, tmp_path / "a.png", "xe"),
            plot_lambda_sweep([{"lambda": l, "cider_d": l * (1 - l)} for l in (0.0, 0.5, 1.0)], tmp_path / "b.png"),
            plot_ablation([{"config": "RL", "bleu4": 0.5, "rouge_l": 0.6, "cider_d": 7.0}], tmp_path / "c.png"),
            plot_attention([np.array([0.2, 0.8]), np.array([0.5, 0.5])], ["a", "dog"], tmp_path / "d.png"),
        ]
        for p in paths:
            assert p.read_bytes()[:8] == PNG_MAGIC
