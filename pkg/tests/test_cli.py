import json

import numpy as np
import pytest

from gessure.cli import main, read_config
from gessure.dataset import SynthGestureSpec, export_npy, synth_gestures
from gessure.errors import ConfigError
from gessure.face import load_embeddings_jsonl
from gessure.model import build_gessure_net, save_model
from gessure.pipeline import ContextChange, FaceFrame, HandFrame, Toggle, event_to_dict

TINY_FLAGS = ["--epochs", "3", "--conv1-filters", "8", "--conv2-filters", "8", "--lstm-units", "12"]


def strict_json(text):
    def reject(value):
        raise ValueError(f"non-standard JSON constant {value}")
    return json.loads(text, parse_constant=reject)


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    g, f, b = root / "g.jsonl", root / "f.jsonl", root / "bundle"
    assert main(["gen-synth", "--seed", "1", "--data", str(g), "--samples-per-class", "8"]) == 0
    assert main(["gen-synth", "--seed", "1", "--kind", "faces", "--data", str(f)]) == 0
    assert main(["train-gestures", "--seed", "0", "--data", str(g), "--bundle", str(b), *TINY_FLAGS]) == 0
    assert main(["train-face", "--seed", "0", "--data", str(f), "--user", "id0", "--bundle", str(b)]) == 0
    return root


def test_inspect_default_model(workdir, capsys):
    save_model(build_gessure_net(), "m.gsrm")
    assert main(["inspect", "m.gsrm"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1] == "parameters: 237718"
    assert main(["inspect", "--model", "m.gsrm", "--json"]) == 0
    data = strict_json(capsys.readouterr().out)
    assert data["parameters"] == 237718
    assert [row["params"] for row in data["layers"] if row["params"]] == [12160, 12352, 212000, 1206]


def test_eval_json(trained, capsys):
    code = main(["eval", "--bundle", str(trained / "bundle"), "--data", str(trained / "g.jsonl"), "--json"])
    assert code == 0
    report = strict_json(capsys.readouterr().out)
    assert set(report["classes"]["0"]) == {"precision", "recall", "f1-score", "support"}
    assert {"accuracy", "macro avg", "weighted avg"} <= set(report)
    assert sum(c["support"] for c in report["classes"].values()) == 48


def test_eval_table(trained, capsys):
    assert main(["eval", "--model", str(trained / "bundle" / "gesture.gsrm"), "--data", str(trained / "g.jsonl")]) == 0
    assert "macro avg" in capsys.readouterr().out


def test_replay_prints_action_log(trained, workdir, capsys):
    faces = load_embeddings_jsonl(trained / "f.jsonl")
    user = faces.vectors[faces.identities.index("id0")]
    hand = HandFrame(tuple(np.full(63, 0.5)))
    events = [Toggle(True), FaceFrame((user,)), ContextChange("msword")] + [hand] * 40
    session = workdir / "s.jsonl"
    session.write_text("".join(json.dumps(event_to_dict(e)) + "\n" for e in events))
    assert main(["replay", "--session", str(session), "--bundle", str(trained / "bundle"),
                 "--threshold-gesture", "0.01"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) <= 2
    for line in lines:
        rec = strict_json(line)
        assert set(rec) == {"idx", "action", "context"}
        assert rec["idx"] in (22, 42)
    # identical inputs -> identical bytes
    main(["replay", "--session", str(session), "--bundle", str(trained / "bundle"), "--threshold-gesture", "0.01"])
    assert capsys.readouterr().out.splitlines() == lines


def test_replay_bad_session(trained, workdir, capsys):
    session = workdir / "s.jsonl"
    session.write_text('{"ev":"hand","coords":[1,2,3]}\n')
    assert main(["replay", "--session", str(session), "--bundle", str(trained / "bundle")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_train_gestures_deterministic(trained, workdir):
    args = ["train-gestures", "--seed", "5", "--data", str(trained / "g.jsonl"), *TINY_FLAGS]
    assert main(args + ["--bundle", "a"]) == 0
    assert main(args + ["--bundle", "b"]) == 0
    names = sorted(p.name for p in (workdir / "a").iterdir())
    assert names == ["bindings.json", "gesture.gsrm", "manifest.json"]
    for name in names:
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()
    assert main(args[:1] + ["--seed", "6"] + args[3:] + ["--bundle", "c"]) == 0
    assert (workdir / "c" / "gesture.gsrm").read_bytes() != (workdir / "a" / "gesture.gsrm").read_bytes()


def test_gen_synth_deterministic(workdir):
    assert main(["gen-synth", "--seed", "3", "--data", "a.jsonl", "--samples-per-class", "2"]) == 0
    assert main(["gen-synth", "--seed", "3", "--data", "b.jsonl", "--samples-per-class", "2"]) == 0
    assert (workdir / "a.jsonl").read_bytes() == (workdir / "b.jsonl").read_bytes()


def test_seed_required(workdir, capsys):
    assert main(["gen-synth", "--data", "a.jsonl"]) == 1
    assert "--seed" in capsys.readouterr().err


def test_import_npy(workdir, capsys):
    data = synth_gestures(SynthGestureSpec(samples_per_class=1, seed=0))
    export_npy(data.subset([0, 1]), workdir / "x.npy")
    assert main(["import-npy", "x.npy", "--label", "2", "--data", "out.jsonl", "--json"]) == 0
    assert strict_json(capsys.readouterr().out)["records"] == 2
    assert main(["import-npy", "x.npy", "--label", "3", "--data", "out.jsonl", "--append"]) == 0
    labels = [json.loads(line)["label"] for line in (workdir / "out.jsonl").read_text().splitlines()]
    assert labels == [2, 2, 3, 3]
    assert main(["import-npy", "x.npy", "--label", "9", "--data", "out.jsonl"]) == 1
    (workdir / "bad.npy").write_bytes(b"\x93NUMPY junk")
    assert main(["import-npy", "bad.npy", "--label", "0", "--data", "o.jsonl"]) == 1


def test_exit_codes(workdir, capsys):
    assert main(["no-such-command"]) == 1
    assert main(["eval", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["inspect", "missing.gsrm"]) == 2
    assert main(["eval", "--data", "missing.jsonl", "--model", "missing.gsrm"]) == 2
    (workdir / "junk.gsrm").write_bytes(b"JUNK")
    assert main(["inspect", "junk.gsrm"]) == 1
    assert main(["replay", "--session", "s", "--bundle", ".", "--threshold-auth", "1.5"]) == 1
    assert main([]) == 1


def test_config_file_and_flag_precedence(trained, workdir):
    cfg = workdir / "run.cfg"
    cfg.write_text("# tiny run\nseed = 5\nepochs=3\nconv1-filters = 8\nconv2_filters = 8\nlstm_units = 12\n"
                   f"data = {trained / 'g.jsonl'}\n")
    assert main(["train-gestures", "--config", str(cfg), "--bundle", "a"]) == 0
    assert main(["train-gestures", "--seed", "5", "--data", str(trained / "g.jsonl"), *TINY_FLAGS, "--bundle", "b"]) == 0
    assert (workdir / "a" / "gesture.gsrm").read_bytes() == (workdir / "b" / "gesture.gsrm").read_bytes()
    assert main(["train-gestures", "--config", str(cfg), "--seed", "6", "--bundle", "c"]) == 0
    assert (workdir / "c" / "gesture.gsrm").read_bytes() != (workdir / "a" / "gesture.gsrm").read_bytes()


def test_read_config_errors(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed 4\n")
    with pytest.raises(ConfigError):
        read_config(path)
    path.write_text("colour = red\n")
    with pytest.raises(ConfigError):
        read_config(path)
    path.write_text("seed = four\n")
    with pytest.raises(ConfigError):
        read_config(path)
    path.write_text("seed = 4  # trailing\nthreshold-auth = 0.95\n")
    assert read_config(path) == {"seed": 4, "threshold_auth": 0.95}


def test_replay_requires_full_bundle(trained, workdir):
    args = ["train-gestures", "--seed", "5", "--data", str(trained / "g.jsonl"), *TINY_FLAGS, "--bundle", "half"]
    assert main(args) == 0
    (workdir / "s.jsonl").write_text('{"ev":"toggle","on":true}\n')
    assert main(["replay", "--session", "s.jsonl", "--bundle", "half"]) == 1
