"""End-to-end tests for the command-line interface.

Every test drives `main(argv)` the way a shell would and checks the exit code
contract: 0 success, 1 usage error, 2 data/compute error, 3 judge unavailable.
"""

import json
import socket

import numpy as np
import pytest

from loramerge import tensorfile
from loramerge.cli import load_config, main
from loramerge.evaluation import (DEFAULT_TAU_CONTENT, DEFAULT_TAU_STYLE,
                                  export_coefficients_csv)
from loramerge.hypernet import hypernet_coefficients, load_hypernet, save_hypernet
from loramerge.merging import direct_merge_deltas
from loramerge.objective import MergePolicy, build_merged_deltas
from loramerge.tasks import load_corpus

TINY_CONFIG = {
    "dims": {"d": 8, "h": 4, "d_p": 8, "t": 2, "blocks": 1},
    "finetune": {"steps": 40, "rank": 2},
}

TINY_MANIFEST = {
    "content": {"train": [0, 1], "val": [], "test": [2]},
    "style": {"train": [0, 1], "val": [], "test": [2]},
}


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """A tiny corpus generated through the CLI itself, plus its config files."""
    root = tmp_path_factory.mktemp("cli-workspace")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(TINY_MANIFEST))
    out = root / "corpus"
    assert main(["gen-dataset", "--out", str(out), "--manifest", str(manifest),
                 "--config", str(config)]) == 0
    return {"root": root, "corpus": out, "config": config, "manifest": manifest}


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory, trained_net):
    net, _ = trained_net
    path = tmp_path_factory.mktemp("cli-ckpt") / "hypernet.safetensors"
    save_hypernet(path, net, MergePolicy())
    return path


def _adapter(corpus_dir, kind, seed):
    return str(corpus_dir / f"{kind}-{seed:03d}.safetensors")


# -- config file handling ------------------------------------------------


def test_load_config_none_is_empty():
    assert load_config(None) == {}


def test_load_config_valid(cli_workspace):
    cfg = load_config(str(cli_workspace["config"]))
    assert cfg["dims"]["d"] == 8
    assert cfg["finetune"]["steps"] == 40


def test_config_unknown_top_level_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"typo_section": {}}))
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_config_unknown_nested_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"finetune": {"steps": 5, "momentum": 0.9}}))
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_config_not_an_object_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([1, 2, 3]))
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_config_invalid_json_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2


def test_config_missing_file_exits_2(tmp_path):
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--config", str(tmp_path / "nope.json")]) == 2


# -- usage errors --------------------------------------------------------


def test_missing_required_flag_exits_1(capsys):
    assert main(["gen-dataset"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_subcommand_exits_1():
    assert main(["frobnicate"]) == 1


def test_no_subcommand_exits_1():
    assert main([]) == 1


def test_bad_flag_value_exits_1():
    assert main(["gen-dataset", "--out", "x", "--rank", "four"]) == 1


# -- gen-dataset ---------------------------------------------------------


def test_gen_dataset_writes_loadable_corpus(cli_workspace):
    corpus = load_corpus(cli_workspace["corpus"])
    assert corpus.dims.d == 8 and corpus.dims.blocks == 1
    assert len(corpus.entries) == 6
    assert len(corpus.select("content", "train")) == 2
    assert len(corpus.pairs("test")) == 1
    assert (cli_workspace["corpus"] / "index.json.log").is_file()


def test_gen_dataset_reports_progress(cli_workspace, tmp_path, capsys):
    assert main(["gen-dataset", "--out", str(tmp_path / "c2"),
                 "--manifest", str(cli_workspace["manifest"]),
                 "--config", str(cli_workspace["config"])]) == 0
    out = capsys.readouterr().out
    assert "wrote 6 adapters" in out
    assert "mean final loss" in out


def test_gen_dataset_deterministic_rebuild(cli_workspace, tmp_path):
    out2 = tmp_path / "again"
    assert main(["gen-dataset", "--out", str(out2),
                 "--manifest", str(cli_workspace["manifest"]),
                 "--config", str(cli_workspace["config"])]) == 0
    first = cli_workspace["corpus"]
    assert (out2 / "index.json").read_text() == (first / "index.json").read_text()
    for f in sorted(first.glob("*.safetensors")):
        assert (out2 / f.name).read_bytes() == f.read_bytes(), f.name


def test_gen_dataset_flag_beats_config(cli_workspace, tmp_path):
    out = tmp_path / "flagged"
    assert main(["gen-dataset", "--out", str(out),
                 "--manifest", str(cli_workspace["manifest"]),
                 "--config", str(cli_workspace["config"]),
                 "--finetune-steps", "60"]) == 0
    index = json.loads((out / "index.json").read_text())
    assert index["finetune"]["steps"] == 60       # flag wins over config's 40
    assert index["finetune"]["rank"] == 2         # config wins over default 4
    assert index["dims"]["d"] == 8


def test_gen_dataset_missing_manifest_exits_2(tmp_path):
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--manifest", str(tmp_path / "absent.json")]) == 2


def test_gen_dataset_malformed_manifest_exits_2(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps({"content": {"train": [0]},
                               "style": {"train": [0]}, "extra": 1}))
    assert main(["gen-dataset", "--out", str(tmp_path / "c"),
                 "--manifest", str(bad)]) == 2


# -- train-hypernet ------------------------------------------------------


def test_train_hypernet_cli(cli_workspace, tmp_path, capsys):
    ckpt = tmp_path / "net.safetensors"
    assert main(["train-hypernet", "--corpus", str(cli_workspace["corpus"]),
                 "--out", str(ckpt), "--steps", "12",
                 "--config", str(cli_workspace["config"])]) == 0
    assert "trained 12 steps on 2x2 train pairs" in capsys.readouterr().out
    net, policy = load_hypernet(ckpt)
    assert policy == MergePolicy()
    tf = tensorfile.load_tensorfile(ckpt)
    assert tf.metadata["steps"] == "12"
    assert (tmp_path / "net.safetensors.log").is_file()


def test_train_hypernet_deterministic(cli_workspace, tmp_path):
    args = ["train-hypernet", "--corpus", str(cli_workspace["corpus"]),
            "--steps", "12", "--config", str(cli_workspace["config"])]
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_hypernet_missing_corpus_exits_2(tmp_path):
    assert main(["train-hypernet", "--corpus", str(tmp_path / "void"),
                 "--out", str(tmp_path / "n.safetensors")]) == 2


# -- merge ---------------------------------------------------------------


def test_merge_direct_matches_library(corpus_dir, tmp_path):
    out = tmp_path / "merged.safetensors"
    assert main(["merge", "--strategy", "direct",
                 "--content", _adapter(corpus_dir, "content", 0),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(out)]) == 0
    deltas, meta = tensorfile.load_merged_deltas(out)
    Lc = tensorfile.load_adapter(_adapter(corpus_dir, "content", 0))
    Ls = tensorfile.load_adapter(_adapter(corpus_dir, "style", 0))
    expected = direct_merge_deltas(Lc, Ls)
    assert set(deltas) == set(expected)
    for key in expected:
        assert np.array_equal(deltas[key], expected[key]), key
    assert meta["strategy"] == "direct"
    assert meta["content_task_seed"] == "0"
    assert meta["policy"] == "O,Q"


def test_merge_weight_flags(corpus_dir, tmp_path):
    out = tmp_path / "merged.safetensors"
    assert main(["merge", "--strategy", "direct",
                 "--content", _adapter(corpus_dir, "content", 1),
                 "--style", _adapter(corpus_dir, "style", 1),
                 "--out", str(out), "--wc", "0.8", "--ws", "0.2"]) == 0
    deltas, _ = tensorfile.load_merged_deltas(out)
    Lc = tensorfile.load_adapter(_adapter(corpus_dir, "content", 1))
    Ls = tensorfile.load_adapter(_adapter(corpus_dir, "style", 1))
    expected = direct_merge_deltas(Lc, Ls, wc=0.8, ws=0.2)
    for key in expected:
        assert np.array_equal(deltas[key], expected[key]), key


def test_merge_hypernet_matches_library(corpus_dir, ckpt_path, tmp_path, trained_net):
    out = tmp_path / "merged.safetensors"
    assert main(["merge", "--strategy", "hypernet",
                 "--content", _adapter(corpus_dir, "content", 8),
                 "--style", _adapter(corpus_dir, "style", 7),
                 "--out", str(out), "--hypernet", str(ckpt_path)]) == 0
    deltas, meta = tensorfile.load_merged_deltas(out)
    net, policy = trained_net[0], MergePolicy()
    Lc = tensorfile.load_adapter(_adapter(corpus_dir, "content", 8))
    Ls = tensorfile.load_adapter(_adapter(corpus_dir, "style", 7))
    coeffs = hypernet_coefficients(net, Lc, Ls, policy)
    expected = build_merged_deltas(Lc, Ls, coeffs, policy)
    for key in expected:
        assert np.array_equal(deltas[key], expected[key]), key
    assert meta["strategy"] == "hypernet"


def test_merge_unknown_strategy_exits_1(corpus_dir, tmp_path, capsys):
    assert main(["merge", "--strategy", "blend",
                 "--content", _adapter(corpus_dir, "content", 0),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "m.safetensors")]) == 1
    assert "unknown strategy" in capsys.readouterr().err


def test_merge_hypernet_without_checkpoint_exits_1(corpus_dir, tmp_path):
    assert main(["merge", "--strategy", "hypernet",
                 "--content", _adapter(corpus_dir, "content", 0),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "m.safetensors")]) == 1


def test_merge_swapped_kinds_exits_2(corpus_dir, tmp_path, capsys):
    assert main(["merge", "--strategy", "direct",
                 "--content", _adapter(corpus_dir, "style", 0),
                 "--style", _adapter(corpus_dir, "content", 0),
                 "--out", str(tmp_path / "m.safetensors")]) == 2
    assert "expected a content adapter" in capsys.readouterr().err


def test_merge_missing_adapter_exits_2(corpus_dir, tmp_path):
    assert main(["merge", "--strategy", "direct",
                 "--content", str(tmp_path / "ghost.safetensors"),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "m.safetensors")]) == 2


def test_merge_truncated_adapter_exits_2(corpus_dir, tmp_path):
    whole = (corpus_dir / "content-000.safetensors").read_bytes()
    crippled = tmp_path / "short.safetensors"
    crippled.write_bytes(whole[: len(whole) // 2])
    assert main(["merge", "--strategy", "direct",
                 "--content", str(crippled),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "m.safetensors")]) == 2


def test_merge_dims_mismatch_exits_2(corpus_dir, cli_workspace, tmp_path):
    # Adapters were fine-tuned at the default sizes; a config declaring the
    # tiny sizes must be rejected before any merge math runs.
    assert main(["merge", "--strategy", "direct",
                 "--content", _adapter(corpus_dir, "content", 0),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "m.safetensors"),
                 "--config", str(cli_workspace["config"])]) == 2


# -- eval ----------------------------------------------------------------


def _run_eval(corpus_dir, report, *extra):
    return main(["eval", "--corpus", str(corpus_dir), "--report", str(report),
                 "--strategies", "direct", "--samples", "4", *extra])


def test_eval_writes_report(corpus_dir, tmp_path, capsys):
    report = tmp_path / "report.json"
    assert _run_eval(corpus_dir, report) == 0
    out = capsys.readouterr().out
    assert "direct" in out and "average_case" in out
    doc = json.loads(report.read_text())
    assert set(doc) == {"canonical", "config", "timings"}
    body = doc["canonical"]["strategies"]["direct"]
    assert 0.0 <= body["average_case"] <= body["best_case"] <= 1.0
    assert doc["config"]["tau_content"] == DEFAULT_TAU_CONTENT
    assert doc["config"]["tau_style"] == DEFAULT_TAU_STYLE
    assert doc["config"]["split"] == "test"
    assert (tmp_path / "report.json.log").is_file()


def test_eval_canonical_deterministic(corpus_dir, tmp_path):
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    assert _run_eval(corpus_dir, r1) == 0
    assert _run_eval(corpus_dir, r2) == 0
    d1 = json.loads(r1.read_text())
    d2 = json.loads(r2.read_text())
    assert d1["canonical"] == d2["canonical"]
    assert d1["config"] == d2["config"]


def test_eval_tau_overrides(corpus_dir, tmp_path):
    lenient = tmp_path / "lenient.json"
    assert _run_eval(corpus_dir, lenient, "--tau-content", "1e9",
                     "--tau-style", "1e9") == 0
    doc = json.loads(lenient.read_text())
    assert doc["canonical"]["strategies"]["direct"]["average_case"] == 1.0
    strict = tmp_path / "strict.json"
    assert _run_eval(corpus_dir, strict, "--tau-content", "1e9",
                     "--tau-style", "0.0") == 0
    doc = json.loads(strict.read_text())
    assert doc["canonical"]["strategies"]["direct"]["average_case"] == 0.0


def test_eval_val_split(corpus_dir, tmp_path):
    report = tmp_path / "val.json"
    assert _run_eval(corpus_dir, report, "--split", "val") == 0
    doc = json.loads(report.read_text())
    assert len(doc["canonical"]["pairs"]) == 4  # 2 content x 2 style val seeds


def test_eval_multiple_strategies(corpus_dir, ckpt_path, tmp_path):
    report = tmp_path / "multi.json"
    assert main(["eval", "--corpus", str(corpus_dir), "--report", str(report),
                 "--strategies", " direct , ties ,hypernet", "--samples", "2",
                 "--hypernet", str(ckpt_path)]) == 0
    doc = json.loads(report.read_text())
    assert set(doc["canonical"]["strategies"]) == {"direct", "ties", "hypernet"}


def test_eval_unknown_strategy_exits_1(corpus_dir, tmp_path):
    assert main(["eval", "--corpus", str(corpus_dir),
                 "--report", str(tmp_path / "r.json"),
                 "--strategies", "direct,magic"]) == 1


def test_eval_hypernet_without_checkpoint_exits_1(corpus_dir, tmp_path):
    assert main(["eval", "--corpus", str(corpus_dir),
                 "--report", str(tmp_path / "r.json"),
                 "--strategies", "hypernet"]) == 1


def test_eval_http_without_endpoint_exits_1(corpus_dir, tmp_path):
    assert main(["eval", "--corpus", str(corpus_dir),
                 "--report", str(tmp_path / "r.json"),
                 "--strategies", "direct", "--judge", "http"]) == 1


def test_eval_unreachable_judge_exits_3(corpus_dir, tmp_path, capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code = main(["eval", "--corpus", str(corpus_dir),
                 "--report", str(tmp_path / "r.json"),
                 "--strategies", "direct", "--samples", "1", "--references", "1",
                 "--judge", "http", "--endpoint", f"http://127.0.0.1:{port}/j"])
    assert code == 3
    assert "judge unavailable" in capsys.readouterr().err


def test_eval_corrupt_corpus_exits_2(corpus_dir, tmp_path):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(corpus_dir, broken)
    index = json.loads((broken / "index.json").read_text())
    index["format"] = "something-else"
    (broken / "index.json").write_text(json.dumps(index))
    assert main(["eval", "--corpus", str(broken),
                 "--report", str(tmp_path / "r.json"),
                 "--strategies", "direct"]) == 2


# -- bench ---------------------------------------------------------------


def test_bench_cli(corpus_dir, ckpt_path, tmp_path, capsys):
    report = tmp_path / "bench.json"
    assert main(["bench", "--corpus", str(corpus_dir),
                 "--hypernet", str(ckpt_path), "--report", str(report),
                 "--pairs", "1", "--repeats", "2", "--zip-steps", "3"]) == 0
    assert "speedup" in capsys.readouterr().out
    doc = json.loads(report.read_text())
    assert doc["canonical"]["zip_steps"] == 3
    assert doc["canonical"]["repeats"] == 2
    [row] = doc["timings"]["per_pair"]
    assert row["hypernet_seconds"] > 0.0
    assert row["zip_seconds"] > 0.0
    assert row["speedup"] == pytest.approx(
        row["zip_seconds"] / row["hypernet_seconds"], rel=1e-9)


def test_bench_missing_checkpoint_exits_2(corpus_dir, tmp_path):
    assert main(["bench", "--corpus", str(corpus_dir),
                 "--hypernet", str(tmp_path / "ghost.safetensors"),
                 "--report", str(tmp_path / "b.json")]) == 2


# -- inspect-coeffs ------------------------------------------------------


def test_inspect_coeffs_matches_library(corpus_dir, ckpt_path, tmp_path, capsys):
    out = tmp_path / "coeffs.csv"
    assert main(["inspect-coeffs", "--hypernet", str(ckpt_path),
                 "--content", _adapter(corpus_dir, "content", 8),
                 "--style", _adapter(corpus_dir, "style", 7),
                 "--out", str(out)]) == 0
    assert "coefficient rows" in capsys.readouterr().out
    net, policy = load_hypernet(ckpt_path)
    Lc = tensorfile.load_adapter(_adapter(corpus_dir, "content", 8))
    Ls = tensorfile.load_adapter(_adapter(corpus_dir, "style", 7))
    expected_path = tmp_path / "expected.csv"
    export_coefficients_csv(expected_path,
                            hypernet_coefficients(net, Lc, Ls, policy))
    assert out.read_text() == expected_path.read_text()


def test_inspect_coeffs_missing_input_exits_2(corpus_dir, ckpt_path, tmp_path):
    assert main(["inspect-coeffs", "--hypernet", str(ckpt_path),
                 "--content", str(tmp_path / "ghost.safetensors"),
                 "--style", _adapter(corpus_dir, "style", 0),
                 "--out", str(tmp_path / "c.csv")]) == 2
