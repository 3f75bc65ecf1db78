import json
import os

import pytest

from streetnav.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole CLI pipeline once on a tiny world."""
    base = tmp_path_factory.mktemp("cli")
    world_dir = str(base / "world")
    rc = main(
        [
            "gen-world", "--out", world_dir, "--seed", "5",
            "--grid-width", "7", "--grid-height", "7",
            "--map2seq", "400", "--touchdown", "250",
            "--min-len", "8", "--max-len", "13",
        ]
    )
    assert rc == 0
    splits_dir = str(base / "splits")
    rc = main(
        [
            "make-splits", "--world", world_dir,
            "--instances", os.path.join(world_dir, "instances_map2seq.jsonl"),
            os.path.join(world_dir, "instances_touchdown.jsonl"),
            "--out", splits_dir, "--dev", "8", "--test", "8",
            "--boundary-fraction", "0.6", "--seed", "1",
        ]
    )
    assert rc == 0
    bpe_path = str(base / "bpe.json")
    rc = main(
        [
            "train-bpe",
            "--instances", os.path.join(splits_dir, "map2seq_unseen_train.jsonl"),
            "--out", bpe_path,
        ]
    )
    assert rc == 0
    exp_path = str(base / "exp.json")
    config = {
        "world_dir": world_dir,
        "train_path": os.path.join(splits_dir, "map2seq_unseen_train.jsonl"),
        "dev_path": os.path.join(splits_dir, "map2seq_unseen_dev.jsonl"),
        "bpe_path": bpe_path,
        "agent": {
            "encoder_hidden": 16,
            "decoder_hidden": 16,
            "token_emb_dim": 8,
            "visual_ffn_widths": [16, 16],
            "visual_variant": "prefinal",
        },
        "epochs": 1,
        "eval_every": 1,
        "seed": 0,
        "name": "cli-smoke",
    }
    with open(exp_path, "w") as fh:
        json.dump(config, fh)
    run_dir = str(base / "run")
    rc = main(["train", "--config", exp_path, "--out", run_dir, "--quiet"])
    assert rc == 0
    return base, world_dir, splits_dir, exp_path, run_dir


def test_gen_world_outputs(pipeline):
    _, world_dir, _, _, _ = pipeline
    for name in (
        "graph.json",
        "landmarks.json",
        "features_prefinal.npz",
        "features_fourth.npz",
        "features_semseg.npz",
        "instances_map2seq.jsonl",
        "instances_touchdown.jsonl",
        "lexicon_direction.json",
        "lexicon_object.json",
    ):
        assert os.path.exists(os.path.join(world_dir, name)), name


def test_make_splits_outputs(pipeline):
    _, _, splits_dir, _, _ = pipeline
    names = os.listdir(splits_dir)
    for scenario in ("seen", "unseen"):
        for split in ("train", "dev", "test"):
            assert f"map2seq_{scenario}_{split}.jsonl" in names
            assert f"merged_{scenario}_{split}.jsonl" in names


def test_evaluate_and_report(pipeline, tmp_path):
    base, _, splits_dir, _, run_dir = pipeline
    eval_dir = str(tmp_path / "eval")
    rc = main(
        [
            "evaluate", "--run", run_dir,
            "--split", os.path.join(splits_dir, "map2seq_unseen_dev.jsonl"),
            "--out", eval_dir, "--group", "smoke",
        ]
    )
    assert rc == 0
    assert os.path.exists(os.path.join(eval_dir, "metrics.json"))
    assert os.path.exists(os.path.join(eval_dir, "eval_meta.json"))
    report_dir = str(tmp_path / "report")
    rc = main(["report", "--results", eval_dir, "--out", report_dir])
    assert rc == 0
    assert os.path.exists(os.path.join(report_dir, "results.csv"))
    assert os.path.exists(os.path.join(report_dir, "figure_tc.svg"))


def test_oracle_eval_gold_control(pipeline, tmp_path):
    _, _, splits_dir, _, run_dir = pipeline
    out = str(tmp_path / "oracle")
    rc = main(
        [
            "oracle-eval", "--run", run_dir,
            "--split", os.path.join(splits_dir, "map2seq_unseen_dev.jsonl"),
            "--subtask", "stopping", "--out", out, "--gold-control",
        ]
    )
    assert rc == 0
    with open(os.path.join(out, "oracle_stopping.json")) as fh:
        payload = json.load(fh)
    assert payload["means"]["tc"] == 1.0


def test_exit_code_config_error(tmp_path):
    rc = main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")])
    assert rc == 1


def test_exit_code_data_error(pipeline, tmp_path):
    _, world_dir, _, _, _ = pipeline
    # dev+test larger than the unseen pool -> data-level failure
    rc = main(
        [
            "make-splits", "--world", world_dir,
            "--instances", os.path.join(world_dir, "instances_touchdown.jsonl"),
            "--out", str(tmp_path / "s"), "--dev", "500", "--test", "500",
        ]
    )
    assert rc == 2
