from __future__ import annotations

import json
from collections import Counter

import pytest

from c2p.cli import main

from conftest import make_flat_tree, make_separable_tree


def run(argv) -> int:
    return main([str(a) for a in argv])


class TestScanCommand:
    def test_scan_flat_fixture(self, tmp_path, capsys):
        root = make_flat_tree(tmp_path / "flat")
        out = tmp_path / "scan"
        assert run(["scan", "--root", root, "--layout", "flat", "--out", out]) == 0
        manifest_lines = [l for l in (out / "manifest.jsonl").read_text().splitlines() if l]
        assert len(manifest_lines) == 5
        assert (out / "run_config.json").is_file()
        assert (out / "scan_summary.json").is_file()
        assert "5 records" in capsys.readouterr().out

    def test_missing_root_exits_2(self, tmp_path, capsys):
        code = run(["scan", "--root", tmp_path / "missing", "--layout", "flat", "--out", tmp_path / "o"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_empty_dataset_exits_2(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert run(["scan", "--root", tmp_path / "empty", "--layout", "flat", "--out", tmp_path / "o"]) == 2

    def test_rerun_byte_identical(self, tmp_path):
        root = make_flat_tree(tmp_path / "flat")
        out = tmp_path / "scan"
        run(["scan", "--root", root, "--layout", "flat", "--out", out])
        first = (out / "manifest.jsonl").read_bytes()
        first_config = (out / "run_config.json").read_bytes()
        run(["scan", "--root", root, "--layout", "flat", "--out", out])
        assert (out / "manifest.jsonl").read_bytes() == first
        assert (out / "run_config.json").read_bytes() == first_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full toy pipeline: scan -> caption -> train -> merge, shared by tests."""
    base = tmp_path_factory.mktemp("pipeline")
    train_root = make_separable_tree(base / "train", n_per_class=48, seed=11)
    holdout_root = make_separable_tree(base / "holdout", n_per_class=24, seed=97)

    assert run(["scan", "--root", train_root, "--layout", "flat", "--out", base / "scan_train"]) == 0
    assert run(["scan", "--root", holdout_root, "--layout", "flat", "--out", base / "scan_holdout"]) == 0
    train_manifest = base / "scan_train" / "manifest.jsonl"
    holdout_manifest = base / "scan_holdout" / "manifest.jsonl"

    assert (
        run(
            [
                "caption", "--manifest", train_manifest, "--provider", "stub",
                "--target-size", 32, "--out", base / "captions",
            ]
        )
        == 0
    )
    captions = base / "captions" / "captions.jsonl"

    assert (
        run(
            [
                "train", "--manifest", train_manifest, "--captions", captions,
                "--backend", "toy", "--seed", 123, "--target-size", 32,
                "--batch-size", 16, "--lr", 1e-2, "--epochs", 1,
                "--out", base / "ckpt",
            ]
        )
        == 0
    )
    assert run(["merge", "--checkpoint", base / "ckpt"]) == 0
    return base, train_manifest, holdout_manifest


class TestPipeline:
    def test_checkpoint_artifacts(self, pipeline):
        base, _, _ = pipeline
        for name in ("adapters.pt", "classifier.pt", "config.json", "training_log.jsonl", "merged.pt", "run_config.json"):
            assert (base / "ckpt" / name).is_file(), name

    def test_eval_holdout_accuracy(self, pipeline):
        base, _, holdout_manifest = pipeline
        out = base / "eval"
        assert run(["eval", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest, "--out", out]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["weights"] == "merged"
        assert report["macc_mean"] >= 0.95
        assert report["map_mean"] >= 0.95
        assert (out / "results.jsonl").is_file()

    def test_eval_merged_vs_adapter_agree(self, pipeline):
        base, _, holdout_manifest = pipeline
        merged_out = base / "eval_merged"
        adapter_out = base / "eval_adapter"
        run(["eval", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest, "--out", merged_out])
        run(["eval", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest, "--adapter", "--out", adapter_out])
        merged = json.loads((merged_out / "report.json").read_text())
        adapter = json.loads((adapter_out / "report.json").read_text())
        assert adapter["weights"] == "adapter"
        for key in ("map_mean", "macc_mean", "macc_balanced_mean"):
            assert abs(merged[key] - adapter[key]) < 1e-5
        for subset, metrics in merged["per_subset"].items():
            for key in ("ap", "acc", "acc_balanced"):
                assert abs(metrics[key] - adapter["per_subset"][subset][key]) < 1e-5

    def test_eval_rerun_byte_identical(self, pipeline):
        base, _, holdout_manifest = pipeline
        out_a = base / "eval_a"
        out_b = base / "eval_b"
        for out in (out_a, out_b):
            run(["eval", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest, "--out", out])
        assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()
        assert (out_a / "results.jsonl").read_bytes() == (out_b / "results.jsonl").read_bytes()

    def test_analyze_wordfreq_matches_hand_counts(self, pipeline):
        """Independent oracle: Counter over the decoded stub texts."""
        from c2p.analysis import StubCaptionDecoder, compute_detection_features, decode_feature_to_text
        from c2p.data import read_manifest
        from c2p.training import build_model_from_checkpoint, load_checkpoint
        import dataclasses

        base, _, holdout_manifest = pipeline
        out = base / "wordfreq"
        assert (
            run(
                [
                    "analyze", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest,
                    "--which", "wordfreq", "--out", out,
                ]
            )
            == 0
        )
        payload = json.loads((out / "word_frequency.json").read_text())

        checkpoint = load_checkpoint(base / "ckpt")
        backend, classifier = build_model_from_checkpoint(checkpoint, merged=True)
        policy = dataclasses.replace(checkpoint.policy, crop="center")
        manifest = read_manifest(holdout_manifest)
        features = compute_detection_features(manifest, backend, classifier, policy)
        decoder = StubCaptionDecoder()
        counts = Counter()
        for feature in features:
            counts.update(decode_feature_to_text(feature, decoder).split())
        expected = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:15]
        got = [(entry["word"], entry["count"]) for entry in payload["overall"]["entries"]]
        assert got == expected

    def test_analyze_clusters(self, pipeline):
        base, _, holdout_manifest = pipeline
        out = base / "clusters"
        assert (
            run(
                [
                    "analyze", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest,
                    "--which", "clusters", "--k", 3, "--out", out,
                ]
            )
            == 0
        )
        payload = json.loads((out / "clusters.json").read_text())
        assert "all" in payload
        assert len(payload["all"]["centers"]) == 3
        assert len(payload["all"]["decoded"]) == 3
        assert sum(payload["all"]["sizes"]) == 48

    def test_analyze_projection(self, pipeline):
        base, _, holdout_manifest = pipeline
        out = base / "projection"
        assert (
            run(
                [
                    "analyze", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest,
                    "--which", "project", "--out", out,
                ]
            )
            == 0
        )
        payload = json.loads((out / "projection.json").read_text())
        assert payload["method"] == "pca"
        assert len(payload["points"]) == 48
        assert {"image_id", "label", "x", "y"} <= set(payload["points"][0])

    def test_analyze_logits(self, pipeline):
        base, _, holdout_manifest = pipeline
        out = base / "logits"
        assert (
            run(
                [
                    "analyze", "--checkpoint", base / "ckpt", "--manifest", holdout_manifest,
                    "--which", "logits", "--out", out,
                ]
            )
            == 0
        )
        payload = json.loads((out / "logit_distribution.json").read_text())
        subset = next(iter(payload.values()))
        assert len(subset["bin_edges"]) == 51
        # The trained detector separates the classes, so overlap is small.
        assert subset["overlap"] <= 0.05

    def test_stale_checkpoint_exits_2(self, pipeline, tmp_path, capsys):
        base, _, holdout_manifest = pipeline
        stale = tmp_path / "stale"
        stale.mkdir()
        for name in ("adapters.pt", "classifier.pt", "training_log.jsonl"):
            stale.joinpath(name).write_bytes((base / "ckpt" / name).read_bytes())
        config = json.loads((base / "ckpt" / "config.json").read_text())
        config["checkpoint_version"] = 999
        (stale / "config.json").write_text(json.dumps(config))
        code = run(["eval", "--checkpoint", stale, "--manifest", holdout_manifest, "--out", tmp_path / "o"])
        assert code == 2
        assert "version" in capsys.readouterr().err.lower()


class TestConfigHandling:
    def test_config_file_with_flag_override(self, tmp_path):
        root = make_flat_tree(tmp_path / "flat")
        config_path = tmp_path / "run.json"
        config_path.write_text(json.dumps({"root": str(root), "layout": "flat", "out": str(tmp_path / "ignored")}))
        out = tmp_path / "actual"
        assert run(["scan", "--config", config_path, "--out", out]) == 0
        assert (out / "manifest.jsonl").is_file()
        snapshot = json.loads((out / "run_config.json").read_text())
        assert snapshot["config"]["out"] == str(out)
        assert snapshot["config"]["root"] == str(root)
        assert snapshot["tool_version"]

    def test_missing_config_file_exits_2(self, tmp_path):
        assert run(["scan", "--config", tmp_path / "nope.json", "--out", tmp_path / "o"]) == 2

    def test_train_requires_manifest(self, tmp_path):
        assert run(["train", "--out", tmp_path / "o"]) == 2

    def test_snapshot_reruns_bit_for_bit(self, tmp_path):
        """A written run_config.json snapshot is itself a valid --config."""
        root = make_flat_tree(tmp_path / "flat")
        first = tmp_path / "first"
        assert run(["scan", "--root", root, "--layout", "flat", "--out", first]) == 0
        second = tmp_path / "second"
        assert run(["scan", "--config", first / "run_config.json", "--out", second]) == 0
        assert (first / "manifest.jsonl").read_bytes() == (second / "manifest.jsonl").read_bytes()
        assert (first / "scan_summary.json").read_bytes() == (second / "scan_summary.json").read_bytes()
