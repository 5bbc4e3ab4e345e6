import json

import numpy as np
import pytest
import torch

from forgeloc import datagen, pipeline
from forgeloc.config import TrainConfig, parse_config
from forgeloc.model import TamperModel
from forgeloc.pipeline import TrainingDivergedError


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    datagen.write_dataset(root, 10, 3, 3, size=32, seed=77)
    return root


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(image_size=32, batch_size=5, epochs=2, depth=2,
                      base_channels=4, seed=3)
    ckpt = pipeline.train(cfg, tiny_dataset, out)
    return cfg, out, ckpt


class TestConfig:
    def test_defaults_are_sane(self):
        cfg = TrainConfig()
        assert cfg.lambdas == (0.1, 1.0, 0.1)
        assert cfg.lr == 5e-4
        assert cfg.weight_decay == 0.005

    def test_snapshot_and_file_roundtrip(self, tmp_path):
        cfg = TrainConfig(epochs=7, lambda_mi=0.5, noise_within_mask=True)
        path = tmp_path / "cfg.txt"
        path.write_text(cfg.to_snapshot())
        back = parse_config(path)
        assert back == cfg

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("epochs = 3\nlr = 0.01\n# comment\n")
        cfg = parse_config(path, ["epochs=9", "detach_loo=true"])
        assert cfg.epochs == 9 and cfg.lr == 0.01 and cfg.detach_loo

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("warp_speed = 9\n")
        with pytest.raises(ValueError):
            parse_config(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(mask_noise_gamma=1.5)


class TestTraining:
    def test_run_directory_contents(self, tiny_run):
        cfg, out, ckpt = tiny_run
        assert (out / "config.snapshot").exists()
        assert (out / "train.log.jsonl").exists()
        assert ckpt.exists()
        snapshot = (out / "config.snapshot").read_text()
        assert "lambda_mi = 1.0" in snapshot

    def test_log_has_every_component_every_step(self, tiny_run):
        _, out, _ = tiny_run
        lines = [json.loads(l) for l in open(out / "train.log.jsonl")]
        assert len(lines) == 2 * 2  # 10 samples / batch 5 * 2 epochs
        for rec in lines:
            for key in ("loc", "su", "mi", "aux", "total", "gamma_phi",
                        "lr", "noise_seed", "step", "epoch"):
                assert key in rec
            assert 0.0 < rec["su"] <= 1.0
            assert rec["mi"] >= 0.0
            assert rec["total"] == pytest.approx(
                rec["loc"] + 0.1 * rec["su"] + rec["mi"] + 0.1 * rec["aux"],
                rel=1e-6)

    def test_identical_seeds_reproduce_loss_trajectory(self, tiny_dataset,
                                                       tmp_path):
        cfg = TrainConfig(image_size=32, batch_size=5, epochs=1, depth=2,
                          base_channels=4, seed=11)
        pipeline.train(cfg, tiny_dataset, tmp_path / "a")
        pipeline.train(cfg, tiny_dataset, tmp_path / "b")
        la = (tmp_path / "a" / "train.log.jsonl").read_text()
        lb = (tmp_path / "b" / "train.log.jsonl").read_text()
        assert la == lb

    def test_lambdas_zero_reduces_to_plain_bce(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(image_size=32, batch_size=5, epochs=1, depth=2,
                          base_channels=4, seed=4, lambda_su=0,
                          lambda_mi=0, lambda_aux=0)
        pipeline.train(cfg, tiny_dataset, tmp_path / "bce")
        lines = [json.loads(l)
                 for l in open(tmp_path / "bce" / "train.log.jsonl")]
        for rec in lines:
            assert rec["su"] == 0.0 and rec["mi"] == 0.0 and rec["aux"] == 0.0
            assert rec["total"] == rec["loc"]

    def test_nan_aborts_with_diagnostic(self, tiny_dataset, tmp_path,
                                        monkeypatch):
        build = pipeline.build_model

        def poisoned(cfg):
            model = build(cfg)
            with torch.no_grad():
                model.head.out.bias.fill_(float("nan"))
            return model

        monkeypatch.setattr(pipeline, "build_model", poisoned)
        cfg = TrainConfig(image_size=32, batch_size=5, epochs=1, depth=2,
                          base_channels=4, seed=5)
        with pytest.raises(TrainingDivergedError):
            pipeline.train(cfg, tiny_dataset, tmp_path / "bad")
        diag = json.loads((tmp_path / "bad" / "diagnostic.json").read_text())
        assert "batch_ids" in diag and "losses" in diag
        assert diag["step"] == 0

    def test_cosine_schedule_starts_at_lr_and_decays(self, tiny_run):
        cfg, out, _ = tiny_run
        lines = [json.loads(l) for l in open(out / "train.log.jsonl")]
        assert lines[0]["lr"] < cfg.lr  # logged after the first step
        assert lines[-1]["lr"] < lines[0]["lr"]

    def test_max_steps_caps_run(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(image_size=32, batch_size=5, epochs=50, depth=2,
                          base_channels=4, seed=6, max_steps=3)
        pipeline.train(cfg, tiny_dataset, tmp_path / "capped")
        lines = open(tmp_path / "capped" / "train.log.jsonl").readlines()
        assert len(lines) == 3


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tiny_run, tmp_path):
        _, _, ckpt = tiny_run
        loaded = pipeline.load_checkpoint(ckpt)
        resaved = tmp_path / ckpt.name
        torch.save(loaded, resaved)
        assert ckpt.read_bytes() == resaved.read_bytes()

    def test_restore_gives_identical_predictions(self, tiny_run):
        cfg, _, ckpt = tiny_run
        model_a, cfg_a = pipeline.restore_model(pipeline.load_checkpoint(ckpt))
        model_b, _ = pipeline.restore_model(pipeline.load_checkpoint(ckpt))
        assert cfg_a == cfg
        x = torch.rand(1, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(model_a(x), model_b(x))

    def test_checkpoint_records_gamma_and_rng(self, tiny_run):
        _, _, ckpt = tiny_run
        payload = pipeline.load_checkpoint(ckpt)
        assert 0.0 < payload["gamma_phi"] < 1.0
        assert "torch_rng" in payload
        assert payload["extra_rng"]["data"]["bit_generator"] == "PCG64"


class TestEvaluation:
    def test_reports_every_manifest_entry(self, tiny_run, tiny_dataset,
                                          tmp_path):
        _, _, ckpt = tiny_run
        rep = pipeline.evaluate(ckpt, tiny_dataset, split="test",
                                out_dir=tmp_path / "eval")
        test_ids = [r["id"] for r in datagen.read_manifest(tiny_dataset)
                    if r["split"] == "test"]
        assert [r["id"] for r in rep.per_image] == test_ids
        assert (tmp_path / "eval" / "scores.jsonl").exists()
        assert (tmp_path / "eval" / "summary.json").exists()
        for sample_id in test_ids:
            assert (tmp_path / "eval" / "pred_masks" / f"{sample_id}.png").exists()

    def test_evaluation_is_deterministic(self, tiny_run, tiny_dataset):
        _, _, ckpt = tiny_run
        rep1 = pipeline.evaluate(ckpt, tiny_dataset, split="val")
        rep2 = pipeline.evaluate(ckpt, tiny_dataset, split="val")
        assert rep1.per_image == rep2.per_image
        assert rep1.f1 == rep2.f1 and rep1.auc == rep2.auc

    def test_predicted_masks_are_rounded_probabilities(self, tiny_run,
                                                       tiny_dataset,
                                                       tmp_path):
        from PIL import Image
        _, _, ckpt = tiny_run
        out = tmp_path / "eval2"
        rep = pipeline.evaluate(ckpt, tiny_dataset, split="val", out_dir=out)
        model, _ = pipeline.restore_model(pipeline.load_checkpoint(ckpt))
        ids, images, _ = datagen.load_split(tiny_dataset, "val")
        preds = pipeline.predict_probability_maps(model, images)
        png = np.asarray(Image.open(out / "pred_masks" / f"{ids[0]}.png"))
        assert np.array_equal(png,
                              np.round(preds[0] * 255).astype(np.uint8))

    def test_distortion_hook_applies_to_images_only(self, tiny_run,
                                                    tiny_dataset):
        _, _, ckpt = tiny_run
        plain = pipeline.evaluate(ckpt, tiny_dataset, split="val")
        blurred = pipeline.evaluate(
            ckpt, tiny_dataset, split="val",
            distort=lambda img: datagen.apply_gaussian_blur(img, 7))
        assert plain.per_image != blurred.per_image


class TestModelWiring:
    def test_training_forward_returns_all_heads(self):
        torch.manual_seed(0)
        model = TamperModel(depth=2, base_channels=4)
        x = torch.rand(2, 3, 16, 16)
        noisy = torch.rand(2, 16, 16).round()
        out = model.training_forward(x, noisy)
        assert out["pred"].shape == (2, 1, 16, 16)
        assert out["p_full"].shape == (2, 1, 16, 16)
        assert len(out["p_loo"]) == 3
        assert out["z"].shape == out["mask_embedding"].shape
        assert out["aux_pred"].shape == (2, 1, 16, 16)

    def test_distribution_maps_share_the_predictor_head(self):
        # one parameter set serves main, auxiliary and distribution readouts
        model = TamperModel(depth=2, base_channels=4)
        assert model.predicted_distribution.__self__ is model
        head_params = {id(p) for p in model.head.parameters()}
        assert head_params  # the head exists and is a single module instance
        z = torch.rand(1, 4, 16, 16)
        with torch.no_grad():
            assert torch.equal(model.head(z), model.predicted_distribution(z))

    def test_inference_path_skips_mask_branch(self):
        torch.manual_seed(1)
        model = TamperModel(depth=2, base_channels=4)
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            p = model(x)
        assert p.shape == (1, 1, 16, 16)
        assert float(p.min()) > 0.0 and float(p.max()) < 1.0

    def test_inference_is_head_of_reasoned_fusion(self):
        torch.manual_seed(2)
        model = TamperModel(depth=2, base_channels=4)
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            f1, f2, f3 = model.extract(x)
            manual = model.head(model.reasoning(model.fusion(f1, f2, f3)))
            assert torch.equal(model(x), manual)
