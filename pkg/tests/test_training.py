"""Training loop: loss composition, logging, determinism, resume."""

import csv
import math

import numpy as np
import pytest

from vqgen.checkpoint import build_model, build_optimizer, load_checkpoint
from vqgen.errors import ConfigError, DataError, NonFiniteError
from vqgen.tensor import Adam
from vqgen.training import (
    StepRecord,
    TrainConfig,
    held_out_ce,
    max_ma_uptick,
    train,
    train_step,
)


def make_optimizer(model, lr=0.01):
    return Adam([p for _, p in model.trainable_parameters()], lr=lr)


def quick_cfg(**overrides) -> TrainConfig:
    base = dict(steps=4, batch_size=8, lr=0.01, seed=3)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=-1)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(lambda_recon=-0.5)

    def test_semantic_dict_drops_paths(self):
        cfg = quick_cfg(log_csv="x.csv", checkpoint_path="y.ckpt")
        sem = cfg.semantic_dict()
        assert "log_csv" not in sem and "checkpoint_path" not in sem
        assert sem["steps"] == 4


class TestTrainStep:
    def test_first_step_loss_near_uniform(self, tiny_corpus):
        model = tiny_corpus.model()
        result = train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=1))
        expected = math.log(len(tiny_corpus.vocab))
        assert abs(result.records[0].l_q - expected) / expected < 0.20

    def test_total_is_exactly_composed(self, tiny_corpus):
        model = tiny_corpus.model()
        cfg = quick_cfg(steps=3, lambda_recon=0.7)
        result = train(model, tiny_corpus.samples, tiny_corpus.store, cfg)
        for rec in result.records:
            assert rec.total == rec.l_q + 0.7 * rec.l_i

    def test_recon_disabled_drops_l_i(self, tiny_corpus):
        model = tiny_corpus.model(reconstruct_image=False)
        result = train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=2))
        for rec in result.records:
            assert rec.l_i is None
            assert rec.total == rec.l_q

    def test_loss_decreases_over_short_run(self, tiny_corpus):
        model = tiny_corpus.model()
        result = train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=12))
        first = np.mean([r.l_q for r in result.records[:4]])
        last = np.mean([r.l_q for r in result.records[-4:]])
        assert last < first

    def test_nonfinite_abort_names_step_and_images(self, tiny_corpus):
        model = tiny_corpus.model()
        model.embed.data[5, 0] = np.inf
        opt = make_optimizer(model)
        from vqgen.data import batches

        batch = next(batches(tiny_corpus.samples, tiny_corpus.store, 8, seed=3, epoch=0))
        with pytest.raises(NonFiniteError) as err:
            train_step(model, opt, batch, quick_cfg(), step=7)
        message = str(err.value)
        assert "step 7" in message
        assert str(int(np.asarray(batch.image_ids)[0])) in message

    def test_single_sample_batch_rejected(self, tiny_corpus):
        model = tiny_corpus.model()
        with pytest.raises(DataError):
            train(model, tiny_corpus.samples[:1], tiny_corpus.store, quick_cfg(steps=1))


class TestLogging:
    def test_csv_has_one_row_per_step(self, tiny_corpus, tmp_path):
        model = tiny_corpus.model()
        path = tmp_path / "loss.csv"
        train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=5, log_csv=str(path)))
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["step", "L_q", "L_i", "total", "seconds"]
        assert len(rows) == 6
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
        for row in rows[1:]:
            total = float(row[3])
            assert total == float(row[1]) + 1.0 * float(row[2])
            assert float(row[4]) >= 0.0

    def test_csv_header_without_recon(self, tiny_corpus, tmp_path):
        model = tiny_corpus.model(reconstruct_image=False)
        path = tmp_path / "loss.csv"
        train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=2, log_csv=str(path)))
        rows = list(csv.reader(path.open()))
        assert rows[0] == ["step", "L_q", "total", "seconds"]


class TestDeterminismAndResume:
    def test_same_seed_same_losses(self, tiny_corpus):
        r1 = train(tiny_corpus.model(), tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=6))
        r2 = train(tiny_corpus.model(), tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=6))
        assert [r.l_q for r in r1.records] == [r.l_q for r in r2.records]

    def test_resume_is_bit_exact(self, tiny_corpus, tmp_path):
        # uninterrupted: 8 steps (two epochs of 4 batches)
        straight_path = tmp_path / "straight.ckpt"
        model_a = tiny_corpus.model()
        train(
            model_a,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=8, checkpoint_path=str(straight_path)),
        )
        # interrupted mid-epoch at step 5, then resumed
        cut_path = tmp_path / "cut.ckpt"
        model_b = tiny_corpus.model()
        train(
            model_b,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=5, checkpoint_path=str(cut_path)),
        )
        ckpt = load_checkpoint(cut_path)
        assert ckpt.step == 5
        resumed = build_model(ckpt)
        opt = build_optimizer(ckpt, resumed)
        resumed_path = tmp_path / "resumed.ckpt"
        train(
            resumed,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=8, checkpoint_path=str(resumed_path)),
            optimizer=opt,
            start_step=ckpt.step,
        )
        assert straight_path.read_bytes() == resumed_path.read_bytes()

    def test_resume_appends_to_csv(self, tiny_corpus, tmp_path):
        path = tmp_path / "loss.csv"
        ckpt_path = tmp_path / "m.ckpt"
        model = tiny_corpus.model()
        train(
            model,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=3, log_csv=str(path), checkpoint_path=str(ckpt_path)),
        )
        ckpt = load_checkpoint(ckpt_path)
        resumed = build_model(ckpt)
        train(
            resumed,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=6, log_csv=str(path)),
            optimizer=build_optimizer(ckpt, resumed),
            start_step=3,
        )
        rows = list(csv.reader(path.open()))
        assert len(rows) == 7  # header + 6 steps
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4", "5"]

    def test_lambda_zero_equals_headless_model(self, tiny_corpus):
        """Zero reconstruction weight reproduces the no-head run bitwise."""
        cfg = quick_cfg(steps=6, lambda_recon=0.0)
        with_head = tiny_corpus.model(seed=9)
        without = tiny_corpus.model(seed=9, reconstruct_image=False)
        r1 = train(with_head, tiny_corpus.samples, tiny_corpus.store, cfg)
        r2 = train(without, tiny_corpus.samples, tiny_corpus.store, cfg)
        assert [r.l_q for r in r1.records] == [r.l_q for r in r2.records]
        shared = dict(without.parameters())
        full = dict(with_head.parameters())
        for name, p in shared.items():
            assert np.array_equal(full[name].data, p.data), name


class TestEval:
    def test_eval_every_records_points(self, tiny_corpus):
        model = tiny_corpus.model()
        result = train(
            model,
            tiny_corpus.samples[:24],
            tiny_corpus.store,
            quick_cfg(steps=6, eval_every=2),
            eval_samples=tiny_corpus.samples[24:],
        )
        assert [step for step, _ in result.evals] == [2, 4, 6]
        for _, ce in result.evals:
            assert np.isfinite(ce) and ce > 0

    def test_eval_every_needs_samples(self, tiny_corpus):
        with pytest.raises(ConfigError):
            train(
                tiny_corpus.model(),
                tiny_corpus.samples,
                tiny_corpus.store,
                quick_cfg(eval_every=2),
            )

    def test_held_out_ce_batch_size_invariant(self, tiny_corpus):
        model = tiny_corpus.model()
        train(model, tiny_corpus.samples, tiny_corpus.store, quick_cfg(steps=2))
        small = held_out_ce(model, tiny_corpus.samples, tiny_corpus.store, batch_size=5)
        big = held_out_ce(model, tiny_corpus.samples, tiny_corpus.store, batch_size=32)
        assert small == pytest.approx(big, abs=1e-12)

    def test_held_out_ce_empty_rejected(self, tiny_corpus):
        with pytest.raises(DataError):
            held_out_ce(tiny_corpus.model(), [], tiny_corpus.store)


class TestCheckpointCadence:
    def test_periodic_and_final_saves(self, tiny_corpus, tmp_path):
        path = tmp_path / "m.ckpt"
        model = tiny_corpus.model()
        train(
            model,
            tiny_corpus.samples,
            tiny_corpus.store,
            quick_cfg(steps=5, checkpoint_every=2, checkpoint_path=str(path)),
        )
        ckpt = load_checkpoint(path)
        assert ckpt.step == 5
        assert ckpt.extra["train_config"]["steps"] == 5
        assert "config_hash" in ckpt.extra and "vocab_sha" in ckpt.extra


class TestMovingAverage:
    def test_clean_descent_has_no_uptick(self):
        losses = list(np.linspace(5.0, 0.1, 400))
        assert max_ma_uptick(losses) == 0.0

    def test_bump_is_detected(self):
        losses = list(np.linspace(5.0, 0.5, 400))
        losses[300:320] = [20.0] * 20
        assert max_ma_uptick(losses) > 0.05

    def test_early_bumps_ignored(self):
        losses = list(np.linspace(5.0, 0.5, 400))
        losses[50] = 50.0
        assert max_ma_uptick(losses, start=200) < 0.05

    def test_short_series(self):
        assert max_ma_uptick([1.0, 2.0]) == 0.0


@pytest.fixture(scope="module")
def matrix(tiny_corpus, tmp_path_factory):
    from vqgen import training

    out_dir = tmp_path_factory.mktemp("ablation")
    result = training.run_ablation_matrix(
        train_samples=tiny_corpus.samples,
        eval_raw=tiny_corpus.raw[:8],
        store=tiny_corpus.store,
        vocab=tiny_corpus.vocab,
        base_model=dict(
            vocab_size=len(tiny_corpus.vocab),
            n_layers=1,
            n_heads=2,
            d_model=32,
            d_ff=32,
            image_source="conv",
        ),
        train_cfg=TrainConfig(steps=3, batch_size=8, lr=0.003, seed=0),
        out_dir=out_dir,
        seed=5,
    )
    return result, out_dir


class TestAblationMatrix:
    def test_all_rows_present_in_order(self, matrix):
        result, _ = matrix
        assert list(result) == [
            "image-only",
            "text-only",
            "without-image-recon",
            "image-cat",
            "image-ans-cat",
        ]

    def test_no_row_errored(self, matrix):
        result, _ = matrix
        errors = {k: v["error"] for k, v in result.items() if "error" in v}
        assert errors == {}

    def test_metric_columns(self, matrix):
        result, _ = matrix
        for row in result.values():
            assert sorted(row["metrics"]) == [
                "bleu1", "bleu2", "bleu3", "cider", "meteor", "rouge_l",
            ]

    def test_recon_loss_column_follows_toggle(self, matrix):
        result, _ = matrix
        assert "final_l_i" not in result["without-image-recon"]["train"]
        assert "final_l_i" not in result["text-only"]["train"]
        for name in ("image-only", "image-cat", "image-ans-cat"):
            assert "final_l_i" in result[name]["train"]
        assert result["image-ans-cat"]["train"]["steps"] == 3

    def test_param_manifests_respect_variants(self, matrix):
        result, _ = matrix
        names = {k: set(v["param_names"]) for k, v in result.items()}
        assert not any(n.startswith("encoder.") for n in names["image-only"])
        assert any(n.startswith("encoder.") for n in names["image-ans-cat"])
        assert not any(n.startswith(("image_fc", "recon.")) for n in names["text-only"])
        assert not any(n.startswith("recon.") for n in names["without-image-recon"])
        assert {n for n in names["image-ans-cat"] if n.startswith("recon.")} == {
            "recon.l1.w", "recon.l1.b", "recon.l2.w", "recon.l2.b",
        }
        for k, v in result.items():
            assert v["param_count"] > 0

    def test_artifacts_per_row(self, matrix):
        result, out_dir = matrix
        for name in result:
            csv_path = out_dir / f"{name}.loss.csv"
            assert csv_path.exists()
            with open(csv_path, newline="") as fh:
                rows = list(csv.reader(fh))
            assert len(rows) == 4  # header + 3 steps
            assert (out_dir / f"{name}.ckpt").exists()

    def test_row_failure_is_isolated(self, tiny_corpus, monkeypatch):
        from vqgen import training

        rigged = (
            ("broken", {"variant": "image-cat", "n_heads": 7}),  # 7 does not divide 32
            ("image-cat", {"variant": "image-cat", "reconstruct_image": True}),
        )
        monkeypatch.setattr(training, "ABLATION_ROWS", rigged)
        result = training.run_ablation_matrix(
            train_samples=tiny_corpus.samples,
            eval_raw=tiny_corpus.raw[:4],
            store=tiny_corpus.store,
            vocab=tiny_corpus.vocab,
            base_model=dict(
                vocab_size=len(tiny_corpus.vocab),
                n_layers=1,
                n_heads=2,
                d_model=32,
                d_ff=32,
                image_source="conv",
            ),
            train_cfg=TrainConfig(steps=2, batch_size=8, lr=0.003, seed=0),
        )
        assert "error" in result["broken"]
        assert "ConfigError" in result["broken"]["error"]
        assert "metrics" in result["image-cat"]
