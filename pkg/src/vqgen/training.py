"""Training loop: batched teacher-forced steps, logging, resume, ablation.

The loss is L_q + lambda * L_i, question cross-entropy plus (when the
model carries the head) image-feature reconstruction. Shuffling is
stateless per epoch, so a run restored from a checkpoint walks the same
batch sequence as an uninterrupted one and produces identical bytes.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, save_checkpoint, vocab_hash
from .data import FeatureStore, RawSample, Sample, batches
from .errors import ConfigError, DataError, NonFiniteError
from .model import ModelConfig, VqgModel
from .tensor import Adam, Tensor, cross_entropy, mse_loss
from .text import PAD


@dataclass
class TrainConfig:
    steps: int = 13000
    batch_size: int = 64
    lr: float = 0.003
    lambda_recon: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0: only at the end
    eval_every: int = 0  # 0: never
    log_csv: str | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lambda_recon < 0:
            raise ConfigError(f"lambda_recon must be >= 0, got {self.lambda_recon}")

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def semantic_dict(self) -> dict:
        """Config minus output paths; equal runs hash equal regardless of
        where their artifacts land."""
        out = self.to_json_dict()
        out.pop("log_csv")
        out.pop("checkpoint_path")
        return out


@dataclass
class StepRecord:
    step: int
    l_q: float
    l_i: float | None  # absent when the model has no reconstruction head
    total: float
    seconds: float


@dataclass
class TrainResult:
    records: list[StepRecord]
    evals: list[tuple[int, float]] = field(default_factory=list)
    final_step: int = 0


def train_step(
    model: VqgModel, optimizer: Adam, batch, cfg: TrainConfig, step: int
) -> StepRecord:
    """One update. Aborts with step and batch image ids on non-finite math."""
    started = time.perf_counter()
    try:
        out = model.forward(
            batch.features, batch.answer_ids, batch.category_ids, batch.question_ids, train=True
        )
        l_q = cross_entropy(out.logits, batch.question_ids, ignore_id=PAD)
        if out.recon is not None:
            l_i = mse_loss(out.recon, out.recon_target)
            total = l_q + cfg.lambda_recon * l_i
        else:
            l_i = None
            total = l_q
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
    except NonFiniteError as exc:
        ids = ", ".join(str(i) for i in np.asarray(batch.image_ids).tolist())
        raise NonFiniteError(
            f"non-finite value at step {step} on batch images [{ids}]: {exc}"
        ) from exc
    return StepRecord(
        step=step,
        l_q=l_q.item(),
        l_i=None if l_i is None else l_i.item(),
        total=total.item(),
        seconds=time.perf_counter() - started,
    )


def held_out_ce(
    model: VqgModel, samples: list[Sample], store: FeatureStore | None, batch_size: int = 64
) -> float:
    """Token-weighted question cross-entropy, deterministic eval mode."""
    if not samples:
        raise DataError("held-out evaluation over zero samples")
    total = 0.0
    tokens = 0
    for batch in batches(samples, store, batch_size, shuffle=False):
        out = model.forward(
            batch.features, batch.answer_ids, batch.category_ids, batch.question_ids, train=False
        )
        ce = cross_entropy(out.logits, batch.question_ids, ignore_id=PAD)
        count = int((batch.question_ids != PAD).sum())
        total += ce.item() * count
        tokens += count
    return total / tokens


def _csv_writer(path: str, resume: bool, with_recon: bool):
    mode = "a" if resume else "w"
    fh = open(path, mode, newline="", encoding="utf-8")
    writer = csv.writer(fh)
    if not resume:
        head = ["step", "L_q"] + (["L_i"] if with_recon else []) + ["total", "seconds"]
        writer.writerow(head)
    return fh, writer


def train(
    model: VqgModel,
    samples: list[Sample],
    store: FeatureStore | None,
    cfg: TrainConfig,
    eval_samples: list[Sample] | None = None,
    optimizer: Adam | None = None,
    start_step: int = 0,
) -> TrainResult:
    """Run steps [start_step, cfg.steps); resume is bit-exact.

    Batches follow a stateless per-epoch shuffle keyed by (cfg.seed, epoch),
    so restarting from a checkpoint at step k sees exactly the batches an
    uninterrupted run would have seen. Image variants need every batch to
    hold at least two samples (training-mode feature normalization).
    """
    if not samples:
        raise DataError("training over zero samples")
    if cfg.eval_every and not eval_samples:
        raise ConfigError("eval_every set but no held-out samples given")
    if optimizer is None:
        optimizer = Adam([p for _, p in model.trainable_parameters()], lr=cfg.lr)
    with_recon = model.config.reconstruct_image
    per_epoch = (len(samples) + cfg.batch_size - 1) // cfg.batch_size

    fh = writer = None
    if cfg.log_csv:
        fh, writer = _csv_writer(cfg.log_csv, resume=start_step > 0, with_recon=with_recon)

    def checkpoint_extra() -> dict:
        return {
            "config_hash": config_hash(
                {"model": model.config.to_json_dict(), "train": cfg.semantic_dict()}
            ),
            "vocab_sha": vocab_hash(model.vocab),
            "train_config": cfg.semantic_dict(),
        }

    result = TrainResult(records=[], final_step=start_step)
    try:
        step = start_step
        while step < cfg.steps:
            epoch = step // per_epoch
            skip = step % per_epoch
            for j, batch in enumerate(
                batches(samples, store, cfg.batch_size, seed=cfg.seed, shuffle=True, epoch=epoch)
            ):
                if j < skip:
                    continue
                record = train_step(model, optimizer, batch, cfg, step)
                result.records.append(record)
                if writer:
                    row = [record.step, repr(record.l_q)]
                    if with_recon:
                        row.append(repr(record.l_i))
                    row += [repr(record.total), f"{record.seconds:.6f}"]
                    writer.writerow(row)
                step += 1
                result.final_step = step
                if cfg.eval_every and step % cfg.eval_every == 0:
                    result.evals.append(
                        (step, held_out_ce(model, eval_samples, store, cfg.batch_size))
                    )
                if cfg.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        cfg.checkpoint_path, model, optimizer, step=step, extra=checkpoint_extra()
                    )
                if step >= cfg.steps:
                    break
        if cfg.checkpoint_path:
            save_checkpoint(
                cfg.checkpoint_path, model, optimizer, step=step, extra=checkpoint_extra()
            )
    finally:
        if fh:
            fh.close()
    return result


def max_ma_uptick(losses: list[float], window: int = 100, start: int = 200) -> float:
    """Largest relative rise of the trailing moving average after warmup.

    A cleanly overfitting run keeps this near zero; values above 0.05
    signal unstable optimization.
    """
    if len(losses) <= start:
        return 0.0
    series = np.asarray(losses, dtype=np.float64)
    cum = np.concatenate([[0.0], np.cumsum(series)])
    ma = []
    for k in range(len(series)):
        lo = max(0, k + 1 - window)
        ma.append((cum[k + 1] - cum[lo]) / (k + 1 - lo))
    worst = 0.0
    for k in range(start, len(ma)):
        if ma[k - 1] > 0:
            worst = max(worst, ma[k] / ma[k - 1] - 1.0)
    return worst


# ---- ablation matrix ----

ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("image-only", {"variant": "image-only", "reconstruct_image": True}),
    ("text-only", {"variant": "text-only"}),
    ("without-image-recon", {"variant": "image-ans-cat", "reconstruct_image": False}),
    ("image-cat", {"variant": "image-cat", "reconstruct_image": True}),
    ("image-ans-cat", {"variant": "image-ans-cat", "reconstruct_image": True}),
)


def run_ablation_matrix(
    train_samples: list[Sample],
    eval_raw: list[RawSample],
    store: FeatureStore,
    vocab,
    base_model: dict,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> dict:
    """Train and score every variant row; one row failing never stops the rest.

    Returns {row name: {"metrics": ..., "param_count": ..., "param_names": ...,
    "train": ...}} with {"error": message} for rows that failed. Each row
    gets its own loss CSV and checkpoint when out_dir is given.
    """
    from .metrics import evaluate_model  # deferred: metrics sits above this module

    out = {}
    for name, overrides in ABLATION_ROWS:
        try:
            cfg_kwargs = dict(base_model)
            cfg_kwargs.update(overrides)
            model_cfg = ModelConfig(**cfg_kwargs)
            model = VqgModel(model_cfg, vocab, seed=seed)
            row_train = TrainConfig(**{**train_cfg.to_json_dict(), "log_csv": None,
                                       "checkpoint_path": None})
            if out_dir is not None:
                base = Path(out_dir)
                base.mkdir(parents=True, exist_ok=True)
                row_train.log_csv = str(base / f"{name}.loss.csv")
                row_train.checkpoint_path = str(base / f"{name}.ckpt")
            if not model_cfg.reconstruct_image:
                row_train.lambda_recon = 0.0
            result = train(model, train_samples, store, row_train)
            report = evaluate_model(model, eval_raw, store)
            row = {
                "param_count": model.param_count(),
                "param_names": [n for n, _ in model.parameters()],
                "train": {
                    "steps": result.final_step,
                    "final_l_q": result.records[-1].l_q if result.records else None,
                },
                "metrics": report["metrics"],
            }
            if model_cfg.reconstruct_image and result.records:
                row["train"]["final_l_i"] = result.records[-1].l_i
            out[name] = row
        except Exception as exc:  # noqa: BLE001 - row isolation is the contract
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out
