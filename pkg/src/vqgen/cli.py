"""Command line driver: data preparation, training, ablation, generation,
evaluation, and the gradient self-check.

Exit codes: 0 success, 1 runtime failure (bad data, numeric blowup,
missing files), 2 configuration or parse failure. Subcommands read an
optional TOML config file; command line flags override its values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import tensor as T
from .checkpoint import (
    config_hash,
    load_checkpoint,
    build_model,
    save_checkpoint,
    vocab_hash,
)
from .data import (
    CATEGORY_NAMES,
    FeatureStore,
    RawSample,
    encode_samples,
    ingest,
    load_category_map,
    make_synthetic,
    split_by_image,
)
from .errors import ConfigError, ParseError, VqgError
from .generate import GenRequest, generate
from .metrics import evaluate_model
from .model import VARIANTS, ModelConfig, VqgModel
from .text import Vocabulary, build_vocab
from .training import TrainConfig, run_ablation_matrix, train

GRAD_TOL = 1e-4


def _emit(blob: dict, out: str | None) -> None:
    text = json.dumps(blob, ensure_ascii=False, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


# ---- split files: raw samples as portable JSON ----


def save_split(path: str | Path, raw: list[RawSample]) -> None:
    blob = {"samples": [asdict(s) for s in raw]}
    Path(path).write_text(
        json.dumps(blob, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_split(path: str | Path) -> list[RawSample]:
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(blob, dict) or "samples" not in blob:
        raise ParseError(f"{path}: expected an object with a 'samples' list")
    out = []
    for i, rec in enumerate(blob["samples"]):
        try:
            out.append(
                RawSample(
                    image_id=int(rec["image_id"]),
                    question=str(rec["question"]),
                    answer=str(rec["answer"]),
                    category=str(rec["category"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: record {i}: {exc!r}") from exc
    return out


# ---- config file merging ----


def load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            blob = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key in blob:
        if key not in ("model", "train"):
            raise ConfigError(f"{path}: unknown section {key!r}; expected [model]/[train]")
    return blob


_MODEL_FLAGS = (
    "variant", "n_layers", "n_heads", "d_model", "d_ff", "feature_width",
    "image_source", "lambda_recon", "dropout",
)
_TRAIN_FLAGS = ("steps", "batch_size", "lr", "lambda_recon", "seed", "eval_every",
                "checkpoint_every")


def merged_model_kwargs(args, file_cfg: dict, vocab_size: int) -> dict:
    out = dict(file_cfg.get("model", {}))
    for name in _MODEL_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            out[name] = val
    if getattr(args, "no_recon", False):
        out["reconstruct_image"] = False
    out["vocab_size"] = vocab_size
    return out


def merged_train_kwargs(args, file_cfg: dict) -> dict:
    out = dict(file_cfg.get("train", {}))
    for name in _TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            out[name] = val
    return out


def build_run_config(args, vocab_size: int) -> tuple[ModelConfig, TrainConfig]:
    file_cfg = load_toml(getattr(args, "config", None))
    model_cfg = ModelConfig.from_json_dict(merged_model_kwargs(args, file_cfg, vocab_size))
    train_kwargs = merged_train_kwargs(args, file_cfg)
    known = set(TrainConfig().to_json_dict())
    unknown = set(train_kwargs) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return model_cfg, TrainConfig(**train_kwargs)


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")


def _vocab_for_split(raw: list[RawSample], vocab_path: str | None) -> Vocabulary:
    if vocab_path is not None:
        return Vocabulary.load(vocab_path)
    docs = [s.question for s in raw] + [s.answer for s in raw]
    return build_vocab(docs, atomic_tokens=CATEGORY_NAMES)


def _load_store(args, model_cfg: ModelConfig) -> FeatureStore | None:
    if not model_cfg.uses_image:
        return None
    _require(args, "features")
    return FeatureStore.load(args.features)


# ---- subcommands ----


def cmd_data_stats(args) -> int:
    result = ingest(args.questions, args.annotations, load_category_map(args.category_map))
    _emit(result.stats.to_json_dict(), args.out)
    return 0


def cmd_build_vocab(args) -> int:
    result = ingest(args.questions, args.annotations, load_category_map(args.category_map))
    result.vocab.save(args.out)
    _emit({"tokens": len(result.vocab), "out": args.out}, None)
    return 0


def cmd_make_synthetic(args) -> int:
    store, raw = make_synthetic(args.images, args.categories, seed=args.seed)
    train_raw, val_raw = split_by_image(raw, args.val_images)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store.save(out / "features.vqgf")
    save_split(out / "train.json", train_raw)
    save_split(out / "val.json", val_raw)
    _emit(
        {
            "images": args.images,
            "samples": len(raw),
            "train": len(train_raw),
            "val": len(val_raw),
            "features": str(out / "features.vqgf"),
            "train_split": str(out / "train.json"),
            "val_split": str(out / "val.json"),
        },
        None,
    )
    return 0


def cmd_train(args) -> int:
    _require(args, "train_split")
    train_raw = load_split(args.train_split)
    vocab = _vocab_for_split(train_raw, args.vocab)
    model_cfg, train_cfg = build_run_config(args, len(vocab))
    store = _load_store(args, model_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg.log_csv = str(out / "loss.csv")
    train_cfg.checkpoint_path = str(out / "model.ckpt")
    model = VqgModel(model_cfg, vocab, seed=train_cfg.seed)
    eval_samples = None
    if args.val_split:
        eval_samples = encode_samples(load_split(args.val_split), vocab)
    result = train(
        model, encode_samples(train_raw, vocab), store, train_cfg, eval_samples=eval_samples
    )
    last = result.records[-1] if result.records else None
    summary = {
        "steps": result.final_step,
        "params": model.param_count(),
        "checkpoint": train_cfg.checkpoint_path,
        "loss_csv": train_cfg.log_csv,
        "config_hash": config_hash(
            {"model": model_cfg.to_json_dict(), "train": train_cfg.semantic_dict()}
        ),
        "vocab_sha": vocab_hash(vocab),
    }
    if last is not None:
        summary["final_l_q"] = last.l_q
        if model_cfg.reconstruct_image:
            summary["final_l_i"] = last.l_i
    if result.evals:
        summary["final_eval_ce"] = result.evals[-1][1]
    _emit(summary, args.out)
    return 0


def cmd_ablate(args) -> int:
    _require(args, "train_split")
    train_raw = load_split(args.train_split)
    eval_raw = load_split(args.val_split) if args.val_split else train_raw
    vocab = _vocab_for_split(train_raw, args.vocab)
    model_cfg, train_cfg = build_run_config(args, len(vocab))
    store = _load_store(args, model_cfg)
    base_model = model_cfg.to_json_dict()
    # rows set their own variant and reconstruction toggle
    base_model.pop("variant")
    base_model.pop("reconstruct_image")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation_matrix(
        train_samples=encode_samples(train_raw, vocab),
        eval_raw=eval_raw,
        store=store,
        vocab=vocab,
        base_model=base_model,
        train_cfg=train_cfg,
        out_dir=out,
        seed=train_cfg.seed,
    )
    blob = {
        "rows": rows,
        "metadata": {
            "config_hash": config_hash(
                {"model": base_model, "train": train_cfg.semantic_dict()}
            ),
            "vocab_sha": vocab_hash(vocab),
            "train_samples": len(train_raw),
            "eval_questions": len(eval_raw),
        },
    }
    path = out / "ablation.json"
    _emit(blob, str(path))
    failed = sorted(k for k, v in rows.items() if "error" in v)
    _emit({"out": str(path), "rows": sorted(rows), "failed": failed}, None)
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    store = FeatureStore.load(args.features) if args.features else None
    request = GenRequest(
        category=args.category,
        image_id=args.image_id,
        max_len=args.max_len,
        beam=args.beam,
    )
    result = generate(model, request, store)
    _emit(
        {
            "ids": result.ids,
            "text": result.text,
            "log_probs": result.log_probs,
            "stop_reason": result.stop_reason,
        },
        None,
    )
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    if args.vocab is not None:
        given = vocab_hash(Vocabulary.load(args.vocab))
        embedded = vocab_hash(ckpt.vocab)
        if given != embedded:
            raise ConfigError(
                f"vocab mismatch: checkpoint embeds {embedded}, --vocab hashes to {given}"
            )
    raw = load_split(args.split)
    store = FeatureStore.load(args.features) if args.features else None
    report = evaluate_model(model, raw, store, beam=args.beam)
    _emit(report, args.out)
    return 0


# ---- gradient self-check ----


def _op_checks() -> list[tuple[str, float]]:
    """Finite-difference check of every differentiable op; (name, worst err)."""
    gen = np.random.default_rng(17)

    def leaf(*shape, offset=0.0):
        return T.Tensor(gen.standard_normal(shape) + offset, requires_grad=True)

    rows: list[tuple[str, float]] = []

    def check(name, params, loss_fn, h=1e-5):
        report = T.grad_check(loss_fn, params, h=h)
        rows.append((name, report["worst"]))

    a, b = leaf(3, 4), leaf(3, 4)
    row = leaf(4)
    check("add", [("a", a), ("b", b)], lambda: (a + b).sum())
    check("add-broadcast", [("a", a), ("r", row)], lambda: (a + row).sum())
    check("sub", [("a", a), ("b", b)], lambda: (a - b).sum())
    check("mul", [("a", a), ("b", b)], lambda: (a * b).mean())
    d = leaf(3, 4, offset=3.0)
    check("div", [("a", a), ("d", d)], lambda: (a / d).sum())
    check("neg", [("a", a)], lambda: (-a).sum())
    check("pow", [("a", a)], lambda: (a ** 2.0).sum())
    p = leaf(3, 4, offset=4.0)
    check("sqrt", [("p", p)], lambda: (p ** 0.5).sum())
    e = leaf(3, 4)
    check("exp", [("e", e)], lambda: e.exp().sum())
    check("log", [("p", p)], lambda: p.log().sum())
    m1, m2 = leaf(3, 5), leaf(5, 2)
    check("matmul", [("m1", m1), ("m2", m2)], lambda: (m1 @ m2).sum())
    bm1, bm2 = leaf(2, 3, 5), leaf(2, 5, 4)
    check("matmul-batched", [("m1", bm1), ("m2", bm2)], lambda: (bm1 @ bm2).sum())
    check("reshape", [("a", a)], lambda: a.reshape(4, 3).mean())
    check("transpose", [("m1", bm1)], lambda: bm1.transpose(1, 0, 2).sum())
    check("narrow", [("m1", bm1)], lambda: bm1.narrow(1, 1, 2).sum())
    check("sum-axis", [("m1", bm1)], lambda: (bm1.sum(axis=1) ** 2.0).sum())
    check("mean-axis", [("m1", bm1)], lambda: (bm1.mean(axis=2) ** 2.0).sum())
    r = leaf(3, 4, offset=0.5)  # keep pre-activations clear of the kink
    check("relu", [("r", r)], lambda: r.relu().sum())
    s = leaf(2, 5)
    check("softmax", [("s", s)], lambda: (s.softmax(-1) ** 2.0).sum())
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, 3] = True
    check("masked-fill", [("s", s)],
          lambda: (s.masked_fill(mask, -1e9).softmax(-1) ** 2.0).sum())
    c1, c2 = leaf(2, 3), leaf(2, 2)
    check("concat", [("c1", c1), ("c2", c2)],
          lambda: (T.concat([c1, c2], axis=1) ** 2.0).sum())
    table = leaf(7, 4)
    ids = np.array([[0, 3, 6], [2, 2, 5]])
    check("embedding", [("table", table)], lambda: T.embedding(table, ids).sum())
    logits = leaf(2, 3, 7)
    targets = np.array([[1, 4, 0], [6, 0, 2]])
    check("cross-entropy", [("logits", logits)],
          lambda: T.cross_entropy(logits, targets, ignore_id=0))
    pred, target = leaf(3, 4), leaf(3, 4)
    check("mse", [("pred", pred)], lambda: T.mse_loss(pred, target.detach()))
    gn, bn = leaf(4, offset=1.0), leaf(4)
    check("layer-norm", [("a", a), ("g", gn), ("b", bn)],
          lambda: (T.layer_norm(a, gn, bn) ** 2.0).sum())
    x = leaf(4, 3)
    xw = gen.standard_normal((4, 3))  # squared norms are constant; weight instead
    check("batch-stats-norm", [("x", x)],
          lambda: (T.batch_stats_norm(x, 1e-5)[0] * T.Tensor(xw)).sum())
    img = leaf(2, 2, 6, 6)
    kern, kb = leaf(3, 2, 3, 3), leaf(3)
    check("conv2d", [("img", img), ("k", kern), ("kb", kb)],
          lambda: (T.conv2d(img, kern, kb, padding=1) ** 2.0).mean())
    check("avg-pool", [("img", img)], lambda: (T.avg_pool2d(img, 2) ** 2.0).sum())
    dx = leaf(4, 5)
    check("dropout", [("dx", dx)],
          lambda: T.dropout(dx, 0.4, np.random.default_rng(3)).sum())
    return rows


def _model_check() -> float:
    """End-to-end check on the small single-head configuration."""
    vocab = build_vocab(["ab cd ef gh ij kl mn"])  # 4 specials + 7 words
    cfg = ModelConfig(
        vocab_size=len(vocab),
        variant="image-only",
        n_layers=1,
        n_heads=1,
        d_model=8,
        d_ff=8,
        feature_width=8,
        reconstruct_image=True,
    )
    model = VqgModel(cfg, vocab, seed=3)
    gen = np.random.default_rng(5)
    features = gen.standard_normal((2, 8))
    questions = np.array([[4, 5, 6, 2] + [0] * 16, [7, 8, 9, 10, 2] + [0] * 15])

    def loss_fn():
        fwd = model.forward(
            features=features, answer_ids=None, category_ids=None,
            question_ids=questions, train=False,
        )
        loss = T.cross_entropy(fwd.logits, questions, ignore_id=0)
        return loss + T.mse_loss(fwd.recon, fwd.recon_target)

    report = T.grad_check(
        loss_fn, model.trainable_parameters(), h=1e-5, max_entries_per_param=4, seed=11
    )
    return report["worst"]


def cmd_check(args) -> int:
    rows = _op_checks()
    rows.append(("model-end-to-end", _model_check()))
    worst_name, worst = max(rows, key=lambda kv: kv[1])
    for name, err in rows:
        print(f"{name:20s} {err:.3e}")
    ok = worst <= GRAD_TOL
    print(f"worst {worst:.3e} ({worst_name}); tolerance {GRAD_TOL:.0e}; "
          f"{'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


# ---- parser ----


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--questions", required=True, help="questions JSON file")
    p.add_argument("--annotations", required=True, help="annotations JSON file")
    p.add_argument("--category-map", required=True, dest="category_map",
                   help="answer-to-category TSV")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with [model] and [train] tables")
    p.add_argument("--train-split", dest="train_split", help="training split JSON")
    p.add_argument("--val-split", dest="val_split", help="held-out split JSON")
    p.add_argument("--features", help="feature store file")
    p.add_argument("--vocab", help="vocabulary file; default builds from the split")
    p.add_argument("--out-dir", dest="out_dir", default=".", help="artifact directory")
    p.add_argument("--out", help="write the summary JSON here instead of stdout")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--feature-width", dest="feature_width", type=int)
    p.add_argument("--image-source", dest="image_source", choices=("vector", "conv"))
    p.add_argument("--no-recon", dest="no_recon", action="store_true",
                   help="disable the image reconstruction head")
    p.add_argument("--dropout", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-recon", dest="lambda_recon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vqgen", description="guided visual question generation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("data-stats", help="corpus statistics after category filtering")
    _add_dataset_args(p)
    p.add_argument("--out", help="write stats JSON here instead of stdout")
    p.set_defaults(func=cmd_data_stats)

    p = sub.add_parser("build-vocab", help="build and save a vocabulary")
    _add_dataset_args(p)
    p.add_argument("--out", required=True, help="vocabulary output file")
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("make-synthetic", help="generate the synthetic corpus")
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-images", dest="val_images", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train a model")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train and score every variant row")
    _add_run_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="generate one question from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", help="feature store file")
    p.add_argument("--image-id", dest="image_id", type=int)
    p.add_argument("--category", required=True)
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--max-len", dest="max_len", type=int, default=20)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="raw-sample split JSON")
    p.add_argument("--features", help="feature store file")
    p.add_argument("--vocab", help="cross-check this vocabulary against the checkpoint")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--out", help="write the report JSON here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    for name in ("check", "check-grads"):
        p = sub.add_parser(name, help="finite-difference gradient verification")
        p.set_defaults(func=cmd_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (VqgError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
