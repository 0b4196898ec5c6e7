"""Command line entry point.

    lang2motion [--config run.yaml] [-v] preprocess --corpus DIR --cache DIR
    lang2motion train    --cache DIR --run-dir DIR [--ablation {jt,2st,lo,bert}] ...
    lang2motion evaluate --checkpoint RUN/best.pt --cache DIR [--split test] [--out DIR]
    lang2motion generate --checkpoint RUN/best.pt --sentence "a person walks forward" --out walk.npz

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 no data,
4 missing model weights or embedding table, 5 checkpoint/config mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .text_embed import ResourceError
from .training import CheckpointError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NO_DATA, EXIT_RESOURCE, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5

log = logging.getLogger("lang2motion")


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must contain a mapping")
    return cfg


def _pick(args, cfg: dict, name: str, section: str | None = None, default=None):
    """Flag value if given, else config file value, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    src = cfg.get(section, {}) if section else cfg
    return src.get(name, default)


def _require_dir(path, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


# --- preprocess ---------------------------------------------------------------------


def cmd_preprocess(args, cfg) -> int:
    from .kit import IngestError, SplitConfig, preprocess_corpus
    from .skeleton import Skeleton

    corpus = _require_dir(_pick(args, cfg, "corpus"), "corpus")
    cache = _pick(args, cfg, "cache")
    if not cache:
        raise UsageError("--cache is required")
    split_cfg = SplitConfig(seed=_pick(args, cfg, "seed", default=0), by=_pick(args, cfg, "split_by", default="motion"))
    skeleton_path = _pick(args, cfg, "skeleton")
    skeleton = Skeleton.load(skeleton_path) if skeleton_path else None
    try:
        manifest, rewritten = preprocess_corpus(
            corpus, cache, split_cfg, skeleton, permissive=bool(args.permissive), force=bool(args.force)
        )
    except IngestError as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except ValueError as exc:
        if "no usable samples" in str(exc):
            log.error("%s", exc)
            return EXIT_NO_DATA
        raise
    if not rewritten:
        print(f"cache {cache} is up to date")
    else:
        print(f"wrote {cache}: {manifest['motions']} motions, {manifest['annotations']} annotations, "
              "samples " + ", ".join(f"{k}={v}" for k, v in manifest["samples"].items()))
    return EXIT_OK


# --- train --------------------------------------------------------------------------


def _embedder_from_settings(kind: str, emb_cfg: dict):
    from .pipeline import make_embedder
    from .text_embed import EmbedderConfig, StaticEmbedderConfig

    if kind == "bert":
        keys = ("model_id", "model_dir", "selected_layers", "per_layer_width", "subword_pooling", "max_words")
        return make_embedder("bert", bert=EmbedderConfig(**{k: emb_cfg[k] for k in keys if k in emb_cfg}))
    keys = ("table_path", "dim", "oov", "oov_seed", "max_words")
    return make_embedder("static", static=StaticEmbedderConfig(**{k: emb_cfg[k] for k in keys if k in emb_cfg}))


def _embed_all(embedder, samples, cache_dir: Path):
    from .text_embed import EmbeddingCache, embed_sentences

    return embed_sentences(sorted({s.sentence for s in samples}), embedder, EmbeddingCache(cache_dir / "embeddings"))


def cmd_train(args, cfg) -> int:
    import torch

    from .kit import load_prepared
    from .model import ModelConfig
    from .pipeline import embedder_info
    from .text_embed import ResourceError
    from .training import AblationConfig, TrainConfig, TrainingSet, train

    cache = _require_dir(_pick(args, cfg, "cache"), "cache")
    run_dir = _pick(args, cfg, "run_dir")
    if not run_dir:
        raise UsageError("--run-dir is required")
    run_dir = Path(run_dir)

    tcfg = dict(cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("lr_decay", "lr_decay"), ("limit", "limit"), ("max_frames", "max_frames")):
        if getattr(args, flag, None) is not None:
            tcfg[key] = getattr(args, flag)
    seed = _pick(args, cfg, "seed", default=tcfg.get("seed", 0))
    tcfg["seed"] = seed
    if args.no_clip:
        tcfg["grad_clip"] = None
    train_cfg = TrainConfig.from_dict(tcfg)
    ablation = AblationConfig(_pick(args, cfg, "ablation", default="full"))

    emb_cfg = dict(cfg.get("embedder", {}))
    kind = args.embedder or emb_cfg.get("kind", "bert")
    if ablation.variant == "no_bert":
        kind = "static"
    if args.bert_dir:
        emb_cfg["model_dir"] = args.bert_dir
    if args.word_table:
        emb_cfg["table_path"] = args.word_table
    embedder = _embedder_from_settings(kind, emb_cfg)

    data = load_prepared(cache)
    train_samples = data.train[: train_cfg.limit] if train_cfg.limit else data.train
    if not train_samples:
        log.error("training split is empty")
        return EXIT_NO_DATA
    try:
        embeddings = _embed_all(embedder, train_samples + data.val, cache)
    except ResourceError as exc:
        log.error("%s", exc)
        return EXIT_RESOURCE

    mcfg = dict(cfg.get("model", {}))
    for k in ("h1", "h2", "h"):
        if getattr(args, k, None) is not None:
            mcfg[k] = getattr(args, k)
    model_cfg = ModelConfig.from_skeleton(embed_dim=embedder.dim, **mcfg, **ablation.model_overrides())

    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "cache": str(cache), "run_dir": str(run_dir), "seed": seed, "ablation": ablation.variant,
        "train": json.loads(json.dumps(asdict(train_cfg), default=list)),
        "embedder": {"kind": kind, **emb_cfg}, "model": mcfg,
    }
    (run_dir / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))

    torch.set_num_threads(max(1, torch.get_num_threads()))
    train_set = TrainingSet(train_samples, data.stats, embeddings, train_cfg.max_frames)
    val_set = TrainingSet(data.val, data.stats, embeddings, train_cfg.max_frames) if data.val else None
    info = {**embedder_info(embedder), "settings": {"kind": kind, **emb_cfg}}
    _, history = train(train_set, val_set, train_cfg, ablation, run_dir, model_cfg, info,
                       resume=not args.no_resume)
    last = history[-1] if history else {}
    print(f"trained {len(history)} epoch(s) into {run_dir}; last train loss "
          f"{last.get('train', {}).get('total_generator', float('nan')):.6f}")
    return EXIT_OK


# --- evaluate -----------------------------------------------------------------------


def cmd_evaluate(args, cfg) -> int:
    from .kit import load_prepared
    from .metrics import plot_report
    from .pipeline import evaluate, evaluate_ground_truth
    from .skeleton import kit_skeleton
    from .text_embed import ResourceError
    from .training import CheckpointError, load_checkpoint

    cache = _require_dir(_pick(args, cfg, "cache"), "cache")
    data = load_prepared(cache)
    samples = getattr(data, args.split)
    if not samples:
        log.error("split %s is empty", args.split)
        return EXIT_NO_DATA
    skeleton = kit_skeleton()
    out = Path(args.out or _pick(args, cfg, "run_dir", default="."))
    out.mkdir(parents=True, exist_ok=True)

    if args.gt_vs_gt:
        report = evaluate_ground_truth(samples, skeleton)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --gt-vs-gt is given")
        try:
            model, ckpt = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            log.error("%s", exc)
            return EXIT_MISMATCH
        settings = dict(ckpt["embedder"].get("settings", {}))
        if args.bert_dir:
            settings["model_dir"] = args.bert_dir
        if args.word_table:
            settings["table_path"] = args.word_table
        embedder = _embedder_from_settings(settings.get("kind", ckpt["embedder"]["kind"]), settings)
        if embedder.config_hash() != ckpt["embedder"]["hash"] or embedder.dim != model.cfg.embed_dim:
            log.error("embedder configuration differs from the one the checkpoint was trained with")
            return EXIT_MISMATCH
        if not np.allclose(np.asarray(ckpt["normalization"]["mean"]), data.stats.mean):
            log.error("checkpoint normalization statistics do not match cache %s", cache)
            return EXIT_MISMATCH
        try:
            embeddings = _embed_all(embedder, samples, cache)
        except ResourceError as exc:
            log.error("%s", exc)
            return EXIT_RESOURCE
        report = evaluate(model, samples, data.stats, embeddings, skeleton,
                          cee_mode=args.cee_mode, see_norm=args.see_norm)

    stem = out / f"eval_{args.split}"
    Path(f"{stem}.json").write_text(report.to_json())
    Path(f"{stem}.txt").write_text(report.to_table())
    if not args.no_plots:
        plot_report(report, str(stem))
    print(report.to_table(), end="")
    return EXIT_OK


# --- generate -----------------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    from .kit import NormalizationStats
    from .pipeline import generate
    from .skeleton import export_csv, kit_skeleton, load_motion, plot_stick_frames, plot_trajectory, save_motion
    from .text_embed import ResourceError
    from .training import CheckpointError, load_checkpoint

    if not args.sentence or not args.sentence.strip():
        raise UsageError("--sentence must be a non-empty sentence")
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    try:
        model, ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    settings = dict(ckpt["embedder"].get("settings", {}))
    if args.bert_dir:
        settings["model_dir"] = args.bert_dir
    if args.word_table:
        settings["table_path"] = args.word_table
    embedder = _embedder_from_settings(settings.get("kind", ckpt["embedder"]["kind"]), settings)
    if embedder.dim != model.cfg.embed_dim:
        log.error("embedder width %d does not match checkpoint (%d)", embedder.dim, model.cfg.embed_dim)
        return EXIT_MISMATCH
    try:
        emb = embedder.embed(args.sentence.strip())
    except ResourceError as exc:
        log.error("%s", exc)
        return EXIT_RESOURCE

    stats = NormalizationStats.from_dict(ckpt["normalization"])
    initial = None
    if args.initial_pose:
        seq, _ = load_motion(args.initial_pose)
        initial = seq.to_channels()[0]
    skeleton = kit_skeleton()
    motion = generate(model, emb, stats, T=args.frames, initial_pose=initial)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_motion(out, motion, skeleton)
    written = [out]
    if args.csv:
        export_csv(out.with_suffix(".csv"), motion, skeleton)
        written.append(out.with_suffix(".csv"))
    if args.plot:
        plot_trajectory(out.with_name(out.stem + "_trajectory.png"), motion, skeleton, title=args.sentence)
        plot_stick_frames(out.with_name(out.stem + "_frames.png"), motion, skeleton)
        written += [out.with_name(out.stem + "_trajectory.png"), out.with_name(out.stem + "_frames.png")]
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lang2motion", description="Text-to-motion synthesis on KIT-ML.")
    ap.add_argument("--config", help="YAML run configuration; flags override its values")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="ingest the corpus, split it and write the cache")
    p.add_argument("--corpus")
    p.add_argument("--cache")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-by", choices=("motion", "annotation"))
    p.add_argument("--skeleton", help="skeleton definition JSON (default: bundled kit21)")
    p.add_argument("--permissive", action="store_true", help="skip corrupt recordings instead of failing")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    def embedder_flags(q):
        q.add_argument("--bert-dir", help="local BERT-large cased model directory (or $LANG2MOTION_BERT_DIR)")
        q.add_argument("--word-table", help="word2vec text table for static embeddings")

    p = sub.add_parser("train", help="train the model (or an ablation)")
    p.add_argument("--cache")
    p.add_argument("--run-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--limit", type=int, help="use only the first N training samples")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=("full", "jt", "2st", "lo", "bert"))
    p.add_argument("--embedder", choices=("bert", "static"))
    p.add_argument("--h1", type=int)
    p.add_argument("--h2", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--no-clip", action="store_true", help="disable gradient-norm clipping")
    p.add_argument("--no-resume", action="store_true")
    embedder_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--cache")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("--gt-vs-gt", action="store_true", help="score the ground truth against itself")
    p.add_argument("--cee-mode", choices=("elementwise", "euclidean"), default="elementwise")
    p.add_argument("--see-norm", choices=("mn", "m2n"), default="mn")
    p.add_argument("--no-plots", action="store_true")
    embedder_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="synthesize a motion from a sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--frames", type=int, default=96)
    p.add_argument("--initial-pose", help="motion file whose first frame seeds the decoder")
    p.add_argument("--out", default="motion.npz")
    p.add_argument("--csv", action="store_true", help="also export global positions as CSV")
    p.add_argument("--plot", action="store_true", help="also write trajectory and stick-figure images")
    embedder_flags(p)
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ResourceError as exc:
        log.error("%s", exc)
        return EXIT_RESOURCE
    except CheckpointError as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except Exception as exc:  # noqa: BLE001
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
