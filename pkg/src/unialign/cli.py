"""Command-line interface wiring data synthesis, training, encoding, and
evaluation into reproducible runs.

Each command validates every input before writing anything, echoes the fully
resolved configuration into its run directory, and produces byte-identical
outputs for identical inputs and flags. Exit codes: 0 success, 1 usage or
configuration error, 2 data/format error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, parse_overrides
from .data import (
    load_features,
    load_labeled_dataset,
    load_manifest,
    load_paired_dataset,
    load_vqa_dataset,
    prompt_features,
    save_features,
    save_manifest,
    synth_vqa_world,
    synth_world,
)
from .errors import (
    BatchError,
    ConfigurationError,
    CorruptionError,
    DegenerateEmbeddingError,
    DivergenceError,
    DuplicateModalityError,
    FormatError,
    LabelError,
    ModalityError,
    SequenceError,
    ShapeError,
    VocabularyError,
)
from .evaluate import (
    TaxonomyGraph,
    accuracy,
    emit_report,
    macro_f1,
    retrieval_metrics,
    wups_score,
    zero_shot_classify,
)
from .loss import Temperature
from .model import encode, parameter_count
from .pipeline import (
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
    train_vqa,
    vqa_predict,
)
from .rng import derive_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_DATA_ERRORS = (
    BatchError,
    CorruptionError,
    DegenerateEmbeddingError,
    DuplicateModalityError,
    FormatError,
    LabelError,
    ModalityError,
    SequenceError,
    ShapeError,
    VocabularyError,
    OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="configuration file with key = value lines")
    parser.add_argument("--set", dest="overrides", action="append",
                        metavar="KEY=VALUE", default=[],
                        help="override one configuration key")
    parser.add_argument("--seed", type=int, default=None,
                        help="shorthand for --set seed=N")


def _run_config(args) -> RunConfig:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "fusion", None):
        overrides["fusion"] = args.fusion
    return RunConfig.load(args.config, overrides)


def _prepare_run_dir(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved_text(), encoding="utf-8")


def _loss_report_rows(history):
    return [(f"loss.epoch_{i:05d}", "train", v) for i, v in enumerate(history)]


# ---------------------------------------------------------------------------
# synth


def _write_pair_world(cfg: RunConfig, out: Path) -> list[str]:
    world = cfg.world_config()
    splits = {
        "train": synth_world(world, cfg.train_count,
                             derive_seed(cfg.seed, "train"), anchor_seed=cfg.seed),
        "validation": synth_world(world, cfg.val_count,
                                  derive_seed(cfg.seed, "validation"),
                                  anchor_seed=cfg.seed),
    }
    features_dir = out / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for split, dataset in splits.items():
        for modality in dataset.modalities:
            save_features(features_dir / f"{modality}_{split}.oeft", modality,
                          dataset.features[modality])
        for mod_a, mod_b in itertools.combinations(dataset.modalities, 2):
            save_manifest(
                out / f"{split}_{mod_a}_{mod_b}.manifest", "pair",
                (mod_a, mod_b), split,
                [(f"features/{mod_a}_{split}.oeft",
                  f"features/{mod_b}_{split}.oeft")])
        summary.append(f"{split}: {len(dataset)} pairs over {dataset.modalities}")

    if cfg.class_count:
        val = splits["validation"]
        classes = [f"class_{i}" for i in range(cfg.class_count)]
        for modality in val.modalities:
            records = []
            for c, label in enumerate(classes):
                idx = [i for i, lab in enumerate(val.labels) if lab == label]
                shard = f"features/{modality}_validation_class{c}.oeft"
                save_features(features_dir / f"{modality}_validation_class{c}.oeft",
                              modality, val.features[modality][idx])
                records.append((shard, label))
            save_manifest(out / f"{modality}_validation_labeled.manifest",
                          "labeled", (modality,), "validation", records)
            save_features(features_dir / f"{modality}_prompts.oeft", modality,
                          prompt_features(world, modality, cfg.seed))
        summary.append(f"labeled with {cfg.class_count} classes")
    return summary


def _write_vqa_world(cfg: RunConfig, out: Path) -> list[str]:
    world = cfg.world_config()
    splits = {
        "train": synth_vqa_world(world, cfg.train_count,
                                 derive_seed(cfg.seed, "train"),
                                 anchor_seed=cfg.seed),
        "validation": synth_vqa_world(world, cfg.val_count,
                                      derive_seed(cfg.seed, "validation"),
                                      anchor_seed=cfg.seed),
    }
    features_dir = out / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for split, dataset in splits.items():
        img, q = dataset.image_modality, dataset.question_modality
        save_features(features_dir / f"{img}_{split}.oeft", img,
                      dataset.image_features)
        save_features(features_dir / f"{q}_{split}.oeft", q,
                      dataset.question_features)
        answers_name = f"answers_{split}.txt"
        (out / answers_name).write_text(
            "\n".join(dataset.answers) + "\n", encoding="utf-8")
        save_manifest(out / f"vqa_{split}.manifest", "vqa", (img, q), split,
                      [(f"features/{img}_{split}.oeft",
                        f"features/{q}_{split}.oeft", answers_name)])
        summary.append(f"{split}: {len(dataset)} (image, question, answer) triples")

    vocabulary = splits["train"].vocabulary
    half = (len(vocabulary) + 1) // 2
    lines = ["# answer taxonomy", "group_0\tthing", "group_1\tthing"]
    for i, answer in enumerate(vocabulary):
        lines.append(f"{answer}\tgroup_{0 if i < half else 1}")
    (out / "taxonomy.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary.append(f"{len(vocabulary)} answers; taxonomy.tsv written")
    return summary


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(
            f"output directory {out} is not empty (use --force to overwrite)")
    _prepare_run_dir(out, cfg)
    if cfg.world == "vqa":
        summary = _write_vqa_world(cfg, out)
    else:
        summary = _write_pair_world(cfg, out)
    for line in summary:
        print(line)
    print(f"dataset written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands


def cmd_train_up(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    if args.task == "vqa":
        if manifest.kind != "vqa":
            raise ConfigurationError(
                f"--task vqa needs a vqa manifest, got kind {manifest.kind!r}")
        dataset = load_vqa_dataset(manifest)
        state, history = train_vqa(dataset, cfg.vqa_train_config(),
                                   cfg.up_config())
    else:
        dataset = load_paired_dataset(manifest)
        state, history = train_stage1(dataset, cfg.stage1_train_config(),
                                      cfg.up_config())
    state.metadata["seed"] = cfg.seed
    _prepare_run_dir(out, cfg)
    save_checkpoint(state, out / "checkpoint.oeck",
                    step=len(history), loss=history[-1])
    emit_report(_loss_report_rows(history), out / "loss_history.tsv")
    tau = Temperature.from_parameter(state.log_tau).value()
    print(f"trained {args.task} model: {len(history)} epochs, "
          f"final loss {history[-1]:.6f}, tau {tau:.4f}")
    print(f"checkpoint written to {out / 'checkpoint.oeck'}")
    return EXIT_OK


def cmd_align(args) -> int:
    cfg = _run_config(args)
    state = load_checkpoint(args.checkpoint)
    dataset = load_paired_dataset(load_manifest(args.manifest))
    out = Path(args.out)
    state, history = train_stage2(state, args.new_modality, args.bridge,
                                  dataset, cfg.stage2_train_config())
    state.metadata["seed"] = cfg.seed
    _prepare_run_dir(out, cfg)
    save_checkpoint(state, out / "checkpoint.oeck",
                    step=len(history), loss=history[-1])
    emit_report(_loss_report_rows(history), out / "loss_history.tsv")
    print(f"aligned {args.new_modality!r} via {args.bridge!r}; registry now "
          f"{state.registry.aligned}")
    print(f"checkpoint written to {out / 'checkpoint.oeck'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# encode and eval


def cmd_encode(args) -> int:
    state = load_checkpoint(args.checkpoint)
    source = load_features(args.features)
    if source.modality != args.modality:
        raise FormatError(
            f"{args.features} holds modality {source.modality!r}, "
            f"--modality says {args.modality!r}")
    state.registry.require(args.modality)
    embeddings = encode(state, args.modality, source.features).data
    save_features(args.out, args.modality, embeddings[:, None, :])
    print(f"wrote {embeddings.shape[0]} embeddings of dimension "
          f"{embeddings.shape[1]} to {args.out}")
    return EXIT_OK


def _eval_retrieval(cfg: RunConfig, state, args):
    manifest = load_manifest(args.manifest)
    dataset = load_paired_dataset(manifest)
    mod_a, mod_b = dataset.modalities
    emb = {m: encode(state, m, dataset.features[m]).data
           for m in dataset.modalities}
    sims = emb[mod_a] @ emb[mod_b].T
    rows = []
    for query, cand, matrix in ((mod_a, mod_b, sims), (mod_b, mod_a, sims.T)):
        for name, value in retrieval_metrics(matrix, cfg.recall_ks).items():
            rows.append((f"retrieval.{query}_to_{cand}.{name}",
                         dataset.split, value))
    return rows


def _eval_zeroshot(cfg: RunConfig, state, args):
    if args.queries is None or args.prompts is None:
        raise ConfigurationError("zeroshot needs --queries and --prompts")
    manifest = load_manifest(args.queries)
    feats, labels, query_modality = load_labeled_dataset(manifest)
    prompts = load_features(args.prompts)
    classes = []
    for _, label in manifest.records:
        if label not in classes:
            classes.append(label)
    if len(prompts) != len(classes):
        raise BatchError(
            f"{len(prompts)} prompt records for {len(classes)} classes")
    class_embs = encode(state, prompts.modality, prompts.features).data
    query_embs = encode(state, query_modality, feats).data
    tau = cfg.zeroshot_tau or Temperature.from_parameter(state.log_tau).value()
    predictions = [
        classes[zero_shot_classify(e, class_embs, tau)[1]] for e in query_embs
    ]
    value = accuracy(predictions, labels)
    name = f"zeroshot.{query_modality}_via_{prompts.modality}.accuracy"
    return [(name, manifest.split, value)]


def _eval_vqa(cfg: RunConfig, state, args):
    if args.taxonomy is None:
        raise ConfigurationError("vqa evaluation needs --taxonomy for wups")
    if "vqa" not in state.heads:
        raise ConfigurationError("checkpoint has no vqa prediction head")
    taxonomy = TaxonomyGraph.from_file(args.taxonomy)
    head = state.heads["vqa"]
    manifest = load_manifest(args.manifest)
    dataset = load_vqa_dataset(manifest, vocabulary=head.vocabulary)
    predictions = vqa_predict(state, head, dataset.image_features,
                              dataset.question_features)
    golds = list(dataset.answers)
    return [
        ("accuracy", dataset.split, accuracy(predictions, golds)),
        ("f1_macro", dataset.split,
         macro_f1(predictions, golds, labels=head.vocabulary)),
        ("wups", dataset.split,
         wups_score(predictions, golds, taxonomy, cfg.wups_threshold)),
    ]


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    state = load_checkpoint(args.checkpoint)
    if args.task == "retrieval":
        if args.manifest is None:
            raise ConfigurationError("retrieval needs --manifest")
        rows = _eval_retrieval(cfg, state, args)
    elif args.task == "zeroshot":
        rows = _eval_zeroshot(cfg, state, args)
    else:
        if args.manifest is None:
            raise ConfigurationError("vqa evaluation needs --manifest")
        rows = _eval_vqa(cfg, state, args)
    out = Path(args.out)
    _prepare_run_dir(out, cfg)
    report_path = out / args.report
    emit_report(rows, report_path)
    for name, split, value in sorted(rows):
        print(f"{name}\t{split}\t{value:.6f}")
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    print(f"checkpoint: {args.checkpoint}")
    print(f"trunk: dim={cfg.dim} depth={cfg.depth} heads={cfg.heads} "
          f"mlp_ratio={cfg.mlp_ratio} fusion={cfg.fusion} "
          f"token_count={cfg.token_count}")
    print(f"trunk parameters (closed form): {parameter_count(cfg)}")
    print(f"aligned modalities: {state.registry.aligned} "
          f"(original pair: {list(state.registry.stage1_pair)})")
    total = 0
    for name, p in state.named_parameters():
        total += p.data.size
    print(f"total parameters: {total}")
    for modality in sorted(state.alignment):
        layer = state.alignment[modality]
        count = sum(p.data.size for _, p in layer.named_parameters())
        print(f"alignment layer for {modality!r}: hidden={layer.hidden} "
              f"({count} parameters)")
    for name in sorted(state.heads):
        head = state.heads[name]
        print(f"head {name!r}: {len(head.vocabulary)} answers")
    tau = Temperature.from_parameter(state.log_tau).value()
    meta = state.metadata
    print(f"tau: {tau:.6f}")
    print(f"metadata: step={meta.get('step')} seed={meta.get('seed')} "
          f"loss={meta.get('loss'):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="unialign",
        description="Progressive multimodal alignment at desk scale.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-up", help="train the shared trunk on a pair",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--manifest", required=True, type=Path,
                   help="training manifest (pair or vqa kind)")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--task", choices=("contrastive", "vqa"),
                   default="contrastive", help="training objective")
    p.add_argument("--fusion", choices=("addition", "concatenation",
                                        "cross_attention"), default=None,
                   help="shorthand for --set fusion=MODE")
    p.set_defaults(func=cmd_train_up)

    p = sub.add_parser("align", help="align a new modality through a bridge",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path,
                   help="pair manifest over (bridge, new) modalities")
    p.add_argument("--new-modality", required=True)
    p.add_argument("--bridge", required=True,
                   help="already-aligned modality paired with the new one")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("encode", help="embed precomputed features",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--modality", required=True)
    p.add_argument("--features", required=True, type=Path,
                   help="input feature file")
    p.add_argument("--out", required=True, type=Path,
                   help="output embedding file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("eval", help="evaluate a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--task", choices=("retrieval", "zeroshot", "vqa"),
                   required=True)
    p.add_argument("--manifest", type=Path, default=None,
                   help="pair manifest (retrieval) or vqa manifest (vqa)")
    p.add_argument("--queries", type=Path, default=None,
                   help="labeled manifest of zero-shot queries")
    p.add_argument("--prompts", type=Path, default=None,
                   help="feature file with one class prompt per record")
    p.add_argument("--taxonomy", type=Path, default=None,
                   help="child<TAB>parent taxonomy file for wups")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--report", default="report.tsv",
                   help="report file name inside the run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print checkpoint metadata",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
