"""Command line entry point: ``milaed <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error. Every command accepts
``--config file.json`` whose keys are flag names (dashes or underscores);
flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn
from .embed import EmbeddingModelConfig, bags_from_embeddings, extract_embeddings, train_embedding_model
from .errors import InvalidConfig, MilaedError, ShapeMismatch
from .evalfuse import (
    TagResult,
    confusion_csv,
    confusion_matrix,
    fuse,
    metrics_report,
    threshold_decisions,
    validation_weights,
)
from .features import EMBED_FEATURES, MIL_FEATURES, FeatureConfig, load_wav
from .formats import (
    EmbeddingSet,
    ModelFile,
    load_model,
    parse_manifest,
    read_embeddings,
    read_jsonl,
    save_model,
    write_embeddings,
    write_jsonl,
)
from .mil import TrainConfig, train
from .pipeline import Tagger, feature_set, manifest_bags, pcm_segments
from .synth import SynthConfig, generate_synthetic

log = logging.getLogger("milaed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _feature_cfg(args, default: FeatureConfig) -> FeatureConfig:
    d = default.to_dict()
    if args.features_config:
        d.update(args.features_config)
    return FeatureConfig.from_dict(d)


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        selection_pooling=args.pooling,
        threshold=args.threshold,
        weight_cap=None if args.weight_cap <= 0 else args.weight_cap,
    )


def _cached(path, dim: int) -> EmbeddingSet | None:
    if not path:
        return None
    es = read_embeddings(path, source="trained")
    if es.dim != dim:
        raise InvalidConfig(f"{path}: cached vectors have dim {es.dim}, feature config gives {dim}")
    return es


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args):
    d = dict(args.synth or {})
    for key in ("n_clips", "n_classes", "noise_db", "tone_db", "imbalance", "max_distractors"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.splits:
        d["splits"] = args.splits
    d["seed"] = args.seed
    manifests = generate_synthetic(SynthConfig.from_dict(d), args.out)
    print(json.dumps({name: len(m) for name, m in manifests.items()}))


def cmd_features(args):
    cfg = _feature_cfg(args, EMBED_FEATURES if args.preset == "embed" else MIL_FEATURES)
    es = feature_set(parse_manifest(args.manifest), cfg)
    write_embeddings(args.out, es)
    log.info("wrote %d clips of dim %d to %s", len(es), es.dim, args.out)


def cmd_train_embed(args):
    fcfg = _feature_cfg(args, EMBED_FEATURES)
    train_m, val_m = parse_manifest(args.manifest), parse_manifest(args.val)
    dim = int(np.prod(fcfg.shape))
    bags = manifest_bags(train_m, fcfg, _cached(args.features, dim))
    val = manifest_bags(val_m, fcfg, _cached(args.val_features, dim))
    ecfg = EmbeddingModelConfig(len(train_m.class_list), fcfg.shape, args.embed_dim)
    tcfg = _train_cfg(args)
    res = train_embedding_model(bags, val, ecfg, tcfg, args.log)
    prov = {"seed": args.seed, "train_config": tcfg.to_dict(), "config_digest": _digest(tcfg.to_dict()),
            "best_epoch": res.best_epoch, "best_val_metric": res.best_metric, "kind": "embedding"}
    save_model(args.out, ModelFile(res.model, train_m.class_list, fcfg.to_dict(), prov))
    print(json.dumps({"best_epoch": res.best_epoch, "val_metric": res.best_metric}))


def cmd_extract_embed(args):
    mf = load_model(args.model)
    if mf.feature_config is None:
        raise InvalidConfig(f"{args.model} consumes embeddings; it is not an embedding model")
    fcfg = FeatureConfig.from_dict(mf.feature_config)
    bags = manifest_bags(parse_manifest(args.manifest), fcfg, _cached(args.features, int(np.prod(fcfg.shape))))
    es = extract_embeddings(mf.model, bags)
    write_embeddings(args.out, es)
    log.info("wrote %d clips of %d-d embeddings to %s", len(es), es.dim, args.out)


def cmd_train_mil(args):
    train_m, val_m = parse_manifest(args.manifest), parse_manifest(args.val)
    if args.embeddings:
        if not args.val_embeddings:
            raise UsageError("--embeddings needs --val-embeddings")
        bags = bags_from_embeddings(read_embeddings(args.embeddings, "trained"), train_m)
        val = bags_from_embeddings(read_embeddings(args.val_embeddings, "trained"), val_m)
        fcfg, input_shape = None, None
    else:
        cfg = _feature_cfg(args, MIL_FEATURES)
        dim = int(np.prod(cfg.shape))
        bags = manifest_bags(train_m, cfg, _cached(args.features, dim))
        val = manifest_bags(val_m, cfg, _cached(args.val_features, dim))
        fcfg, input_shape = cfg.to_dict(), None
    n_in = bags[0].instances.shape[1] if bags else 0
    model = nn.build_model(nn.mil_dnn_specs(n_in, len(train_m.class_list)), seed=args.seed, input_shape=input_shape)
    standardize = args.standardize == "on" or (args.standardize == "auto" and fcfg is not None)
    if standardize and bags:
        model = nn.fit_standardization(model, np.concatenate([b.instances for b in bags]))
    tcfg = _train_cfg(args)
    res = train(model, bags, val, tcfg, args.log)
    prov = {"seed": args.seed, "train_config": tcfg.to_dict(), "config_digest": _digest(tcfg.to_dict()),
            "best_epoch": res.best_epoch, "best_val_metric": res.best_metric, "kind": "mil",
            "standardized": bool(standardize)}
    save_model(args.out, ModelFile(res.model, train_m.class_list, fcfg, prov))
    print(json.dumps({"best_epoch": res.best_epoch, "val_metric": res.best_metric}))


def _prediction_record(tagger: Tagger, cid: str, pred) -> dict:
    return {
        "id": cid,
        "scores": [float(s) for s in pred.bag_scores],
        "decisions": [int(d) for d in threshold_decisions(pred.bag_scores, tagger.threshold)],
        "argmax": [int(j) for j in pred.argmax_idx],
        "instance_scores": [[float(s) for s in row] for row in pred.instance_scores],
    }


def cmd_tag(args):
    tagger = Tagger.from_files(args.model, args.embed_model, args.threshold)
    if args.manifest:
        m = parse_manifest(args.manifest)
        items = [(r.id, m.resolve(r)) for r in m.records]
    else:
        items = [(Path(p).stem, Path(p)) for p in args.wav]
    if not items:
        raise UsageError("nothing to tag: pass --manifest or WAV paths")
    records = []
    for cid, path in items:
        clip = load_wav(path)
        records.append(_prediction_record(tagger, cid, tagger.tag(cid, clip.samples)))
    if args.out:
        write_jsonl(args.out, records)
    else:
        for r in records:
            print(json.dumps({k: r[k] for k in ("id", "scores", "decisions")}))


def cmd_stream(args):
    tagger = Tagger.from_files(args.model, args.embed_model, args.threshold)
    source = sys.stdin.buffer if args.input in (None, "-") else open(args.input, "rb")
    try:
        for rec in tagger.stream(pcm_segments(source, tagger.feature_config.segment_length)):
            out = rec.to_json(tagger.class_list)
            out["time_s"] = rec.index * tagger.feature_config.segment_s
            sys.stdout.write(json.dumps(out) + "\n")
            sys.stdout.flush()
    finally:
        if source is not sys.stdin.buffer:
            source.close()


def _load_predictions(path) -> dict[str, dict]:
    recs = read_jsonl(path)
    out = {}
    for r in recs:
        if "id" not in r or "decisions" not in r:
            raise InvalidConfig(f"{path}: prediction records need 'id' and 'decisions'")
        out[r["id"]] = r
    return out


def cmd_fuse(args):
    members = [_load_predictions(p) for p in args.predictions]
    if args.weights and args.val_scores:
        raise UsageError("give --weights or --val-scores, not both")
    if args.val_scores:
        weights = validation_weights(args.val_scores)
    elif args.weights:
        weights = args.weights
    else:
        weights = [1.0] * len(members)
    if len(weights) != len(members):
        raise UsageError(f"{len(members)} prediction files but {len(weights)} weights")
    ids = list(members[0])
    for k, m in enumerate(members[1:], 2):
        if set(m) != set(ids):
            raise ShapeMismatch(f"prediction file {k} covers different clips than file 1")
    decisions = [np.array([m[i]["decisions"] for i in ids]) for m in members]
    fused = fuse(decisions, weights)
    records = []
    for i, cid in enumerate(ids):
        rec = {"id": cid, "decisions": [int(d) for d in fused[i]]}
        if all("scores" in m[cid] for m in members):
            # weighted mean score, used only for confusion-matrix ranking
            w = np.asarray(weights, dtype=np.float64)
            rec["scores"] = [float(s) for s in np.tensordot(w / w.sum(), [m[cid]["scores"] for m in members], 1)]
        records.append(rec)
    write_jsonl(args.out, records)


def cmd_eval(args):
    m = parse_manifest(args.manifest)
    preds = _load_predictions(args.predictions)
    results = []
    for rec in m.records:
        if rec.id not in preds:
            raise InvalidConfig(f"no prediction for clip {rec.id!r}")
        p = preds[rec.id]
        scores = np.asarray(p["scores"]) if "scores" in p else None
        results.append(TagResult(rec.id, np.asarray(p["decisions"]), m.label_vector(rec), scores))
    report = metrics_report(results, m.class_list)
    out = Path(args.out)
    _write_json(out, report)
    labelled = [r for r in results if np.any(r.reference)]
    if labelled:
        cm = confusion_matrix(labelled, len(m.class_list))
        cm_path = Path(args.confusion) if args.confusion else out.with_suffix(".confusion.csv")
        cm_path.write_text(confusion_csv(cm, m.class_list), encoding="utf-8")
    print(json.dumps({k: report[k] for k in ("precision", "recall", "f1")}))


def cmd_params(args):
    if args.model:
        model = load_model(args.model).model
    else:
        model = nn.build_model(nn.mil_dnn_specs(args.n_in, args.n_classes), seed=args.seed)
    if args.layers:
        shapes = nn.layer_shapes(model.specs, model.input_shape)
        for spec, shape in zip(model.specs, shapes[1:]):
            print(f"{str(spec):<28} -> {shape}")
    print(nn.count_parameters(model))


# ---------------------------------------------------------------- parser


def _json_obj(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"not JSON: {e}") from None


def _splits(text):
    out = {}
    for part in text.split(","):
        name, _, n = part.partition("=")
        if not name or not n.isdigit():
            raise argparse.ArgumentTypeError(f"expected name=count[,name=count...], got {text!r}")
        out[name] = int(n)
    return out


def _add_training(p):
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pooling", choices=("max", "mean"), default="max", help="clip pooling for checkpoint selection")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--weight-cap", type=float, default=50.0, help="cap on class weights; <= 0 disables")
    p.add_argument("--log", help="append per-epoch JSON Lines records here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milaed", description="Weakly supervised audio tagging with multiple instance learning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")
    feats = _Parser(add_help=False)
    feats.add_argument("--features-config", type=_json_obj, help="JSON overrides for the feature config")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic tone corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--noise-db", type=float)
    p.add_argument("--tone-db", type=float)
    p.add_argument("--imbalance", type=float)
    p.add_argument("--max-distractors", type=int)
    p.add_argument("--splits", type=_splits, help="e.g. train=200,val=50,test=50")
    p.add_argument("--synth", type=_json_obj, help="JSON object of further generator settings")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("features", parents=[common, feats], help="cache instance features as a MILE file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("mil", "embed"), default="mil")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-embed", parents=[common, feats], help="train a frame-wise embedding model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="cached training features (MILE)")
    p.add_argument("--val-features", help="cached validation features (MILE)")
    p.add_argument("--embed-dim", type=int, default=512)
    _add_training(p)
    p.set_defaults(func=cmd_train_embed)

    p = sub.add_parser("extract-embed", parents=[common], help="write penultimate-layer embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="cached features (MILE)")
    p.set_defaults(func=cmd_extract_embed)

    p = sub.add_parser("train-mil", parents=[common, feats], help="train a MIL-DNN tagger")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="training embeddings (MILE); raw log-mel features otherwise")
    p.add_argument("--val-embeddings")
    p.add_argument("--features", help="cached raw training features (MILE)")
    p.add_argument("--val-features")
    p.add_argument("--standardize", choices=("auto", "on", "off"), default="auto",
                   help="per-feature input standardization; auto: raw features only")
    _add_training(p)
    p.set_defaults(func=cmd_train_mil)

    p = sub.add_parser("tag", parents=[common], help="tag clips with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--embed-model", help="embedding model, for taggers trained on embeddings")
    p.add_argument("--manifest")
    p.add_argument("--out", help="JSON Lines predictions; stdout summary otherwise")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("wav", nargs="*")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("stream", parents=[common], help="tag 16 kHz mono PCM16 from stdin, one record per second")
    p.add_argument("--model", required=True)
    p.add_argument("--embed-model")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--input", help="raw PCM file instead of standard input")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("fuse", parents=[common], help="weighted-majority fusion of prediction files")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--val-scores", type=float, nargs="+", help="validation F1 per member, normalized to weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="micro P/R/F1 report and confusion matrix")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--confusion", help="CSV path; defaults next to --out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common], help="count trainable parameters")
    p.add_argument("--model")
    p.add_argument("--n-in", type=int, default=512)
    p.add_argument("--n-classes", type=int, default=17)
    p.add_argument("--layers", action="store_true", help="also print each layer's output shape")
    p.set_defaults(func=cmd_params)
    return parser


def _apply_config(parser, argv):
    """Re-parse with values from ``--config`` as defaults so explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        conf = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(conf, dict):
        raise UsageError(f"config {args.config} must hold a JSON object")
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    unknown = set(conf) - set(vars(args)) - {"command"}
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**conf)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (MilaedError, OSError) as e:
        print(f"milaed {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
