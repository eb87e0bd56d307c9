"""Command-line interface: slu-transformer <subcommand> ...

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (DataError, SyntheticSpec, build_utterances, featurize_manifest,
                   generate_synthetic, load_manifest, write_corpus)
from .decoding import predict_batch
from .evaluation import evaluate, write_confusion_csv
from .features import (CmvnStats, cmvn_apply, cmvn_fit, featurize, read_feature_store, read_wav,
                       write_feature_store)
from .labels import LabelSpace
from .model import ModelConfig, load_checkpoint, parameter_count
from .numerics import NumericalError
from .training import TrainConfig, model_grad_check, tiny_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("slu_transformer")


class UsageError(Exception):
    pass


def _load_config(args) -> tuple[dict, dict]:
    """(model overrides, train overrides) from --config JSON plus global flags."""
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    model = dict(raw.get("model", {}))
    train_cfg = dict(raw.get("train", {}))
    if args.mode:
        model["mode"] = args.mode
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    if args.constrained_decode:
        train_cfg["constrained_decode"] = True
    # optional per-mode epoch budget: {"epochs": {"hierarchical": 70, ...}}
    per_mode = raw.get("epochs", {})
    mode = model.get("mode", "hierarchical")
    if isinstance(per_mode, dict) and mode in per_mode:
        train_cfg.setdefault("epochs", int(per_mode[mode]))
    return model, train_cfg


def _model_config(overrides: dict, label_space: LabelSpace | None = None) -> ModelConfig:
    d = dict(overrides)
    if label_space is not None:
        d["label_space"] = label_space.to_dict()
    return ModelConfig.from_dict(d)


def _features(path, cmvn_path):
    feats = read_feature_store(path)
    return feats, (CmvnStats.load(cmvn_path) if cmvn_path else None)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.from_json(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = write_corpus(generate_synthetic(spec), args.out, wav=args.wav)
    print(out)
    return EXIT_OK


def cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.wav_dir) if args.wav_dir else Path(args.manifest).parent
    feats = featurize_manifest(manifest, root)
    write_feature_store(args.out, feats)
    stats = CmvnStats.load(args.cmvn) if args.cmvn else cmvn_fit(feats.values())
    if args.cmvn_out:
        stats.save(args.cmvn_out)
    print(f"{len(feats)} utterances -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_over, train_over = _load_config(args)
    train_m = load_manifest(args.train)
    eval_m = load_manifest(args.eval, label_space=train_m.label_space)
    feats, cmvn = _features(args.features, args.cmvn)
    if cmvn is None:
        cmvn = cmvn_fit([feats[i] for i in train_m.ids])
    cfg = _model_config(model_over, train_m.label_space)
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    tcfg = TrainConfig(**train_over)
    result = train(build_utterances(train_m, feats, cmvn), build_utterances(eval_m, feats, cmvn),
                   cfg, tcfg, args.out)
    print(json.dumps({"checkpoint": str(result.checkpoint), "best_epoch": result.best_epoch,
                      "best_exact_match": result.best_exact_match}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, label_space=cfg.label_space)
    feats, cmvn = _features(args.features, args.cmvn)
    utts = build_utterances(manifest, feats, cmvn)
    preds = predict_batch([u.features for u in utts], params, cfg, args.constrained_decode)
    report = evaluate({u.id: p for u, p in zip(utts, preds)}, manifest.labels(), cfg.label_space)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    for (name, values) in cfg.label_space.fields():
        write_confusion_csv(report.confusion[name], values, out / f"confusion_{name}.csv")
    with open(out / "predictions.jsonl", "w") as fh:
        for u, p in zip(utts, preds):
            fh.write(json.dumps(p.to_json(u.id, cfg.label_space)) + "\n")
    print(json.dumps(report.to_json()))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    cmvn = CmvnStats.load(args.cmvn) if args.cmvn else None
    src = Path(args.input)
    if src.suffix.lower() == ".wav":
        x, uid = featurize(read_wav(src)), src.stem
    else:
        if not args.id:
            raise UsageError("--id is required when the input is a feature store")
        store = read_feature_store(src)
        if args.id not in store:
            raise DataError(f"{src}: no utterance {args.id!r}")
        x, uid = store[args.id], args.id
    if cmvn is not None:
        x = cmvn_apply(x, cmvn)
    pred = predict_batch([x], params, cfg, args.constrained_decode)[0]
    print(json.dumps(pred.to_json(uid, cfg.label_space)))
    return EXIT_OK


def cmd_param_count(args) -> int:
    model_over, _ = _load_config(args)
    space = LabelSpace.load(args.label_space) if args.label_space else None
    print(parameter_count(_model_config(model_over, space)))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    model_over, _ = _load_config(args)
    cfg = tiny_config(**model_over)
    report = model_grad_check(cfg, frames=args.frames, seed=args.seed or 0, tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max_rel_err={report.worst:.3e}")
    if args.verbose:
        for name, err in report.max_rel_error.items():
            print(f"  {name} {err:.3e}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    def common_flags(suppress: bool) -> argparse.ArgumentParser:
        # flags accepted before or after the subcommand; SUPPRESS keeps the
        # subparser from overwriting a value given before it
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--seed", type=int, default=dflt(None))
        c.add_argument("--mode", choices=["classification", "hierarchical"], default=dflt(None))
        c.add_argument("--constrained-decode", action="store_true", default=dflt(False))
        c.add_argument("--config", default=dflt(None), help="JSON file with 'model' and 'train' sections")
        c.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return c

    top, common = common_flags(False), common_flags(True)

    p = _Parser(prog="slu-transformer", description=__doc__.splitlines()[0], parents=[top])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--spec", help="SyntheticSpec JSON (defaults to the desk-scale corpus)")
    s.add_argument("--out", required=True)
    s.add_argument("--wav", action="store_true", help="also write WAV files")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("featurize", parents=[common], help="WAV manifest -> feature store + CMVN")
    s.add_argument("--manifest", required=True)
    s.add_argument("--wav-dir", help="root for relative WAV paths (default: manifest dir)")
    s.add_argument("--out", required=True)
    s.add_argument("--cmvn", help="reuse existing CMVN stats instead of fitting")
    s.add_argument("--cmvn-out")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--train", required=True, help="train manifest CSV")
    s.add_argument("--eval", required=True, help="eval manifest CSV")
    s.add_argument("--features", required=True, help="feature store")
    s.add_argument("--cmvn", help="CMVN stats (default: fit on the train split)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--cmvn")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", parents=[common], help="decode one utterance to a JSON line")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="WAV file or feature store")
    s.add_argument("--id", help="utterance id inside a feature store")
    s.add_argument("--cmvn")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("param-count", parents=[common], help="print the parameter count of a config")
    s.add_argument("--label-space", help="label-space JSON (default: desk-scale space)")
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference check of a tiny model")
    s.add_argument("--frames", type=int, default=3)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
