"""Command-line entry point: ``gessure <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import (
    SynthGestureSpec,
    import_npy,
    load_gesture_jsonl,
    save_gesture_jsonl,
    synth_embeddings,
    synth_gestures,
)
from .errors import ConfigError, GessureError, UsageError
from .face import VerifierConfig, load_embeddings_jsonl, save_embeddings_jsonl, train_verifier
from .model import (
    GestureNetSpec,
    TrainConfig,
    describe_model,
    evaluate,
    load_model,
    save_model,
    train_gesture_classifier,
)
from .pipeline import (
    BUNDLE_GESTURE,
    PipelineConfig,
    default_bindings,
    format_action_log,
    gesture_bundle_files,
    load_bundle,
    load_session,
    replay,
    verifier_bundle_files,
    write_bundle_files,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

# key -> type for values that may come from --config; flags override them
CONFIG_KEYS = {
    "seed": int,
    "model": str,
    "data": str,
    "bundle": str,
    "session": str,
    "threshold_auth": float,
    "threshold_gesture": float,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "patience": int,
    "validation_fraction": float,
    "conv1_filters": int,
    "conv2_filters": int,
    "lstm_units": int,
    "dropout": float,
    "user": str,
    "samples_per_class": int,
    "noise": float,
    "identities": int,
    "per_identity": int,
    "sigma": float,
}

DEFAULTS = {
    "threshold_auth": 0.90,
    "threshold_gesture": 0.80,
    "samples_per_class": 20,
    "noise": 0.01,
    "identities": 5,
    "per_identity": 20,
    "sigma": 0.05,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--config", help="flat key=value file; flags win")
    common.add_argument("--model")
    common.add_argument("--data")
    common.add_argument("--bundle")
    common.add_argument("--session")
    common.add_argument("--threshold-auth", type=float)
    common.add_argument("--threshold-gesture", type=float)

    parser = _Parser(prog="gessure", description="Face-gated dynamic hand gesture engine")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train-gestures", parents=[common], help="train the gesture classifier into a bundle")
    for flag, typ in (("--epochs", int), ("--batch-size", int), ("--learning-rate", float), ("--patience", int),
                      ("--validation-fraction", float), ("--conv1-filters", int), ("--conv2-filters", int),
                      ("--lstm-units", int), ("--dropout", float)):
        p.add_argument(flag, type=typ)

    p = sub.add_parser("train-face", parents=[common], help="enroll the user and train the face verifier")
    p.add_argument("--user")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)

    sub.add_parser("eval", parents=[common], help="evaluate a gesture model on a labelled dataset")

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic gesture or face corpus")
    p.add_argument("--kind", choices=("gestures", "faces"), default="gestures")
    p.add_argument("--samples-per-class", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--identities", type=int)
    p.add_argument("--per-identity", type=int)
    p.add_argument("--sigma", type=float)

    p = sub.add_parser("import-npy", parents=[common], help="convert a (n, 20, 63) .npy array to gesture JSONL")
    p.add_argument("npy")
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--append", action="store_true", help="add to an existing --data file")

    sub.add_parser("replay", parents=[common], help="replay a session file against a bundle")

    p = sub.add_parser("inspect", parents=[common], help="print a model's layer table")
    p.add_argument("path", nargs="?")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults < config file < flags."""
    opts = dict(DEFAULTS)
    if args.config:
        opts.update(read_config(args.config))
    for key, value in vars(args).items():
        if value is not None:
            opts[key] = value
    for name in ("threshold_auth", "threshold_gesture"):
        if not 0.0 < opts[name] < 1.0:
            raise ConfigError(f"--{name.replace('_', '-')} must lie in (0, 1)")
    return opts


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{opts['command']} requires {flags}")


def _emit(opts: dict, payload: dict, text: str) -> None:
    if opts["json"]:
        print(json.dumps(payload, indent=2))
    else:
        print(text)


def _pick(opts: dict, cls, keys):
    return cls(**{k: opts[k] for k in keys if k in opts})


def cmd_train_gestures(opts: dict) -> None:
    _need(opts, "seed", "data")
    if not opts.get("bundle") and not opts.get("model"):
        raise UsageError("train-gestures requires --bundle or --model")
    data = load_gesture_jsonl(opts["data"])
    spec = _pick(opts, GestureNetSpec, ("conv1_filters", "conv2_filters", "lstm_units", "dropout"))
    spec = GestureNetSpec(**{**spec.to_dict(), "classes": data.num_classes})
    config = _pick(opts, TrainConfig, ("epochs", "batch_size", "learning_rate", "patience", "seed",
                                       "validation_fraction"))
    net, history = train_gesture_classifier(data, spec, config)
    if opts.get("bundle"):
        write_bundle_files(opts["bundle"], gesture_bundle_files(net, default_bindings(spec.classes, spec.garbage)),
                           {"gesture_seed": config.seed})
    if opts.get("model"):
        save_model(net, opts["model"])
    best = min(h.val_loss for h in history)
    payload = {"epochs_run": len(history), "best_val_loss": best, "parameters": net.n_params,
               "bundle": opts.get("bundle"), "model": opts.get("model")}
    _emit(opts, payload, f"trained {len(history)} epochs, best validation loss {best:.4f}, "
                         f"{net.n_params} parameters")


def cmd_train_face(opts: dict) -> None:
    _need(opts, "seed", "data", "user", "bundle")
    enrollment = load_embeddings_jsonl(opts["data"])
    config = _pick(opts, VerifierConfig, ("epochs", "learning_rate", "seed"))
    verifier = train_verifier(enrollment, opts["user"], config)
    write_bundle_files(opts["bundle"], verifier_bundle_files(verifier), {"face_seed": config.seed})
    user_p = verifier.user_probabilities(enrollment.vectors)
    is_user = [i == opts["user"] for i in enrollment.identities]
    authorized = sum((p > opts["threshold_auth"]) == u for p, u in zip(user_p, is_user))
    payload = {"classes": verifier.classes, "enrollment_gate_agreement": authorized / len(is_user)}
    _emit(opts, payload, f"verifier classes: {', '.join(verifier.classes)}; "
                         f"gate agrees on {authorized}/{len(is_user)} enrollment embeddings")


def _load_net(opts: dict):
    if opts.get("model"):
        return load_model(opts["model"])
    if opts.get("bundle"):
        return load_model(Path(opts["bundle"]) / BUNDLE_GESTURE)
    raise UsageError(f"{opts['command']} requires --model or --bundle")


def cmd_eval(opts: dict) -> None:
    _need(opts, "data")
    net = _load_net(opts)
    data = load_gesture_jsonl(opts["data"])
    report = evaluate(net, data)
    _emit(opts, report.to_dict(), report.format_table())


def cmd_gen_synth(opts: dict) -> None:
    _need(opts, "seed", "data")
    if opts["kind"] == "gestures":
        data = synth_gestures(SynthGestureSpec(samples_per_class=opts["samples_per_class"], noise=opts["noise"],
                                               seed=opts["seed"]))
        save_gesture_jsonl(data, opts["data"])
    else:
        data = synth_embeddings(opts["identities"], opts["per_identity"], opts["sigma"], opts["seed"])
        save_embeddings_jsonl(data, opts["data"])
    _emit(opts, {"kind": opts["kind"], "records": len(data), "path": opts["data"]},
          f"wrote {len(data)} {opts['kind']} records to {opts['data']}")


def cmd_import_npy(opts: dict) -> None:
    _need(opts, "data")
    data = import_npy(opts["npy"], opts["label"])
    if opts["append"] and Path(opts["data"]).exists():
        data = load_gesture_jsonl(opts["data"]).concat(data)
    save_gesture_jsonl(data, opts["data"])
    _emit(opts, {"records": len(data), "path": opts["data"]}, f"{opts['data']}: {len(data)} records")


def cmd_replay(opts: dict) -> None:
    _need(opts, "session", "bundle")
    bundle = load_bundle(opts["bundle"])
    events = load_session(opts["session"])
    config = PipelineConfig(opts["threshold_auth"], opts["threshold_gesture"])
    actions, _ = replay(events, bundle.models, bundle.bindings, config)
    sys.stdout.write(format_action_log(actions))


def cmd_inspect(opts: dict) -> None:
    if opts.get("path"):
        opts["model"] = opts["path"]
    net = _load_net(opts)
    payload = {"spec": net.spec.to_dict(),
               "layers": [{"layer": name, "params": n} for name, n in net.summary()],
               "parameters": net.n_params}
    _emit(opts, payload, describe_model(net))


COMMANDS = {
    "train-gestures": cmd_train_gestures,
    "train-face": cmd_train_face,
    "eval": cmd_eval,
    "gen-synth": cmd_gen_synth,
    "import-npy": cmd_import_npy,
    "replay": cmd_replay,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        opts = resolve(args)
        COMMANDS[opts["command"]](opts)
    except OSError as exc:
        print(f"gessure: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GessureError, ValueError) as exc:
        print(f"gessure: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
