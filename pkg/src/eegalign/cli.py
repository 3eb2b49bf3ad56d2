"""Command-line front end: synth, preprocess, train, predict, eval.

Exit codes: 0 success, 2 usage or data error, 3 internal error. Every
failure prints one line starting with ``error:`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (FormatError, SynthSpec, TrialSet, make_folds_loso_repeated, make_folds_unstratified,
                   read_eegt, synth_generate, write_eegt)
from .dsp import DataError, PreprocessChain, preprocess
from .models import CheckpointError, ModelConfig, load_checkpoint, motor_imagery_config, predict_subjects, sleep_config
from .training import (combine_four_to_three, ensemble_logits, mi_train_config, per_class_recall,
                       predictions_csv, read_predictions_csv, run_cv, sleep_train_config)

log = logging.getLogger("eegalign")


class UsageError(Exception):
    """Bad flags or inputs; exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, command: str, config: dict, seeds: dict, inputs: list, artifacts: list) -> None:
    manifest = {
        "tool": "eegalign",
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": [str(a) for a in artifacts],
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _read(path) -> TrialSet:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        return read_eegt(p)
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = _load_json(args.spec)
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth spec: {exc}") from None
    trials = synth_generate(spec, args.seed)
    write_eegt(trials, args.out)
    _write_manifest(f"{args.out}.manifest.json", "synth", {"spec": spec.to_dict()}, {"seed": args.seed},
                    [args.spec], [args.out])
    print(f"wrote {len(trials)} trials ({trials.n_channels} ch x {trials.n_samples} samples) to {args.out}")
    return 0


# -- preprocess ------------------------------------------------------------------

def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def cmd_preprocess(args) -> int:
    trials = _read(args.inp)
    explicit = any(v is not None for v in (args.channels, args.resample, args.highpass, args.notch)) or args.car
    channels = [c.strip() for c in args.channels.split(",")] if args.channels else None
    if explicit:
        chain = PreprocessChain(channels=channels, resample_hz=args.resample, highpass_hz=args.highpass,
                                notch_hz=_float_list(args.notch) if args.notch else (), car=args.car)
    else:
        chain = PreprocessChain()
    try:
        out = preprocess(trials, chain)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    except (ValueError, DataError) as exc:
        raise UsageError(str(exc)) from None
    write_eegt(out, args.out)
    _write_manifest(f"{args.out}.manifest.json", "preprocess",
                    {"chain": chain.describe(), "settings": dataclasses.asdict(chain)}, {},
                    [args.inp], [args.out])
    print("chain: " + " -> ".join(chain.describe()))
    return 0


# -- train -----------------------------------------------------------------------

def _model_config(task: str, sets: list[TrialSet], align: bool, deepset: bool, overrides: dict) -> ModelConfig:
    ref = sets[-1]
    n_classes = max(s.n_classes for s in sets)
    if task == "sleep":
        cfg = sleep_config(ref.n_channels, ref.n_samples, n_classes,
                           alignment="all" if align else "none", deepset=False)
    else:
        n_heads = max(s.dataset_id for s in sets) + 1
        cfg = motor_imagery_config(ref.n_channels, ref.n_samples, n_heads, n_classes,
                                   alignment="input" if align else "none", deepset=deepset)
    if overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_train(args) -> int:
    task = "sleep" if args.task == "sleep" else "motor_imagery"
    file_cfg = _load_json(args.config) if args.config else {}
    train_over = dict(file_cfg.get("train", {}))
    if args.epochs is not None:
        train_over["epochs"] = args.epochs
    train_over["seed"] = args.seed
    try:
        tcfg = (sleep_train_config if task == "sleep" else mi_train_config)(**train_over)
        tcfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from None
    scheme = args.fold_scheme or ("loso2" if task == "sleep" else "unstratified10")

    source = [_read(p) for p in args.source]
    calib = _read(args.calib)
    test = _read(args.test) if args.test else None
    for s in source + ([test] if test else []):
        if s.data.shape[1:] != calib.data.shape[1:]:
            raise UsageError(f"trial shape {s.data.shape[1:]} != calibration shape {calib.data.shape[1:]}")
    try:
        if scheme == "loso2":
            plan = make_folds_loso_repeated(calib.subjects(), 2)
        else:
            plan = make_folds_unstratified(len(calib), 10, args.seed)
    except ValueError as exc:
        raise UsageError(f"fold scheme {scheme} incompatible with calibration data: {exc}") from None
    try:
        mcfg = _model_config(task, source + [calib], not args.no_align, not args.no_deepset,
                             file_cfg.get("model", {}))
        mcfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"task={task} epochs={tcfg.epochs} lr={tcfg.lr!r} wd={tcfg.weight_decay!r} "
          f"dropout={tcfg.dropout_p!r} smoothing={tcfg.label_smoothing!r} folds={scheme}({len(plan)}) "
          f"alignment={mcfg.alignment} deepset={mcfg.deepset}")
    inputs = list(args.source) + [args.calib] + ([args.test] if args.test else [])
    artifacts = [f"fold_{i:02d}.naln" for i in range(len(plan))] + ["fold_results.json"]
    if test is not None:
        artifacts.append("ensemble_predictions.csv")
    _write_manifest(out / "manifest.json", "train",
                    {"task": task, "fold_scheme": scheme, "model": mcfg.to_dict(), "train": tcfg.to_dict(),
                     "fold_plan": plan.to_json(), "argv": args.argv},
                    {"seed": args.seed}, inputs, artifacts)
    if args.dry_run:
        return 0
    result = run_cv(source, calib, plan, mcfg, tcfg, test=test, out_dir=out, jobs=args.jobs)
    uars = result.uars
    print(f"validation UAR {100 * np.mean(uars):.2f} +/- {100 * np.std(uars):.2f} over {len(uars)} folds")
    return 0


# -- predict / eval ------------------------------------------------------------

def cmd_predict(args) -> int:
    paths = sorted(Path(args.models).glob("*.naln"))
    if not paths:
        raise UsageError(f"no checkpoints (*.naln) in {args.models}")
    data = _read(args.data)
    per_model = []
    for p in paths:
        try:
            model = load_checkpoint(p)
        except CheckpointError as exc:
            raise UsageError(f"{p}: {exc}") from None
        cfg = model.config
        expected = (cfg.in_channels, cfg.in_samples)
        if data.data.shape[1:] != expected:
            raise UsageError(f"data dims (channels, samples) {data.data.shape[1:]} != model expects {expected}")
        if data.dataset_id >= cfg.n_heads:
            raise UsageError(f"dataset id {data.dataset_id} has no head (model has {cfg.n_heads})")
        per_model.append(predict_subjects(model, data.data, data.subject_ids, data.dataset_id))
    logits = ensemble_logits(per_model)
    if args.three_class:
        if logits.shape[1] != 4:
            raise UsageError(f"--three-class needs 4-class models, got {logits.shape[1]} classes")
        logits = combine_four_to_three(logits)
    Path(args.out).write_text(predictions_csv(logits))
    print(f"wrote {len(logits)} predictions from {len(paths)} model(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    data = _read(args.data)
    if not Path(args.pred).is_file():
        raise UsageError(f"no such file: {args.pred}")
    try:
        idx, logits, pred = read_predictions_csv(args.pred)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{args.pred}: {exc}") from None
    if len(pred) != len(data) or not np.array_equal(idx, np.arange(len(data))):
        raise UsageError(f"prediction rows ({len(pred)}) do not align with data trials ({len(data)})")
    labels = data.labels
    n_classes = data.n_classes
    if logits.shape[1] == 3 and n_classes == 4:
        labels = np.where(labels == 3, 2, labels)
        n_classes = 3
    try:
        recalls = per_class_recall(pred, labels, n_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps({"uar": float(np.mean(recalls)), "per_class_recall": recalls}))
    return 0


# -- entry -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eegalign", description="Subject-aligned EEG decoding pipeline")
    parser.add_argument("--version", action="version", version=f"eegalign {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic covariate-shifted dataset")
    p.add_argument("--spec", required=True, help="JSON synth spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="channel subset, resample, highpass, notches, CAR")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", help="comma-separated channel names, in output order")
    p.add_argument("--resample", type=float, help="target rate in Hz")
    p.add_argument("--highpass", type=float, help="Butterworth highpass cutoff in Hz")
    p.add_argument("--notch", help="comma-separated notch frequencies in Hz")
    p.add_argument("--car", action="store_true", help="common average reference")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="cross-validated training with fold checkpoints")
    p.add_argument("--task", choices=("sleep", "mi"), required=True)
    p.add_argument("--source", nargs="*", default=[], help="source EEGT files")
    p.add_argument("--calib", required=True, help="calibration EEGT file")
    p.add_argument("--test", help="optional test EEGT file for the fold ensemble")
    p.add_argument("--fold-scheme", choices=("loso2", "unstratified10"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config", help='JSON overrides: {"train": {...}, "model": {...}}')
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    p.add_argument("--no-align", action="store_true", help="disable statistical alignment")
    p.add_argument("--no-deepset", action="store_true", help="disable deep-set alignment")
    p.add_argument("--dry-run", action="store_true", help="resolve config and write the manifest only")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="mean-of-logits ensemble over checkpoints")
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--three-class", action="store_true", help="merge feet and rest logits")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="UAR of a prediction CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: internal: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
