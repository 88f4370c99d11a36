"""Command-line entry point: ``taskrel {fit,estimate,estimate-fast,correlate,convert}``.

Exit codes: 0 success, 2 bad input, 3 numerical failure, 4 infeasible
transport problem. Output files are written to a temporary name and renamed
into place, so a failed command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .classifier import SoftmaxClassifier, TrainConfig, average_loss, train_lipschitz_softmax
from .dataset import load_dataset, save_dataset, standardize, subsample_classes
from .errors import DivergenceError, InfeasibleError, InputError
from .fast import fast_task_relatedness
from .harness import read_records_csv, records_to_json
from .optimizer import Alg1Config, alg1_minimize
from .transforms import TransformSet

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4
CONFIG_SECTIONS = ("probe", "alg1")


# --------------------------------------------------------------------------
# config plumbing


def _read_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            cfg = tomllib.loads(raw.decode())
        else:
            cfg = json.loads(raw)
    except ValueError as exc:
        raise InputError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"config {path} must be a mapping")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise InputError(f"config {path}: unknown sections {sorted(unknown)}; "
                         f"expected {list(CONFIG_SECTIONS)}")
    return cfg


def _probe_config(args, section):
    d = dict(section)
    unknown = set(d) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise InputError(f"unknown probe config keys: {sorted(unknown)}")
    for flag, key in (("tau", "tau"), ("rho", "rho"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    if args.command == "fit":
        for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "learning_rate")):
            if getattr(args, flag) is not None:
                d[key] = getattr(args, flag)
    elif getattr(args, "probe_epochs", None) is not None:
        d["epochs"] = args.probe_epochs
    return TrainConfig(**d)


def _alg1_config(args, section):
    d = dict(section)
    flags = {"tau": "tau", "nu": "nu", "lam": "lam", "epochs": "epochs", "lr": "learning_rate",
             "mode": "mode", "seed": "seed", "eval_size": "eval_size"}
    for flag, key in flags.items():
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    if args.batch is not None:
        d["batch_ref"] = d["batch_tgt"] = args.batch
    if args.unsupervised:
        d["target_labels"] = "pseudo"
    return Alg1Config.from_dict(d)


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(command, config, seed, mode, inputs):
    canon = json.dumps({"command": command, "config": config}, sort_keys=True)
    return {
        "command": command,
        "config_hash": hashlib.sha256(canon.encode()).hexdigest(),
        "config": config,
        "seed": seed,
        "mode": mode,
        "version": __version__,
        "inputs": {os.path.basename(p): _hash_file(p) for p in inputs},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


# --------------------------------------------------------------------------
# output


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _trace_path(args):
    if args.trace:
        return args.trace
    stem, _ = os.path.splitext(args.out)
    return stem + ".trace.csv"


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("TASKREL_THREADS")
    if not n:
        yield
        return
    try:
        limit = int(n)
    except ValueError:
        raise InputError(f"TASKREL_THREADS must be an integer, got {n!r}") from None
    if limit < 1:
        raise InputError("TASKREL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


def _require(path):
    if not os.path.exists(path):
        raise InputError(f"file not found: {path}")


# --------------------------------------------------------------------------
# commands


def cmd_fit(args):
    _require(args.reference)
    cfg_file = _read_config(args.config)
    cfg = _probe_config(args, cfg_file.get("probe", {}))
    ds = load_dataset(args.reference)
    ds_std, stats = standardize(ds)
    h = train_lipschitz_softmax(ds_std, cfg)
    h.stats = stats
    h.info["provenance"] = _provenance("fit", {"probe": cfg.to_dict()}, cfg.seed,
                                       "probe", [args.reference])
    _atomic_write_text(args.out, h.to_json())
    info = h.info
    print(f"loss={info['final_loss']:.6f} accuracy={info['accuracy']:.4f} "
          f"max_grad_norm={info['max_grad_norm']:.6f} (tau={cfg.tau})")
    return EXIT_OK


def _load_estimate_inputs(args, cfg):
    for p in (args.reference, args.target, args.classifier):
        _require(p)
    ref = load_dataset(args.reference)
    tgt = load_dataset(args.target)
    with open(args.classifier) as fh:
        h = SoftmaxClassifier.from_json(fh.read())
    if ref.d != tgt.d or h.d != ref.d:
        raise InputError(f"dimension mismatch: reference d={ref.d}, target d={tgt.d}, "
                         f"classifier d={h.d}")
    if h.K != ref.K:
        raise InputError(f"classifier has {h.K} classes, reference {ref.K}")
    ref_std = ref.with_features(h.stats.apply(ref.features)) if h.stats else standardize(ref)[0]
    tgt_std, _ = standardize(tgt)
    if args.match_classes and ref.K > tgt.K:
        ref_std, kept = subsample_classes(ref_std, tgt.K, seed=cfg.seed, return_classes=True)
        h = SoftmaxClassifier(h.weights[kept], h.bias[kept], h.stats, dict(h.info))
    if cfg.mode == "learned-a" and ref_std.K != tgt_std.K:
        raise InputError(f"learned-a needs K_R == K_T (got {ref_std.K} and {tgt_std.K}); "
                         "pass --match-classes or use --mode learned-all")
    return ref_std, tgt_std, h


def _load_init(path, ref, tgt):
    if path is None:
        return None
    _require(path)
    with open(path) as fh:
        try:
            init = TransformSet.from_json(fh.read())
        except (ValueError, KeyError) as exc:
            raise InputError(f"cannot read transforms {path}: {exc}") from None
    if init.A.shape != (ref.d, ref.d) or init.label_map.logits.shape != (tgt.K, ref.K):
        raise InputError(f"{path}: transforms do not fit d={ref.d}, K_T={tgt.K}, K_R={ref.K}")
    return init


def _estimate(args, fast):
    cfg_file = _read_config(args.config)
    cfg = _alg1_config(args, cfg_file.get("alg1", {}))
    probe_cfg = _probe_config(args, cfg_file.get("probe", {}))
    if fast and args.ot not in (None, "gamma"):
        raise InputError("estimate-fast always uses the gamma distance")
    if not fast and args.ot == "gamma":
        fast = True
    ot_mode = "surrogate" if args.ot == "surrogate" else "exact_infinity"
    ref, tgt, h = _load_estimate_inputs(args, cfg)
    init = _load_init(args.init, ref, tgt)

    h_T = None
    if args.train_target_probe:
        h_T = train_lipschitz_softmax(tgt, probe_cfg)

    t0 = time.perf_counter()
    if fast:
        transforms, rep = fast_task_relatedness(ref, tgt, h, cfg, init=init)
        body = rep.to_dict()
        score = rep.score
        trace = None
        mode = "fast"
        if h_T is not None:
            body["measured_transferability"] = average_loss(h_T, tgt)
    else:
        transforms, trace, rep = alg1_minimize(ref, tgt, h, cfg, init=init, h_T=h_T,
                                               ot_mode=ot_mode)
        body = rep.to_dict()
        score = rep.task_relatedness
        mode = "pseudo" if cfg.target_labels == "pseudo" else "supervised"
    elapsed = time.perf_counter() - t0

    config = {"alg1": cfg.to_dict(), "ot": "gamma" if fast else ot_mode,
              "match_classes": bool(args.match_classes)}
    if h_T is not None:
        config["probe"] = probe_cfg.to_dict()
    out = {
        "mode": mode,
        "target_labels": cfg.target_labels,
        "score": score,
        "relative_metric": fast,
        "report": body,
        "provenance": _provenance("estimate-fast" if fast else "estimate", config, cfg.seed,
                                  mode, [args.reference, args.target, args.classifier]
                                  + ([args.init] if args.init else [])),
    }
    _atomic_write_text(args.out, _dump_json(out))
    if trace is not None:
        path = _trace_path(args)
        tmp = f"{path}.tmp{os.getpid()}"
        try:
            trace.to_csv(tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)
    if args.save_transforms:
        _atomic_write_text(args.save_transforms, transforms.to_json())
    label = "fast score" if fast else "task-relatedness"
    print(f"{label}={score:.6f} mode={mode} ({elapsed:.1f}s)", file=sys.stderr)
    return EXIT_OK


def cmd_estimate(args):
    return _estimate(args, fast=False)


def cmd_estimate_fast(args):
    return _estimate(args, fast=True)


def cmd_correlate(args):
    records = read_records_csv(args.records)
    if not records:
        raise InputError(f"{args.records}: no records")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        payload = records_to_json(records)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    payload["provenance"] = _provenance("correlate", {}, None, "correlate", [args.records])
    _atomic_write_text(args.out, _dump_json(payload))
    for s in payload["summary"]:
        r = "null" if s["pearson"] is None else f"{s['pearson']:.4f}"
        print(f"{s['target_id']} [{s['mode']}] pearson={r} best={s['ranking'][0]}")
    return EXIT_OK


def cmd_convert(args):
    _require(args.input)
    ds = load_dataset(args.input, format=args.input_format)
    fmt = args.output_format
    save_dataset(ds, args.out, format=fmt)
    print(f"wrote {ds.n} x {ds.d} ({ds.K} classes) to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="taskrel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"taskrel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON or TOML file with [probe] / [alg1] sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tau", type=_nonneg_float, help="Lipschitz budget (default 0.02)")
        sp.add_argument("--rho", type=_nonneg_float, help="gradient-penalty weight (default 1e4)")
        sp.add_argument("--epochs", type=_positive_int)
        sp.add_argument("--batch", type=_positive_int)
        sp.add_argument("--lr", type=float)

    fit = sub.add_parser("fit", help="train a Lipschitz-constrained softmax probe")
    fit.add_argument("reference")
    fit.add_argument("--out", required=True)
    common(fit)
    fit.set_defaults(func=cmd_fit)

    for name, func, helptext in (
            ("estimate", cmd_estimate, "learn transformations and report the bound"),
            ("estimate-fast", cmd_estimate_fast, "moment-matching score for model ranking")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("reference")
        sp.add_argument("target")
        sp.add_argument("classifier")
        sp.add_argument("--out", required=True)
        common(sp)
        sp.add_argument("--nu", type=float, help="cross-label cost scale (default 1e8)")
        sp.add_argument("--lambda", dest="lam", type=_nonneg_float,
                        help="covariance weight of the gamma distance (default 0.01)")
        sp.add_argument("--mode", choices=("learned-a", "learned-all"))
        sp.add_argument("--unsupervised", action="store_true",
                        help="ignore target labels; use pseudo-labels")
        sp.add_argument("--ot", choices=("exact", "surrogate", "gamma"))
        sp.add_argument("--match-classes", action="store_true",
                        help="subsample reference classes down to the target's count")
        sp.add_argument("--train-target-probe", action="store_true",
                        help="also fit a target probe to report measured transferability")
        sp.add_argument("--probe-epochs", type=_positive_int,
                        help="epochs for the target probe")
        sp.add_argument("--eval-size", type=_positive_int,
                        help="subsample size for the final report")
        sp.add_argument("--trace", help="trace CSV path (default: <out>.trace.csv)")
        sp.add_argument("--save-transforms", help="write learned transforms as JSON")
        sp.add_argument("--init", help="start from transforms saved by --save-transforms "
                                       "(their frozen flags are kept)")
        sp.set_defaults(func=func)

    cor = sub.add_parser("correlate", help="correlate scores with fine-tuning accuracy")
    cor.add_argument("records")
    cor.add_argument("--out", required=True)
    cor.set_defaults(func=cmd_correlate)

    conv = sub.add_parser("convert", help="convert between CSV and binary embedding files")
    conv.add_argument("input")
    conv.add_argument("--out", required=True)
    conv.add_argument("--input-format", choices=("csv", "binary"))
    conv.add_argument("--output-format", choices=("csv", "binary"))
    conv.set_defaults(func=cmd_convert)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which is also our input-error code
        return int(exc.code or 0)
    try:
        with _thread_limit(), np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
