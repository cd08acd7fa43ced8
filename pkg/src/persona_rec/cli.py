"""Command-line interface: train, eval, sweep, explain, gradcheck, synth.

Layering: a TOML config file supplies any subset of training fields,
``--set key=value`` flags override the file, and ``--seed`` overrides both.
Data file paths come from flags, falling back to the PERSONA_REC_NEWS and
PERSONA_REC_BEHAVIORS environment variables when a flag is absent. Every
artifact-producing run writes exactly one manifest.json recording the
effective config, input digests, seed, and artifact paths.

Exit codes: 0 success, 2 configuration error, 3 data/path error, 4 failed
check or diverged training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields, replace
from datetime import datetime

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from . import objectives as obj
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .data import parse_behaviors_file, parse_news_file
from .errors import (CheckInapplicableError, ConfigurationError, DataError,
                     TrainingDivergenceError)
from .evaluation import evaluate
from .gradcheck import run_suite
from .synth import generate_corpus, rule_report, write_corpus
from .text import Vocabulary
from .training import (VARIANTS, TrainConfig, build_model, config_as_dict,
                       train, variant_flags)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECK = 4

ENV_NEWS = "PERSONA_REC_NEWS"
ENV_BEHAVIORS = "PERSONA_REC_BEHAVIORS"

_DEFAULTS = TrainConfig()
_FIELD_NAMES = tuple(f.name for f in fields(TrainConfig))


# ---------------------------------------------------------------------------
# config plumbing


def _coerce_config_value(key: str, value):
    """Check the key and convert TOML- or string-typed values to field type."""
    if key not in _FIELD_NAMES:
        raise ConfigurationError(
            f"unknown config key {key!r}; valid keys: {', '.join(sorted(_FIELD_NAMES))}")
    want = type(getattr(_DEFAULTS, key))
    try:
        if want is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
                return value.lower() in ("true", "1")
            raise ValueError(value)
        if want is int:
            if isinstance(value, bool) or (isinstance(value, float)
                                           and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if want is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"config key {key!r} expects {want.__name__}, got {value!r}")


def load_config_file(path: str) -> dict:
    _require_file(path, "config file")
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"config file {path}: {e}")
    return {k: _coerce_config_value(k, v) for k, v in raw.items()}


def effective_config(args) -> TrainConfig:
    data = {}
    if getattr(args, "config", None):
        data.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = _coerce_config_value(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    cfg = TrainConfig(**data)
    if getattr(args, "variant", None):
        cfg = replace(cfg, **variant_flags(args.variant))
    return cfg


# ---------------------------------------------------------------------------
# files, datasets, manifests


def _require_file(path, what: str) -> None:
    if not path or not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")


def _data_path(flag_value, env_name: str, what: str) -> str:
    path = flag_value or os.environ.get(env_name)
    if not path:
        raise ConfigurationError(
            f"no {what} given: pass the flag or set {env_name}")
    _require_file(path, what)
    return path


def load_dataset(args, cfg: TrainConfig):
    news_path = _data_path(args.news, ENV_NEWS, "news file")
    behaviors_path = _data_path(args.behaviors, ENV_BEHAVIORS, "behaviors file")
    vocab, entity_vocab = Vocabulary(), Vocabulary()
    store = parse_news_file(news_path, vocab, entity_vocab, n_w=cfg.n_w,
                            build_vocab=True)
    impressions = parse_behaviors_file(behaviors_path, store, n_u=cfg.n_u)
    return vocab, entity_vocab, store, impressions, {
        "news": news_path, "behaviors": behaviors_path}


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, cfg, data_paths: dict,
                   artifacts: dict) -> str:
    manifest = {
        "command": command,
        "config": config_as_dict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "data_digests": {name: {"path": p, "sha256": _sha256(p)}
                         for name, p in data_paths.items()},
        "artifacts": artifacts,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _need_out(args) -> str:
    if not args.out:
        raise ConfigurationError("this command requires --out")
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = effective_config(args)
    vocab, entity_vocab, store, impressions, paths = load_dataset(args, cfg)
    out = _need_out(args)

    result = train(cfg, vocab, entity_vocab, store, impressions)

    ckpt_path = os.path.join(out, "checkpoint.bin")
    save_checkpoint(ckpt_path, result.model.named_parameters())
    log_path = os.path.join(out, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.log_lines()) + "\n")
    manifest_path = write_manifest(out, "train", result.config, paths,
                                   {"checkpoint": ckpt_path, "log": log_path})

    last = result.records[-1]
    print(f"trained {result.config.epochs} epochs on "
          f"{result.n_train_samples} samples "
          f"({result.n_dev} dev impressions, {result.n_dev_skipped} skipped cold)")
    print(json.dumps(last, sort_keys=True))
    print(f"artifacts: {ckpt_path} {log_path} {manifest_path}")
    return EXIT_OK


def _restore_model(args, cfg, vocab, entity_vocab, store):
    _require_file(args.checkpoint, "checkpoint")
    model = build_model(cfg, vocab, entity_vocab, store)
    apply_checkpoint(model, load_checkpoint(args.checkpoint))
    return model


def cmd_eval(args) -> int:
    cfg = effective_config(args)
    vocab, entity_vocab, store, impressions, paths = load_dataset(args, cfg)
    model = _restore_model(args, cfg, vocab, entity_vocab, store)

    scoreable = [i for i in impressions if i.history]
    skipped = len(impressions) - len(scoreable)
    if not scoreable:
        raise DataError("no scoreable impressions: every user is cold-start")
    report = evaluate(model, scoreable, ks=(5, 10))
    print(report.format_text())
    if skipped:
        print(f"skipped_cold_start {skipped}")

    if args.out:
        out = _need_out(args)
        report_path = os.path.join(out, "eval_report.json")
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump({"metrics": report.as_dict(),
                       "skipped_cold_start": skipped}, fh, sort_keys=True, indent=2)
            fh.write("\n")
        paths = dict(paths, checkpoint=args.checkpoint)
        write_manifest(out, "eval", cfg, paths, {"report": report_path})
    return EXIT_OK


_SWEEP_AXES = ("lambda", "top-K", "top-G")


def _sweep_values(args):
    given = [(name, raw) for name, raw in
             (("lambda", args.lam), ("top-K", args.top_k), ("top-G", args.top_g))
             if raw]
    if len(given) != 1:
        raise ConfigurationError(
            "sweep requires values for exactly one of --lambda, --top-k, --top-g")
    axis, raw = given[0]
    tokens = [t.strip() for t in raw.split(",") if t.strip()]
    if not tokens:
        raise ConfigurationError(f"--{axis.lower()} got an empty value list")
    try:
        values = [float(t) if axis == "lambda" else int(t) for t in tokens]
    except ValueError:
        kind = "numbers" if axis == "lambda" else "integers"
        raise ConfigurationError(f"{axis} sweep values must be {kind}: {raw!r}")
    return axis, tokens, values


def cmd_sweep(args) -> int:
    cfg = effective_config(args)
    axis, tokens, values = _sweep_values(args)
    vocab, entity_vocab, store, impressions, paths = load_dataset(args, cfg)
    out = _need_out(args)

    rows = []
    for token, value in zip(tokens, values):
        if axis == "lambda":
            cfg_v = replace(cfg, lam=value)
        elif axis == "top-K":
            cfg_v = replace(cfg, top_k=value)
        else:
            cfg_v = replace(cfg, top_g=value)
        result = train(cfg_v, vocab, entity_vocab, store, impressions)
        record = result.records[-1]
        if "dev_auc" not in record:
            raise DataError("sweep needs a held-out split: set dev_fraction > 0 "
                            "and provide enough impressions")
        metrics = (record["dev_auc"], record["dev_mrr"], record["dev_ndcg@5"])
        if any(m != m for m in metrics):          # NaN: no applicable impressions
            raise DataError("held-out metrics are undefined on this split")
        rows.append((token, *metrics))

    csv_path = os.path.join(out, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("param_value,auc,mrr,ndcg\n")
        for token, auc_v, mrr_v, ndcg_v in rows:
            fh.write(f"{token},{auc_v:.6f},{mrr_v:.6f},{ndcg_v:.6f}\n")
    manifest_path = write_manifest(out, "sweep", cfg, paths, {"sweep": csv_path})

    print(f"{axis} sweep ({len(rows)} runs)")
    print(f"{'value':>10}  {'auc':>8}  {'mrr':>8}  {'ndcg@5':>8}")
    for token, auc_v, mrr_v, ndcg_v in rows:
        print(f"{token:>10}  {auc_v:8.4f}  {mrr_v:8.4f}  {ndcg_v:8.4f}")
    print(f"artifacts: {csv_path} {manifest_path}")
    return EXIT_OK


def _top_terms(term_row: np.ndarray, seq, vocab, limit: int = 3):
    pairs = [(float(term_row[j]), vocab.token_of(int(seq.ids[j])))
             for j in range(len(seq.ids)) if seq.mask[j]]
    pairs.sort(key=lambda p: -p[0])
    return pairs[:limit]


def cmd_explain(args) -> int:
    cfg = effective_config(args)
    vocab, entity_vocab, store, impressions, paths = load_dataset(args, cfg)
    model = _restore_model(args, cfg, vocab, entity_vocab, store)

    user_imps = [i for i in impressions if i.user_id == args.user]
    if not user_imps:
        raise DataError(f"unknown user {args.user!r}: not present in behaviors")
    latest = user_imps[-1]
    history = list(latest.history)
    if args.candidates:
        candidates = [c.strip() for c in args.candidates.split(",") if c.strip()]
        if not candidates:
            raise ConfigurationError("--candidates got an empty list")
    else:
        candidates = [nid for nid, _ in latest.candidates]

    persona = model.persona_for(args.user, history)
    cold = not bool(persona.mask.any())

    lines = [f"user {args.user}"]
    if cold:
        lines.append("cold-start user: empty history, explanations use the "
                     "learned unknown-persona fallback")
    else:
        names = [entity_vocab.token_of(int(persona.entity_ids[i]))
                 for i in range(len(persona.entity_ids)) if persona.mask[i]]
        lines.append(f"persona ({len(names)} entities from {len(history)} "
                     f"history items): {' '.join(names)}")

    with ad.no_grad():
        emb, pmask = model.persona_tensors(persona)
        user_rep = (model.user_representation(history, emb, pmask)
                    if history else None)
        scored = []
        for cid in candidates:
            rep = model.encode_candidate(cid, emb, pmask)
            prob = (float(obj.click_probability(user_rep.u, rep.r,
                                                model.click_params).data)
                    if user_rep is not None else None)
            scored.append((cid, prob, rep))
    if user_rep is not None:
        scored.sort(key=lambda t: -t[1])

    for cid, prob, rep in scored:
        head = f"candidate {cid}"
        if prob is not None:
            head += f"  p_click {prob:.4f}"
        lines.append(head)
        weights = rep.entity_attention.data
        if cold or not model.use_persona:
            names = ["<unk>"]
            order = [0]
        else:
            order = [i for i in range(len(persona.entity_ids)) if persona.mask[i]]
            names = {i: entity_vocab.token_of(int(persona.entity_ids[i]))
                     for i in order}
            order.sort(key=lambda i: -float(weights[i]))
            names = [names[i] for i in order]
        seq = model.news_input(cid)
        for name, i in zip(names, order):
            terms = ", ".join(f"{tok} ({w:.3f})" for w, tok in
                              _top_terms(rep.term_attention.data[i], seq, vocab))
            # 8 decimals so the printed weights still sum to 1 within 1e-6.
            lines.append(f"  entity {name}  weight {float(weights[i]):.8f}"
                         f"  terms: {terms}")

    text = "\n".join(lines)
    print(text)
    if args.out:
        out = _need_out(args)
        report_path = os.path.join(out, "explain.txt")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_manifest(out, "explain", cfg,
                       dict(paths, checkpoint=args.checkpoint),
                       {"report": report_path})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = run_suite(tol=args.tol, seed=args.seed or 0)
    lines = [str(r) for r in reports]
    n_pass = sum(r.passed for r in reports)
    lines.append(f"{n_pass}/{len(reports)} checks passed (tol {args.tol:g})")
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = _need_out(args)
        report_path = os.path.join(out, "gradcheck.txt")
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_manifest(out, "gradcheck", None, {}, {"report": report_path})
    return EXIT_OK if n_pass == len(reports) else EXIT_CHECK


def cmd_synth(args) -> int:
    for name in ("users", "news", "entities"):
        if getattr(args, name) < 1:
            raise ConfigurationError(f"--{name} must be >= 1")
    out = _need_out(args)
    corpus = generate_corpus(args.users, args.news, args.entities,
                             seed=args.seed or 0,
                             impressions_per_user=args.impressions_per_user)
    paths = write_corpus(corpus, out)
    report = rule_report(corpus)
    write_manifest(out, "synth", None, paths, dict(paths))
    print(f"wrote {paths['news']}, {paths['behaviors']}, {paths['ground_truth']}")
    print("planted-rule ranking quality:")
    print(report.format_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(sp):
    sp.add_argument("--seed", type=int, default=None,
                    help="random seed (overrides the config file)")
    sp.add_argument("--config", default=None,
                    help="TOML file; keys are training-config fields")
    sp.add_argument("--out", default=None, help="output directory")


def _add_data(sp):
    sp.add_argument("--news", default=None,
                    help=f"news.tsv path (or ${ENV_NEWS})")
    sp.add_argument("--behaviors", default=None,
                    help=f"behaviors.tsv path (or ${ENV_BEHAVIORS})")


def _add_overrides(sp):
    sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override one config field; repeatable")
    sp.add_argument("--variant", choices=VARIANTS, default=None,
                    help="architecture ablation to apply")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="persona-rec",
        description="Persona-aware news recommender: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a model and write artifacts")
    _add_common(sp); _add_data(sp); _add_overrides(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(sp); _add_data(sp); _add_overrides(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    _add_common(sp); _add_data(sp); _add_overrides(sp)
    sp.add_argument("--lambda", dest="lam", default=None,
                    help="comma-separated contrastive weights")
    sp.add_argument("--top-k", dest="top_k", default=None,
                    help="comma-separated entities-per-item values")
    sp.add_argument("--top-g", dest="top_g", default=None,
                    help="comma-separated history-window values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("explain", help="per-candidate persona attributions")
    _add_common(sp); _add_data(sp); _add_overrides(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--user", required=True)
    sp.add_argument("--candidates", default=None,
                    help="comma-separated news ids (default: the user's "
                         "latest impression)")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(sp)
    sp.add_argument("--tol", type=float, default=1e-4,
                    help="max relative error allowed per check")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(sp)
    sp.add_argument("--users", type=int, required=True)
    sp.add_argument("--news", type=int, required=True)
    sp.add_argument("--entities", type=int, required=True)
    sp.add_argument("--impressions-per-user", type=int, default=3)
    sp.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or EXIT_OK)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, CheckInapplicableError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
