"""Command line interface.

Every subcommand reads its inputs, writes into a fresh ``--out`` directory
and finishes with that directory's ``manifest.json``. Exit codes: 0 success,
1 input error, 2 pipeline error, 3 validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .errors import InputError, TrajOverlapError, ValidationError
from .ingest import (FORMATS, PipelineConfig, env_cache_dir, file_digest, parse, preprocess, read_split, split,
                     write_split)
from .laws import (DEFAULT_GAMMA, fit_gamma, fit_law_model, read_features_csv, read_law_model,
                   user_features, write_features_csv, write_law_model)
from .manifest import build_manifest, config_digest, write_manifest
from .overlap import (BIN_LABELS, OverlapMetric, compute_overlaps, overlap_summary, read_overlap_dir,
                      write_overlap_outputs)
from .predictors import (DEFAULT_DEPTH, EvalReport, acc_at_k, load_scores, mmc_fit, mmc_score_table,
                         targets, write_report_json, write_scores, write_table_csv)
from .rerank import (Featurizer, ScorerModel, TrainConfig, build_samples, contexts, evaluate_improvement,
                     read_samples, rerank, train, write_improvement, write_samples)

log = logging.getLogger("trajoverlap")

DEFAULTS = {
    "pipeline": PipelineConfig().to_dict(),
    "depth": DEFAULT_DEPTH,
    "k": 5,
    "gamma": DEFAULT_GAMMA,
    "train": TrainConfig().__dict__,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are input errors (exit 1), not argparse's 2
        self.print_usage(sys.stderr)
        raise InputError(message)


def _load_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(user) - set(cfg)
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
        for key, value in user.items():
            if isinstance(cfg[key], dict):
                extra = set(value) - set(cfg[key])
                if extra:
                    raise InputError(f"unknown keys in config section {key!r}: {sorted(extra)}")
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def _override(section: dict, key: str, value) -> None:
    if value is not None:
        section[key] = value


def _metrics(text: str) -> list[OverlapMetric]:
    try:
        out = [OverlapMetric.parse(m.strip()) for m in text.split(",") if m.strip()]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not out:
        raise InputError("no metrics given")
    return list(dict.fromkeys(out))


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finish(command, cfg, inputs, out, outputs, seed, t0) -> None:
    m = build_manifest(command, cfg, inputs, out, outputs, seed, time.time() - t0)
    write_manifest(m, out)
    print(f"manifest {m.digest[:16]}  ({len(outputs)} files in {out})")


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"{what} {p} is not a directory")
    return p


# --------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> None:
    t0 = time.time()
    cfg = _load_config(args)
    pc = cfg["pipeline"]
    _override(pc, "min_records", args.min_records)
    _override(pc, "session_gap_hours", args.session_gap_hours)
    _override(pc, "min_trajectories", args.min_trajectories)
    _override(pc, "location_mode", args.location_mode)
    config = PipelineConfig.from_dict(pc)
    columns = dict(c.split("=", 1) for c in args.column) if args.column else None

    parsed = parse(args.format, args.input, columns, args.delimiter)
    pre = preprocess(parsed.records, config)
    provenance = {"format": args.format, "source_sha256": file_digest(args.input), "config": config.to_dict(),
                  "rows": parsed.units, "rows_rejected": len(parsed.rejected), "stages": pre.stages}
    ds = split(pre.trajectories, pre.vocabulary, config.split_fractions, provenance)
    out = _out_dir(args.out)
    paths = write_split(ds, out)

    print(f"{'stage':<18}{'Users':>10}{'Locations':>11}{'Trajectories':>14}{'Records':>10}")
    for stage, c in pre.stages.items():
        print(f"{stage:<18}{c.get('users', ''):>10}{c.get('locations', ''):>11}"
              f"{c.get('trajectories', ''):>14}{c.get('records', ''):>10}")
    sc = ds.provenance["split_counts"]
    print(f"split train/valid/test: {sc['train']}/{sc['valid']}/{sc['test']}")
    _finish("preprocess", {"pipeline": config.to_dict(), "format": args.format}, {"input": args.input},
            out, paths, None, t0)


def cmd_overlap(args) -> None:
    t0 = time.time()
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    metrics = _metrics(args.metrics)
    cfg = {"metrics": [m.value for m in metrics], "prune": not args.no_prune, "js_variant": args.js_variant}
    out = _out_dir(args.out)

    cache = env_cache_dir()
    cached = None
    if cache is not None:
        key = config_digest({"train": file_digest(src / "train.jsonl"), "test": file_digest(src / "test.jsonl"),
                             **cfg})
        cached = cache / f"overlap-{key[:24]}"
    if cached is not None and cached.is_dir():
        log.info("overlap cache hit %s", cached)
        by_metric = read_overlap_dir(cached, metrics)
    else:
        by_metric = compute_overlaps(ds.test, ds.train, metrics, workers=args.threads,
                                     prune=not args.no_prune, js_variant=args.js_variant)
        if cached is not None:
            tmp = cached.with_suffix(".tmp")
            write_overlap_outputs(by_metric, tmp)
            tmp.replace(cached)
    paths = write_overlap_outputs(by_metric, out)

    summary = overlap_summary(by_metric)
    print(f"{'metric':<7}" + "".join(f"{b:>9}" for b in BIN_LABELS) + f"{'n':>8}")
    for m, s in summary.items():
        print(f"{m:<7}" + "".join(f"{s['fractions'][b]:>9.3f}" for b in BIN_LABELS) + f"{s['n_test']:>8}")
    _finish("overlap", cfg, {"split": src}, out, paths, None, t0)


def cmd_mmc(args) -> None:
    t0 = time.time()
    cfg = _load_config(args)
    _override(cfg, "depth", args.depth)
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    depth = cfg["depth"] or len(ds.vocabulary)
    model = mmc_fit(ds.train, len(ds.vocabulary))
    out = _out_dir(args.out)
    paths = []
    for part in ("valid", "test"):
        table = mmc_score_table(model, getattr(ds, part), depth, name="MMC")
        p = out / f"mmc_{part}.jsonl"
        write_scores(table, p)
        paths.append(p)
        print(f"{part}: {len(table)} trajectories scored to depth {min(depth, len(ds.vocabulary))}")
    _finish("mmc", {"depth": depth}, {"split": src}, out, paths, None, t0)


def cmd_features(args) -> None:
    t0 = time.time()
    cfg = _load_config(args)
    _override(cfg, "gamma", args.gamma)
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    gamma = fit_gamma(ds.train, ds.vocabulary, seed=args.seed) if args.fit_gamma else float(cfg["gamma"])
    law = fit_law_model(ds.train, ds.vocabulary, gamma)
    feats = user_features(ds.by_user("train"), ds.vocabulary)
    out = _out_dir(args.out)
    write_features_csv(feats, out / "features.csv")
    write_law_model(law, out / "law_model.json")
    n_ret = sum(1 for f in feats.values() if f.re_u == 0)
    print(f"users {len(feats)} (returners {n_ret}, explorers {len(feats) - n_ret}); "
          f"gamma {law.gamma:.3f}, r_min {law.r_min:.4f} km")
    _finish("features", {"gamma": gamma, "fit_gamma": bool(args.fit_gamma)}, {"split": src}, out,
            [out / "features.csv", out / "law_model.json"], args.seed if args.fit_gamma else None, t0)


def _test_truth(ds):
    truth, skipped = targets(ds.test)
    if skipped:
        log.info("%d single-point test trajectories have no prediction target", skipped)
    return truth


def _load_strata(overlap_dir, stratify):
    if overlap_dir is None:
        return None
    metrics = _metrics(stratify) if stratify else None
    return read_overlap_dir(_require_dir(overlap_dir, "overlap"), metrics)


def cmd_eval(args) -> None:
    t0 = time.time()
    cfg = _load_config(args)
    _override(cfg, "k", args.k)
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    truth = _test_truth(ds)
    strata = _load_strata(args.overlap, args.stratify)
    out = _out_dir(args.out)
    reports, paths, inputs = [], [], {"split": src}
    for path in args.scores:
        name = Path(path).stem
        table = load_scores(path, expected_ids=truth.keys(), name=name)
        rep = acc_at_k(table, truth, cfg["k"], strata)
        p = out / f"report_{name}.json"
        write_report_json(rep, p)
        reports.append(rep)
        paths.append(p)
        inputs[f"scores:{name}"] = path
    table_path = out / "table.csv"
    write_table_csv(reports, table_path)
    paths.append(table_path)
    if args.overlap:
        inputs["overlap"] = args.overlap
    print(table_path.read_text(), end="")
    _finish("eval", {"k": cfg["k"], "stratify": sorted(m.value for m in strata) if strata else []}, inputs, out,
            paths, None, t0)


def _featurizer(ds, features_dir) -> Featurizer:
    d = _require_dir(features_dir, "features")
    feats = read_features_csv(d / "features.csv")
    law = read_law_model(d / "law_model.json", ds.train, ds.vocabulary)
    return Featurizer(feats, law)


def _train_config(cfg, args) -> TrainConfig:
    tc = dict(cfg["train"])
    _override(tc, "k", args.negatives)
    _override(tc, "epochs", args.epochs)
    _override(tc, "learning_rate", args.learning_rate)
    _override(tc, "seed", args.seed)
    try:
        return TrainConfig(**tc)
    except TypeError as exc:
        raise InputError(f"bad training configuration: {exc}") from exc


def cmd_rerank_train(args) -> None:
    t0 = time.time()
    cfg = _load_config(args)
    tc = _train_config(cfg, args)
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    out = _out_dir(args.out)
    inputs = {"split": src}
    if args.identity:
        model = ScorerModel.passthrough()
        paths = []
    else:
        if not args.scores or not args.features:
            raise InputError("--scores and --features are required unless --identity is given")
        truth, _ = targets(ds.valid)
        scores = load_scores(args.scores, expected_ids=truth.keys())
        featurize = _featurizer(ds, args.features)
        samples = build_samples(scores, truth, contexts(ds.valid), featurize, len(ds.vocabulary), tc.k, tc.seed)
        write_samples(samples, out / "samples.jsonl")
        model = train(read_samples(out / "samples.jsonl"), tc)
        paths = [out / "samples.jsonl"]
        inputs.update(scores=args.scores, features=args.features)
        print(f"{len(samples)} samples from {len(scores)} validation trajectories; "
              f"final holdout BCE {model.history[-1]:.4f}")
    model.save(out / "scorer.json")
    paths.append(out / "scorer.json")
    cfg_out = {"identity": bool(args.identity), "train": None if args.identity else tc.__dict__}
    _finish("rerank-train", cfg_out, inputs, out, paths, None if args.identity else tc.seed, t0)


def cmd_rerank_apply(args) -> None:
    t0 = time.time()
    src = _require_dir(args.split, "split")
    ds = read_split(src)
    truth = _test_truth(ds)
    model = ScorerModel.load(args.model)
    scores = load_scores(args.scores, expected_ids=truth.keys())
    featurize = _featurizer(ds, args.features)
    reranked = rerank(model, scores, contexts(ds.test), featurize, name=f"{Path(args.scores).stem}+RR")
    strata = _load_strata(args.overlap, args.stratify)
    out = _out_dir(args.out)
    write_scores(reranked, out / "reranked.jsonl")
    report = evaluate_improvement(scores, reranked, truth, strata, k=args.k)
    paths = [out / "reranked.jsonl"] + write_improvement(report, out)
    print((out / "improvement.csv").read_text(), end="")
    inputs = {"split": src, "scores": args.scores, "model": args.model, "features": args.features}
    if args.overlap:
        inputs["overlap"] = args.overlap
    _finish("rerank-apply", {"k": args.k}, inputs, out, paths, None, t0)


def _labelled(items, what):
    out = []
    for item in items or []:
        if "=" not in item:
            raise InputError(f"--{what} expects LABEL=DIR, got {item!r}")
        label, d = item.split("=", 1)
        out.append((label, _require_dir(d, what)))
    return out


def cmd_report(args) -> None:
    t0 = time.time()
    out = _out_dir(args.out)
    overlaps = _labelled(args.overlap, "overlap")
    evals = _labelled(args.eval, "eval")
    if not overlaps and not evals:
        raise InputError("nothing to report: give --overlap and/or --eval")
    paths, inputs = [], {}
    if overlaps:
        p = out / "figure1_data.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "metric", "bin", "count", "fraction"])
            for label, d in overlaps:
                with open(d / "overlap_summary.json", encoding="utf-8") as sf:
                    summary = json.load(sf)
                for m in sorted(summary, key=lambda x: [v.value for v in OverlapMetric].index(x)):
                    for b in BIN_LABELS:
                        w.writerow([label, m, b, summary[m]["counts"][b], repr(summary[m]["fractions"][b])])
                inputs[f"overlap:{label}"] = d
        paths.append(p)
    if evals:
        reports = []
        for label, d in evals:
            files = sorted(d.glob("report_*.json"))
            if not files:
                raise InputError(f"{d}: no report_*.json files")
            for f in files:
                with open(f, encoding="utf-8") as fh:
                    rep = EvalReport.from_dict(json.load(fh))
                reports.append((label, rep))
            inputs[f"eval:{label}"] = d
        p = out / "figure2_data.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "model", "metric", "bin", "k", "n", "acc"])
            for label, rep in reports:
                w.writerow([label, rep.model, "all", "all", rep.k, rep.n, repr(rep.overall)])
                for m, bins in rep.per_bin.items():
                    for b in BIN_LABELS:
                        acc = bins.get(b)
                        w.writerow([label, rep.model, m, b, rep.k, rep.counts[m][b],
                                    "" if acc is None else repr(acc)])
        paths.append(p)
        for label in dict.fromkeys(lbl for lbl, _ in reports):
            tp = out / f"table_{label}.csv"
            write_table_csv([r for lbl, r in reports if lbl == label], tp)
            paths.append(tp)
    print("\n".join(str(p) for p in paths))
    _finish("report", {}, inputs, out, paths, None, t0)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trajoverlap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"trajoverlap {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        if config:
            sp.add_argument("--config", help="JSON configuration file")

    s = sub.add_parser("preprocess", help="parse, filter, cut sessions and split a raw dataset")
    s.add_argument("--format", required=True, choices=FORMATS)
    s.add_argument("--input", required=True)
    s.add_argument("--min-records", type=int)
    s.add_argument("--session-gap-hours", type=float)
    s.add_argument("--min-trajectories", type=int)
    s.add_argument("--location-mode", choices=("auto", "venue", "grid"))
    s.add_argument("--column", action="append", metavar="FIELD=NAME",
                   help="generic-csv column mapping (fields: user, time, lat, lon, venue)")
    s.add_argument("--delimiter", default=",")
    common(s)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("overlap", help="max-over-train overlap of every test trajectory")
    s.add_argument("--split", required=True)
    s.add_argument("--metrics", default="js,lcst,ofe")
    s.add_argument("--threads", type=int, default=1, help="worker processes")
    s.add_argument("--no-prune", action="store_true", help="full scan instead of the location index")
    s.add_argument("--js-variant", choices=("similarity", "distance"), default="similarity")
    common(s, config=False)
    s.set_defaults(func=cmd_overlap)

    s = sub.add_parser("mmc", help="fit the Markov chain on train and score valid and test")
    s.add_argument("--split", required=True)
    s.add_argument("--depth", type=int, help="candidates per trajectory (0 = whole vocabulary)")
    common(s)
    s.set_defaults(func=cmd_mmc)

    s = sub.add_parser("features", help="per-user law features and the visitation-law model")
    s.add_argument("--split", required=True)
    s.add_argument("--gamma", type=float)
    s.add_argument("--fit-gamma", action="store_true", help="estimate the exponent from train")
    s.add_argument("--seed", type=int, default=0)
    common(s)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("eval", help="ACC@k overall and per overlap bin")
    s.add_argument("--split", required=True)
    s.add_argument("--scores", required=True, nargs="+")
    s.add_argument("--overlap", help="directory written by the overlap command")
    s.add_argument("--stratify", help="comma-separated metrics (default: all present)")
    s.add_argument("--k", type=int)
    common(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rerank-train", help="build samples on validation and train the scorer")
    s.add_argument("--split", required=True)
    s.add_argument("--scores", help="validation score file")
    s.add_argument("--features", help="directory written by the features command")
    s.add_argument("--identity", action="store_true", help="write the pass-through scorer instead")
    s.add_argument("--negatives", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--seed", type=int)
    common(s)
    s.set_defaults(func=cmd_rerank_train)

    s = sub.add_parser("rerank-apply", help="rerank test scores and report the improvement")
    s.add_argument("--split", required=True)
    s.add_argument("--scores", required=True, help="test score file")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True, help="scorer.json from rerank-train")
    s.add_argument("--overlap")
    s.add_argument("--stratify")
    s.add_argument("--k", type=int, default=5)
    common(s, config=False)
    s.set_defaults(func=cmd_rerank_apply)

    s = sub.add_parser("report", help="tidy CSVs behind the overlap and accuracy figures")
    s.add_argument("--overlap", action="append", metavar="LABEL=DIR")
    s.add_argument("--eval", action="append", metavar="LABEL=DIR")
    common(s, config=False)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except TrajOverlapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except TrajOverlapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
