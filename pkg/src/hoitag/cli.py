"""Command-line entry point: ``hoitag <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import httpx

from .captioner import GenerationConfig
from .data import (
    SchemaError,
    build_splits,
    load_dataset,
    load_image,
    serialize_dataset,
    validate_manifest,
)
from .judge import JudgeConfig, JudgeConfigError, JudgeNetworkError, JudgeParseError, judge_scores
from .metrics import mean_rubric, rubric_scores, tag_metrics
from .pipeline import (
    CheckpointError,
    checkpoint_extra,
    load_caption_checkpoint,
    load_hoi_checkpoint,
    record_tag_strings,
    record_tags,
)
from .plots import PlotError, plot_ablation, plot_loss_curve
from .report import RunResult, build_report, load_runs_csv
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    TrainLog,
    inference_jsonl,
    run_inference,
    train_caption_stage,
    train_hoi_stage,
)

log = logging.getLogger("hoitag")

DOMAIN_ERRORS = (
    ValueError, FileNotFoundError, SchemaError, CheckpointError, TrainingDiverged,
    JudgeConfigError, JudgeParseError, JudgeNetworkError, PlotError, KeyError,
)

# Desk-scale defaults for the ablation command; the published lrs stay the TrainConfig defaults.
ABLATE_DEFAULTS = {"hoi_epochs": 60, "caption_epochs": 40, "lr_hoi": 1e-3, "lr_caption": 1e-3}


class DomainError(Exception):
    pass


# -- helpers -------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _record_config(out_dir: Path, args: argparse.Namespace, **resolved) -> None:
    cli = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(out_dir / "config.json", {"command": cli, **resolved})


def _split_path(data: Path, split: str) -> Path:
    return data if data.suffix == ".jsonl" else data / f"{split}.jsonl"


def _load_split(data: Path, split: str):
    path = _split_path(data, split)
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = load_dataset(path)
    images = {r.image_id: load_image(path.parent, r.image_id) for r, _ in manifest.records}
    return manifest, images


def _train_config(args, stage: str) -> TrainConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    names = {f.name for f in fields(TrainConfig)}
    unknown = set(base) - names
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    for name in names - {"stage", "betas"}:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if args.betas is not None:
        base["betas"] = tuple(args.betas)
    base["stage"] = stage
    return TrainConfig(**base)


def _generation(args) -> GenerationConfig:
    return GenerationConfig(args.mode, args.beam_width, args.max_len, args.length_penalty)


def _read_jsonl(path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return rows


def _truth_tags(path) -> dict[str, set]:
    """image_id -> true tag set, from a dataset manifest or a JSONL with ``tags`` fields."""
    rows = _read_jsonl(path)
    if rows and "schema" in rows[0]:
        m = load_dataset(path)
        return {r.image_id: record_tag_strings(r, m.vocab_entities, m.vocab_actions) for r, _ in m.records}
    return {r["image_id"]: set(r["tags"]) for r in rows}


def _aligned(pred_rows: list[dict], ids: list[str]) -> dict[str, dict]:
    by_id = {r["image_id"]: r for r in pred_rows}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"no prediction for {missing[0]} ({len(missing)} missing)")
    return by_id


def _rubric_for(pred_rows, manifest) -> dict:
    by_id = _aligned(pred_rows, [r.image_id for r, _ in manifest.records])
    scores = [
        rubric_scores(by_id[r.image_id]["caption"], r, manifest.vocab_entities, manifest.vocab_actions,
                      manifest.threat_actions)
        for r, _ in manifest.records
    ]
    return asdict(mean_rubric(scores))


def _scene_text(record, manifest) -> str:
    ents = ", ".join(manifest.vocab_entities[e.class_id] for e in record.entities)
    rels = "; ".join(f"{h} {a} {o}" for h, o, a, _ in record_tags(record, manifest.vocab_entities,
                                                                   manifest.vocab_actions))
    return f"Entities: {ents}\nInteractions: {rels or 'none'}\nThreat: {'yes' if record.is_threat else 'no'}"


# -- commands --------------------------------------------------------------------


def cmd_dataset_build(args) -> int:
    out = Path(args.out)
    (train, val, test), images = build_splits(args.train, args.val, args.test, args.threat_ratio, args.seed,
                                              with_images=True)
    for m in (train, val, test):
        serialize_dataset(m, out / f"{m.split}.jsonl", images)
    _record_config(out, args)
    print(f"wrote {len(train)}/{len(val)}/{len(test)} scenes to {out}")
    return 0


def cmd_dataset_validate(args) -> int:
    data = Path(args.data)
    paths = [data] if data.suffix == ".jsonl" else sorted(data.glob("*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no manifests under {data}")
    problems = []
    for p in paths:
        m = load_dataset(p)
        problems += [f"{p.name}: {msg}" for msg in validate_manifest(m, p.parent)]
        print(f"{p.name}: {len(m)} records")
    for msg in problems:
        print(msg, file=sys.stderr)
    return 1 if problems else 0


def cmd_train_hoi(args) -> int:
    config = _train_config(args, "hoi")
    out = Path(args.out)
    manifest, images = _load_split(Path(args.data), args.split)
    _record_config(out, args, train=asdict(config))
    _, tlog = train_hoi_stage(manifest, images, config, out_dir=out)
    tlog.write(out / "train_log.csv")
    _write_json(out / "metrics.json", tlog.final_metrics)
    if not args.no_plots:
        plot_loss_curve(tlog, out)
    print(json.dumps(tlog.final_metrics))
    return 0


def cmd_train_caption(args) -> int:
    config = _train_config(args, "caption")
    out = Path(args.out)
    manifest, images = _load_split(Path(args.data), args.split)
    hoi = load_hoi_checkpoint(args.hoi)
    _record_config(out, args, train=asdict(config))
    _, tlog = train_caption_stage(manifest, images, hoi, config, out_dir=out)
    tlog.write(out / "train_log.csv")
    _write_json(out / "metrics.json", tlog.final_metrics)
    if not args.no_plots:
        plot_loss_curve(tlog, out)
    print(json.dumps(tlog.final_metrics))
    return 0


def _without_hoi_tag(ckpt) -> bool:
    return bool(checkpoint_extra(ckpt).get("train", {}).get("without_hoi_tag", False))


def cmd_infer(args) -> int:
    manifest, images = _load_split(Path(args.data), args.split)
    model = load_caption_checkpoint(args.checkpoint)
    rows = run_inference(manifest, images, model, _generation(args), args.act_threshold, args.entity_threshold,
                         _without_hoi_tag(args.checkpoint))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(inference_jsonl(rows), encoding="utf-8")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_eval_tags(args) -> int:
    truth = _truth_tags(args.truth)
    ids = list(truth)
    by_id = _aligned(_read_jsonl(args.pred), ids)
    rep = tag_metrics([by_id[i]["tags"] for i in ids], [truth[i] for i in ids])
    row = rep.as_row()
    print(json.dumps(row, sort_keys=True))
    if args.out:
        report = build_report([RunResult(args.model, args.dataset, row)], "tags")
        report.write(args.out)
    return 0


def cmd_eval_rubric(args) -> int:
    manifest = load_dataset(args.truth)
    row = _rubric_for(_read_jsonl(args.pred), manifest)
    print(json.dumps(row, sort_keys=True))
    if args.out:
        build_report([RunResult(args.model, args.dataset, row)], "rubric").write(args.out)
    return 0


def cmd_eval_judge(args) -> int:
    manifest = load_dataset(args.truth)
    by_id = _aligned(_read_jsonl(args.pred), [r.image_id for r, _ in manifest.records])
    config = JudgeConfig.from_env(tuple(args.generator_id), max_concurrency=args.concurrency)
    items = [(_scene_text(r, manifest), by_id[r.image_id]["caption"]) for r, _ in manifest.records]
    scores = judge_scores(items, config)
    n = len(scores)
    row = {"CoI": sum(s.coi for s in scores) / n, "BMA": sum(s.bma for s in scores) / n,
           "TDO": sum(s.tdo for s in scores) / n}
    print(json.dumps(row, sort_keys=True))
    if args.out:
        build_report([RunResult(args.model, args.dataset, row)], "judged").write(args.out)
    return 0


def cmd_report(args) -> int:
    runs = [r for p in args.runs for r in load_runs_csv(p)]
    report = build_report(runs, args.kind)
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.text)
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    if args.log:
        print(plot_loss_curve(TrainLog.read(args.log), out))
    if args.runs:
        runs = load_runs_csv(args.runs)
        print(plot_ablation(runs, out, kind=args.kind or "rubric"))
    return 0


def cmd_ablate(args) -> int:
    """Train one detector, then a captioner per variant; compare rubric proxies on the test split."""
    data, out = Path(args.data), Path(args.out)
    train, train_images = _load_split(data, "train")
    test, test_images = _load_split(data, "test")
    hoi_cfg = TrainConfig(stage="hoi", epochs=args.hoi_epochs, lr_hoi=args.lr_hoi, batch_size=args.batch_size,
                          seed=args.seed)
    variants = [("full", {}), ("without_hoi_tag", {"without_hoi_tag": True}), ("without_pos", {"without_pos": True})]
    cap_cfgs = {
        name: TrainConfig(stage="caption", epochs=args.caption_epochs, lr_caption=args.lr_caption,
                          batch_size=args.batch_size, seed=args.seed, **kw)
        for name, kw in variants
    }
    _record_config(out, args, hoi=asdict(hoi_cfg), caption={k: asdict(v) for k, v in cap_cfgs.items()})
    t0 = time.perf_counter()
    hoi, hlog = train_hoi_stage(train, train_images, hoi_cfg, out_dir=out / "hoi")
    hlog.write(out / "hoi" / "train_log.csv")
    _write_json(out / "hoi" / "metrics.json", hlog.final_metrics)
    log.info("detector trained in %.0fs: %s", time.perf_counter() - t0, hlog.final_metrics)
    runs = []
    for name, cfg in cap_cfgs.items():
        model, clog = train_caption_stage(train, train_images, hoi, cfg, out_dir=out / name)
        clog.write(out / name / "train_log.csv")
        rows = run_inference(test, test_images, model, GenerationConfig(), without_hoi_tag=cfg.without_hoi_tag)
        (out / name / "test_predictions.jsonl").write_text(inference_jsonl(rows), encoding="utf-8")
        values = _rubric_for(rows, test)
        _write_json(out / name / "metrics.json", {**clog.final_metrics, **values})
        runs.append(RunResult(name, "synthetic-test", values))
        log.info("%s done at %.0fs: %s", name, time.perf_counter() - t0, values)
    report = build_report(runs, "rubric")
    report.write(out / "ablation")
    plot_ablation(runs, out)
    sys.stdout.write(report.text)
    return 0


# -- parser ------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory or manifest JSONL")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file mirroring TrainConfig; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-hoi", dest="lr_hoi", type=float)
    p.add_argument("--lr-caption", dest="lr_caption", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--betas", type=float, nargs=2)
    p.add_argument("--eps", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-box", dest="lambda_box", type=float)
    p.add_argument("--without-hoi-tag", dest="without_hoi_tag", action="store_const", const=True)
    p.add_argument("--without-pos", dest="without_pos", action="store_const", const=True)
    p.add_argument("--fine-tune-all", dest="fine_tune_all", action="store_const", const=True)
    p.add_argument("--no-plots", action="store_true")


def _add_generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-width", type=int, default=1)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--length-penalty", type=float, default=1.0)
    p.add_argument("--act-threshold", type=float, default=0.5)
    p.add_argument("--entity-threshold", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoitag", description="Tag-guided threat description toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build or validate synthetic datasets").add_subparsers(
        dest="action", required=True)
    p = ds.add_parser("build")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=100)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=20)
    p.add_argument("--threat-ratio", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_dataset_build)
    p = ds.add_parser("validate")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_dataset_validate)

    tr = sub.add_parser("train", help="train a stage").add_subparsers(dest="stage", required=True)
    p = tr.add_parser("hoi")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_hoi)
    p = tr.add_parser("caption")
    _add_train_flags(p)
    p.add_argument("--hoi", required=True, help="detector checkpoint")
    p.set_defaults(func=cmd_train_caption)

    p = sub.add_parser("infer", help="detect and describe a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_generation_flags(p)
    p.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="score predictions").add_subparsers(dest="metric", required=True)
    for name, func in (("tags", cmd_eval_tags), ("rubric", cmd_eval_rubric), ("judge", cmd_eval_judge)):
        p = ev.add_parser(name)
        p.add_argument("--pred", required=True)
        p.add_argument("--truth", required=True)
        p.add_argument("--out", help="report stem (writes .txt and .csv)")
        p.add_argument("--model", default="model")
        p.add_argument("--dataset", default="synthetic")
        if name == "judge":
            p.add_argument("--generator-id", action="append", default=[])
            p.add_argument("--concurrency", type=int, default=4)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="tabulate run CSVs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--kind", choices=("judged", "rubric", "tags"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="loss curves and ablation bars")
    p.add_argument("--log")
    p.add_argument("--runs")
    p.add_argument("--kind", choices=("judged", "rubric", "tags"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("ablate", help="full vs without_hoi_tag vs without_pos")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="ablation")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--hoi-epochs", type=int, default=ABLATE_DEFAULTS["hoi_epochs"])
    p.add_argument("--caption-epochs", type=int, default=ABLATE_DEFAULTS["caption_epochs"])
    p.add_argument("--lr-hoi", type=float, default=ABLATE_DEFAULTS["lr_hoi"])
    p.add_argument("--lr-caption", type=float, default=ABLATE_DEFAULTS["lr_caption"])
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2
    if args.command == "plot" and not (args.log or args.runs):
        parser.error("plot needs --log and/or --runs")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DOMAIN_ERRORS + (DomainError, httpx.HTTPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
