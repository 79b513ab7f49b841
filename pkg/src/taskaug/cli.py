"""Command-line front end.

Subcommands: pretrain, meta-train, eval, finetune, ablate-reg, report.
Every subcommand takes `--config FILE`, repeatable `--set key=value`
overrides, and `--out DIR`; the TASKAUG_OUT environment variable supplies
the default output directory when neither the config nor --out names one.
Each run writes a manifest (resolved config, seed, content hashes of the
input files) next to its artifacts.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from taskaug.config import (
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    load_config,
)
from taskaug.models import init_params, load_checkpoint, save_checkpoint
from taskaug.report import (
    append_results,
    comparison_table,
    load_results,
    render_accuracy_figure,
    result_row,
)
from taskaug.tasks import DatasetHandle, domain_splits, sample_episode
from taskaug.train import (
    EvalReport,
    adapt_meta_finetune,
    derive_eval_seed,
    ensure_head_params,
    evaluate,
    finetune_baseline,
    meta_train,
    pretrain_encoder,
)

ENV_OUT = "TASKAUG_OUT"


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise ConfigError(message)


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", default=None, help="JSON experiment config file")
    sp.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override (repeatable), e.g. augment.t_max=0",
    )
    sp.add_argument(
        "--out", default=None, help=f"output directory (default: config out_dir or ${ENV_OUT})"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskaug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train the encoder on the source domain classes")
    _add_common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("meta-train", help="episodic training with adversarial task ascent")
    _add_common(sp)
    sp.add_argument("--init", default=None, help="checkpoint to start from (e.g. pretrained encoder)")
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("eval", help="episodic evaluation of a checkpoint on named domains")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True, help="model checkpoint to evaluate")
    sp.add_argument(
        "--domain",
        dest="domains",
        action="append",
        default=None,
        help="domain to evaluate on: 'source' or a target name (repeatable; default all)",
    )
    sp.add_argument("--label", default=None, help="model name for result rows (default: head kind)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("finetune", help="per-task fine-tuning comparison on one domain")
    _add_common(sp)
    sp.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
    sp.add_argument("--model", default=None, help="meta-trained checkpoint to compare against")
    sp.add_argument("--domain", default=None, help="domain name (default: first target)")
    sp.add_argument("--tasks", type=int, default=20, help="number of evaluation tasks")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser(
        "ablate-reg", help="train and evaluate the three distance-penalty variants"
    )
    _add_common(sp)
    sp.add_argument("--init", default=None, help="checkpoint to start each variant from")
    sp.add_argument("--domain", default=None, help="domain name (default: first target)")
    sp.set_defaults(func=cmd_ablate_reg)

    sp = sub.add_parser("report", help="aggregate result CSVs into a table and figure")
    _add_common(sp)
    sp.add_argument(
        "--results",
        action="append",
        default=None,
        help="result CSV to aggregate (repeatable; default <out>/results.csv)",
    )
    sp.set_defaults(func=cmd_report)
    return parser


# ---------------------------------------------------------------------------
# Shared plumbing


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides, default_out=os.environ.get(ENV_OUT))
    if args.out:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _blob_sha1(path: Path) -> str:
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_manifest(
    out: Path, command: str, cfg: ExperimentConfig, args, inputs: dict[str, str | None], **extra
) -> Path:
    hashed = {
        name: {"path": str(p), "sha1": _blob_sha1(Path(p))}
        for name, p in inputs.items()
        if p is not None
    }
    manifest = {
        "command": command,
        "overrides": list(args.overrides),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "inputs": hashed,
        **extra,
    }
    path = out / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _domain_handles(cfg: ExperimentConfig, split: str) -> dict[str, DatasetHandle]:
    handles = {"source": domain_splits(cfg.data.source, cfg.data.images_per_class)[split]}
    for name, spec in cfg.data.targets.items():
        handles[name] = domain_splits(spec, cfg.data.images_per_class)[split]
    return handles


def _pick_domains(cfg: ExperimentConfig, requested: list[str] | None) -> list[str]:
    available = ["source"] + sorted(cfg.data.targets)
    if requested is None:
        return available
    for name in requested:
        if name not in available:
            raise ConfigError(f"unknown domain '{name}'; available: {available}")
    return requested


def _default_domain(cfg: ExperimentConfig) -> str:
    return sorted(cfg.data.targets)[0] if cfg.data.targets else "source"


def _domain_seed(seed: int, domain: str) -> int:
    ss = np.random.SeedSequence((seed, zlib.crc32(domain.encode())))
    return int(ss.generate_state(1, np.uint64)[0])


def _load_params(path: str, what: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} checkpoint not found: {p}")
    return load_checkpoint(p)


def _echo_eval(label: str, domain: str, cfg: ExperimentConfig, report: EvalReport) -> None:
    t = cfg.train
    print(
        f"{label} on {domain} ({t.way}-way {t.shot}-shot, {report.episodes} episodes): "
        f"{report.mean_accuracy:.4f} +/- {report.ci95_halfwidth:.4f}"
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_pretrain(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(cfg)
    splits = domain_splits(cfg.data.source, cfg.data.images_per_class)
    encoder = pretrain_encoder(splits["train"], cfg.train)
    ckpt = out / "encoder.ckpt"
    save_checkpoint(encoder, ckpt)
    _write_manifest(out, "pretrain", cfg, args, {"config": args.config}, outputs=[str(ckpt)])
    print(f"encoder checkpoint written to {ckpt}")
    return 0


def cmd_meta_train(args) -> int:
    cfg = _load_experiment(args)
    head = cfg.train.head
    if head.kind == "uniform_random":
        raise ConfigError("the uniform_random diagnostic head has nothing to train")
    out = _out_dir(cfg)
    if args.init:
        loaded = _load_params(args.init, "init")
        if loaded.config != cfg.train.model:
            raise ConfigError(
                f"checkpoint model {loaded.config} does not match configured model {cfg.train.model}"
            )
        init = ensure_head_params(loaded, head, seed=cfg.seed)
    else:
        init = init_params(cfg.train.model, head, seed=cfg.seed)
    splits = domain_splits(cfg.data.source, cfg.data.images_per_class)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    params = meta_train(splits["train"], init, cfg.train, val_data=splits["val"], log_path=log_path)
    ckpt = out / "model.ckpt"
    save_checkpoint(params, ckpt)
    _write_manifest(
        out,
        "meta-train",
        cfg,
        args,
        {"config": args.config, "init": args.init},
        outputs=[str(ckpt), str(log_path)],
    )
    print(f"model checkpoint written to {ckpt}")
    print(f"training log written to {log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(cfg)
    params = _load_params(args.checkpoint, "model")
    label = args.label or params.head.kind
    domains = _pick_domains(cfg, args.domains)
    handles = _domain_handles(cfg, "test")
    t = cfg.train
    results_csv = out / "results.csv"
    rows = []
    for domain in domains:
        report = evaluate(
            params,
            params.head,
            handles[domain],
            episodes=t.eval_episodes,
            way=t.way,
            shot=t.shot,
            queries_per_class=t.eval_queries,
            seed=_domain_seed(cfg.seed, domain),
        )
        row = result_row(label, domain, t.way, t.shot, report, cfg.seed)
        rows.append(row)
        report_json = dict(row, per_episode_accuracies=report.per_episode_accuracies.tolist())
        (out / f"eval_{label}_{domain}.json").write_text(json.dumps(report_json, indent=2) + "\n")
        _echo_eval(label, domain, cfg, report)
    append_results(results_csv, rows)
    _write_manifest(
        out,
        "eval",
        cfg,
        args,
        {"config": args.config, "checkpoint": args.checkpoint},
        outputs=[str(results_csv)],
        domains=domains,
        label=label,
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(cfg)
    encoder = _load_params(args.encoder, "encoder")
    meta = _load_params(args.model, "model") if args.model else None
    domain = args.domain or _default_domain(cfg)
    _pick_domains(cfg, [domain])
    handle = _domain_handles(cfg, "test")[domain]
    t = cfg.train
    if args.tasks < 1:
        raise ConfigError("--tasks must be positive")
    base_seed = _domain_seed(cfg.seed, domain)

    methods: dict[str, list[float]] = {"finetune_baseline": []}
    if meta is not None:
        methods[meta.head.kind] = []
        methods[f"{meta.head.kind}+adapt"] = []
    protocol = None
    for i in range(args.tasks):
        task = sample_episode(handle, t.way, t.shot, t.eval_queries, derive_eval_seed(base_seed, i))
        base = finetune_baseline(encoder, task, seed=derive_eval_seed(cfg.seed, i))
        protocol = protocol or {
            "optimizer": base.optimizer,
            "lr": base.lr,
            "momentum": base.momentum,
            "epochs": base.epochs_run,
            "pseudo_per_epoch": base.pseudo_per_epoch,
            "support_count": base.support_count,
        }
        methods["finetune_baseline"].append(base.accuracy)
        if meta is not None:
            plain = adapt_meta_finetune(meta, meta.head, task, epochs=0)
            adapted = adapt_meta_finetune(
                meta, meta.head, task, seed=derive_eval_seed(cfg.seed, i)
            )
            methods[meta.head.kind].append(plain.accuracy)
            methods[f"{meta.head.kind}+adapt"].append(adapted.accuracy)

    finetune_csv = out / f"finetune_{domain}.csv"
    rows = []
    for name, accs in methods.items():
        report = EvalReport.from_accuracies(np.asarray(accs))
        rows.append(result_row(name, domain, t.way, t.shot, report, cfg.seed))
        _echo_eval(name, domain, cfg, report)
    append_results(finetune_csv, rows)
    append_results(out / "results.csv", rows)
    _write_manifest(
        out,
        "finetune",
        cfg,
        args,
        {"config": args.config, "encoder": args.encoder, "model": args.model},
        outputs=[str(finetune_csv)],
        domain=domain,
        tasks=args.tasks,
        protocol=protocol,
    )
    return 0


def cmd_ablate_reg(args) -> int:
    cfg = _load_experiment(args)
    head = cfg.train.head
    if head.kind == "uniform_random":
        raise ConfigError("the uniform_random diagnostic head has nothing to train")
    out = _out_dir(cfg)
    domain = args.domain or _default_domain(cfg)
    _pick_domains(cfg, [domain])
    splits = domain_splits(cfg.data.source, cfg.data.images_per_class)
    handle = _domain_handles(cfg, "test")[domain]
    t = cfg.train
    if args.init:
        loaded = _load_params(args.init, "init")
        init = ensure_head_params(loaded, head, seed=cfg.seed)
    else:
        init = init_params(cfg.train.model, head, seed=cfg.seed)

    results_csv = out / "results.csv"
    rows = []
    for kind in ("none", "euclid", "mmd"):
        augment = dataclasses.replace(t.augment, reg_kind=kind, gamma=1.0)
        variant_cfg = dataclasses.replace(t, augment=augment)
        params = meta_train(splits["train"], init.clone(), variant_cfg, val_data=splits["val"])
        report = evaluate(
            params,
            head,
            handle,
            episodes=t.eval_episodes,
            way=t.way,
            shot=t.shot,
            queries_per_class=t.eval_queries,
            seed=_domain_seed(cfg.seed, domain),
        )
        label = f"{head.kind}+reg[{kind}]"
        rows.append(result_row(label, domain, t.way, t.shot, report, cfg.seed))
        _echo_eval(label, domain, cfg, report)
    append_results(results_csv, rows)
    _write_manifest(
        out,
        "ablate-reg",
        cfg,
        args,
        {"config": args.config, "init": args.init},
        outputs=[str(results_csv)],
        domain=domain,
    )
    return 0


def cmd_report(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(cfg)
    paths = args.results or [out / "results.csv"]
    try:
        df = load_results(paths)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    table = comparison_table(df)
    table_csv = out / "comparison.csv"
    table.to_csv(table_csv, index=False)
    figure = render_accuracy_figure(df, out / "accuracy_by_domain.png")
    _write_manifest(
        out,
        "report",
        cfg,
        args,
        {"config": args.config, **{f"results[{i}]": str(p) for i, p in enumerate(paths)}},
        outputs=[str(table_csv), str(figure)],
    )
    print(table.to_string(index=False))
    print(f"comparison table written to {table_csv}")
    print(f"figure written to {figure}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary maps failures to exit 2
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
