"""Operator entry points: prepare, train, eval, team {...}, report.

Every command writes its artifacts under --out and finishes by atomically
writing manifest.json listing them; exit code 0 means the manifest exists and
no error record was written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import pipeline as pipeline_mod
from . import teaming as teaming_mod
from importlib import import_module

# the package re-exports the train() function under the same name as the
# module, so resolve the module explicitly
train_mod = import_module("teamid.train")
from .losses import LossConfig


class CliError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str = ""
    dataset_fingerprint: str = ""
    artifact_paths: list[str] = field(default_factory=list)
    metrics: dict | None = None

    def write(self, out_dir: Path) -> Path:
        """Atomic write: manifest lands last, after all listed artifacts."""
        target = out_dir / "manifest.json"
        tmp = out_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(asdict(self), indent=2))
        os.replace(tmp, target)
        return target


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_seed(args) -> int:
    if args.seed is None:
        if getattr(args, "ci", False):
            raise CliError("--seed is required in CI mode")
        return 0
    return args.seed


def _load_view(args) -> tuple[data_mod.DatasetView, str]:
    path = Path(args.dataset)
    if not path.exists():
        raise CliError(f"dataset {path} not found")
    return data_mod.load_dataset(path), _hash_file(path)


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic is not None:
        opts = {}
        for tok in args.synthetic:
            key, _, value = tok.partition("=")
            if not value:
                raise CliError(f"bad --synthetic token {tok!r}, want key=value")
            opts[key] = int(value)
        seed = opts.pop("seed", _require_seed(args))
        view = data_mod.generate_synthetic(
            num_brands=opts.pop("brands"), ids_per_brand=opts.pop("ids"),
            views_per_id=opts.pop("views"), seed=seed,
            resolution=opts.pop("resolution", args.resolution),
            holdout_ids_per_brand=opts.pop("holdout", 0))
        if opts:
            raise CliError(f"unknown --synthetic keys: {sorted(opts)}")
    else:
        if args.root is None or args.layout is None:
            raise CliError("need either --synthetic or --layout with --root")
        view = data_mod.ingest_directory(
            args.root, args.layout, resolution=args.resolution,
            map_out=out / "identity_map.json")
    ds_path = out / "dataset.npz"
    data_mod.save_dataset(view, ds_path)
    stats = {
        "num_samples": len(view),
        "num_identities": view.num_identities,
        "train_identities": len(view.identities("train")),
        "query_identities": len(view.identities("query")),
        "gallery_identities": len(view.identities("gallery")),
        "num_attribute_classes": view.num_attribute_classes,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    RunManifest(
        command="prepare", config_hash=_hash_text(json.dumps(vars(args), default=str)),
        dataset_fingerprint=_hash_file(ds_path),
        artifact_paths=[str(ds_path), str(out / "stats.json")],
        metrics=stats).write(out)
    print(json.dumps(stats, indent=2))
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    view, fingerprint = _load_view(args)
    config = (train_mod.parse_train_config(args.config)
              if args.config else train_mod.TrainConfig())
    if args.recipe:
        config.recipe = args.recipe
    if args.epochs is not None:
        config = replace(config, total_epochs=args.epochs,
                         warmup_epochs=min(config.warmup_epochs,
                                           max(1, args.epochs // 10)),
                         decay_milestones=[m for m in config.decay_milestones
                                           if m < args.epochs])
    config.seed = _require_seed(args)
    config.validate()

    train_samples = view.split("train")
    if not train_samples:
        raise CliError("dataset has no train split")
    if config.recipe == "brand_proxynca" \
            and any(s.brand_id is None for s in train_samples):
        raise CliError("recipe brand_proxynca requires brand labels")
    if config.recipe == "reid_triplet" \
            and any(s.identity_id is None for s in train_samples):
        raise CliError("recipe reid_triplet requires identity labels")

    resolution = train_samples[0].resolution
    if config.recipe == "brand_proxynca":
        descriptor = pipeline_mod.gate_descriptor(resolution, args.embedding_dim)
    else:
        descriptor = pipeline_mod.expert_descriptor(resolution, args.embedding_dim)
    result = train_mod.train(view, descriptor, LossConfig(), config,
                             out_dir=out, reference_mode=args.reference)
    loss_csv = out / "loss.csv"
    train_mod.export_loss_csv(result.state, loss_csv)
    (out / "state.json").write_text(result.state.to_json())
    if config.recipe == "brand_proxynca":
        gate = teaming_mod.AttributeGate("brand", result.model, result.bank)
        gate.save(out / "gate_brand.npz")
    artifacts = sorted(str(p) for p in out.glob("*.npz")) + \
        [str(loss_csv), str(out / "state.json")]
    RunManifest(
        command="train",
        config_hash=_hash_text(json.dumps(asdict(config))),
        dataset_fingerprint=fingerprint,
        artifact_paths=artifacts).write(out)
    return 0


def _eval_report(view, model, protocol: str, seed: int) -> tuple:
    if protocol == "cars196_zsl":
        samples = view.split("gallery") + view.split("query")
        if not samples:
            raise CliError("dataset has no evaluation split")
        embs = model_mod.embed(model, samples, normalize=True)
        labels = np.array([s.identity_id for s in samples])
        k = len(set(labels.tolist()))
        predicted = metrics_mod.kmeans_cluster(embs, k, seed=seed)
        report = metrics_mod.EvaluationReport(
            protocol=protocol,
            nmi=metrics_mod.nmi(metrics_mod.ClusterAssignment(
                predicted=predicted, truth=labels)),
            recall_at=metrics_mod.recall_at_k(embs, labels, [1, 2, 4, 8]))
        return report, None
    queries = view.split("query")
    gallery = view.split("gallery")
    if not queries or not gallery:
        raise CliError("veri776 protocol needs query and gallery splits")
    if any(s.camera_id is None for s in queries + gallery):
        raise CliError("veri776 protocol requires camera ids")
    q = model_mod.embed(model, queries, normalize=True)
    g = model_mod.embed(model, gallery, normalize=True)
    result = metrics_mod.map_cmc(
        q, g,
        np.array([s.identity_id for s in queries]),
        np.array([s.identity_id for s in gallery]),
        np.array([s.camera_id for s in queries]),
        np.array([s.camera_id for s in gallery]),
        protocol="veri776")
    report = metrics_mod.EvaluationReport(
        protocol=protocol, map_score=result.map_score,
        cmc=result.cmc[:20].tolist(),
        excluded_queries=result.excluded_queries)
    return report, result


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    view, fingerprint = _load_view(args)
    model, _ = model_mod.load_checkpoint(args.checkpoint)
    seed = _require_seed(args)
    report, result = _eval_report(view, model, args.protocol, seed)
    report_path = out / "report.json"
    report_path.write_text(report.to_json())
    artifacts = [str(report_path)]
    if args.rankings_csv and result is not None:
        csv_path = out / "rankings.csv"
        metrics_mod.export_rankings_csv(result.rankings, csv_path)
        artifacts.append(str(csv_path))
    if args.plots:
        artifacts += _emit_plots(out, report)
    RunManifest(
        command="eval", config_hash=_hash_text(json.dumps(vars(args), default=str)),
        dataset_fingerprint=fingerprint, artifact_paths=artifacts,
        metrics=json.loads(report.to_json())).write(out)
    print(report.to_json())
    return 0


def _emit_plots(out: Path, report, loss_csv: str | None = None) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if report is not None and report.cmc:
        fig, ax = plt.subplots()
        ks = np.arange(1, len(report.cmc) + 1)
        ax.plot(ks, report.cmc, marker="o")
        ax.set_xlabel("rank k"), ax.set_ylabel("CMC"), ax.set_ylim(0, 1.02)
        fig.savefig(out / "cmc.png", dpi=120)
        plt.close(fig)
        written.append(str(out / "cmc.png"))
    if report is not None and report.recall_at:
        fig, ax = plt.subplots()
        keys = sorted(report.recall_at)
        bars = [report.recall_at[k] for k in keys]
        labels = [f"R@{k}" for k in keys]
        if report.nmi is not None:
            bars, labels = [report.nmi] + bars, ["NMI"] + labels
        ax.bar(labels, bars)
        ax.set_ylim(0, 1.02)
        fig.savefig(out / "retrieval.png", dpi=120)
        plt.close(fig)
        written.append(str(out / "retrieval.png"))
    if loss_csv and Path(loss_csv).exists():
        rows = np.genfromtxt(loss_csv, delimiter=",", names=True)
        fig, ax = plt.subplots()
        ax.plot(rows["step"], rows["loss"])
        ax.set_xlabel("step"), ax.set_ylabel("loss")
        fig.savefig(out / "loss.png", dpi=120)
        plt.close(fig)
        written.append(str(out / "loss.png"))
    return written


def _parse_expert(spec: str, base: Path) -> teaming_mod.ExpertDescriptor:
    """Expert spec: expert_id|dimension|predicate|checkpoint_path"""
    parts = [p.strip() for p in spec.split("|")]
    if len(parts) != 4:
        raise CliError(
            f"bad --expert spec {spec!r}; want id|dimension|predicate|ckpt")
    eid, dim, pred, ckpt = parts
    ckpt_path = Path(ckpt) if Path(ckpt).is_absolute() else base / ckpt
    if not ckpt_path.exists():
        raise CliError(f"expert checkpoint {ckpt_path} not found")
    model, digest = model_mod.load_checkpoint(ckpt_path)
    return teaming_mod.ExpertDescriptor(
        expert_id=eid, subspace=teaming_mod.SubspacePredicate.parse(dim, pred),
        checkpoint_ref=digest, checkpoint_path=str(ckpt_path),
        embedding_dim=model.descriptor.embedding_dim)


def cmd_team(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=f"team {args.team_command}")
    base = Path.cwd()

    if args.team_command == "assemble":
        experts = [_parse_expert(e, base) for e in args.expert]
        gates = {}
        gate_paths = {}
        for g in args.gate or []:
            dim, _, path = g.partition("=")
            gates[dim] = teaming_mod.AttributeGate.load(path)
            gate_paths[dim] = str(Path(path).resolve())
        registry = teaming_mod.TeamRegistry(
            experts=experts, gates=gates, routing_policy=args.policy)
        registry.validate()
        reg_path = out / "registry.txt"
        teaming_mod.save_registry(registry, reg_path, gate_paths)
        manifest.artifact_paths.append(str(reg_path))
    elif args.team_command == "add-expert":
        registry = teaming_mod.load_registry(args.registry)
        gate_paths = _gate_paths_from_manifest(args.registry)
        new = teaming_mod.add_expert(registry, _parse_expert(args.expert, base))
        reg_path = out / "registry.txt"
        teaming_mod.save_registry(new, reg_path, gate_paths)
        manifest.artifact_paths.append(str(reg_path))
    elif args.team_command == "route":
        registry = teaming_mod.load_registry(args.registry)
        view, manifest.dataset_fingerprint = _load_view(args)
        samples = _eval_samples(view)
        lines = ["sample_index | selected | weights | evidence"]
        for i, s in enumerate(samples):
            d = teaming_mod.route(registry, s)
            weights = ",".join(f"{k}={v:.3f}" for k, v in sorted(d.weights.items()))
            ev = ",".join(f"{dim}={lab}@{conf:.3f}"
                          for dim, (lab, conf) in d.gating_evidence.items())
            lines.append(f"{i} | {';'.join(d.selected)} | {weights} | {ev}")
        route_path = out / "routes.txt"
        route_path.write_text("\n".join(lines) + "\n")
        manifest.artifact_paths.append(str(route_path))
    elif args.team_command == "identify":
        registry = teaming_mod.load_registry(args.registry)
        view, manifest.dataset_fingerprint = _load_view(args)
        queries, gallery = view.split("query"), view.split("gallery")
        if not queries or not gallery:
            raise CliError("identify needs query and gallery splits")
        result = pipeline_mod.identify(registry, queries, gallery,
                                       protocol=args.protocol)
        report = metrics_mod.EvaluationReport(
            protocol=args.protocol, map_score=result.map_score,
            cmc=result.cmc[:20].tolist(),
            excluded_queries=result.excluded_queries)
        report_path = out / "report.json"
        report_path.write_text(report.to_json())
        manifest.metrics = json.loads(report.to_json())
        manifest.artifact_paths.append(str(report_path))
        print(report.to_json())
    else:
        raise CliError(f"unknown team subcommand {args.team_command!r}")
    manifest.config_hash = _hash_text(json.dumps(vars(args), default=str))
    manifest.write(out)
    return 0


def _eval_samples(view):
    samples = view.split("query") + view.split("gallery")
    return samples if samples else view.samples


def _gate_paths_from_manifest(path) -> dict[str, str]:
    gate_paths = {}
    base = Path(path).parent
    for line in Path(path).read_text().splitlines():
        parts = [p.strip() for p in line.split("|")]
        if parts and parts[0] == "gate":
            p = parts[2]
            gate_paths[parts[1]] = p if Path(p).is_absolute() else str(base / p)
    return gate_paths


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = None
    if args.eval_report:
        raw = json.loads(Path(args.eval_report).read_text())
        report = metrics_mod.EvaluationReport(
            protocol=raw.get("protocol", "cars196_zsl"),
            nmi=raw.get("nmi"),
            recall_at={int(k): v for k, v in raw.get("recall_at", {}).items()},
            map_score=raw.get("map"), cmc=raw.get("cmc", []))
    artifacts = _emit_plots(out, report, loss_csv=args.loss_csv)
    if not artifacts:
        raise CliError("nothing to plot; pass --eval-report and/or --loss-csv")
    RunManifest(command="report",
                config_hash=_hash_text(json.dumps(vars(args), default=str)),
                artifact_paths=artifacts).write(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teamid",
        description="Teamed-classifier vehicle identification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--ci", action="store_true",
                       help="CI mode: --seed becomes mandatory")

    p = sub.add_parser("prepare", help="ingest or generate a dataset")
    common(p)
    p.add_argument("--synthetic", nargs="+", metavar="KEY=VAL",
                   help="synthetic generator: brands= ids= views= [seed= holdout= resolution=]")
    p.add_argument("--layout", choices=["cars196", "veri776"])
    p.add_argument("--root", help="dataset root directory")
    p.add_argument("--resolution", type=int, default=224)

    p = sub.add_parser("train", help="run a training recipe")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset.npz from prepare")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--recipe", choices=list(train_mod.RECIPES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--embedding-dim", type=int, default=512)
    p.add_argument("--reference", action="store_true",
                   help="single-threaded bitwise-reproducible mode")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=list(metrics_mod.PROTOCOLS),
                   default="cars196_zsl")
    p.add_argument("--rankings-csv", action="store_true")
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("team", help="registry assembly and gated inference")
    tsub = p.add_subparsers(dest="team_command", required=True)
    pa = tsub.add_parser("assemble")
    common(pa)
    pa.add_argument("--expert", action="append", required=True,
                    metavar="ID|DIM|PREDICATE|CKPT")
    pa.add_argument("--gate", action="append", metavar="DIM=GATE_NPZ")
    pa.add_argument("--policy", choices=list(teaming_mod.ROUTING_POLICIES),
                    default="single_best")
    pb = tsub.add_parser("add-expert")
    common(pb)
    pb.add_argument("--registry", required=True)
    pb.add_argument("--expert", required=True, metavar="ID|DIM|PREDICATE|CKPT")
    pc = tsub.add_parser("route")
    common(pc)
    pc.add_argument("--registry", required=True)
    pc.add_argument("--dataset", required=True)
    pd = tsub.add_parser("identify")
    common(pd)
    pd.add_argument("--registry", required=True)
    pd.add_argument("--dataset", required=True)
    pd.add_argument("--protocol", choices=list(metrics_mod.PROTOCOLS),
                    default="cars196_zsl")

    p = sub.add_parser("report", help="emit plots from run artifacts")
    common(p)
    p.add_argument("--eval-report", help="report.json from eval/identify")
    p.add_argument("--loss-csv", help="loss.csv from train")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
               "team": cmd_team, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except (CliError, ValueError, RuntimeError, FileNotFoundError,
            data_mod.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
