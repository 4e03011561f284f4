"""Command-line entry point: ``unger <subcommand> [--config path] [--set k=v ...] [--out dir]``.

Every subcommand stages its outputs in a scratch directory and moves them
into the run directory only on success, then writes a run manifest under
``manifests/``. Failures print one JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from . import pipeline as pl
from .config import RunConfig, load_config
from .corpus import EmbeddingMatrix, save_embeddings
from .fusion import FusionModel, export_integrated
from .generator import GenModel
from .quantizer import save_codebooks, save_table

log = logging.getLogger("unger")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def version_string() -> str:
    """git-describe output when run from a checkout, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Staging:
    """Collects a command's outputs and publishes them into the run directory atomically per file."""

    def __init__(self, out: Path, command: str):
        self.out = out
        self.dir = out / f".staging-{command}-{os.getpid()}"
        self.layout = pl.RunLayout(self.dir)

    def __enter__(self) -> "Staging":
        self.created_out = not self.out.exists()
        shutil.rmtree(self.dir, ignore_errors=True)
        self.dir.mkdir(parents=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.published = self._publish()
        shutil.rmtree(self.dir, ignore_errors=True)
        if exc_type is not None and self.created_out:
            shutil.rmtree(self.out, ignore_errors=True)
        return False

    def _publish(self) -> list[str]:
        published = []
        for src in sorted(self.dir.rglob("*")):
            if src.is_dir():
                continue
            rel = src.relative_to(self.dir)
            dst = self.out / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            os.replace(src, dst)
            published.append(rel.as_posix())
        return published


# -- subcommands ------------------------------------------------------------------
# each takes (cfg, run layout to read, staging layout to write, args) and returns a summary dict


def cmd_synth_data(cfg, run, stage, args):
    corpus, semantic = pl.synth_data(cfg)
    pl.write_data(stage, corpus, semantic)
    return {"n_users": corpus.n_users, "n_items": corpus.n_items}


def cmd_prepare_data(cfg, run, stage, args):
    corpus, semantic = pl.prepare_data(cfg)
    pl.write_data(stage, corpus, semantic)
    return {"n_users": corpus.n_users, "n_items": corpus.n_items, "dropped_users": corpus.dropped_users}


def cmd_train_stage1(cfg, run, stage, args):
    corpus, semantic = pl.read_data(run)
    alpha = pl.stage1_alpha(cfg, cfg.mode)
    if alpha is None:
        return {"skipped": f"mode {cfg.mode} has no Stage I"}
    model = pl.train_fusion(cfg, corpus, semantic, alpha)
    model.save(stage.stage1, {"alpha": alpha, "mode": cfg.mode})
    return {"alpha": alpha}


def cmd_export_embeddings(cfg, run, stage, args):
    corpus, semantic = pl.read_data(run)
    tokens = list(corpus.item_tokens)
    fusion = FusionModel.load(pl._require(run.stage1, "train-stage1")) if cfg.mode != "semantic_only" else None
    collaborative = None
    stage.integrated.parent.mkdir(parents=True, exist_ok=True)
    if cfg.mode in ("collaborative_only", "concat"):
        collaborative = EmbeddingMatrix(export_integrated(fusion).rows, tokens)
        save_embeddings(stage.collaborative, collaborative)
    integrated = pl.integrated_embeddings(cfg, cfg.mode, corpus, semantic, fusion, collaborative)
    save_embeddings(stage.integrated, integrated)
    return {"shape": [integrated.n_items, integrated.dim]}


def cmd_quantize(cfg, run, stage, args):
    corpus, _ = pl.read_data(run)
    integrated = pl.read_embeddings(run.integrated, corpus, "export-embeddings")
    books, table = pl.quantize(cfg, cfg.mode, integrated, list(corpus.item_tokens))
    stage.table.parent.mkdir(parents=True, exist_ok=True)
    save_table(stage.table, table)
    if books is not None:
        save_codebooks(stage.codebooks, books)
    return {"level_sizes": table.level_sizes(), "disambiguated": table.has_disambiguation}


def cmd_train_stage2(cfg, run, stage, args):
    corpus, _ = pl.read_data(run)
    integrated = pl.read_embeddings(run.integrated, corpus, "export-embeddings")
    table = pl.read_table(run, cfg, corpus)
    model = pl.train_generator(cfg, corpus, table, integrated)
    model.save(stage.stage2, {"mode": cfg.mode})
    return {"level_sizes": table.level_sizes()}


def _load_generator(cfg, run):
    corpus, _ = pl.read_data(run)
    table = pl.read_table(run, cfg, corpus)
    model = GenModel.load(pl._require(run.stage2, "train-stage2"))
    return corpus, table, model


def cmd_recommend(cfg, run, stage, args):
    corpus, table, model = _load_generator(cfg, run)
    ranked = pl.recommend(cfg, model, table, corpus)
    pl.write_recommendations(stage.recommendations(cfg.split), corpus, ranked)
    return {"users": len(ranked), "k": max(cfg.ks)}


def cmd_evaluate(cfg, run, stage, args):
    corpus, _ = pl.read_data(run)
    ranked = pl.read_recommendations(run.recommendations(cfg.split), corpus)
    report = pl.metrics(cfg, ranked, corpus)
    stage.metrics.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_text(), end="")
    return report.to_dict()


def cmd_dominance(cfg, run, stage, args):
    corpus, semantic = pl.read_data(run)
    if semantic is None and not args.semantic:
        raise FileNotFoundError("no semantic embeddings in the run directory; pass --semantic")
    if args.semantic:
        semantic = pl.read_embeddings(Path(args.semantic), corpus, "synth-data")
    collab_path = Path(args.collaborative) if args.collaborative else run.collaborative
    integ_path = Path(args.integrated) if args.integrated else run.integrated
    collaborative = pl.read_embeddings(collab_path, corpus, "export-embeddings --set mode=collaborative_only")
    integrated = pl.read_embeddings(integ_path, corpus, "export-embeddings")
    report = pl.dominance(cfg, semantic, collaborative, integrated)
    stage.dominance.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_text(), end="")
    return {"max_share": report.max_share}


def cmd_bench_cost(cfg, run, stage, args):
    corpus, table, model = _load_generator(cfg, run)
    report = pl.cost_report(cfg, model, table, corpus)
    stage.cost.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"unified {report['unified']['mean_ms']:.2f} ms/query, dual {report['dual']['mean_ms']:.2f} ms/query "
          f"(x{report['latency_ratio']:.2f})")
    return {"latency_ratio": report["latency_ratio"]}


def cmd_ablate(cfg, run, stage, args):
    if run.interactions.exists():
        corpus, semantic = pl.read_data(run)
    else:
        log.info("no data in the run directory; generating the synthetic corpus")
        corpus, semantic = pl.synth_data(cfg)
    results = pl.run_ablation(cfg, corpus, semantic)
    stage.ablation.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = pl.ablation_table(results, cfg.ks)
    (stage.root / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return {"modes": list(results)}


COMMANDS = {
    "prepare-data": (cmd_prepare_data, "filter a user/item/timestamp log and bind semantic embeddings"),
    "synth-data": (cmd_synth_data, "generate the planted-category synthetic corpus"),
    "train-stage1": (cmd_train_stage1, "train collaborative embeddings with semantic alignment"),
    "export-embeddings": (cmd_export_embeddings, "write the integrated embeddings for the configured mode"),
    "quantize": (cmd_quantize, "hierarchical k-means codes and the item code table"),
    "train-stage2": (cmd_train_stage2, "train the code generator"),
    "recommend": (cmd_recommend, "constrained beam search for every user"),
    "evaluate": (cmd_evaluate, "Recall@K and NDCG@K of stored recommendations"),
    "dominance": (cmd_dominance, "modality dominance of the integrated embeddings"),
    "bench-cost": (cmd_bench_cost, "unified versus two-stream decoding cost"),
    "ablate": (cmd_ablate, "train and evaluate every variant and tabulate them"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unger", description="Generative recommendation with unified item codes.")
    parser.add_argument("--version", action="version", version=f"unger {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", default="default", help="base configuration before --config (default, desk)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration field; repeatable")
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        if name == "dominance":
            p.add_argument("--semantic", help="semantic embeddings (default: run data)")
            p.add_argument("--collaborative", help="collaborative embeddings (default: run embeddings)")
            p.add_argument("--integrated", help="integrated embeddings (default: run embeddings)")
    return parser


def write_manifest(out: Path, command: str, cfg: RunConfig, argv: list[str], wall: float, outputs: list[str],
                   summary: dict) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": version_string(),
        "wall_time_s": round(wall, 3),
        "outputs": outputs,
        "summary": summary,
    }
    path = out / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fail(kind: str, command: str | None, message: str, code: int) -> int:
    line = json.dumps({"error": kind, "command": command, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", None, str(exc), 2)
    if args.command is None:
        return _fail("UsageError", None, f"choose a subcommand: {', '.join(COMMANDS)}", 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    start = time.perf_counter()
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.overrides, args.preset)
        handler = COMMANDS[args.command][0]
        with Staging(out, args.command) as staging:
            summary = handler(cfg, pl.RunLayout(out), staging.layout, args)
        write_manifest(out, args.command, cfg, argv, time.perf_counter() - start, staging.published, summary)
    except KeyboardInterrupt:
        return _fail("Interrupted", args.command, "interrupted", 130)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, args.command, str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
