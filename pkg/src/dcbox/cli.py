"""
Command-line interface for dcbox
"""

import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from .autoencoder import load_checkpoint, save_checkpoint
from .clustering import ClusterModel, assign
from .config import configure_logging, parse_config
from .data import export_assignments, export_embeddings, export_pca, read_labels
from .exceptions import DcboxError
from .metrics import acc, nmi
from .models import PostTraining, RunConfig
from .pipeline import (
    RunSetup,
    finetune,
    infer_features,
    init_centroids_from_pretrained,
    output_dir_for,
    post_training_recluster,
    prepare_run,
    pretrain,
    resolve_selector,
    run_case_study,
)
from .presets import preset_names


logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcbox", description="Deep clustering toolbox: composable building blocks for deep clustering"
    )
    parser.add_argument("--log-level", default=None, help="Log level (default: DCBOX_LOG_LEVEL or INFO)")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    def with_config(sub: argparse.ArgumentParser):
        sub.add_argument("--config", required=True, help="Run configuration file (key = value)")
        sub.add_argument("--output-dir", help="Override the configured output directory")

    run_parser = subparsers.add_parser("run", help="Full pipeline: pretrain, fine-tune, re-cluster, evaluate")
    with_config(run_parser)

    pretrain_parser = subparsers.add_parser("pretrain", help="Pretrain the autoencoder on the non-clustering loss")
    with_config(pretrain_parser)

    finetune_parser = subparsers.add_parser("finetune", help="Fine-tune a pretrained checkpoint with clustering losses")
    with_config(finetune_parser)
    finetune_parser.add_argument("--checkpoint", required=True, help="Checkpoint written by 'pretrain'")

    cluster_parser = subparsers.add_parser("cluster", help="Cluster a dataset with a trained encoder")
    with_config(cluster_parser)
    cluster_parser.add_argument("--checkpoint", required=True, help="Trained checkpoint")

    export_parser = subparsers.add_parser("export-embeddings", help="Write embeddings and a 2-D PCA projection")
    with_config(export_parser)
    export_parser.add_argument("--checkpoint", required=True, help="Trained checkpoint")

    evaluate_parser = subparsers.add_parser("evaluate", help="NMI and ACC of predicted against true labels")
    evaluate_parser.add_argument("--pred", required=True, help="CSV with predicted cluster ids")
    evaluate_parser.add_argument("--truth", required=True, help="CSV with true labels")
    evaluate_parser.add_argument("--pred-column", help="Column to read from the prediction file")
    evaluate_parser.add_argument("--truth-column", help="Column to read from the truth file")

    subparsers.add_parser("presets", help="List method presets")
    return parser


def _load_config(args) -> RunConfig:
    config = parse_config(args.config)
    if args.output_dir:
        config = config.model_copy(update={"output_dir": args.output_dir})
    return config


def _restore(setup: RunSetup, checkpoint: str):
    autoencoder = setup.new_autoencoder()
    centroids = load_checkpoint(checkpoint, autoencoder)
    selector = resolve_selector(setup.config, autoencoder)
    return autoencoder, centroids, selector


def _cluster_restored(setup: RunSetup, autoencoder, centroids, selector) -> ClusterModel:
    """Nearest stored centroid, or a fresh k-means when the checkpoint has none"""
    plan = setup.plan
    if centroids is not None:
        features = infer_features(autoencoder, setup.samples, selector)
        labels, sq = assign(features, centroids)
        return ClusterModel(centroids=centroids, assignments=labels, inertia=float(sq.sum()))
    return init_centroids_from_pretrained(
        autoencoder, setup.samples, plan.n_clusters, plan.seed, selector, plan.kmeans_restarts
    )


def cmd_run(args) -> int:
    config = _load_config(args)
    report = run_case_study(config)
    out = output_dir_for(config)
    print(f"Report written to {out / 'report.json'}")
    if report.nmi is not None:
        print(f"nmi={report.nmi:.4f}, acc={report.acc:.4f}")
    return 0


def cmd_pretrain(args) -> int:
    setup = prepare_run(_load_config(args))
    autoencoder = setup.new_autoencoder()
    resolve_selector(setup.config, autoencoder)
    result = pretrain(
        setup.plan, setup.spec, setup.samples, autoencoder, setup.train_indices, setup.holdout_indices
    )
    path = setup.output_dir / "pretrained.dcae"
    save_checkpoint(path, result.autoencoder)
    print(f"Pretrained for {result.steps} steps, checkpoint written to {path}")
    return 0


def cmd_finetune(args) -> int:
    setup = prepare_run(_load_config(args))
    autoencoder, centroids, selector = _restore(setup, args.checkpoint)
    initial = _cluster_restored(setup, autoencoder, centroids, selector)
    tuned = finetune(setup.plan, autoencoder, setup.samples, initial, selector, setup.train_indices)
    out = setup.output_dir
    save_checkpoint(out / "checkpoint.dcae", autoencoder, tuned.cluster_model.centroids)
    assignments = tuned.cluster_model.assignments
    export_assignments(out / "assignments.csv", assignments, assignments)
    print(f"Fine-tuned for {tuned.steps} steps ({tuned.update_events} cluster updates), output in {out}")
    return 0


def cmd_cluster(args) -> int:
    setup = prepare_run(_load_config(args))
    autoencoder, centroids, selector = _restore(setup, args.checkpoint)
    in_training = _cluster_restored(setup, autoencoder, centroids, selector)
    plan = setup.plan
    if plan.post_training == PostTraining.NONE and centroids is None:
        final = in_training
    else:
        recluster_plan = plan
        if plan.post_training == PostTraining.NONE:
            recluster_plan = plan.model_copy(update={"post_training": PostTraining.RERUN_KMEANS})
        final = post_training_recluster(autoencoder, setup.samples, recluster_plan, in_training, selector)
    path = setup.output_dir / "assignments.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    export_assignments(path, in_training.assignments, final.assignments)
    sizes = np.bincount(final.assignments, minlength=plan.n_clusters).tolist()
    print(f"Cluster sizes {sizes}, assignments written to {path}")
    return 0


def cmd_export(args) -> int:
    setup = prepare_run(_load_config(args))
    autoencoder, centroids, selector = _restore(setup, args.checkpoint)
    model = _cluster_restored(setup, autoencoder, centroids, selector)
    features = infer_features(autoencoder, setup.samples, selector)
    out = setup.output_dir
    out.mkdir(parents=True, exist_ok=True)
    export_embeddings(out / "embeddings.csv", features, model.assignments)
    export_pca(out / "pca.csv", features)
    print(f"Wrote {features.shape[0]} embeddings to {out / 'embeddings.csv'} and {out / 'pca.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    pred = read_labels(args.pred, args.pred_column)
    truth = read_labels(args.truth, args.truth_column)
    print(f"nmi={nmi(pred, truth):.4f}, acc={acc(pred, truth):.4f}")
    return 0


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return 0


COMMANDS = {
    "run": cmd_run,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "cluster": cmd_cluster,
    "export-embeddings": cmd_export,
    "evaluate": cmd_evaluate,
    "presets": cmd_presets,
}


def cli(argv: Optional[List[str]] = None) -> int:
    """Parse `argv` and dispatch one command; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if not args.command:
        parser.print_help()
        return 2

    try:
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except (DcboxError, OSError) as e:
        logger.error(f"Command '{args.command}' failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    """Console entry point"""
    sys.exit(cli())


if __name__ == "__main__":
    main()
