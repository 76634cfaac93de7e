"""
Published clustering methods expressed as RunConfig defaults

A config file selects one with `preset = <name>`; every key it sets itself
overrides the preset. Architectures this toolbox does not build (DBN, GAN,
VAE) have no preset.
"""

from typing import Any, Dict, List

from .exceptions import InvalidConfigValueError


PRESETS: Dict[str, Dict[str, Any]] = {
    # pretrain on reconstruction, then joint reconstruction + hardening, re-run k-means
    "case_study": {
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "assignment_hardening",
        "alpha_mode": "joint",
        "alpha_constant": 0.5,
        "cluster_update": "joint_trainable_centroids",
        "post_training": "rerun_kmeans",
        "learning_rate": 0.01,
        "momentum": 0.9,
    },
    "dec": {
        "architecture": "mlp",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "assignment_hardening",
        "alpha_mode": "pretrain_finetune",
        "cluster_update": "joint_trainable_centroids",
        "post_training": "none",
    },
    "dbc": {
        "architecture": "conv",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "assignment_hardening",
        "alpha_mode": "pretrain_finetune",
        "cluster_update": "joint_trainable_centroids",
        "post_training": "rerun_kmeans",
    },
    "depict": {
        "architecture": "conv",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "assignment_hardening, balanced_assignments",
        "alpha_mode": "joint",
        "cluster_update": "joint_trainable_centroids",
        "post_training": "none",
    },
    "dcn": {
        "architecture": "mlp",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "kmeans",
        "alpha_mode": "joint",
        "alpha_constant": 0.5,
        "cluster_update": "alternating",
        "post_training": "none",
    },
    "den": {
        "architecture": "mlp",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "locality_preserving, group_sparsity",
        "alpha_mode": "joint",
        "post_training": "rerun_kmeans",
    },
    "jule": {
        "architecture": "conv",
        "non_clustering_loss": "none",
        "clustering_loss": "agglomerative",
        "cluster_update": "alternating",
        "post_training": "none",
        "pretrain_epochs": 0,
        "alpha_mode": "pretrain_finetune",
    },
    "ccnn": {
        "architecture": "conv",
        "non_clustering_loss": "none",
        "clustering_loss": "cluster_classification",
        "cluster_update": "alternating",
        "post_training": "rerun_kmeans",
        "pretrain_epochs": 0,
        "alpha_mode": "pretrain_finetune",
    },
    # concatenated encoder layers, reconstruction only, then k-means
    "neural_clustering": {
        "architecture": "mlp",
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "none",
        "feature_mode": "several_layers",
        "finetune_epochs": 0,
        "post_training": "rerun_kmeans",
    },
    "ae_kmeans": {
        "non_clustering_loss": "reconstruction",
        "clustering_loss": "none",
        "finetune_epochs": 0,
        "post_training": "rerun_kmeans",
    },
}


def preset_names() -> List[str]:
    return sorted(PRESETS)


def get_preset(name: str) -> Dict[str, Any]:
    """Copy of a preset's defaults"""
    try:
        return dict(PRESETS[name.strip().lower()])
    except KeyError:
        raise InvalidConfigValueError(
            f"unknown preset '{name}', expected one of {', '.join(preset_names())}", key="preset"
        ) from None
