"""
Data models for dcbox
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator


class Architecture(str, Enum):
    """Main network branch"""
    MLP = "mlp"
    CONV = "conv"


class OutputActivation(str, Enum):
    """Last decoder activation"""
    LINEAR = "linear"
    SIGMOID = "sigmoid"


class FeatureMode(str, Enum):
    """Which encoder outputs feed the clustering"""
    ONE_LAYER = "one_layer"
    SEVERAL_LAYERS = "several_layers"


class NonClusteringLoss(str, Enum):
    """Auxiliary objective"""
    NONE = "none"
    RECONSTRUCTION = "reconstruction"
    SELF_AUGMENTATION = "self_augmentation"


class ClusteringLoss(str, Enum):
    """Objective acting directly on the clustering space"""
    NONE = "none"
    KMEANS = "kmeans"
    ASSIGNMENT_HARDENING = "assignment_hardening"
    BALANCED_ASSIGNMENTS = "balanced_assignments"
    LOCALITY_PRESERVING = "locality_preserving"
    GROUP_SPARSITY = "group_sparsity"
    CLUSTER_CLASSIFICATION = "cluster_classification"
    AGGLOMERATIVE = "agglomerative"


# These need hard assignments produced by a separate cluster update step.
HARD_ASSIGNMENT_LOSSES = frozenset(
    {ClusteringLoss.KMEANS, ClusteringLoss.CLUSTER_CLASSIFICATION, ClusteringLoss.AGGLOMERATIVE}
)


class SelfAugmentationSimilarity(str, Enum):
    """Similarity s(f(x), f(T(x)))"""
    NEG_SQUARED_DISTANCE = "neg_squared_distance"
    CROSS_ENTROPY = "cross_entropy"


class AlphaMode(str, Enum):
    """How the clustering weight alpha evolves"""
    PRETRAIN_FINETUNE = "pretrain_finetune"
    JOINT = "joint"
    VARIABLE = "variable"


class Phase(str, Enum):
    """Training phases"""
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class ClusterUpdate(str, Enum):
    """Cluster update protocol during training"""
    JOINT_TRAINABLE_CENTROIDS = "joint_trainable_centroids"
    ALTERNATING = "alternating"


class PostTraining(str, Enum):
    """Clustering re-run after training"""
    NONE = "none"
    RERUN_KMEANS = "rerun_kmeans"
    RERUN_AGGLOMERATIVE = "rerun_agglomerative"


class Linkage(str, Enum):
    """Agglomerative linkage"""
    SINGLE = "single"
    AVERAGE = "average"


class Similarity(str, Enum):
    """k-NN graph edge weights"""
    GAUSSIAN = "gaussian"
    BINARY = "binary"


class KMeansInit(str, Enum):
    """k-means seeding"""
    KMEANSPP = "kmeanspp"
    RANDOM = "random"
    PROVIDED = "provided"


class DatasetSource(str, Enum):
    """Where samples come from"""
    IDX = "idx"
    CSV = "csv"
    SYNTHETIC = "synthetic"


class Nonlinearity(str, Enum):
    """Warping applied to synthetic blobs"""
    NONE = "none"
    TANH_MIX = "tanh_mix"


class AutoencoderSpec(BaseModel):
    """Shape of an encoder/decoder pair; the decoder mirrors the encoder"""
    architecture: Architecture = Field(description="MLP or convolutional main branch")
    input_shape: Tuple[int, ...] = Field(description="Per-sample input shape, e.g. (784,) or (1, 28, 28)")
    latent_dim: int = Field(ge=1, description="Width of the encoder output")
    hidden_dims: List[int] = Field(default_factory=lambda: [128, 64], description="MLP hidden widths")
    conv_channels: List[int] = Field(
        default_factory=lambda: [32, 64, 128], description="Channels of the stride-2 convolutions"
    )
    kernel_size: int = Field(default=3, ge=1, description="Convolution kernel size")
    stride: int = Field(default=2, ge=1, description="Convolution stride")
    padding: int = Field(default=1, ge=0, description="Zero padding")
    batch_norm: bool = Field(default=True, description="Insert batch normalization after hidden layers")
    output_activation: OutputActivation = Field(
        default=OutputActivation.LINEAR, description="Decoder output nonlinearity"
    )

    @model_validator(mode="after")
    def _check_shapes(self) -> "AutoencoderSpec":
        if any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be positive, got {self.input_shape}")
        if self.architecture == Architecture.CONV:
            if len(self.input_shape) != 3:
                raise ValueError(
                    f"conv architecture needs (channels, height, width) input, got {self.input_shape}"
                )
            if not self.conv_channels:
                raise ValueError("conv architecture needs at least one conv_channels entry")
        if any(w < 1 for w in self.hidden_dims + self.conv_channels):
            raise ValueError("layer widths must be positive")
        return self


class FeatureSelector(BaseModel):
    """Encoder layers whose outputs form the clustering features"""
    mode: FeatureMode = Field(default=FeatureMode.ONE_LAYER, description="One layer or several")
    layer_indices: List[int] = Field(min_length=1, description="Encoder layer indices")

    @model_validator(mode="after")
    def _check_indices(self) -> "FeatureSelector":
        if any(i < 0 for i in self.layer_indices):
            raise ValueError(f"layer indices must be non-negative, got {self.layer_indices}")
        if any(b <= a for a, b in zip(self.layer_indices, self.layer_indices[1:])):
            raise ValueError(f"layer indices must be strictly increasing, got {self.layer_indices}")
        if self.mode == FeatureMode.ONE_LAYER and len(self.layer_indices) != 1:
            raise ValueError("one_layer mode takes exactly one layer index")
        return self


class AlphaSchedule(BaseModel):
    """Weighting between clustering and non-clustering loss"""
    mode: AlphaMode = Field(default=AlphaMode.JOINT, description="Schedule kind")
    alpha_constant: float = Field(default=0.5, ge=0.0, le=1.0, description="Joint-training alpha")
    ramp_start: float = Field(default=0.0, ge=0.0, le=1.0, description="Variable schedule start")
    ramp_end: float = Field(default=1.0, ge=0.0, le=1.0, description="Variable schedule end")
    ramp_steps: int = Field(default=100, ge=1, description="Steps to go from start to end")


class AugmentationSpec(BaseModel):
    """Augmentation T used by the self-augmentation loss"""
    noise_sigma: float = Field(default=0.1, ge=0.0, description="Std of additive Gaussian noise")
    max_shift_pixels: int = Field(default=2, ge=0, description="Largest random pixel shift")


class GroupSparsityParams(BaseModel):
    """Feature groups and their sparsity weights"""
    group_sizes: List[int] = Field(min_length=1, description="Size n_g of every group")
    lam: float = Field(gt=0.0, description="Base weight lambda")

    @field_validator("group_sizes")
    @classmethod
    def _positive_sizes(cls, sizes: List[int]) -> List[int]:
        if any(s < 1 for s in sizes):
            raise ValueError(f"group sizes must be positive, got {sizes}")
        return sizes

    @property
    def feature_dim(self) -> int:
        return sum(self.group_sizes)

    @property
    def weights(self) -> np.ndarray:
        """lambda_g = lambda * sqrt(n_g)"""
        return self.lam * np.sqrt(np.asarray(self.group_sizes, dtype=np.float64))

    @classmethod
    def even(cls, feature_dim: int, groups: int, lam: float) -> "GroupSparsityParams":
        """Split feature_dim into `groups` contiguous groups of near-equal size"""
        groups = max(1, min(groups, feature_dim))
        base, extra = divmod(feature_dim, groups)
        sizes = [base + (1 if g < extra else 0) for g in range(groups)]
        return cls(group_sizes=sizes, lam=lam)


class OptimizerSettings(BaseModel):
    """SGD with momentum"""
    learning_rate: float = Field(default=0.01, gt=0.0, description="Step size")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="Heavy-ball coefficient")
    l2: float = Field(default=1e-4, ge=0.0, description="L2 regularization coefficient")


class ClusterUpdatePolicy(BaseModel):
    """Joint (trainable centroids) or alternating hard cluster updates"""
    kind: ClusterUpdate = Field(default=ClusterUpdate.JOINT_TRAINABLE_CENTROIDS)
    frequency_p: int = Field(default=50, ge=1, description="Optimizer steps between cluster updates")
    threshold: float = Field(default=0.001, ge=0.0, le=1.0, description="Stop-rule change fraction")
    max_iter: int = Field(default=300, ge=1, description="Lloyd iteration cap per update")


class PhasePlan(BaseModel):
    """One training phase"""
    name: Phase
    losses: List[str] = Field(default_factory=list, description="Loss names active in the phase")
    steps: int = Field(ge=0, description="Optimizer steps")
    batch_size: int = Field(ge=1)
    log_interval: int = Field(default=10, ge=1, description="Steps per loss-curve entry")


class TrainPlan(BaseModel):
    """Everything the training loop needs, derived from a RunConfig"""
    phases: List[PhasePlan]
    n_clusters: int = Field(ge=1)
    alpha: AlphaSchedule = Field(default_factory=AlphaSchedule)
    cluster_update: ClusterUpdatePolicy = Field(default_factory=ClusterUpdatePolicy)
    post_training: PostTraining = PostTraining.RERUN_KMEANS
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    seed: int = 0
    non_clustering_loss: NonClusteringLoss = NonClusteringLoss.RECONSTRUCTION
    clustering_losses: List[ClusteringLoss] = Field(
        default_factory=lambda: [ClusteringLoss.ASSIGNMENT_HARDENING]
    )
    self_augmentation_similarity: SelfAugmentationSimilarity = (
        SelfAugmentationSimilarity.NEG_SQUARED_DISTANCE
    )
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    nu: float = Field(default=1.0, gt=0.0)
    knn_k: int = Field(default=5, ge=1)
    knn_similarity: Similarity = Similarity.GAUSSIAN
    knn_sigma: float = Field(default=1.0, gt=0.0)
    group_sparsity_lambda: float = Field(default=0.01, gt=0.0)
    linkage: Linkage = Linkage.AVERAGE
    target_refresh_interval: int = Field(default=50, ge=1)
    finetune_tol: float = Field(default=0.001, ge=0.0, le=1.0)
    kmeans_restarts: int = Field(default=20, ge=1)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _one_policy(self) -> "TrainPlan":
        needs_hard = HARD_ASSIGNMENT_LOSSES.intersection(self.clustering_losses)
        if needs_hard and self.cluster_update.kind != ClusterUpdate.ALTERNATING:
            names = ", ".join(sorted(loss.value for loss in needs_hard))
            raise ValueError(f"{names} needs hard assignments and therefore cluster_update = alternating")
        return self

    def phase(self, name: Phase) -> Optional[PhasePlan]:
        """Get a phase by name"""
        for phase in self.phases:
            if phase.name == name:
                return phase
        return None


class RunConfig(BaseModel):
    """Configuration of one run, as parsed from a `key = value` file"""

    model_config = ConfigDict(extra="forbid")

    # Data
    dataset: DatasetSource = Field(description="Sample source")
    n_clusters: int = Field(ge=1, description="Number of clusters k")
    images_path: Optional[str] = Field(default=None, description="IDX image file")
    labels_path: Optional[str] = Field(default=None, description="IDX label file (evaluation only)")
    csv_path: Optional[str] = Field(default=None, description="CSV feature file")
    label_column: Optional[int] = Field(default=None, ge=0, description="CSV label column index")
    csv_scale: Optional[float] = Field(default=None, gt=0.0, description="Divide CSV values by this")
    image_shape: Optional[List[int]] = Field(default=None, description="Reshape CSV rows to (C, H, W)")
    classes: Optional[List[int]] = Field(default=None, description="Keep only these labels")
    max_samples: Optional[int] = Field(default=None, ge=1, description="Cap on the number of samples")
    synth_n_per_cluster: int = Field(default=300, ge=1)
    synth_dim: int = Field(default=10, ge=2)
    synth_separation: float = Field(default=6.0, ge=0.0)
    synth_nonlinearity: Nonlinearity = Nonlinearity.TANH_MIX

    # Architecture and features
    architecture: Architecture = Architecture.MLP
    hidden_dims: List[int] = Field(default_factory=lambda: [128, 64])
    conv_channels: List[int] = Field(default_factory=lambda: [32, 64, 128])
    kernel_size: int = Field(default=3, ge=1)
    stride: int = Field(default=2, ge=1)
    padding: int = Field(default=1, ge=0)
    latent_dim: int = Field(default=10, ge=1)
    batch_norm: bool = True
    output_activation: OutputActivation = OutputActivation.LINEAR
    feature_mode: FeatureMode = FeatureMode.ONE_LAYER
    feature_layers: Optional[List[int]] = Field(default=None, description="Default: last encoder layer")

    # Losses
    non_clustering_loss: NonClusteringLoss = NonClusteringLoss.RECONSTRUCTION
    clustering_loss: List[ClusteringLoss] = Field(
        default_factory=lambda: [ClusteringLoss.ASSIGNMENT_HARDENING]
    )
    self_augmentation_similarity: SelfAugmentationSimilarity = (
        SelfAugmentationSimilarity.NEG_SQUARED_DISTANCE
    )
    augment_noise_sigma: float = Field(default=0.1, ge=0.0)
    augment_max_shift: int = Field(default=2, ge=0)
    nu: float = Field(default=1.0, gt=0.0)
    knn_k: int = Field(default=5, ge=1)
    knn_similarity: Similarity = Similarity.GAUSSIAN
    knn_sigma: float = Field(default=1.0, gt=0.0)
    group_sparsity_lambda: float = Field(default=0.01, gt=0.0)
    agglomerative_linkage: Linkage = Linkage.AVERAGE

    # Loss combination
    alpha_mode: AlphaMode = AlphaMode.JOINT
    alpha_constant: float = Field(default=0.5, ge=0.0, le=1.0)
    alpha_start: float = Field(default=0.0, ge=0.0, le=1.0)
    alpha_end: float = Field(default=1.0, ge=0.0, le=1.0)
    alpha_ramp_steps: int = Field(default=100, ge=1)

    # Cluster updates
    cluster_update: ClusterUpdate = ClusterUpdate.JOINT_TRAINABLE_CENTROIDS
    update_frequency_p: int = Field(default=50, ge=1)
    update_threshold: float = Field(default=0.001, ge=0.0, le=1.0)
    update_max_iter: int = Field(default=300, ge=1)
    target_refresh_interval: int = Field(default=50, ge=1)
    post_training: PostTraining = PostTraining.RERUN_KMEANS
    kmeans_restarts: int = Field(default=20, ge=1)

    # Optimization
    learning_rate: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    l2: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=256, ge=1)
    pretrain_epochs: int = Field(default=100, ge=0)
    finetune_epochs: int = Field(default=100, ge=0)
    finetune_tol: float = Field(default=0.001, ge=0.0, le=1.0)
    log_interval: int = Field(default=10, ge=1)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)

    # Run
    seed: int = 0
    output_dir: Optional[str] = Field(default=None, description="Default: <settings.output_dir>/run")
    preset: Optional[str] = Field(default=None, description="Method preset the defaults came from")

    @field_validator(
        "image_shape", "classes", "hidden_dims", "conv_channels", "feature_layers", "clustering_loss",
        mode="before",
    )
    @classmethod
    def _split_lists(cls, value: Any, info: ValidationInfo) -> Any:
        if isinstance(value, str):
            value = value.strip()
            if value.lower() in ("", "none"):
                return [] if info.field_name in ("clustering_loss", "hidden_dims") else None
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator(
        "images_path", "labels_path", "csv_path", "label_column", "csv_scale", "max_samples",
        "output_dir", "preset",
        mode="before",
    )
    @classmethod
    def _blank_is_none(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return None
        return value

    @field_validator("clustering_loss", mode="after")
    @classmethod
    def _drop_none_loss(cls, losses: Optional[List[ClusteringLoss]]) -> List[ClusteringLoss]:
        losses = losses or []
        if ClusteringLoss.NONE in losses and len(losses) > 1:
            raise ValueError("'none' cannot be combined with other clustering losses")
        if len(set(losses)) != len(losses):
            raise ValueError("clustering losses must not repeat")
        return [loss for loss in losses if loss != ClusteringLoss.NONE]

    @field_validator("feature_layers", mode="after")
    @classmethod
    def _check_feature_layers(cls, layers: Optional[List[int]]) -> Optional[List[int]]:
        if not layers:
            return None
        if any(i < 0 for i in layers):
            raise ValueError(f"layer indices must be non-negative, got {layers}")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValueError(f"layer indices must be strictly increasing, got {layers}")
        return layers

    @model_validator(mode="after")
    def _check_compatibility(self) -> "RunConfig":
        if self.dataset == DatasetSource.IDX and not self.images_path:
            raise ValueError("dataset = idx requires images_path")
        if self.dataset == DatasetSource.CSV and not self.csv_path:
            raise ValueError("dataset = csv requires csv_path")
        if self.architecture == Architecture.CONV:
            if self.dataset == DatasetSource.SYNTHETIC:
                raise ValueError("conv architecture needs image data; synthetic blobs are flat vectors")
            if self.dataset == DatasetSource.CSV and not self.image_shape:
                raise ValueError("conv architecture on CSV data requires image_shape")
        if self.image_shape is not None and len(self.image_shape) != 3:
            raise ValueError(f"image_shape must be channels, height, width; got {self.image_shape}")
        needs_hard = HARD_ASSIGNMENT_LOSSES.intersection(self.clustering_loss)
        if needs_hard and self.cluster_update != ClusterUpdate.ALTERNATING:
            names = ", ".join(sorted(loss.value for loss in needs_hard))
            raise ValueError(
                f"clustering_loss {names} needs hard assignments and is incompatible with "
                f"cluster_update = {self.cluster_update.value}; use alternating"
            )
        if self.feature_mode == FeatureMode.ONE_LAYER and self.feature_layers and len(self.feature_layers) != 1:
            raise ValueError("feature_mode = one_layer takes exactly one feature_layers entry")
        if self.feature_layers is None and self.latent_dim < self.n_clusters:
            raise ValueError(
                f"latent_dim ({self.latent_dim}) must be at least n_clusters ({self.n_clusters})"
            )
        if self.non_clustering_loss == NonClusteringLoss.NONE and not self.clustering_loss:
            raise ValueError("at least one of non_clustering_loss and clustering_loss is required")
        return self


class RunReport(BaseModel):
    """Outcome of a pipeline run; serializes to report.json"""
    nmi: Optional[float] = Field(default=None, ge=0.0, le=1.0, description="Final NMI")
    acc: Optional[float] = Field(default=None, ge=0.0, le=1.0, description="Final ACC")
    phase_losses: Dict[str, List[float]] = Field(default_factory=dict, description="Loss curves")
    cluster_sizes: List[int] = Field(default_factory=list, description="Points per final cluster")
    seed: int = Field(description="Run seed")
    config: Dict[str, Any] = Field(default_factory=dict, description="Configuration echo")
    wall_clock_s: float = Field(default=0.0, ge=0.0, description="Elapsed seconds")

    # Kept for comparison with the re-run; report.json echoes the scores under config
    in_training_nmi: Optional[float] = Field(default=None, ge=0.0, le=1.0, exclude=True)
    in_training_acc: Optional[float] = Field(default=None, ge=0.0, le=1.0, exclude=True)
    in_training_assignments: List[int] = Field(default_factory=list, exclude=True)
    final_assignments: List[int] = Field(default_factory=list, exclude=True)

    def to_json(self) -> str:
        """Serialize with the fixed key set"""
        return self.model_dump_json(indent=2)
