"""
Training orchestration: pretraining, centroid initialization, fine-tuning with
combined losses, cluster updates and post-training re-clustering
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from .autoencoder import Autoencoder, save_checkpoint
from .clustering import (
    AgglomerativeState,
    ClusterModel,
    agglomerative,
    assign,
    kmeans,
    knn_graph,
    stop_rule_assignment_change,
)
from .config import settings
from .data import Dataset, export_assignments, load_csv, load_idx, select_classes, split_holdout, synth_blobs
from .exceptions import PhaseError, TrainingDivergedError
from .losses import (
    LossTerm,
    TargetDistribution,
    agglomerative_loss,
    alpha_at,
    assignment_hardening_kl,
    augment,
    balanced_assignments_loss,
    cluster_classification_loss,
    combine_losses,
    group_sparsity_loss,
    kmeans_loss,
    locality_preserving_loss,
    reconstruction_mse,
    self_augmentation_loss,
    softmax_backward,
    student_t_assignments,
    sum_losses,
    target_distribution,
)
from .metrics import acc, nmi
from .models import (
    AlphaSchedule,
    AugmentationSpec,
    AutoencoderSpec,
    ClusterUpdate,
    ClusterUpdatePolicy,
    ClusteringLoss,
    DatasetSource,
    FeatureMode,
    FeatureSelector,
    GroupSparsityParams,
    KMeansInit,
    NonClusteringLoss,
    OptimizerSettings,
    Phase,
    PhasePlan,
    PostTraining,
    RunConfig,
    RunReport,
    SelfAugmentationSimilarity,
    TrainPlan,
)
from .nn import Dense, Parameter, ReLU, SGDMomentum


logger = logging.getLogger(__name__)

# independent random streams derived from the run seed
STREAM_INIT = 0
STREAM_BATCHES = 1
STREAM_CLUSTERING = 2
STREAM_AUGMENT = 3
STREAM_SPLIT = 4
STREAM_RECLUSTER = 5
STREAM_HEAD = 6

INFERENCE_BATCH = 512
LOSS_REDUCTION = "batch_mean"


def stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream_id])


def iterate_batches(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless epochs of shuffled batches; the last batch of an epoch may be short"""
    indices = np.asarray(indices)
    while True:
        order = rng.permutation(indices)
        for start in range(0, order.size, batch_size):
            yield order[start:start + batch_size]


def infer_features(
    autoencoder: Autoencoder,
    samples: np.ndarray,
    selector: Optional[FeatureSelector] = None,
    batch_size: int = INFERENCE_BATCH,
) -> np.ndarray:
    """Clustering features of every sample, computed in inference mode"""
    with autoencoder.inference():
        chunks = [
            autoencoder.extract_features(samples[start:start + batch_size], selector)
            for start in range(0, samples.shape[0], batch_size)
        ]
    return np.concatenate(chunks, axis=0)


def _check_finite(value: float, phase: Phase, step: int):
    if not np.isfinite(value):
        raise TrainingDivergedError(phase.value, step, f"loss is {value}")


class _LossCurve:
    """Averages step losses over each logging interval"""

    def __init__(self, interval: int):
        self.interval = interval
        self.entries: List[float] = []
        self._pending: List[float] = []

    def add(self, value: float):
        self._pending.append(value)
        if len(self._pending) == self.interval:
            self.entries.append(float(np.mean(self._pending)))
            self._pending = []

    def finish(self) -> List[float]:
        """Entries with any shorter last interval averaged in"""
        if self._pending:
            self.entries.append(float(np.mean(self._pending)))
            self._pending = []
        return self.entries


@dataclass
class PretrainResult:
    autoencoder: Autoencoder
    losses: List[float]
    steps: int
    holdout_before: Optional[float] = None
    holdout_after: Optional[float] = None


@dataclass
class FinetuneResult:
    autoencoder: Autoencoder
    cluster_model: ClusterModel
    losses: List[float]
    steps: int
    update_events: int = 0
    refresh_events: int = 0
    converged: bool = False
    # mean KL(P || Q) at each target refresh, then on the final features
    hardening_kl: List[float] = field(default_factory=list)
    agglomerative_state: Optional[AgglomerativeState] = None


def holdout_reconstruction(autoencoder: Autoencoder, samples: np.ndarray) -> Optional[float]:
    if samples.shape[0] == 0:
        return None
    with autoencoder.inference():
        return reconstruction_mse(samples, autoencoder.reconstruct(samples)).value


def _split(plan: TrainPlan, n: int) -> Tuple[np.ndarray, np.ndarray]:
    return split_holdout(n, plan.holdout_fraction, stream(plan.seed, STREAM_SPLIT))


class _Trainer:
    """One optimizer loop over the autoencoder and whatever the losses add to it"""

    def __init__(
        self,
        plan: TrainPlan,
        autoencoder: Autoencoder,
        samples: np.ndarray,
        selector: Optional[FeatureSelector],
        train_indices: np.ndarray,
        batch_size: int,
    ):
        self.plan = plan
        self.autoencoder = autoencoder
        self.samples = samples
        self.selector = selector or autoencoder.default_selector()
        self.train_indices = train_indices
        opt = plan.optimizer
        self.optimizer = SGDMomentum(opt.learning_rate, opt.momentum, opt.l2)
        self.centroid_optimizer = SGDMomentum(opt.learning_rate, opt.momentum, 0.0)
        self.augment_rng = stream(plan.seed, STREAM_AUGMENT)
        self.batches = iterate_batches(train_indices, batch_size, stream(plan.seed, STREAM_BATCHES))

        self.centroids: Optional[Parameter] = None
        self.cluster_model: Optional[ClusterModel] = None
        self.target: Optional[TargetDistribution] = None
        self.head: Optional[Dense] = None
        self.agglomerative_state: Optional[AgglomerativeState] = None
        self.merge_events_left = 1

    def merge_step(self, features: np.ndarray):
        """Agglomerative merges for one update, sized so the last update reaches k clusters"""
        k = self.plan.n_clusters
        state = self.agglomerative_state
        current = state.n_clusters if state is not None else features.shape[0]
        merges = math.ceil(max(0, current - k) / max(1, self.merge_events_left))
        self.agglomerative_state = agglomerative(features, k, self.plan.linkage, state=state, max_merges=merges)
        self.merge_events_left -= 1

    @property
    def trainable_centroids(self) -> bool:
        return self.plan.cluster_update.kind == ClusterUpdate.JOINT_TRAINABLE_CENTROIDS

    def _non_clustering_term(self, x: np.ndarray, features: np.ndarray, reconstruction) -> LossTerm:
        if self.plan.non_clustering_loss == NonClusteringLoss.RECONSTRUCTION:
            return reconstruction_mse(x, reconstruction)
        n = x.shape[0]
        f, fa = features[:n], features[n:]
        similarity = self.plan.self_augmentation_similarity
        if similarity == SelfAugmentationSimilarity.CROSS_ENTROPY:
            pf = softmax(f, axis=1)
            pfa = softmax(fa, axis=1)
            term = self_augmentation_loss(pf, pfa, similarity)
            grad_f = softmax_backward(pf, term.grads["features"])
            grad_fa = softmax_backward(pfa, term.grads["augmented_features"])
        else:
            term = self_augmentation_loss(f, fa, similarity)
            grad_f, grad_fa = term.grads["features"], term.grads["augmented_features"]
        return LossTerm(term.value, {"features": np.concatenate([grad_f, grad_fa], axis=0)})

    def _soft_assignment(self, features: np.ndarray):
        return student_t_assignments(features, self.centroids.value, self.plan.nu)

    def _clustering_term(self, x: np.ndarray, features: np.ndarray, batch: np.ndarray) -> Optional[LossTerm]:
        terms: List[LossTerm] = []
        soft = None
        for loss in self.plan.clustering_losses:
            if loss == ClusteringLoss.KMEANS:
                terms.append(kmeans_loss(features, self.cluster_model, indices=batch, reduction="mean"))
            elif loss == ClusteringLoss.ASSIGNMENT_HARDENING:
                if soft is None:
                    soft = self._soft_assignment(features)
                terms.append(assignment_hardening_kl(self.target.p[batch], soft, reduction="mean"))
            elif loss == ClusteringLoss.BALANCED_ASSIGNMENTS:
                if soft is None:
                    soft = self._soft_assignment(features)
                term = balanced_assignments_loss(soft)
                terms.append(LossTerm(term.value, {k: term.grads[k] for k in ("features", "centroids")}))
            elif loss == ClusteringLoss.LOCALITY_PRESERVING:
                if x.shape[0] < 2:
                    continue
                graph = knn_graph(
                    x.reshape(x.shape[0], -1),
                    min(self.plan.knn_k, x.shape[0] - 1),
                    self.plan.knn_similarity,
                    self.plan.knn_sigma,
                )
                terms.append(locality_preserving_loss(features, graph, reduction="mean"))
            elif loss == ClusteringLoss.GROUP_SPARSITY:
                params = GroupSparsityParams.even(
                    features.shape[1], self.plan.n_clusters, self.plan.group_sparsity_lambda
                )
                terms.append(group_sparsity_loss(features, params, reduction="mean"))
            elif loss == ClusteringLoss.CLUSTER_CLASSIFICATION:
                logits = self.head.forward(features)
                labels = self.cluster_model.assignments[batch]
                terms.append(cluster_classification_loss(logits, labels))
            elif loss == ClusteringLoss.AGGLOMERATIVE:
                terms.append(agglomerative_loss(features, self._batch_pairs(batch), reduction="mean"))
        return sum_losses(terms)

    def _batch_pairs(self, batch: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        position = np.full(self.samples.shape[0], -1, dtype=np.int64)
        position[batch] = np.arange(batch.size)
        pairs = []
        for a, b in self.agglomerative_state.merged_pairs:
            local_a = position[a][position[a] >= 0]
            local_b = position[b][position[b] >= 0]
            if local_a.size and local_b.size:
                pairs.append((local_a, local_b))
        return pairs

    def step(self, batch: np.ndarray, alpha: float) -> float:
        plan = self.plan
        need_nc = plan.non_clustering_loss != NonClusteringLoss.NONE and alpha < 1.0
        need_c = bool(plan.clustering_losses) and alpha > 0.0
        if not need_nc and not need_c:
            return 0.0

        x = self.samples[batch]
        n = x.shape[0]
        augmented = need_nc and plan.non_clustering_loss == NonClusteringLoss.SELF_AUGMENTATION
        inputs = np.concatenate([x, augment(x, plan.augmentation, self.augment_rng)]) if augmented else x
        with_reconstruction = need_nc and plan.non_clustering_loss == NonClusteringLoss.RECONSTRUCTION
        forward = self.autoencoder.forward(inputs, self.selector, with_reconstruction=with_reconstruction)

        nc_term = self._non_clustering_term(x, forward.features, forward.reconstruction) if need_nc else None
        c_term = self._clustering_term(x, forward.features[:n], batch) if need_c else None
        if c_term is not None and augmented and "features" in c_term.grads:
            padded = np.zeros_like(forward.features)
            padded[:n] = c_term.grads["features"]
            c_term = LossTerm(c_term.value, {**c_term.grads, "features": padded})

        combined = combine_losses(c_term, nc_term, alpha)
        grads = combined.grads
        feature_grad = grads.get("features")
        if "logits" in grads:
            head_grad = self.head.backward(grads["logits"])
            if augmented:
                head_grad = np.concatenate([head_grad, np.zeros_like(head_grad)])
            feature_grad = head_grad if feature_grad is None else feature_grad + head_grad
        if feature_grad is not None or "reconstruction" in grads:
            self.autoencoder.backward(forward, feature_grad, grads.get("reconstruction"))

        params = self.autoencoder.parameters()
        if "logits" in grads:
            params += list(self.head.params.values())
        self.optimizer.step(params)
        if self.centroids is not None:
            if self.trainable_centroids and "centroids" in grads:
                self.centroids.grad += grads["centroids"]
                self.centroid_optimizer.step([self.centroids])
            else:
                self.centroids.zero_grad()
        return combined.value


def pretrain(
    plan: TrainPlan,
    spec: AutoencoderSpec,
    samples: np.ndarray,
    autoencoder: Optional[Autoencoder] = None,
    train_indices: Optional[np.ndarray] = None,
    holdout_indices: Optional[np.ndarray] = None,
) -> PretrainResult:
    """Train on the non-clustering loss alone (alpha = 0)"""
    phase = plan.phase(Phase.PRETRAIN)
    autoencoder = autoencoder or Autoencoder(spec, stream(plan.seed, STREAM_INIT))
    if train_indices is None:
        train_indices, holdout_indices = _split(plan, samples.shape[0])
    holdout = samples[:0]
    if holdout_indices is not None and plan.non_clustering_loss == NonClusteringLoss.RECONSTRUCTION:
        holdout = samples[holdout_indices]

    holdout_before = holdout_reconstruction(autoencoder, holdout)
    trainer = _Trainer(plan, autoencoder, samples, None, train_indices, phase.batch_size)
    curve = _LossCurve(phase.log_interval)
    logger.info(f"Pretraining for {phase.steps} steps on {len(train_indices)} samples")

    autoencoder.train()
    for step in range(phase.steps):
        alpha = alpha_at(plan.alpha, Phase.PRETRAIN, step)
        value = trainer.step(next(trainer.batches), alpha)
        _check_finite(value, Phase.PRETRAIN, step)
        curve.add(value)
        logger.debug(f"pretrain step {step}: loss {value:.6g}")

    holdout_after = holdout_reconstruction(autoencoder, holdout)
    if holdout_before is not None and phase.steps > 0:
        logger.info(f"Holdout reconstruction loss {holdout_before:.6g} -> {holdout_after:.6g}")
        if holdout_after >= holdout_before:
            logger.warning("Holdout reconstruction loss did not decrease during pretraining")
    return PretrainResult(autoencoder, curve.finish(), phase.steps, holdout_before, holdout_after)


def init_centroids_from_pretrained(
    autoencoder: Autoencoder,
    samples: np.ndarray,
    k: int,
    seed: int,
    selector: Optional[FeatureSelector] = None,
    restarts: int = 20,
) -> ClusterModel:
    """Best-of-`restarts` k-means++ on the pretrained features"""
    features = infer_features(autoencoder, samples, selector)
    model = kmeans(features, k, KMeansInit.KMEANSPP, seed=stream(seed, STREAM_CLUSTERING), n_init=restarts)
    logger.info(f"Initialized {k} centroids from pretrained features (inertia {model.inertia:.6g})")
    return model


def _model_from_labels(features: np.ndarray, labels: np.ndarray, k: int) -> ClusterModel:
    centroids = np.zeros((k, features.shape[1]))
    for cluster in range(k):
        members = features[labels == cluster]
        if members.size:
            centroids[cluster] = members.mean(axis=0)
    inertia = float(np.sum((features - centroids[labels]) ** 2))
    return ClusterModel(centroids=centroids, assignments=labels, inertia=inertia)


def finetune(
    plan: TrainPlan,
    autoencoder: Autoencoder,
    samples: np.ndarray,
    cluster_model: ClusterModel,
    selector: Optional[FeatureSelector] = None,
    train_indices: Optional[np.ndarray] = None,
) -> FinetuneResult:
    """
    Joint optimization of the weighted clustering and non-clustering losses

    In alternating mode a hard cluster update runs every `frequency_p` steps. The
    target distribution is refreshed over all samples every
    `target_refresh_interval` steps; training stops early once the fraction of
    changed hard assignments between refreshes drops below `finetune_tol`
    (checked only while alpha > 0).
    """
    phase = plan.phase(Phase.FINETUNE)
    if train_indices is None:
        train_indices, _ = _split(plan, samples.shape[0])
    trainer = _Trainer(plan, autoencoder, samples, selector, train_indices, phase.batch_size)
    selector = trainer.selector
    k = plan.n_clusters
    alternating = plan.cluster_update.kind == ClusterUpdate.ALTERNATING
    losses = set(plan.clustering_losses)
    uses_agglomerative = ClusteringLoss.AGGLOMERATIVE in losses
    clustering_rng = stream(plan.seed, STREAM_CLUSTERING)
    update_rule = stop_rule_assignment_change(plan.cluster_update.threshold, plan.cluster_update.max_iter)

    trainer.centroids = Parameter(cluster_model.centroids.copy(), "centroids")
    trainer.cluster_model = cluster_model
    if ClusteringLoss.CLUSTER_CLASSIFICATION in losses:
        feature_dim = autoencoder.feature_dim(selector)
        trainer.head = Dense(feature_dim, k, stream(plan.seed, STREAM_HEAD))

    if uses_agglomerative:
        # merges are spread over the initial pass and every scheduled update
        trainer.merge_events_left = phase.steps // plan.cluster_update.frequency_p + 1
        trainer.merge_step(infer_features(autoencoder, samples, selector))

    hardening = ClusteringLoss.ASSIGNMENT_HARDENING in losses
    kl_curve: List[float] = []

    def current_labels(features: np.ndarray) -> np.ndarray:
        if uses_agglomerative:
            return trainer.agglomerative_state.labels()
        return assign(features, trainer.centroids.value)[0]

    def refresh() -> np.ndarray:
        features = infer_features(autoencoder, samples, selector)
        if not hardening:
            return current_labels(features)
        soft = student_t_assignments(features, trainer.centroids.value, plan.nu)
        trainer.target = target_distribution(soft)
        kl_curve.append(assignment_hardening_kl(trainer.target, soft, reduction="mean").value)
        return current_labels(features) if uses_agglomerative else soft.hard

    curve = _LossCurve(phase.log_interval)
    labels = refresh()
    refresh_events = 1
    update_events = 0
    converged = False
    steps_run = 0
    logger.info(
        f"Fine-tuning for up to {phase.steps} steps "
        f"({plan.cluster_update.kind.value}, losses: {', '.join(l.value for l in plan.clustering_losses) or 'none'})"
    )

    autoencoder.train()
    for step in range(phase.steps):
        alpha = alpha_at(plan.alpha, Phase.FINETUNE, step)
        value = trainer.step(next(trainer.batches), alpha)
        _check_finite(value, Phase.FINETUNE, step)
        curve.add(value)
        steps_run = step + 1
        logger.debug(f"finetune step {step}: alpha {alpha:.3f}, loss {value:.6g}")

        if alternating and steps_run % plan.cluster_update.frequency_p == 0:
            features = infer_features(autoencoder, samples, selector)
            if uses_agglomerative:
                trainer.merge_step(features)
            else:
                trainer.cluster_model = kmeans(
                    features,
                    k,
                    KMeansInit.PROVIDED,
                    stop=update_rule,
                    seed=clustering_rng,
                    initial_centroids=trainer.centroids.value,
                )
                trainer.centroids.value[...] = trainer.cluster_model.centroids
            update_events += 1
            logger.info(f"Cluster update {update_events} at step {steps_run}")

        if steps_run % plan.target_refresh_interval == 0 and steps_run < phase.steps:
            new_labels = refresh()
            refresh_events += 1
            changed = float(np.mean(new_labels != labels)) if new_labels.shape == labels.shape else 1.0
            labels = new_labels
            detail = f", KL(P || Q) {kl_curve[-1]:.6g}" if hardening else ""
            logger.info(f"Target refresh at step {steps_run}: {changed:.4%} of assignments changed{detail}")
            if alpha > 0 and not uses_agglomerative and changed < plan.finetune_tol:
                converged = True
                logger.info(f"Fine-tuning converged after {steps_run} steps")
                break

    features = infer_features(autoencoder, samples, selector)
    if uses_agglomerative:
        state = trainer.agglomerative_state
        if state.n_clusters > k:
            state = agglomerative(features, k, plan.linkage, state=state)
            trainer.agglomerative_state = state
        final = _model_from_labels(features, state.labels(), k)
    else:
        final_labels, sq = assign(features, trainer.centroids.value)
        final = ClusterModel(
            centroids=trainer.centroids.value.copy(), assignments=final_labels, inertia=float(sq.sum())
        )
    if hardening:
        soft = student_t_assignments(features, final.centroids, plan.nu)
        kl_curve.append(assignment_hardening_kl(target_distribution(soft), soft, reduction="mean").value)
    logger.info(f"Fine-tuning finished: {steps_run} steps, {update_events} cluster updates")
    return FinetuneResult(
        autoencoder=autoencoder,
        cluster_model=final,
        losses=curve.finish(),
        steps=steps_run,
        update_events=update_events,
        refresh_events=refresh_events,
        converged=converged,
        hardening_kl=kl_curve,
        agglomerative_state=trainer.agglomerative_state,
    )


def post_training_recluster(
    autoencoder: Autoencoder,
    samples: np.ndarray,
    plan: TrainPlan,
    in_training: ClusterModel,
    selector: Optional[FeatureSelector] = None,
) -> ClusterModel:
    """Cluster the final features from scratch, or keep the in-training result"""
    if plan.post_training == PostTraining.NONE:
        return in_training
    features = infer_features(autoencoder, samples, selector)
    k = plan.n_clusters
    if plan.post_training == PostTraining.RERUN_KMEANS:
        model = kmeans(
            features, k, KMeansInit.KMEANSPP, seed=stream(plan.seed, STREAM_RECLUSTER), n_init=plan.kmeans_restarts
        )
    else:
        state = agglomerative(features, k, plan.linkage)
        model = _model_from_labels(features, state.labels(), k)
    logger.info(f"Re-clustered final features with {plan.post_training.value} (inertia {model.inertia:.6g})")
    return model


def load_dataset(config: RunConfig) -> Dataset:
    if config.dataset == DatasetSource.SYNTHETIC:
        dataset = synth_blobs(
            config.synth_n_per_cluster,
            config.n_clusters,
            config.synth_dim,
            config.synth_separation,
            config.synth_nonlinearity,
            seed=config.seed,
        )
    elif config.dataset == DatasetSource.IDX:
        dataset = load_idx(config.images_path, config.labels_path)
    else:
        dataset = load_csv(config.csv_path, config.label_column, config.csv_scale, config.image_shape)
    if config.classes is not None or config.max_samples is not None:
        dataset = select_classes(dataset, config.classes, config.max_samples, seed=config.seed)
    return dataset


def build_spec(config: RunConfig, sample_shape: Tuple[int, ...]) -> AutoencoderSpec:
    return AutoencoderSpec(
        architecture=config.architecture,
        input_shape=tuple(sample_shape),
        latent_dim=config.latent_dim,
        hidden_dims=config.hidden_dims,
        conv_channels=config.conv_channels,
        kernel_size=config.kernel_size,
        stride=config.stride,
        padding=config.padding,
        batch_norm=config.batch_norm,
        output_activation=config.output_activation,
    )


def resolve_selector(config: RunConfig, autoencoder: Autoencoder) -> FeatureSelector:
    """Configured feature layers; several_layers without a list takes every hidden activation"""
    if config.feature_layers:
        selector = FeatureSelector(mode=config.feature_mode, layer_indices=config.feature_layers)
    elif config.feature_mode == FeatureMode.SEVERAL_LAYERS:
        layers = autoencoder.encoder.layers
        indices = [i for i, layer in enumerate(layers) if isinstance(layer, ReLU)] + [len(layers) - 1]
        selector = FeatureSelector(mode=FeatureMode.SEVERAL_LAYERS, layer_indices=indices)
    else:
        selector = autoencoder.default_selector()
    autoencoder.validate_selector(selector)
    return selector


def build_plan(config: RunConfig, n_train: int) -> TrainPlan:
    """Phase step counts follow from epochs over the training split"""
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    pretrain_steps = 0
    if config.non_clustering_loss != NonClusteringLoss.NONE:
        pretrain_steps = config.pretrain_epochs * steps_per_epoch
    non_clustering = [config.non_clustering_loss.value] if config.non_clustering_loss != NonClusteringLoss.NONE else []
    return TrainPlan(
        phases=[
            PhasePlan(
                name=Phase.PRETRAIN,
                losses=non_clustering,
                steps=pretrain_steps,
                batch_size=config.batch_size,
                log_interval=config.log_interval,
            ),
            PhasePlan(
                name=Phase.FINETUNE,
                losses=non_clustering + [loss.value for loss in config.clustering_loss],
                steps=config.finetune_epochs * steps_per_epoch,
                batch_size=config.batch_size,
                log_interval=config.log_interval,
            ),
        ],
        n_clusters=config.n_clusters,
        alpha=AlphaSchedule(
            mode=config.alpha_mode,
            alpha_constant=config.alpha_constant,
            ramp_start=config.alpha_start,
            ramp_end=config.alpha_end,
            ramp_steps=config.alpha_ramp_steps,
        ),
        cluster_update=ClusterUpdatePolicy(
            kind=config.cluster_update,
            frequency_p=config.update_frequency_p,
            threshold=config.update_threshold,
            max_iter=config.update_max_iter,
        ),
        post_training=config.post_training,
        optimizer=OptimizerSettings(learning_rate=config.learning_rate, momentum=config.momentum, l2=config.l2),
        seed=config.seed,
        non_clustering_loss=config.non_clustering_loss,
        clustering_losses=config.clustering_loss,
        self_augmentation_similarity=config.self_augmentation_similarity,
        augmentation=AugmentationSpec(
            noise_sigma=config.augment_noise_sigma, max_shift_pixels=config.augment_max_shift
        ),
        nu=config.nu,
        knn_k=config.knn_k,
        knn_similarity=config.knn_similarity,
        knn_sigma=config.knn_sigma,
        group_sparsity_lambda=config.group_sparsity_lambda,
        linkage=config.agglomerative_linkage,
        target_refresh_interval=config.target_refresh_interval,
        finetune_tol=config.finetune_tol,
        kmeans_restarts=config.kmeans_restarts,
        holdout_fraction=config.holdout_fraction,
    )


def output_dir_for(config: RunConfig) -> Path:
    return Path(config.output_dir) if config.output_dir else settings.output_dir / "run"


@dataclass
class RunSetup:
    """Everything a run derives from its configuration before training"""

    config: RunConfig
    dataset: Dataset
    spec: AutoencoderSpec
    plan: TrainPlan
    train_indices: np.ndarray
    holdout_indices: np.ndarray
    output_dir: Path

    @property
    def samples(self) -> np.ndarray:
        return self.dataset.samples

    def new_autoencoder(self) -> Autoencoder:
        return Autoencoder(self.spec, stream(self.config.seed, STREAM_INIT))


def prepare_run(config: RunConfig) -> RunSetup:
    dataset = load_dataset(config)
    spec = build_spec(config, dataset.sample_shape)
    train_indices, holdout_indices = split_holdout(
        len(dataset), config.holdout_fraction, stream(config.seed, STREAM_SPLIT)
    )
    plan = build_plan(config, train_indices.size)
    return RunSetup(config, dataset, spec, plan, train_indices, holdout_indices, output_dir_for(config))


@contextmanager
def run_phase(name: str):
    """Log a phase and wrap any failure in PhaseError naming it"""
    logger.info(f"Phase '{name}' started")
    started = time.perf_counter()
    try:
        yield
    except PhaseError:
        raise
    except Exception as e:
        logger.error(f"Phase '{name}' failed: {e}")
        raise PhaseError(name, e) from e
    logger.info(f"Phase '{name}' finished in {time.perf_counter() - started:.2f}s")


def evaluate_labels(pred: np.ndarray, truth: Optional[np.ndarray]) -> Tuple[Optional[float], Optional[float]]:
    if truth is None:
        return None, None
    return nmi(pred, truth), acc(pred, truth)


def run_case_study(config: RunConfig, write_artifacts: bool = True) -> RunReport:
    """
    pretrain -> init centroids -> finetune -> post-training clustering -> metrics

    Writes report.json, checkpoint.dcae and assignments.csv into the run's
    output directory unless `write_artifacts` is False.
    """
    started = time.perf_counter()
    with run_phase("setup"):
        setup = prepare_run(config)
        autoencoder = setup.new_autoencoder()
        selector = resolve_selector(config, autoencoder)
    samples, plan = setup.samples, setup.plan

    with run_phase("pretrain"):
        pretrained = pretrain(
            plan, setup.spec, samples, autoencoder, setup.train_indices, setup.holdout_indices
        )
    with run_phase("init_centroids"):
        initial = init_centroids_from_pretrained(
            autoencoder, samples, plan.n_clusters, plan.seed, selector, plan.kmeans_restarts
        )
    with run_phase("finetune"):
        tuned = finetune(plan, autoencoder, samples, initial, selector, setup.train_indices)
    with run_phase("post_training"):
        final = post_training_recluster(autoencoder, samples, plan, tuned.cluster_model, selector)
    with run_phase("metrics"):
        in_training = tuned.cluster_model.assignments
        in_training_nmi, in_training_acc = evaluate_labels(in_training, setup.dataset.labels)
        score_nmi, score_acc = evaluate_labels(final.assignments, setup.dataset.labels)

    phase_losses = {"pretrain": pretrained.losses, "finetune": tuned.losses}
    if tuned.hardening_kl:
        phase_losses["finetune_hardening_kl"] = tuned.hardening_kl
    if pretrained.holdout_before is not None and pretrained.steps > 0:
        phase_losses["pretrain_holdout"] = [pretrained.holdout_before, pretrained.holdout_after]
    echo = config.model_dump(mode="json")
    echo["loss_reduction"] = LOSS_REDUCTION
    echo["finetune_steps_run"] = tuned.steps
    echo["cluster_update_events"] = tuned.update_events
    echo["in_training_nmi"] = in_training_nmi
    echo["in_training_acc"] = in_training_acc
    report = RunReport(
        nmi=score_nmi,
        acc=score_acc,
        phase_losses=phase_losses,
        cluster_sizes=np.bincount(final.assignments, minlength=plan.n_clusters).tolist(),
        seed=config.seed,
        config=echo,
        wall_clock_s=time.perf_counter() - started,
        in_training_nmi=in_training_nmi,
        in_training_acc=in_training_acc,
        in_training_assignments=in_training.tolist(),
        final_assignments=final.assignments.tolist(),
    )
    if score_nmi is not None:
        logger.info(
            f"In-training NMI {in_training_nmi:.4f}, ACC {in_training_acc:.4f}; "
            f"final NMI {score_nmi:.4f}, ACC {score_acc:.4f}"
        )

    if write_artifacts:
        with run_phase("write_artifacts"):
            out = setup.output_dir
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.json").write_text(report.to_json(), encoding="utf-8")
            save_checkpoint(out / "checkpoint.dcae", autoencoder, tuned.cluster_model.centroids)
            export_assignments(out / "assignments.csv", in_training, final.assignments)
            logger.info(f"Wrote report, checkpoint and assignments to {out}")
    return report

