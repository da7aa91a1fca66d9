"""End-to-end estimator: split a ViT into class-wise sub-models and fuse them."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import cost
from ._validation import check_images, check_labels
from .assignment import DeviceSpec, verify_plan
from .fusion import evaluate_accuracy, predict, train_fusion
from .pruning import train_dense_head
from .splitting import CostOnlyPruner, KLPruner, SplitRequest, split_loop
from .vit import ViTConfig, ViTWeights, build_random, forward_embedding, preset

logger = logging.getLogger(__name__)


def fit_base_head(weights: ViTWeights, config: ViTConfig, X, y, epochs=10, lr=1e-4, batch_size=256, seed=0):
    """Linear probe: train the classifier head of ``weights`` on frozen embeddings."""
    features = forward_embedding(weights, config, X)
    head, _ = train_dense_head(weights.head, features, y, epochs, lr, batch_size, seed)
    return replace(weights, head=head)


def identical_devices(n, memory_mib=512.0, energy_gflop=20.0, throughput=0.46e9) -> list[DeviceSpec]:
    return [DeviceSpec(i, memory_mib * cost.MIB, energy_gflop * 1e9, throughput) for i in range(n)]


class SplitViTClassifier(ClassifierMixin, BaseEstimator):
    """Class-wise split ViT whose sub-model embeddings are fused by an MLP.

    ``fit`` prepares a base model (random body, head fitted as a linear
    probe unless ``base_weights`` is given), runs the prune / check / place
    loop for ``n_devices`` identical devices and trains the fusion MLP on the
    concatenated sub-model embeddings.

    Parameters
    ----------
    preset : str
        Architecture preset; the head width follows the labels.
    n_devices : int
        Number of sub-models and devices.
    budget_mib : float
        Total memory budget over all sub-models.
    device_memory_mib, device_energy_gflop, device_throughput : per-device resources.
    L : int
        Samples the energy budget must cover.
    hp : tuple of int or None
        Initial heads pruned per sub-model.
    shrink : float
        Fusion hidden width fraction.
    retrain : bool
        Whether sub-model heads are retrained after pruning.
    """

    def __init__(
        self,
        preset="vit-tiny",
        n_devices=1,
        budget_mib=100.0,
        device_memory_mib=512.0,
        device_energy_gflop=20.0,
        device_throughput=0.46e9,
        L=1,
        hp=None,
        shrink=0.5,
        retrain=True,
        head_epochs=10,
        head_lr=1e-4,
        fusion_epochs=10,
        fusion_lr=1e-4,
        batch_size=256,
        calib_size=256,
        base_weights=None,
        random_state=0,
    ):
        self.preset = preset
        self.n_devices = n_devices
        self.budget_mib = budget_mib
        self.device_memory_mib = device_memory_mib
        self.device_energy_gflop = device_energy_gflop
        self.device_throughput = device_throughput
        self.L = L
        self.hp = hp
        self.shrink = shrink
        self.retrain = retrain
        self.head_epochs = head_epochs
        self.head_lr = head_lr
        self.fusion_epochs = fusion_epochs
        self.fusion_lr = fusion_lr
        self.batch_size = batch_size
        self.calib_size = calib_size
        self.base_weights = base_weights
        self.random_state = random_state

    def fit(self, X, y):
        y = check_labels(y, len(X))
        n_classes = int(y.max()) + 1
        config = preset(self.preset, num_classes=n_classes)
        X = check_images(X, config)
        if self.base_weights is None:
            weights = build_random(config, self.random_state)
            weights = fit_base_head(
                weights, config, X, y, self.head_epochs, self.head_lr, self.batch_size, self.random_state
            )
        else:
            weights = self.base_weights
        self.devices_ = identical_devices(
            self.n_devices, self.device_memory_mib, self.device_energy_gflop, self.device_throughput
        )
        request = SplitRequest(
            n_devices=self.n_devices,
            budget=self.budget_mib * cost.MIB,
            hp=self.hp,
            L=self.L,
            seed=self.random_state,
        )
        pruner = KLPruner(
            weights, config, X, y,
            retrain=self.retrain,
            epochs=self.head_epochs,
            lr=self.head_lr,
            batch_size=self.batch_size,
            calib_size=self.calib_size,
            seed=self.random_state,
        )
        self.split_ = split_loop(pruner, config, self.devices_, request)
        self.fusion_ = train_fusion(
            self.split_.sub_models, X, y,
            shrink=self.shrink,
            epochs=self.fusion_epochs,
            lr=self.fusion_lr,
            batch_size=self.batch_size,
            seed=self.random_state,
            n_classes=n_classes,
        )
        self.config_ = config
        self.base_weights_ = weights
        self.plan_ = self.split_.plan
        self.sub_models_ = self.split_.sub_models
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "fusion_")
        X = check_images(X, self.config_)
        return predict(self.fusion_, self.sub_models_, X)[1]

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def verify(self, X=None, y=None, required_accuracy=None):
        """Re-check every deployment constraint; accuracy only when data is given."""
        check_is_fitted(self, "fusion_")
        a_fus = None
        if X is not None and y is not None:
            a_fus = evaluate_accuracy(self.fusion_, self.sub_models_, check_images(X, self.config_), y)
        return verify_plan(
            self.plan_, self.devices_, self.split_.profiles, self.L, self.budget_mib * cost.MIB,
            required_accuracy=required_accuracy, fused_accuracy=a_fus, classes=self.classes_.tolist(),
        )


def cost_only_split(config: ViTConfig, devices, request: SplitRequest):
    """Split loop with analytic sub-models only (any model size)."""
    return split_loop(CostOnlyPruner(config), config, devices, request)
