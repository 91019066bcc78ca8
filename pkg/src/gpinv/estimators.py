"""scikit-learn style wrappers around the training and sampling pipeline.

``DegradationFlow`` is a transformer: ``transform`` maps samples to the flat
latent ``[y, z]`` and ``inverse_transform`` maps back.
``GenerativePseudoinverse`` adds the conditional denoiser; ``predict`` draws
one restoration per measurement and ``score`` is the negative consistency.

Vector data is ``(n, d)``.  Image data is ``(n, C, H, W)`` ``uint8``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .config import ExperimentConfig
from .degradations import apply
from .flow import LatentPair
from .metrics import consistency
from .numerics import ContractError
from .pipeline import sample_posterior, train_ddpm, train_flow
from .validation import as_float_tensor, check_feature_shape, check_is_fitted, check_samples

_FLOW_PARAMS = ("degradation", "matrix", "scale", "sigma", "n_layers", "hidden", "clamp", "n_iter",
                "batch_size", "learning_rate", "clip_norm", "random_state")


class DegradationFlow(TransformerMixin, BaseEstimator):
    def __init__(self, degradation="linear-matrix", matrix="1,0", scale=1, sigma=0.05, n_layers=8,
                 hidden=64, clamp=2.0, n_iter=20000, batch_size=256, learning_rate=1e-3,
                 clip_norm=1.0, random_state=0):
        self.degradation = degradation
        self.matrix = matrix
        self.scale = scale
        self.sigma = sigma
        self.n_layers = n_layers
        self.hidden = hidden
        self.clamp = clamp
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _overrides(self, X) -> list:
        image = X.ndim == 4
        shape = "x".join(str(s) for s in X.shape[1:])
        return [f"problem.kind={'image' if image else 'vector'}",
                f"problem.degradation={self.degradation}", f"problem.matrix={self.matrix}",
                f"problem.in_shape={shape}", f"problem.scale={self.scale}",
                f"flow.layers={self.n_layers}", f"flow.hidden={self.hidden}", f"flow.clamp={self.clamp}",
                f"training.sigma={self.sigma}", f"training.flow_iters={self.n_iter}",
                f"training.flow_batch={self.batch_size}", f"training.flow_lr={self.learning_rate}",
                f"training.clip_norm={self.clip_norm}", f"training.seed={int(self.random_state or 0)}"]

    def _check_fit_input(self, X):
        X = np.asarray(X.detach().cpu().numpy() if isinstance(X, torch.Tensor) else X)
        X = check_samples(X, image=X.ndim == 4)
        if X.ndim == 4 and X.dtype != np.uint8:
            raise ContractError("image training data must be uint8 (it is dequantized during training)")
        return X

    def fit(self, X, y=None):
        X = self._check_fit_input(X)
        self.config_ = ExperimentConfig.from_text("", self._overrides(X))
        self.model_ = train_flow(self.config_, X.astype(np.float32) if X.ndim == 2 else X)
        self.degradation_ = self.model_.degradation
        self.metrics_ = self.model_.metrics
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        flow = self.model_.flow
        X = check_samples(X, image=len(flow.in_shape) == 3)
        check_feature_shape(X, flow.in_shape)
        return as_float_tensor(X)

    @torch.no_grad()
    def encode(self, X):
        """``(Y, Z)`` latent arrays for samples ``X``."""
        x = self._inputs(X)
        pair, _ = self.model_.flow(x)
        return pair.y.numpy(), pair.z.numpy()

    @torch.no_grad()
    def decode(self, Y, Z):
        check_is_fitted(self, "model_")
        flow = self.model_.flow
        Y = torch.as_tensor(np.asarray(Y), dtype=torch.float32)
        Z = torch.as_tensor(np.asarray(Z), dtype=torch.float32)
        return flow.inverse(LatentPair(Y, Z)).numpy()

    def transform(self, X):
        Y, Z = self.encode(X)
        n = len(Y)
        return np.concatenate([Y.reshape(n, -1), Z.reshape(n, -1)], axis=1)

    def inverse_transform(self, Xt):
        check_is_fitted(self, "model_")
        flow = self.model_.flow
        Xt = check_samples(Xt, name="Xt")
        m = int(np.prod(flow.y_shape))
        if Xt.shape[1] != m + int(np.prod(flow.z_shape)):
            raise ContractError(f"Xt must have {m + int(np.prod(flow.z_shape))} columns, got {Xt.shape[1]}")
        n = len(Xt)
        return self.decode(Xt[:, :m].reshape((n,) + tuple(flow.y_shape)),
                           Xt[:, m:].reshape((n,) + tuple(flow.z_shape)))

    def degrade(self, X):
        """Apply the fitted degradation to samples ``X``."""
        x = self._inputs(X)
        return apply(self.degradation_, x).numpy()


class GenerativePseudoinverse(DegradationFlow):
    """Flow plus conditional denoiser; ``predict`` samples ``x`` with ``D(x) ~ y``."""

    def __init__(self, degradation="linear-matrix", matrix="1,0", scale=1, sigma=0.05, n_layers=8,
                 hidden=64, clamp=2.0, n_iter=20000, batch_size=256, learning_rate=1e-3,
                 clip_norm=1.0, random_state=0, T=1000, beta_1=1e-4, beta_T=0.02,
                 sigma_variant="beta", denoiser_hidden=128, ddpm_iter=10000, ddpm_batch_size=256,
                 ddpm_learning_rate=1e-3, n_steps=None):
        super().__init__(degradation, matrix, scale, sigma, n_layers, hidden, clamp, n_iter,
                         batch_size, learning_rate, clip_norm, random_state)
        self.T = T
        self.beta_1 = beta_1
        self.beta_T = beta_T
        self.sigma_variant = sigma_variant
        self.denoiser_hidden = denoiser_hidden
        self.ddpm_iter = ddpm_iter
        self.ddpm_batch_size = ddpm_batch_size
        self.ddpm_learning_rate = ddpm_learning_rate
        self.n_steps = n_steps

    def _overrides(self, X) -> list:
        return super()._overrides(X) + [
            f"diffusion.T={self.T}", f"diffusion.beta_1={self.beta_1}", f"diffusion.beta_T={self.beta_T}",
            f"diffusion.sigma_variant={self.sigma_variant}", f"diffusion.hidden={self.denoiser_hidden}",
            f"training.ddpm_iters={self.ddpm_iter}", f"training.ddpm_batch={self.ddpm_batch_size}",
            f"training.ddpm_lr={self.ddpm_learning_rate}"]

    def fit(self, X, y=None):
        super().fit(X)
        X = self._check_fit_input(X)
        self.denoiser_model_ = train_ddpm(self.config_, self.model_,
                                          X.astype(np.float32) if X.ndim == 2 else X)
        return self

    def predict(self, Y, seed=None):
        """One posterior sample per measurement row of ``Y``."""
        check_is_fitted(self, "denoiser_model_")
        flow = self.model_.flow
        Y = check_samples(Y, name="Y", image=len(flow.y_shape) == 3)
        check_feature_shape(Y, flow.y_shape, name="Y")
        seed = int(self.random_state or 0) if seed is None else seed
        res = sample_posterior(torch.as_tensor(Y, dtype=torch.float32), self.model_, self.denoiser_model_,
                               n_steps=self.n_steps, seed=seed)
        return res.x.numpy()

    def score(self, X, y=None):
        """Negative consistency of restorations of ``D(X)``; higher is better."""
        Y = self.degrade(X)
        return -consistency(Y, self.predict(Y), self.degradation_)
