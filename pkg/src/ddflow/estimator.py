"""scikit-learn style wrapper: ``fit`` trains, ``predict`` returns fields, ``transform`` warps."""
from __future__ import annotations

import time

from sklearn.base import BaseEstimator, TransformerMixin

from . import flow, network, train
from ._validation import check_fitted, check_pairs
from .losses import LossConfig
from .volume import warp_image


class FlowMatchingRegistration(TransformerMixin, BaseEstimator):
    """Deformable registration by flow matching in displacement-field space.

    ``X`` is a sequence of ``(fixed, moving)`` volume pairs (or phantom cases).
    """

    def __init__(self, n_scales=3, channels=(8, 16, 32), corr_radius=1, time_embed_dim=32, mlp_hidden=16,
                 epochs=100, warmup_epochs=2, lr=1e-4, ema_mu=0.99, patience=10, augment=True,
                 validation_fraction=0.1, steps=10, eta=None, lambda_g=0.05, use_sde=True, use_heun=True,
                 use_ig=True, use_guidance=True, instance_opt_steps=0, instance_opt_lr=0.01, random_state=0):
        self.n_scales = n_scales
        self.channels = channels
        self.corr_radius = corr_radius
        self.time_embed_dim = time_embed_dim
        self.mlp_hidden = mlp_hidden
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.lr = lr
        self.ema_mu = ema_mu
        self.patience = patience
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.steps = steps
        self.eta = eta
        self.lambda_g = lambda_g
        self.use_sde = use_sde
        self.use_heun = use_heun
        self.use_ig = use_ig
        self.use_guidance = use_guidance
        self.instance_opt_steps = instance_opt_steps
        self.instance_opt_lr = instance_opt_lr
        self.random_state = random_state

    def _network_config(self):
        return network.NetworkConfig(self.n_scales, tuple(self.channels), self.corr_radius, self.time_embed_dim,
                                     self.mlp_hidden, seed=int(self.random_state))

    def _sampler_config(self):
        return flow.SamplerConfig(self.steps, self.eta, self.lambda_g, self.use_sde, self.use_heun, self.use_ig,
                                  self.use_guidance, seed=int(self.random_state))

    def fit(self, X, y=None, X_val=None):
        net_cfg = self._network_config()
        pairs = check_pairs(X, net_cfg.divisor)
        if X_val is None:
            n_val = max(1, int(round(len(pairs) * self.validation_fraction)))
            if n_val >= len(pairs):
                raise ValueError("need more pairs than the validation split takes")
            pairs, vpairs = pairs[:-n_val], pairs[-n_val:]
        else:
            vpairs = check_pairs(X_val, net_cfg.divisor)
        cfg = train.TrainConfig(epochs=self.epochs, warmup_epochs=self.warmup_epochs, lr=self.lr,
                                ema_mu=self.ema_mu, patience=self.patience, augment=self.augment,
                                seed=int(self.random_state))
        result = train.fit(pairs, vpairs, cfg, net_cfg)
        self.params_ = result.params
        self.teacher_params_ = result.teacher_params
        self.network_config_ = net_cfg
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    @classmethod
    def from_checkpoint(cls, path, **kwargs):
        params, net_cfg, _ = train.load_checkpoint(path)
        est = cls(n_scales=net_cfg.n_scales, channels=net_cfg.channels, corr_radius=net_cfg.corr_radius,
                  time_embed_dim=net_cfg.time_embed_dim, mlp_hidden=net_cfg.mlp_hidden, **kwargs)
        est.params_ = {k: v.numpy() for k, v in params.items()}
        est.network_config_ = net_cfg
        return est

    def predict(self, X):
        """One displacement field per pair."""
        check_fitted(self)
        pairs = check_pairs(X, self.network_config_.divisor)
        model = flow.NetworkPredictor(self.params_, self.network_config_)
        cfg = self._sampler_config()
        out = []
        self.seconds_ = []
        for fixed, moving in pairs:
            t0 = time.perf_counter()
            ddf = flow.sample(model, fixed, moving, cfg)
            if self.instance_opt_steps:
                ddf = flow.instance_optimise(fixed, moving, ddf, self.instance_opt_steps, self.instance_opt_lr,
                                             LossConfig())
            self.seconds_.append(time.perf_counter() - t0)
            out.append(ddf)
        return out

    def transform(self, X):
        """Moving images warped onto their fixed images."""
        pairs = check_pairs(X)
        return [warp_image(m, d) for (_, m), d in zip(pairs, self.predict(pairs))]
