"""Training objectives: mean squared error, Gaussian NLL, and the VB bound.

The probabilistic heads parameterize per-DOF Gaussians through an
overflow-safe softplus; the VB objective combines the sampled
posterior-vs-prior log-density gap of every stochastic layer (Empirical
Bayes: the prior means receive gradients too) with the Gaussian data NLL
under the sampled weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import softplus_values
from .unet import UNet

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def loss_det(tape: ad.Tape, model: UNet, f_batch: np.ndarray, u_batch: np.ndarray,
             train: bool = True) -> ad.TensorNode:
    """Mean over the batch of the squared l2 prediction error."""
    if len(f_batch) == 0:
        raise ValueError("batch must be nonempty")
    out, _ = model.forward(tape, f_batch, train=train)
    diff = ad.sub(tape, out, ad.leaf(u_batch))
    return ad.smul(tape, ad.sum_all(tape, ad.mul(tape, diff, diff)), 1.0 / len(f_batch))


def _gaussian_nll(tape, mu, rho, targets: np.ndarray) -> ad.TensorNode:
    """Sum over batch and DOFs of log(sqrt(2 pi) sigma) + (u - mu)^2 / (2 sigma^2)."""
    sigma = ad.softplus(tape, rho)
    resid = ad.sub(tape, mu, ad.leaf(targets))
    quad = ad.div(tape, ad.mul(tape, resid, resid),
                  ad.smul(tape, ad.mul(tape, sigma, sigma), 2.0))
    core = ad.sum_all(tape, ad.add(tape, ad.log(tape, sigma), quad))
    return ad.sadd(tape, core, targets.size * LOG_SQRT_2PI)


def loss_mle(tape: ad.Tape, model: UNet, f_batch: np.ndarray, u_batch: np.ndarray,
             train: bool = True) -> ad.TensorNode:
    """Negative log-likelihood of the batch under the predicted Gaussians."""
    if model.config.mode != "mle":
        raise ValueError("loss_mle requires a model in mle mode")
    if len(f_batch) == 0:
        raise ValueError("batch must be nonempty")
    out, _ = model.forward(tape, f_batch, train=train)
    mu, rho = ad.channel_split(tape, out, model.config.dim)
    return _gaussian_nll(tape, mu, rho, u_batch)


def _sampled_kl(tape, vb_samples, sigma_p: float) -> ad.TensorNode:
    """log q(w | mu, sigma) - log p(w | mu_p, sigma_p) at the sampled weights.

    The sqrt(2 pi) normalizations cancel between the two densities; the
    constant log sigma_p survives per weight.
    """
    total = None
    for rec in vb_samples:
        w, mu, sigma, mu_p = rec["w"], rec["mu"], rec["sigma"], rec["mu_p"]
        dq = ad.sub(tape, w, mu)
        quad_q = ad.div(tape, ad.mul(tape, dq, dq),
                        ad.smul(tape, ad.mul(tape, sigma, sigma), 2.0))
        dp = ad.sub(tape, w, mu_p)
        quad_p = ad.smul(tape, ad.mul(tape, dp, dp), 1.0 / (2.0 * sigma_p**2))
        piece = ad.sum_all(
            tape,
            ad.add(tape, ad.sub(tape, quad_p, quad_q),
                   ad.smul(tape, ad.log(tape, sigma), -1.0)),
        )
        piece = ad.sadd(tape, piece, w.values.size * np.log(sigma_p))
        total = piece if total is None else ad.add(tape, total, piece)
    if total is None:
        raise ValueError("model has no variational layers")
    return total


def loss_vb(tape: ad.Tape, model: UNet, f_batch: np.ndarray, u_batch: np.ndarray,
            rng: np.random.Generator, kl_scale: float, mc_samples: int = 1,
            train: bool = True):
    """Sampled variational objective: kl_scale * KL-gap + data NLL.

    Averages over ``mc_samples`` independent weight draws. ``kl_scale``
    should be batch_size / N so that summing over an epoch's batches
    reproduces the full-dataset objective. Returns (loss, kl, nll) nodes,
    the last two already averaged over draws and scaled as they enter the
    loss.
    """
    if model.config.mode != "vb":
        raise ValueError("loss_vb requires a model in vb mode")
    if len(f_batch) == 0:
        raise ValueError("batch must be nonempty")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    kl_total = None
    nll_total = None
    for _ in range(mc_samples):
        out, vb_samples = model.forward(tape, f_batch, train=train, rng=rng)
        mu, rho = ad.channel_split(tape, out, model.config.dim)
        nll = _gaussian_nll(tape, mu, rho, u_batch)
        kl = ad.smul(tape, _sampled_kl(tape, vb_samples, model.config.sigma_p), kl_scale)
        kl_total = kl if kl_total is None else ad.add(tape, kl_total, kl)
        nll_total = nll if nll_total is None else ad.add(tape, nll_total, nll)
    kl_mean = ad.smul(tape, kl_total, 1.0 / mc_samples)
    nll_mean = ad.smul(tape, nll_total, 1.0 / mc_samples)
    return ad.add(tape, kl_mean, nll_mean), kl_mean, nll_mean


def analytic_kl(mu: np.ndarray, rho: np.ndarray, mu_p: np.ndarray,
                sigma_p: float) -> float:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over weights.

    Non-negative, and zero exactly when q and p coincide.
    """
    sigma = softplus_values(rho)
    mu = np.asarray(mu, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    terms = (np.log(sigma_p / sigma)
             + (sigma**2 + (mu - mu_p) ** 2) / (2.0 * sigma_p**2) - 0.5)
    return float(terms.sum())


def model_analytic_kl(model: UNet) -> float:
    """Analytic KL between stored posteriors and priors, summed over layers."""
    from .unet import variational_layer_names

    total = 0.0
    for name in variational_layer_names(model.config):
        p = model.store.params
        total += analytic_kl(p[f"{name}.mu_w"].values, p[f"{name}.rho_w"].values,
                             p[f"{name}.mu_p"].values, model.config.sigma_p)
    return total
