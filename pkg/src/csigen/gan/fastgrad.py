"""Hand-written gradient routines for the training hot loop.

Mathematically identical to the graph-built losses in
:mod:`csigen.gan.nets` but expressed as straight-line numpy, which is an
order of magnitude faster per step.  The test suite cross-validates every
routine here against the differentiation kernel and against finite
differences.

The penalty's parameter gradient uses the directional-derivative identity:
with u = d(penalty)/d(gradient) held constant,

    d(penalty)/d(theta) = d/d(theta) [ u . grad_x C(x) ]

and u . grad_x C equals the forward-mode derivative of C along u, so one
JVP pass through the frozen activation masks followed by one backward
sweep over that pass yields exact double backpropagation for the
piecewise-linear critic (biases receive exactly zero penalty gradient).
"""

from __future__ import annotations

import numpy as np

from csigen.core import ArrayGeometry
from csigen.gan.mlp import MlpParams
from csigen.gan.nets import (
    CriticParams,
    DS_VARIANCE_FLOOR,
    GRAD_NORM_FLOOR,
    DelaySpreadScaler,
    delay_spread_flat,
    generator_forward,
)


class _DsCache:
    """Intermediates of the delay-spread computation at one input."""

    __slots__ = ("re", "im", "power", "total", "taps", "mean", "centered", "var", "ds_taps")


def _ds_forward(flat: np.ndarray, geometry: ArrayGeometry) -> tuple[np.ndarray, _DsCache]:
    cache = _DsCache()
    n = flat.shape[0]
    n_ant, n_tap = geometry.num_antennas, geometry.num_taps
    half = n_ant * n_tap
    cache.re = flat[:, :half].reshape(n, n_ant, n_tap)
    cache.im = flat[:, half:].reshape(n, n_ant, n_tap)
    cache.power = cache.re * cache.re + cache.im * cache.im
    cache.total = cache.power.sum(axis=2) + 1e-30
    cache.taps = np.arange(1, n_tap + 1, dtype=np.float64)
    cache.mean = (cache.power * cache.taps).sum(axis=2) / cache.total
    cache.centered = cache.taps - cache.mean[:, :, None]
    cache.var = (cache.power * cache.centered * cache.centered).sum(axis=2) / cache.total
    cache.ds_taps = np.sqrt(cache.var + DS_VARIANCE_FLOOR)
    return cache.ds_taps * geometry.tap_duration, cache


def _ds_vjp(adjoint: np.ndarray, cache: _DsCache, geometry: ArrayGeometry) -> np.ndarray:
    """Input gradient of the delay spread given an adjoint on the seconds
    output; reverse of every step in :func:`_ds_forward`."""
    a_var = adjoint * geometry.tap_duration * 0.5 / cache.ds_taps
    centered_sq = cache.centered * cache.centered
    a_s2c = a_var / cache.total
    a_total = -a_var * cache.var / cache.total
    a_power = a_s2c[:, :, None] * centered_sq
    # mean path: sum_t p_t (t - mean) is ~0 up to the 1e-30 regularizer
    cross = (cache.power * cache.centered).sum(axis=2)
    a_mean = -2.0 * a_s2c * cross
    a_s1 = a_mean / cache.total
    a_total += -a_mean * cache.mean / cache.total
    a_power += a_s1[:, :, None] * cache.taps
    a_power += a_total[:, :, None]
    a_re = 2.0 * cache.re * a_power
    a_im = 2.0 * cache.im * a_power
    n = a_re.shape[0]
    return np.concatenate([a_re.reshape(n, -1), a_im.reshape(n, -1)], axis=1)


def _ds_jvp(direction: np.ndarray, cache: _DsCache, geometry: ArrayGeometry) -> np.ndarray:
    """Forward-mode derivative of the delay spread along ``direction``."""
    n = direction.shape[0]
    n_ant, n_tap = cache.re.shape[1], cache.re.shape[2]
    half = n_ant * n_tap
    d_re = direction[:, :half].reshape(n, n_ant, n_tap)
    d_im = direction[:, half:].reshape(n, n_ant, n_tap)
    d_power = 2.0 * (cache.re * d_re + cache.im * d_im)
    d_total = d_power.sum(axis=2)
    d_s1 = (d_power * cache.taps).sum(axis=2)
    d_mean = (d_s1 - cache.mean * d_total) / cache.total
    centered_sq = cache.centered * cache.centered
    d_s2c = (d_power * centered_sq).sum(axis=2) + (
        cache.power * (-2.0 * cache.centered)
    ).sum(axis=2) * d_mean
    d_var = (d_s2c - cache.var * d_total) / cache.total
    d_ds_taps = d_var * 0.5 / cache.ds_taps
    return d_ds_taps * geometry.tap_duration


class _MlpCache:
    __slots__ = ("inputs", "masks", "output")


def _mlp_forward(params: MlpParams, x: np.ndarray) -> _MlpCache:
    cache = _MlpCache()
    cache.inputs = []
    cache.masks = []
    activation = x
    for layer in params.layers:
        cache.inputs.append(activation)
        pre = activation @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            mask = pre > 0.0
            cache.masks.append(mask)
            activation = np.where(mask, pre, 0.0)
        else:
            cache.masks.append(None)
            activation = pre
    cache.output = activation
    return cache


def _mlp_backward(
    params: MlpParams,
    cache: _MlpCache,
    adjoint: np.ndarray,
    grads: list[np.ndarray],
    offset: int,
    accumulate_bias: bool = True,
) -> np.ndarray:
    """Accumulate parameter gradients into ``grads[offset:]`` and return the
    input adjoint."""
    for index in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[index]
        mask = cache.masks[index]
        if mask is not None:
            adjoint = adjoint * mask
        grads[offset + 2 * index] += adjoint.T @ cache.inputs[index]
        if accumulate_bias:
            grads[offset + 2 * index + 1] += adjoint.sum(axis=0)
        adjoint = adjoint @ layer.weights
    return adjoint


def _mlp_jvp(params: MlpParams, cache: _MlpCache, direction: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward-mode pass through the frozen masks; returns the output
    perturbation and the per-layer input perturbations."""
    tangents = []
    tangent = direction
    for layer, mask in zip(params.layers, cache.masks):
        tangents.append(tangent)
        tangent = tangent @ layer.weights.T
        if mask is not None:
            tangent = tangent * mask
    return tangent, tangents


def _mlp_jvp_backward(
    params: MlpParams,
    cache: _MlpCache,
    tangents: list,
    adjoint: np.ndarray,
    grads: list[np.ndarray],
    offset: int,
) -> np.ndarray:
    """Backward sweep over a JVP pass: parameter gradients of a scalar that
    is linear in the JVP output.  Biases drop out (their tangent is zero)."""
    for index in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[index]
        mask = cache.masks[index]
        if mask is not None:
            adjoint = adjoint * mask
        grads[offset + 2 * index] += adjoint.T @ tangents[index]
        adjoint = adjoint @ layer.weights
    return adjoint


class _CriticPass:
    """One critic evaluation with everything the backward passes need."""

    __slots__ = ("trunk", "fusion", "ds_cache", "scores")

    def __init__(
        self,
        critic: CriticParams,
        geometry: ArrayGeometry,
        ds_scaler: DelaySpreadScaler,
        csi_flat: np.ndarray,
        pos_scaled: np.ndarray,
        ds_scaled: np.ndarray | None = None,
    ) -> None:
        self.trunk = _mlp_forward(critic.trunk, csi_flat)
        if ds_scaled is None:
            ds_seconds, self.ds_cache = _ds_forward(csi_flat, geometry)
            ds_scaled = ds_scaler.scale(ds_seconds)
        else:
            self.ds_cache = None
        fused = np.concatenate([self.trunk.output, ds_scaled, pos_scaled], axis=1)
        self.fusion = _mlp_forward(critic.fusion, fused)
        self.scores = self.fusion.output


def _critic_backward(
    critic: CriticParams,
    geometry: ArrayGeometry,
    ds_scaler: DelaySpreadScaler,
    forward: _CriticPass,
    seed: np.ndarray,
    grads: list[np.ndarray],
    want_input_grad: bool = False,
) -> np.ndarray | None:
    """Backward pass seeded on the scores; optionally returns the CSI input
    gradient including the delay-spread side path."""
    trunk_offset = 0
    fusion_offset = 2 * len(critic.trunk.layers)
    adj_fused = _mlp_backward(critic.fusion, forward.fusion, seed, grads, fusion_offset)
    trunk_width = critic.trunk.output_width
    n_ant = geometry.num_antennas
    adj_trunk_out = adj_fused[:, :trunk_width]
    input_grad = _mlp_backward(critic.trunk, forward.trunk, adj_trunk_out, grads, trunk_offset)
    if not want_input_grad:
        return None
    if forward.ds_cache is not None:
        adj_ds_scaled = adj_fused[:, trunk_width : trunk_width + n_ant]
        ds_gain = 2.0 / (ds_scaler.maximum - ds_scaler.minimum)
        input_grad = input_grad + _ds_vjp(adj_ds_scaled * ds_gain, forward.ds_cache, geometry)
    return input_grad


def _zeros_like_arrays(arrays: list[np.ndarray]) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in arrays]


def critic_loss_fast(
    critic: CriticParams,
    generator: MlpParams,
    geometry: ArrayGeometry,
    ds_scaler: DelaySpreadScaler,
    real_flat: np.ndarray,
    pos_scaled: np.ndarray,
    ds_real_scaled: np.ndarray,
    noise: np.ndarray,
    eps_mix: np.ndarray,
    gp_lambda: float,
    ds_through_csi: bool = True,
) -> tuple[float, list[np.ndarray], dict]:
    """Drop-in fast equivalent of :func:`csigen.gan.nets.critic_loss`."""
    n = real_flat.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    grads = _zeros_like_arrays(critic.arrays())
    fake_flat = generator_forward(generator, pos_scaled, noise)
    ds_fake_scaled = ds_scaler.scale(delay_spread_flat(fake_flat, geometry))

    fake_pass = _CriticPass(critic, geometry, ds_scaler, fake_flat, pos_scaled, ds_fake_scaled)
    _critic_backward(
        critic, geometry, ds_scaler, fake_pass, np.full((n, 1), 1.0 / n), grads
    )
    real_pass = _CriticPass(critic, geometry, ds_scaler, real_flat, pos_scaled, ds_real_scaled)
    _critic_backward(
        critic, geometry, ds_scaler, real_pass, np.full((n, 1), -1.0 / n), grads
    )
    loss = float(fake_pass.scores.mean() - real_pass.scores.mean())

    penalty_value = 0.0
    if gp_lambda != 0.0:
        eps_mix = np.asarray(eps_mix, dtype=np.float64).reshape(-1, 1)
        mixed = eps_mix * real_flat + (1.0 - eps_mix) * fake_flat
        if ds_through_csi:
            mixed_pass = _CriticPass(critic, geometry, ds_scaler, mixed, pos_scaled)
        else:
            ds_mixed = ds_scaler.scale(
                eps_mix * delay_spread_flat(real_flat, geometry)
                + (1.0 - eps_mix) * delay_spread_flat(fake_flat, geometry)
            )
            mixed_pass = _CriticPass(critic, geometry, ds_scaler, mixed, pos_scaled, ds_mixed)
        penalty_grads = _zeros_like_arrays(grads)
        input_grad = _critic_backward(
            critic,
            geometry,
            ds_scaler,
            mixed_pass,
            np.ones((n, 1)),
            penalty_grads,  # value-path parameter grads of sum(C) are not used
            want_input_grad=True,
        )
        norm = np.sqrt((input_grad * input_grad).sum(axis=1) + GRAD_NORM_FLOOR)
        penalty_value = float(((norm - 1.0) ** 2).mean())
        u = (2.0 / n) * ((norm - 1.0) / norm)[:, None] * input_grad

        # JVP along u through the frozen masks, then one backward sweep
        trunk_tangent_out, trunk_tangents = _mlp_jvp(critic.trunk, mixed_pass.trunk, u)
        if mixed_pass.ds_cache is not None:
            ds_gain = 2.0 / (ds_scaler.maximum - ds_scaler.minimum)
            ds_tangent = _ds_jvp(u, mixed_pass.ds_cache, geometry) * ds_gain
        else:
            ds_tangent = np.zeros((n, geometry.num_antennas))
        fused_tangent = np.concatenate(
            [trunk_tangent_out, ds_tangent, np.zeros((n, 2))], axis=1
        )
        _, fusion_tangents = _mlp_jvp(critic.fusion, mixed_pass.fusion, fused_tangent)

        pgrads = _zeros_like_arrays(grads)
        fusion_offset = 2 * len(critic.trunk.layers)
        adj = _mlp_jvp_backward(
            critic.fusion, mixed_pass.fusion, fusion_tangents, np.ones((n, 1)), pgrads, fusion_offset
        )
        trunk_width = critic.trunk.output_width
        _mlp_jvp_backward(
            critic.trunk, mixed_pass.trunk, trunk_tangents, adj[:, :trunk_width], pgrads, 0
        )
        for total, part in zip(grads, pgrads):
            total += gp_lambda * part
        loss += gp_lambda * penalty_value

    diagnostics = {
        "real_score": float(real_pass.scores.mean()),
        "fake_score": float(fake_pass.scores.mean()),
        "penalty": penalty_value,
    }
    return loss, grads, diagnostics


def generator_loss_fast(
    critic: CriticParams,
    generator: MlpParams,
    geometry: ArrayGeometry,
    ds_scaler: DelaySpreadScaler,
    pos_scaled: np.ndarray,
    noise: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Drop-in fast equivalent of :func:`csigen.gan.nets.generator_loss`."""
    n = pos_scaled.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    inputs = np.concatenate([noise, pos_scaled], axis=1)
    gen_pass = _mlp_forward(generator, inputs)
    fake_flat = gen_pass.output
    critic_pass = _CriticPass(critic, geometry, ds_scaler, fake_flat, pos_scaled)
    loss = float(-critic_pass.scores.mean())

    critic_grads = _zeros_like_arrays(critic.arrays())  # discarded
    adj_fake = _critic_backward(
        critic,
        geometry,
        ds_scaler,
        critic_pass,
        np.full((n, 1), -1.0 / n),
        critic_grads,
        want_input_grad=True,
    )
    grads = _zeros_like_arrays(generator.arrays())
    _mlp_backward(generator, gen_pass, adj_fake, grads, 0)
    return loss, grads
