"""Sampling a trained generator at given positions.

Two procedures: a single noise vector shared by every position (probes the
spatial consistency of the learned model), or one independent noise vector
per position (probes the learned conditional distribution).
"""

from __future__ import annotations

import numpy as np

from csigen.core import CsiDataset
from csigen.gan.nets import generate_csi
from csigen.gan.train import Checkpoint


def sample_fixed(checkpoint: Checkpoint, positions: np.ndarray, seed: int) -> CsiDataset:
    """One noise vector drawn from ``seed``, held fixed over all positions."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    noise_vector = np.random.default_rng(seed).standard_normal(checkpoint.config.noise_dim)
    noise = np.broadcast_to(noise_vector, (len(positions), checkpoint.config.noise_dim))
    conditions = checkpoint.condition_scaler.scale(positions)
    csi = generate_csi(checkpoint.generator, checkpoint.geometry, conditions, noise)
    return CsiDataset(checkpoint.geometry, csi, positions)


def sample_variable(
    checkpoint: Checkpoint, positions: np.ndarray, seed: int, start_index: int = 0
) -> CsiDataset:
    """Independent noise per position, from a per-index stream derived from
    (seed, index); regenerating any single position reproduces its batch
    result bit-exactly when the matching ``start_index`` is passed.

    Positions run through the generator one at a time: batched BLAS calls
    round differently for different batch shapes, which would break the
    per-index reproducibility contract.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    conditions = checkpoint.condition_scaler.scale(positions)
    csi = np.zeros((len(positions),) + checkpoint.geometry.csi_shape, dtype=np.complex128)
    for offset in range(len(positions)):
        stream = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(start_index + offset,))
        )
        noise = stream.standard_normal((1, checkpoint.config.noise_dim))
        csi[offset] = generate_csi(
            checkpoint.generator, checkpoint.geometry, conditions[offset : offset + 1], noise
        )[0]
    return CsiDataset(checkpoint.geometry, csi, positions)
