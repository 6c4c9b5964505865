"""Voting-based sparse 3D convolution, its adjoint, ReLU and a dense reference."""

from dataclasses import dataclass

import numpy as np

from . import _backend
from .voxel_grid import SparseGrid


@dataclass(eq=False)
class FilterBank:
    """Weights of one convolutional layer.

    ``weights`` has shape ``(2I+1, 2J+1, 2K+1, f_in, f_out)``, indexed so that
    ``weights[I + i, J + j, K + k]`` is the tap at spatial offset ``(i, j, k)``.
    Every bias must be non-positive.
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float32).reshape(-1)
        if self.weights.ndim != 5:
            raise ValueError(f"weights must be 5-D, got shape {self.weights.shape}")
        if any(k % 2 == 0 for k in self.weights.shape[:3]):
            raise ValueError(f"kernel extents must be odd, got {self.weights.shape[:3]}")
        if self.biases.shape[0] != self.weights.shape[4]:
            raise ValueError("one bias per output channel required")
        if np.any(self.biases > 0):
            raise ValueError("biases must be non-positive")

    @property
    def kernel_shape(self):
        return self.weights.shape[:3]

    @property
    def f_in(self):
        return self.weights.shape[3]

    @property
    def f_out(self):
        return self.weights.shape[4]

    def project(self):
        """Clamp biases back into the feasible set ``b <= 0``."""
        np.minimum(self.biases, 0.0, out=self.biases)

    def copy(self):
        return FilterBank(self.weights.copy(), self.biases.copy())


@dataclass
class LayerGradients:
    d_weights: np.ndarray
    d_biases: np.ndarray

    @classmethod
    def zeros_like(cls, bank):
        return cls(np.zeros_like(bank.weights), np.zeros_like(bank.biases))


def _check_channels(grid, bank):
    if grid.num_channels != bank.f_in:
        raise ValueError(
            f"input has {grid.num_channels} channels, filter bank expects {bank.f_in}"
        )


def vote_forward(grid, bank):
    """Sparse convolution by letting each occupied cell cast weighted votes.

    Output extents equal input extents; votes leaving the grid are dropped.
    The bias is added once to every cell that received at least one vote and
    cells with no votes are absent. Because biases are non-positive, ReLU of
    this result equals ReLU of the dense zero-padded convolution.
    """
    _check_channels(grid, bank)
    if grid.num_occupied == 0:
        return SparseGrid.empty(grid.shape, bank.f_out)
    keys, vals = _backend.kernels().vote_forward(
        grid.coords, grid.features, bank.weights, *grid.shape
    )
    order = np.argsort(keys, kind="stable")
    keys, vals = keys[order], vals[order]
    vals += bank.biases
    return _from_votes(keys, vals, grid.shape)


def _from_votes(keys, vals, shape):
    # A vote-receiving cell can still sum to exactly zero; it is simply not stored.
    nonzero = np.any(vals != 0, axis=1)
    if not nonzero.all():
        keys, vals = keys[nonzero], vals[nonzero]
    return SparseGrid._trusted(keys, vals, shape)


def vote_forward_raw(grid, bank):
    """Like :func:`vote_forward` but keeps every vote-receiving cell.

    Returns ``(keys, values)`` with bias added; used by training, which needs
    the full pre-activation support including cells that sum to zero.
    """
    _check_channels(grid, bank)
    if grid.num_occupied == 0:
        return np.empty(0, np.int64), np.empty((0, bank.f_out), np.float32)
    keys, vals = _backend.kernels().vote_forward(
        grid.coords, grid.features, bank.weights, *grid.shape
    )
    order = np.argsort(keys, kind="stable")
    vals = vals[order]
    vals += bank.biases
    return keys[order], vals


def dense_forward_oracle(grid, bank, dtype=np.float64):
    """Reference dense convolution with zero padding; bias added everywhere.

    Gathers ``sum_ijk w[i,j,k] h[l+i, m+j, n+k] + b`` at every cell, for small
    grids in tests only. Returns an ``(L, M, N, f_out)`` array.
    """
    _check_channels(grid, bank)
    h = grid.to_dense().astype(dtype)
    w = bank.weights.astype(dtype)
    kx, ky, kz = bank.kernel_shape
    I, J, K = kx // 2, ky // 2, kz // 2
    L, M, N = grid.shape
    padded = np.pad(h, ((I, I), (J, J), (K, K), (0, 0)))
    out = np.zeros((L, M, N, bank.f_out), dtype=dtype)
    for a in range(kx):
        for b in range(ky):
            for c in range(kz):
                window = padded[a : a + L, b : b + M, c : c + N]
                out += window @ w[a, b, c]
    out += bank.biases.astype(dtype)
    return out


def relu(grid):
    """Elementwise ``max(0, z)``; cells that become all-zero are dropped."""
    feats = np.maximum(grid.features, 0.0)
    keep = np.any(feats > 0, axis=1)
    return SparseGrid._trusted(grid.keys[keep], feats[keep], grid.shape)


def backward(grid, bank, grad_output):
    """Gradients of a voting layer.

    Args:
        grid: the layer input.
        bank: the layer's filters.
        grad_output: upstream gradient on the pre-activation output. Its cells
            must all be vote-receiving cells of ``vote_forward(grid, bank)``.

    Returns:
        ``(LayerGradients, grad_input)`` where ``grad_input`` is a SparseGrid
        on (a subset of) the input's occupied cells.
    """
    _check_channels(grid, bank)
    if grad_output.num_channels != bank.f_out or grad_output.shape != grid.shape:
        raise ValueError("grad_output shape does not match layer output")
    d_w, g_in = _backend.kernels().vote_backward(
        grid.coords, grid.features, bank.weights,
        grad_output.keys, grad_output.features, *grid.shape,
    )
    grads = LayerGradients(d_w, grad_output.features.sum(axis=0, dtype=np.float64).astype(np.float32))
    keep = np.any(g_in != 0, axis=1)
    return grads, SparseGrid._trusted(grid.keys[keep], g_in[keep], grid.shape)


def backward_raw(grid, bank, gkeys, gvals):
    """Array form of :func:`backward` used by training.

    ``gkeys``/``gvals`` may include zero rows. Returns ``(d_weights,
    d_biases, grad_input)`` with ``grad_input`` aligned to ``grid.coords``.
    """
    d_w, g_in = _backend.kernels().vote_backward(
        grid.coords, grid.features, bank.weights,
        np.ascontiguousarray(gkeys, dtype=np.int64),
        np.ascontiguousarray(gvals, dtype=np.float32), *grid.shape,
    )
    return d_w, gvals.sum(axis=0, dtype=np.float64).astype(np.float32), g_in
