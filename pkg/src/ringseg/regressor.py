"""Feed-forward parameter regressor and the Adam optimizer used to train it.

The regressor maps a block-averaged, square-downsampled image to the
6 affine parameters plus the deformation coefficients of the shape model.
Hidden layers use tanh; the output head is linear and is initialized to
zero weights with a bias holding the dataset's mean placement, so an
untrained network predicts the mean shape at the mean placement for every
input.
"""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / correction1
            vhat = v / correction2
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def downsample_image(image: np.ndarray, target: int) -> np.ndarray:
    """Block-average a square image down to target x target."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError("expected a square 2-D image")
    size = img.shape[0]
    if size % target != 0:
        raise ValueError(f"image size {size} not divisible by downsample "
                         f"target {target}")
    block = size // target
    return img.reshape(target, block, target, block).mean(axis=(1, 3))


def image_to_input(image: np.ndarray, target: int) -> np.ndarray:
    """Downsample and center an image into a flat feature vector."""
    small = downsample_image(image, target)
    return (small.reshape(-1) - 0.5) * 2.0


class RegressorModel:
    """Tanh MLP with a linear output head.

    layer_sizes runs [n_in, hidden..., n_out]; weights[i] has shape
    (layer_sizes[i], layer_sizes[i+1]).
    """

    def __init__(self, layer_sizes: list[int], seed: int = 0,
                 output_bias: np.ndarray | None = None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        self.layer_sizes = list(int(s) for s in layer_sizes)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i in range(len(self.layer_sizes) - 1):
            n_in, n_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            last = i == len(self.layer_sizes) - 2
            if last:
                w = np.zeros((n_in, n_out))
            else:
                bound = np.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-bound, bound, (n_in, n_out))
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))
        if output_bias is not None:
            bias = np.asarray(output_bias, dtype=float).reshape(-1)
            if bias.shape != (self.layer_sizes[-1],):
                raise ValueError("output bias length must match the last layer")
            self.biases[-1] = bias.copy()

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def forward(self, x: np.ndarray):
        """Batch forward pass; returns (output, cache) for backward."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.input_size:
            raise ValueError("input width does not match the network")
        activations = [x]
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == n_layers - 1 else np.tanh(z)
            activations.append(h)
        out = activations[-1]
        return (out[0] if squeeze else out), activations

    def backward(self, activations: list[np.ndarray],
                 grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(loss) for the parameter list given d loss/d output."""
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        w_grads: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        b_grads: list[np.ndarray] = [np.empty(0)] * len(self.biases)
        delta = g
        for i in range(len(self.weights) - 1, -1, -1):
            w_grads[i] = activations[i].T @ delta
            b_grads[i] = delta.sum(axis=0)
            if i > 0:
                # tanh' = 1 - tanh^2, using the stored activation
                delta = (delta @ self.weights[i].T) * (1.0 - activations[i] ** 2)
        return w_grads + b_grads
