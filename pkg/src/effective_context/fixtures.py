"""Models with analytically known influence, for checking the measurements."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class _Fixture:
    dtype = np.dtype(np.float64)
    num_layers = 1

    @staticmethod
    def _batched(x):
        x = ad.as_tensor(x)
        if x.data.dtype != np.float64 and not x.requires_grad:
            x = ad.Tensor(x.data.astype(np.float64))
        return x


class IdentityModel(_Fixture):
    """f(x) = x; every output frame depends only on its own input frame."""

    def forward(self, x, start_position: int = 0, mask=None):
        x = self._batched(x)
        return [x, x * 1.0]


class ScaledModel(_Fixture):
    """c * f(x) for a wrapped model (or the identity)."""

    def __init__(self, scale: float, base=None):
        self.scale = float(scale)
        self.base = base
        if base is not None:
            self.num_layers = base.num_layers

    def forward(self, x, start_position: int = 0, mask=None):
        if self.base is None:
            x = self._batched(x)
            return [x, x * self.scale]
        outs = self.base.forward(x, start_position=start_position, mask=mask)
        return [o * self.scale for o in outs]


class ConvFixture(_Fixture):
    """One depthwise convolution along time with a 3-tap kernel, zero padded.

    ``y_t = w[0] x_{t-1} + w[1] x_t + w[2] x_{t+1}``: the receptive-field
    radius is 1 and the influence is ``|w[j]| sqrt(K)`` at shift ``j - 1``.
    """

    def __init__(self, kernel=(1.0, 1.0, 1.0)):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        if self.kernel.shape != (3,):
            raise ValueError("kernel must have 3 taps")

    def forward(self, x, start_position: int = 0, mask=None):
        x = self._batched(x)
        T = x.shape[-2]
        zero = ad.Tensor(np.zeros(x.shape[:-2] + (1, x.shape[-1])))
        padded = ad.concat([zero, x, zero], axis=-2)
        w = self.kernel
        y = (padded[..., 0:T, :] * w[0] + padded[..., 1:T + 1, :] * w[1]
             + padded[..., 2:T + 2, :] * w[2])
        return [x, y]
