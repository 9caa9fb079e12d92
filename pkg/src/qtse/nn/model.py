from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import CheckpointError, GradError
from .params import ModelParams, load_checkpoint


class Model:
    """A fixed architecture with a hand-written reverse pass.

    Subclasses build their layers in ``__init__`` and provide ``arch()``,
    ``_init_tensors(rng)``, ``forward(params, x) -> (out, cache)`` and
    ``backward(params, cache, g_out) -> grads``.
    """

    arch_name = "model"

    def arch(self) -> dict:
        raise NotImplementedError

    def _init_tensors(self, rng: np.random.Generator) -> dict:
        raise NotImplementedError

    def init(self, seed: int = 0) -> ModelParams:
        rng = np.random.default_rng(seed)
        return ModelParams(self._init_tensors(rng), seed, self.arch())

    def param_shapes(self) -> dict:
        return ModelParams(self._init_tensors(np.random.default_rng(0))).shapes

    def load(self, path) -> ModelParams:
        params = load_checkpoint(path, self.param_shapes())
        if params.arch and params.arch != self.arch():
            raise CheckpointError(f"{path}: architecture {params.arch} does not match {self.arch()}")
        return params

    def value_and_grad(self, params, x, loss_fn: Callable) -> tuple[float, dict]:
        """Run forward, evaluate ``loss_fn(out) -> (loss, d_loss/d_out)`` and
        back-propagate to every parameter."""
        tensors = params.tensors if isinstance(params, ModelParams) else params
        out, cache = self.forward(tensors, x)
        loss, g_out = loss_fn(out)
        if np.ndim(loss) != 0:
            raise GradError(f"loss must be a scalar, got shape {np.shape(loss)}")
        return float(loss), self.backward(tensors, cache, g_out)
