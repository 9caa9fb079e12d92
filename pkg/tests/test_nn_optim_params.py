"""Tests for Adam, the plateau schedule and the checkpoint format."""

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qtse.errors import CheckpointError, OptimStepRejected
from qtse.nn import AdamState, ModelParams, PlateauHalving, adam_step, load_checkpoint, save_checkpoint


class TestAdam:
    def test_matches_textbook_update(self, rng):
        params = {"w": rng.standard_normal(4)}
        grads_seq = [rng.standard_normal(4) for _ in range(3)]
        state = AdamState()
        m = v = np.zeros(4)
        w = params["w"].copy()
        for t, g in enumerate(grads_seq, start=1):
            params, state = adam_step(params, {"w": g}, state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g**2
            w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(params["w"], w, rtol=1e-12)
        assert state.step == 3

    def test_first_step_moves_by_lr(self, rng):
        params = {"w": np.zeros(3)}
        new, _ = adam_step(params, {"w": np.array([5.0, -0.1, 2.0])}, AdamState(), lr=1e-3)
        np.testing.assert_allclose(new["w"], [-1e-3, 1e-3, -1e-3], rtol=1e-6)

    def test_rejects_non_finite(self):
        params = {"w": np.ones(2)}
        state = AdamState()
        with pytest.raises(OptimStepRejected):
            adam_step(params, {"w": np.array([1.0, np.nan])}, state)
        assert state.step == 0 and np.all(params["w"] == 1.0)

    def test_missing_gradient_leaves_tensor(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        new, _ = adam_step(params, {"a": np.ones(2)}, AdamState())
        assert np.all(new["b"] == 1.0)


class TestPlateauHalving:
    def test_halves_after_three_flat_epochs(self):
        sched = PlateauHalving(1e-3, patience=3)
        lrs = [sched.step(v) for v in [1.0, 0.9, 0.9, 0.95, 0.91]]
        assert lrs == [1e-3, 1e-3, 1e-3, 1e-3, 5e-4]

    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=40))
    def test_lr_is_power_of_two_fraction(self, losses):
        sched = PlateauHalving(1e-3, patience=3)
        for v in losses:
            lr = sched.step(v)
        assert lr == 1e-3 * 0.5**sched.halvings
        assert sched.halvings <= len(losses) // 3

    def test_constant_loss_halves_every_third_epoch(self):
        sched = PlateauHalving(1e-3, patience=3)
        lrs = [sched.step(1.0) for _ in range(10)]
        assert lrs == [1e-3] * 3 + [5e-4] * 3 + [2.5e-4] * 3 + [1.25e-4]

    def test_invalid(self):
        with pytest.raises(ValueError):
            PlateauHalving(0.0)


class TestCheckpoint:
    def _params(self, rng):
        return ModelParams({"a.w": rng.standard_normal((2, 3)), "a.b": rng.standard_normal(2)}, 7, {"kind": "x"})

    def test_round_trip(self, tmp_path, rng):
        p = self._params(rng)
        back = load_checkpoint(save_checkpoint(p, tmp_path / "c.npz"), p.shapes)
        assert back.seed == 7 and back.arch == {"kind": "x"}
        for k in p:
            np.testing.assert_array_equal(back[k], p[k])

    def test_shape_mismatch(self, tmp_path, rng):
        path = save_checkpoint(self._params(rng), tmp_path / "c.npz")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, {"a.w": (3, 2), "a.b": (2,)})

    def test_name_mismatch(self, tmp_path, rng):
        path = save_checkpoint(self._params(rng), tmp_path / "c.npz")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, {"a.w": (2, 3)})

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a zip")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "plain.npz"
        np.savez(path, w=np.ones(2))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_manifest_disagrees_with_array(self, tmp_path):
        path = tmp_path / "bad.npz"
        manifest = {"version": 1, "arch": {}, "seed": 0, "tensors": [{"name": "w", "shape": [3]}]}
        np.savez(path, w=np.ones(2), __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_non_finite_params_rejected(self):
        with pytest.raises(ValueError):
            ModelParams({"w": np.array([np.inf])})
