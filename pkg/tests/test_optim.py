import numpy as np
import pytest

from taskdriven import checkpoint
from taskdriven import rng as rngs
from taskdriven.autodiff import Tensor
from taskdriven.checkpoint import CheckpointFormatError
from taskdriven.optim import Adam, AdamState, NonFiniteGradientError, adam_step, clip_block_norms


class TestAdam:
    def test_first_step_moves_by_lr(self):
        new, state = adam_step({"w": np.array([1.0, -2.0])}, {"w": np.array([3.0, -0.5])}, AdamState(), 0.1)
        np.testing.assert_allclose(new["w"], [0.9, -1.9])
        assert state.step == 1

    def test_inputs_untouched(self):
        p, g = {"w": np.ones(3)}, {"w": np.ones(3)}
        adam_step(p, g, AdamState(), 0.1)
        assert np.all(p["w"] == 1.0)

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam({"w": w}, 0.1)
        for _ in range(500):
            opt.step({"w": 2 * (w.data - 1.0)})
        np.testing.assert_allclose(w.data, [1.0, 1.0], atol=1e-3)

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradientError, match="'b'"):
            adam_step({"b": np.zeros(2)}, {"b": np.array([0.0, np.nan])}, AdamState(), 0.1)

    def test_missing_block_is_zero(self):
        new, _ = adam_step({"a": np.ones(1), "b": np.ones(1)}, {"a": np.ones(1)}, AdamState(), 0.1)
        assert new["b"][0] == 1.0

    def test_clip(self):
        out = clip_block_norms({"a": np.array([3.0, 4.0]), "b": np.array([0.1])}, 1.0)
        np.testing.assert_allclose(out["a"], [0.6, 0.8])
        assert out["b"][0] == 0.1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        blocks = {"x": np.arange(6.0).reshape(2, 3), "é": np.array(3.5), "z": np.zeros((0, 2))}
        checkpoint.save(tmp_path / "c", blocks)
        back = checkpoint.load(tmp_path / "c")
        assert list(back) == list(blocks)
        assert all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in blocks.items())

    def test_layout(self):
        buf = checkpoint.dumps({"a": np.array([1.0])})
        assert buf[:4] == b"TDPG" and buf[4:8] == (1).to_bytes(4, "little") and buf[-8:] == np.array(1.0, "<f8").tobytes()

    @pytest.mark.parametrize("buf", [b"XXXX", checkpoint.dumps({"a": np.ones(3)})[:-1], checkpoint.dumps({"a": np.ones(1)}) + b"\0"])
    def test_corrupt(self, buf):
        with pytest.raises(CheckpointFormatError):
            checkpoint.loads(buf)

    def test_digest_depends_on_content(self):
        assert checkpoint.digest({"a": np.ones(2)}) != checkpoint.digest({"a": np.array([1.0, 1.0 + 1e-15])})


class TestStreams:
    def test_independent_of_draw_order(self):
        a = rngs.make_rng(5, rngs.ROLLOUT, 0, 7).standard_normal(3)
        rngs.make_rng(5, rngs.ROLLOUT, 0, 6).standard_normal(100)
        assert a.tobytes() == rngs.make_rng(5, rngs.ROLLOUT, 0, 7).standard_normal(3).tobytes()

    def test_streams_differ(self):
        draws = {rngs.make_rng(1, s).random() for s in (rngs.INIT, rngs.ROLLOUT, rngs.MINE, rngs.EVAL, rngs.MARGINAL)}
        assert len(draws) == 5
