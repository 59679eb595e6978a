import math

import numpy as np
import pytest

from crossmpi import tensor as T
from crossmpi.model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    ToyVLM,
    TrainingError,
    parameter_shapes,
)

TINY = ModelConfig(
    image_size=8,
    channels=1,
    patch_size=4,
    d_v=8,
    d_l=16,
    n_vision_layers=1,
    n_lm_layers=8,
    n_heads=2,
    vocab_size=8,
    max_seq_len=24,
    seed=7,
)


@pytest.fixture(scope="module")
def tiny():
    return ToyVLM(TINY)


def rand_image(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(cfg.image_size, cfg.image_size, cfg.channels))


class TestConfig:
    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_l=64, n_heads=3)

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=30, patch_size=4)

    def test_min_lm_depth(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_lm_layers=6)


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = ToyVLM(TINY), ToyVLM(TINY)
        for name in a.param_names():
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        import dataclasses

        a = ToyVLM(TINY)
        b = ToyVLM(dataclasses.replace(TINY, seed=8))
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data) for n in a.param_names()
        )

    def test_param_shapes_match_declaration(self, tiny):
        for name, shape in parameter_shapes(TINY):
            assert tiny.params[name].shape == shape


class TestForward:
    def test_zero_weight_model_uniform_softmax(self):
        m = ToyVLM(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        logits, _ = m.forward(np.array([1, 2]), rand_image(TINY))
        probs = T.softmax(logits).data
        np.testing.assert_allclose(probs, np.full_like(probs, 1.0 / TINY.vocab_size))

    def test_hidden_state_shapes(self, tiny):
        _, hiddens = tiny.forward(np.array([1, 2, 3]), rand_image(TINY))
        assert len(hiddens) == TINY.n_lm_layers
        for h in hiddens:
            assert h.shape == (TINY.num_visual_tokens + 3, TINY.d_l)

    def test_hidden_taps_do_not_change_logits(self, tiny):
        img = rand_image(TINY)
        logits1, hiddens = tiny.forward(np.array([1, 2]), img)
        _ = [h.data.sum() for h in hiddens]
        logits2, _ = tiny.forward(np.array([1, 2]), img)
        np.testing.assert_array_equal(logits1.data, logits2.data)

    def test_causality(self, tiny):
        img = rand_image(TINY)
        base = np.array([1, 2, 3, 4])
        changed = np.array([1, 2, 3, 5])
        la, _ = tiny.forward(base, img)
        lb, _ = tiny.forward(changed, img)
        cut = TINY.num_visual_tokens + 3
        np.testing.assert_array_equal(la.data[:cut], lb.data[:cut])
        assert not np.array_equal(la.data[cut], lb.data[cut])

    def test_empty_prompt_rejected(self, tiny):
        with pytest.raises(ValueError, match="nonempty"):
            tiny.forward(np.array([], dtype=np.int64), rand_image(TINY))

    def test_overflow_rejected(self, tiny):
        with pytest.raises(ValueError, match="max_seq_len"):
            tiny.forward(np.arange(30) % 8, rand_image(TINY))


class TestNLL:
    def test_uniform_model_hand_value(self):
        m = ToyVLM(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        nll = m.sequence_nll(np.array([1]), rand_image(TINY), np.array([2, 3, 4]))
        assert nll.item() == pytest.approx(3 * math.log(8), rel=1e-12)

    def test_loss_nonnegative(self, tiny):
        for seed in range(3):
            nll = tiny.sequence_nll(np.array([1, 2]), rand_image(TINY, seed), np.array([3, 4]))
            assert nll.item() >= 0.0

    def test_forced_probability_one_gives_zero(self):
        m = ToyVLM(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        # a huge bias on one vocab entry forces softmax probability ~1 there
        m.params["lm.head.b"].data[3] = 1e4
        nll = m.sequence_nll(np.array([1]), rand_image(TINY), np.array([3, 3]))
        assert nll.item() == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_image_gradient_matches_finite_differences(self, seed):
        m = ToyVLM(TINY)
        m.set_trainable(False)
        prompt, answer = np.array([1, 2]), np.array([3])
        point = T.Tensor(rand_image(TINY, seed))
        err = T.grad_check(lambda img: m.sequence_nll(prompt, img, answer), point, 1e-5)
        assert err < 1e-4


class TestDecode:
    def test_zero_weight_model_emits_lowest_id(self):
        m = ToyVLM(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        out = m.greedy_decode(np.array([1]), rand_image(TINY), max_new=3)
        assert out == [0, 0, 0]

    def test_deterministic(self, tiny):
        img = rand_image(TINY)
        a = tiny.greedy_decode(np.array([1, 2]), img, max_new=4)
        b = tiny.greedy_decode(np.array([1, 2]), img, max_new=4)
        assert a == b

    def test_stops_at_end_token(self):
        m = ToyVLM(TINY)
        for p in m.params.values():
            p.data = np.zeros_like(p.data)
        m.params["lm.head.b"].data[TINY.end_token] = 1e4
        out = m.greedy_decode(np.array([1]), rand_image(TINY), max_new=5)
        assert out == [TINY.end_token]


class TestTrain:
    def _single_sample(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(TINY.image_size, TINY.image_size, TINY.channels))
        return [(np.array([1, 2]), img, np.array([3, 5, TINY.end_token]))]

    def test_overfits_single_sample(self):
        m = ToyVLM(TINY)
        curve = m.train(self._single_sample(), epochs=200, lr=0.05, seed=0)
        assert curve[-1] < 0.1

    def test_zero_lr_leaves_params(self):
        m = ToyVLM(TINY)
        before = {n: p.data.copy() for n, p in m.params.items()}
        m.train(self._single_sample(), epochs=2, lr=0.0, seed=0)
        for n, p in m.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_same_seed_same_curve(self):
        data = self._single_sample() * 4
        c1 = ToyVLM(TINY).train(data, epochs=3, lr=0.01, seed=5, batch_size=2)
        c2 = ToyVLM(TINY).train(data, epochs=3, lr=0.01, seed=5, batch_size=2)
        assert c1 == c2

    def test_divergence_reports_batch(self):
        m = ToyVLM(TINY)
        m.params["lm.head.w"].data[:] = np.nan
        with pytest.raises(TrainingError) as exc:
            m.train(self._single_sample(), epochs=1, lr=0.01, seed=0)
        assert exc.value.batch_index == 0


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tiny, tmp_path):
        path = str(tmp_path / "m.cmpi")
        tiny.save(path)
        loaded = ToyVLM.load(path)
        assert loaded.config == tiny.config
        for n in tiny.param_names():
            np.testing.assert_array_equal(loaded.params[n].data, tiny.params[n].data)
        assert (tmp_path / "m.cmpi.json").exists()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.cmpi"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            ToyVLM.load(str(path))

    def test_version_mismatch_flagged(self, tiny, tmp_path):
        path = tmp_path / "m.cmpi"
        tiny.save(str(path))
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as exc:
            ToyVLM.load(str(path))
        assert exc.value.version_mismatch
