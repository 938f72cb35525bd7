"""Model assembly: blocks, forward, k-shot handling, loss, training, PAHP."""

import itertools
import math

import numpy as np
import pytest

from plain_transformer import plain_forward
from segcal.episodes import Episode, GeneratorConfig, Support, generate_episode
from segcal.errors import (
    ConfigError,
    ConfigMismatchError,
    MagicMismatchError,
    TrainingDivergedError,
    TruncationError,
)
from segcal.model import (
    ModelConfig,
    Prediction,
    TrainSettings,
    block_forward,
    decode,
    forward,
    gradient_report,
    init_params,
    load_params,
    loss,
    save_params,
    self_attention,
    train,
)
from segcal.predictor import builtin_predictor, predict
from segcal.rng import make_rng
from segcal.tensor import Tensor


SMALL = ModelConfig(n_blocks=2, n_heads=2, d=8, d_c=4)
GEN_SMALL = GeneratorConfig(h=4, w=4, d=8)


def small_setup(seed=0, cfg=None, gen=None):
    cfg = cfg or SMALL
    gen = gen or GEN_SMALL
    episode = generate_episode(gen, seed % gen.n_classes, seed)
    mask = predict(builtin_predictor(), episode)
    params = init_params(cfg, seed)
    return episode, mask, params, cfg


class TestConfig:
    def test_defaults_valid(self):
        ModelConfig().validate()

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d=10, n_heads=4).validate()

    def test_threshold_ordering(self):
        with pytest.raises(ConfigError):
            ModelConfig(gamma_fg=0.2, gamma_bg=0.5).validate()

    def test_block_count(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_blocks=0).validate()


class TestInitParams:
    def test_deterministic_and_complete(self):
        a = init_params(SMALL, 3)
        b = init_params(SMALL, 3)
        assert list(a) == list(b)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)
        assert "block1.cross.wv.w" in a and "decoder.w" in a

    def test_all_groups_created_regardless_of_toggles(self):
        off = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          enhance_enabled=False, calibrate_enabled=False)
        on = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4)
        a, b = init_params(off, 5), init_params(on, 5)
        assert list(a) == list(b)
        assert all(np.array_equal(a[n].data, b[n].data) for n in a)


class TestSelfAttention:
    def test_single_token_grid(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=4, d_c=2)
        params = init_params(cfg, 1)
        rng = make_rng(100)
        f = Tensor(rng.standard_normal((1, 1, 4)))
        out = self_attention(f, params, cfg, 0)
        # softmax over one token is 1, so attention output is its value proj
        x = f.data.reshape(1, 4)
        v = x @ params["block0.self.wv.w"].data + params["block0.self.wv.b"].data
        o = v @ params["block0.self.wo.w"].data + params["block0.self.wo.b"].data
        pre = x + o
        mu = pre.mean()
        xc = pre - mu
        ref = xc / np.sqrt((xc * xc).mean() + 1e-6)
        ref = ref * params["block0.self.ln_g"].data + params["block0.self.ln_b"].data
        assert np.allclose(out.data.reshape(1, 4), ref, atol=1e-12)

    def test_token_permutation_equivariance(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4)
        params = init_params(cfg, 2)
        rng = make_rng(101)
        f = rng.standard_normal((3, 4, 8))
        perm = rng.permutation(12)
        base = self_attention(Tensor(f), params, cfg, 0).data.reshape(12, 8)
        permuted = self_attention(
            Tensor(f.reshape(12, 8)[perm].reshape(3, 4, 8)), params, cfg, 0
        ).data.reshape(12, 8)
        assert np.allclose(base[perm], permuted, atol=1e-12)

    def test_gradcheck_small_input(self):
        episode, mask, params, cfg = small_setup(7)
        names = [f"block0.self.{n}" for n in
                 ("wq.w", "wk.b", "wo.w", "ln_g", "ln_b")]
        report = gradient_report(episode, mask, params, cfg, param_names=names)
        assert max(report.values()) < 1e-4


class TestBlockForward:
    def test_baseline_toggles_match_plain_transformer(self):
        cfg = ModelConfig(n_blocks=2, n_heads=2, d=8, d_c=4,
                          enhance_enabled=False, calibrate_enabled=False)
        episode, mask, params, _ = small_setup(11, cfg=cfg)
        pred = forward(episode, mask, params, cfg)
        oracle = plain_forward(episode, {n: t.data for n, t in params.items()}, cfg)
        assert np.allclose(pred.soft, oracle, atol=1e-12)

    def test_support_stream_untouched_by_cross_attention(self):
        episode, mask, params, cfg = small_setup(12)
        feats = [Tensor(s.features) for s in episode.supports]
        masks = [s.mask for s in episode.supports]
        new_sups, _, _ = block_forward(feats, Tensor(episode.query_features),
                                       masks, mask, params, cfg, 0)
        # recompute the support path directly: enhancement + self-attention only
        from segcal.enhance import enhance_features
        from segcal.model import _enhance_params

        enh_sups, _, _ = enhance_features(feats, masks, Tensor(episode.query_features),
                                          mask, _enhance_params(params, cfg, 0))
        expected = self_attention(enh_sups[0], params, cfg, 0)
        assert np.array_equal(new_sups[0].data, expected.data)

    def test_support_purity_with_enhancement_off(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4, enhance_enabled=False)
        episode, mask, params, _ = small_setup(13, cfg=cfg)
        other = generate_episode(GEN_SMALL, 1, 999)
        feats = [Tensor(s.features) for s in episode.supports]
        masks = [s.mask for s in episode.supports]
        sups_a, _, _ = block_forward(feats, Tensor(episode.query_features),
                                     masks, mask, params, cfg, 0)
        sups_b, _, _ = block_forward(feats, Tensor(other.query_features),
                                     masks, np.zeros_like(mask) + 0.5, params, cfg, 0)
        assert np.array_equal(sups_a[0].data, sups_b[0].data)

    def test_block_gradcheck(self):
        episode, mask, params, cfg = small_setup(14)
        names = ["block0.enhance.fuse_w", "block0.calibrate.proj_w",
                 "block0.cross.wk.w", "block1.self.wv.w"]
        report = gradient_report(episode, mask, params, cfg, param_names=names)
        assert max(report.values()) < 1e-4


class TestForward:
    def test_composition_consistency_single_block(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4)
        episode, mask, params, _ = small_setup(15, cfg=cfg)
        pred = forward(episode, mask, params, cfg)
        feats = [Tensor(s.features) for s in episode.supports]
        masks = [s.mask for s in episode.supports]
        _, q, _ = block_forward(feats, Tensor(episode.query_features), masks,
                                mask, params, cfg, 0)
        manual = decode(q, params)
        assert np.array_equal(pred.soft, manual.data)

    def test_deterministic(self):
        episode, mask, params, cfg = small_setup(16)
        a = forward(episode, mask, params, cfg)
        b = forward(episode, mask, params, cfg)
        assert np.array_equal(a.soft, b.soft)
        assert np.array_equal(a.binary, b.binary)

    def test_binary_threshold_invariant(self):
        episode, mask, params, cfg = small_setup(17)
        pred = forward(episode, mask, params, cfg)
        assert np.array_equal(pred.binary, (pred.soft >= 0.5).astype(np.uint8))
        assert np.all(pred.soft >= 0.0) and np.all(pred.soft <= 1.0)

    def test_diagnostics_populated_when_enabled(self):
        episode, mask, params, cfg = small_setup(18)
        pred = forward(episode, mask, params, cfg)
        assert len(pred.diagnostics) == cfg.n_blocks
        d0 = pred.diagnostics[0]
        assert d0.aggressive_mask.shape == (4, 4)
        assert d0.reweight.shape == (16, 16)
        assert d0.attention_mask.shape == (16, 16)

    def test_diagnostics_none_when_disabled(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          enhance_enabled=False, calibrate_enabled=False)
        episode, mask, params, _ = small_setup(19, cfg=cfg)
        d0 = forward(episode, mask, params, cfg).diagnostics[0]
        assert d0.aggressive_mask is None and d0.reweight is None

    def test_dimension_mismatch_rejected(self):
        episode, mask, params, cfg = small_setup(20)
        bad_cfg = ModelConfig(n_blocks=2, n_heads=2, d=16, d_c=4)
        with pytest.raises(ConfigError):
            forward(episode, mask, init_params(bad_cfg, 0), bad_cfg)
        with pytest.raises(ConfigError):
            forward(episode, mask[:2, :2], params, cfg)


class TestKShot:
    def test_duplicated_support_matches_single_shot(self):
        gen1 = GeneratorConfig(h=4, w=4, d=8, k=1)
        episode1 = generate_episode(gen1, 2, 33)
        sup = episode1.supports[0]
        episode2 = Episode(
            supports=(sup, Support(features=sup.features.copy(), mask=sup.mask.copy())),
            query_features=episode1.query_features,
            query_gt=episode1.query_gt,
            class_id=episode1.class_id,
            seed=episode1.seed,
        )
        mask = predict(builtin_predictor(), episode1)
        params = init_params(SMALL, 33)
        p1 = forward(episode1, mask, params, SMALL)
        p2 = forward(episode2, mask, params, SMALL)
        assert np.allclose(p1.soft, p2.soft, atol=1e-10)

    def test_five_shot_attention_shapes(self):
        gen = GeneratorConfig(h=4, w=4, d=8, k=5)
        episode = generate_episode(gen, 1, 44)
        mask = predict(builtin_predictor(), episode)
        params = init_params(SMALL, 44)
        pred = forward(episode, mask, params, SMALL)
        assert pred.diagnostics[0].reweight.shape == (16, 80)
        assert pred.diagnostics[0].attention_mask.shape == (16, 80)

    def test_support_order_invariance(self):
        gen = GeneratorConfig(h=4, w=4, d=8, k=3)
        episode = generate_episode(gen, 1, 55)
        mask = predict(builtin_predictor(), episode)
        params = init_params(SMALL, 55)
        base = forward(episode, mask, params, SMALL)
        shuffled = Episode(
            supports=(episode.supports[2], episode.supports[0], episode.supports[1]),
            query_features=episode.query_features,
            query_gt=episode.query_gt,
            class_id=episode.class_id,
            seed=episode.seed,
        )
        other = forward(shuffled, mask, params, SMALL)
        assert np.allclose(base.soft, other.soft, atol=1e-10)


class TestLoss:
    def _prediction_from(self, soft):
        soft = np.asarray(soft, dtype=np.float64)
        return Prediction(
            soft=soft, binary=(soft >= 0.5).astype(np.uint8),
            diagnostics=[], soft_tensor=Tensor(soft),
        )

    def test_perfect_prediction_hits_clamp_floor(self):
        gt = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        value = loss(self._prediction_from(gt.astype(float)), gt).item()
        assert value < 1e-6

    def test_maximum_entropy_prediction(self):
        gt = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        value = loss(self._prediction_from(np.full((2, 2), 0.5)), gt).item()
        assert value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            loss(self._prediction_from(np.full((2, 2), 0.5)), np.zeros((3, 3)))

    def test_decoder_gradients(self):
        episode, mask, params, cfg = small_setup(21)
        report = gradient_report(episode, mask, params, cfg,
                                 param_names=["decoder.w", "decoder.b"])
        assert max(report.values()) < 1e-5


def episode_stream(gen, start_seed=0):
    for i in itertools.count():
        yield generate_episode(gen, i % gen.n_classes, start_seed + i)


class TestTrain:
    def test_zero_step_size_keeps_params(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          train=TrainSettings(steps=3, step_size=0.0, seed=1))
        initial = init_params(cfg, 1)
        final, losses = train(episode_stream(GEN_SMALL), builtin_predictor(), cfg)
        assert len(losses) == 3
        assert all(np.array_equal(final[n].data, initial[n].data) for n in final)

    def test_fixed_seed_bit_identical_traces(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          train=TrainSettings(steps=5, step_size=0.05, seed=2))
        _, trace_a = train(episode_stream(GEN_SMALL), builtin_predictor(), cfg)
        _, trace_b = train(episode_stream(GEN_SMALL), builtin_predictor(), cfg)
        assert trace_a == trace_b

    def test_loss_decreases_on_separable_benchmark(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          train=TrainSettings(steps=60, step_size=0.05, seed=3))
        _, losses = train(episode_stream(GEN_SMALL), builtin_predictor(), cfg)
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_stream_exhaustion_is_config_error(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          train=TrainSettings(steps=5, step_size=0.05, seed=4))
        two = [generate_episode(GEN_SMALL, 0, 0), generate_episode(GEN_SMALL, 1, 1)]
        with pytest.raises(ConfigError):
            train(iter(two), builtin_predictor(), cfg)

    def test_divergence_aborts_with_step_report(self):
        cfg = ModelConfig(n_blocks=1, n_heads=2, d=8, d_c=4,
                          train=TrainSettings(steps=10, step_size=1e300, seed=5))
        with np.errstate(over="ignore"), pytest.raises(TrainingDivergedError) as exc:
            train(episode_stream(GEN_SMALL), builtin_predictor(), cfg)
        assert "step" in str(exc.value)


class TestParamsFile:
    def test_round_trip(self, tmp_path):
        episode, mask, params, cfg = small_setup(22)
        p = tmp_path / "model.pahp"
        save_params(params, cfg, p)
        loaded_cfg, loaded = load_params(p)
        assert loaded_cfg == cfg
        assert list(loaded) == list(params)
        assert all(np.array_equal(loaded[n].data, params[n].data) for n in params)

    def test_round_trip_preserves_forward(self, tmp_path):
        episode, mask, params, cfg = small_setup(23)
        p = tmp_path / "model.pahp"
        save_params(params, cfg, p)
        _, loaded = load_params(p)
        a = forward(episode, mask, params, cfg)
        b = forward(episode, mask, loaded, cfg)
        assert np.array_equal(a.soft, b.soft)

    def test_config_mismatch_on_load(self, tmp_path):
        _, _, params, cfg = small_setup(24)
        p = tmp_path / "model.pahp"
        save_params(params, cfg, p)
        other = ModelConfig(n_blocks=2, n_heads=2, d=16, d_c=4)
        with pytest.raises(ConfigMismatchError):
            load_params(p, expect=other)

    def test_truncated_file(self, tmp_path):
        _, _, params, cfg = small_setup(25)
        p = tmp_path / "model.pahp"
        save_params(params, cfg, p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) - 100])
        with pytest.raises(TruncationError):
            load_params(p)

    def test_wrong_magic(self, tmp_path):
        _, _, params, cfg = small_setup(26)
        p = tmp_path / "model.pahp"
        save_params(params, cfg, p)
        blob = bytearray(p.read_bytes())
        blob[:4] = b"NOPE"
        p.write_bytes(bytes(blob))
        with pytest.raises(MagicMismatchError):
            load_params(p)


class TestFrozenPredictor:
    def test_no_gradient_reaches_predictor_inputs(self):
        # the predictor output enters forward as a plain array; perturbing the
        # episode after prediction shows the mask is a constant snapshot
        episode, mask, params, cfg = small_setup(27)
        from segcal.tensor import Tape, backward as bw

        tape = Tape()
        for p in params.values():
            tape.watch(p)
        pred = forward(episode, mask, params, cfg)
        grads = bw(tape, loss(pred, episode.query_gt))
        # every gradient is for a named parameter; nothing else was watched
        assert len(grads) == len(params)
