import numpy as np
import pytest

import switchformer.encoder as E
from switchformer import tensor as T
from switchformer.attention import InteractionMode
from switchformer.encoder import (
    EncoderConfig,
    EncoderParams,
    EncoderState,
    ForcedRoutes,
    MultimodalBatch,
    count_flops,
    embed_text,
    embed_visual,
    encoder_forward,
    matmul_flops,
    sab_forward,
    sib_candidates,
    sib_forward,
)
from switchformer.errors import ConfigError, ContractError

from conftest import max_rel_grad_err, random_batch
from vanilla_ref import vanilla_encode, vanilla_layer


def tiny_config(**kw):
    base = dict(n_layers=2, dim=16, n_heads=2, d_ffn=32, n_img=3, n_txt=5,
                vocab=40, d_visual=6, n_classes=4, dtype="f64")
    base.update(kw)
    return EncoderConfig(**base).validate()


def make_params(config, seed=0):
    return EncoderParams.create(config, np.random.default_rng(seed))


class TestEmbeddings:
    def test_zero_tables_give_ln_bias(self):
        config = tiny_config()
        params = make_params(config)
        emb = params.embedding
        for t in (emb.token_table, emb.pos_table, emb.type_txt):
            t.data[:] = 0.0
        emb.ln_bias.data[:] = np.arange(config.dim)
        out = embed_text(np.array([4, 5, 6]), np.array([0, 1, 2]), emb)
        np.testing.assert_array_equal(out.data, np.tile(np.arange(config.dim), (3, 1)))

    def test_position_delta_pre_norm(self):
        config = tiny_config()
        emb = make_params(config).embedding
        tok = emb.token_table.data[7]
        pre0 = tok + emb.pos_table.data[0] + emb.type_txt.data
        pre1 = tok + emb.pos_table.data[1] + emb.type_txt.data
        np.testing.assert_allclose(pre1 - pre0,
                                   emb.pos_table.data[1] - emb.pos_table.data[0],
                                   atol=1e-12)
        # and the module output is exactly LN of those sums
        out = embed_text(np.array([7, 7]), np.array([0, 1]), emb).data
        ref = T.layer_norm(T.Tensor(np.stack([pre0, pre1]), dtype=np.float64),
                           emb.ln_gain, emb.ln_bias).data
        np.testing.assert_array_equal(out, ref)

    def test_round_trip_bit_identical(self):
        config = tiny_config()
        emb = make_params(config).embedding
        a = embed_text(np.array([4, 8]), np.array([0, 1]), emb).data
        b = embed_text(np.array([4, 8]), np.array([0, 1]), emb).data
        assert a.tobytes() == b.tobytes()

    def test_out_of_range_token_rejected(self):
        config = tiny_config()
        emb = make_params(config).embedding
        with pytest.raises(ContractError):
            embed_text(np.array([config.vocab]), np.array([0]), emb)

    def test_visual_zero_inputs_leave_type_path(self):
        config = tiny_config()
        emb = make_params(config).embedding
        feats = np.zeros((2, config.d_visual))
        boxes = np.zeros((2, 4))
        out = embed_visual(feats, boxes, emb).data
        # non-marker slot: only the type embedding survives pre-norm
        pre = emb.type_img.data
        ref = T.layer_norm(T.Tensor(pre[None, :], dtype=np.float64),
                           emb.ln_gain, emb.ln_bias).data[0]
        np.testing.assert_allclose(out[1], ref, atol=1e-12)

    def test_visual_feature_scaling_is_linear_pre_norm(self):
        config = tiny_config()
        emb = make_params(config).embedding
        rng = np.random.default_rng(1)
        f = rng.normal(size=config.d_visual)
        path1 = f @ emb.visual_proj.data
        path2 = (2 * f) @ emb.visual_proj.data
        np.testing.assert_allclose(path2, 2 * path1, atol=1e-12)

    def test_marker_slot_uses_learned_vector(self):
        config = tiny_config()
        emb = make_params(config).embedding
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(config.n_img, config.d_visual))
        boxes = np.zeros((config.n_img, 4))
        boxes[:, 2:] = 1.0
        out1 = embed_visual(feats, boxes, emb).data
        feats2 = feats.copy()
        feats2[0] = rng.normal(size=config.d_visual)  # marker slot ignores features
        out2 = embed_visual(feats2, boxes, emb).data
        np.testing.assert_array_equal(out1[0], out2[0])
        emb.img_marker.data[:] += 1.0
        out3 = embed_visual(feats, boxes, emb).data
        assert np.abs(out3[0] - out1[0]).max() > 0

    def test_different_boxes_give_different_outputs(self):
        config = tiny_config()
        emb = make_params(config).embedding
        f = np.random.default_rng(3).normal(size=(2, config.d_visual))
        f[1] = f[0]
        boxes = np.array([[0.0, 0.0, 0.5, 0.5], [0.4, 0.4, 0.9, 0.9]])
        out = embed_visual(f, boxes, emb).data
        assert np.abs(out[0] - out[1]).max() > 1e-6

    def test_box_out_of_range_rejected(self):
        config = tiny_config()
        emb = make_params(config).embedding
        with pytest.raises(ContractError):
            embed_visual(np.zeros((1, config.d_visual)),
                         np.array([[0.0, 0.0, 1.0, 1.5]]), emb)


class TestSabForward:
    def test_forced_joint_equals_vanilla_layer(self):
        config = tiny_config()
        params = make_params(config, seed=4)
        rng = np.random.default_rng(5)
        x_i = T.Tensor(rng.normal(size=(config.n_img, config.dim)), dtype=np.float64)
        x_t = T.Tensor(rng.normal(size=(config.n_txt, config.dim)), dtype=np.float64)
        y_i, y_t, ds = sab_forward(x_i, x_t, params.layers[0], params.sab_routers[0],
                                   tau=1.0, mode="infer", topk=4,
                                   forced=int(InteractionMode.JOINT))
        x = np.concatenate([x_i.data, x_t.data], axis=0)
        ref = vanilla_layer(x, params.layers[0],
                            np.zeros(config.n_img + config.n_txt, dtype=bool))
        np.testing.assert_allclose(np.concatenate([y_i.data, y_t.data]), ref, atol=1e-6)
        assert len(ds) == 1 and ds[0].choice == int(InteractionMode.JOINT)

    def test_forced_self_self_isolates_modalities(self):
        config = tiny_config()
        params = make_params(config, seed=6)
        rng = np.random.default_rng(7)
        x_i = T.Tensor(rng.normal(size=(config.n_img, config.dim)), dtype=np.float64)
        x_t1 = T.Tensor(rng.normal(size=(config.n_txt, config.dim)), dtype=np.float64)
        x_t2 = T.Tensor(rng.normal(size=(config.n_txt, config.dim)), dtype=np.float64)
        kw = dict(tau=1.0, mode="infer", topk=4, forced=int(InteractionMode.SELF_SELF))
        y1, _, _ = sab_forward(x_i, x_t1, params.layers[0], params.sab_routers[0], **kw)
        y2, _, _ = sab_forward(x_i, x_t2, params.layers[0], params.sab_routers[0], **kw)
        np.testing.assert_allclose(y1.data, y2.data, atol=1e-6)

    def test_topk1_training_evaluates_single_mode(self, monkeypatch):
        config = tiny_config()
        params = make_params(config, seed=8)
        rng = np.random.default_rng(9)
        x_i = T.Tensor(rng.normal(size=(config.n_img, config.dim)), dtype=np.float64)
        x_t = T.Tensor(rng.normal(size=(config.n_txt, config.dim)), dtype=np.float64)
        calls = []
        real = E._mode_tail
        def counting(scores, v, bias, layer):
            calls.append(1)
            return real(scores, v, bias, layer)
        monkeypatch.setattr(E, "_mode_tail", counting)
        soft_y, _, _ = sab_forward(x_i, x_t, params.layers[0], params.sab_routers[0],
                                   tau=1.0, mode="train", topk=1, rng=None)
        assert len(calls) == 1
        hard_y, _, _ = sab_forward(x_i, x_t, params.layers[0], params.sab_routers[0],
                                   tau=1.0, mode="infer", topk=1)
        np.testing.assert_allclose(soft_y.data, hard_y.data, atol=1e-12)

    def test_batched_matches_per_sample(self):
        config = tiny_config()
        params = make_params(config, seed=10)
        rng = np.random.default_rng(11)
        xb_i = rng.normal(size=(3, config.n_img, config.dim))
        xb_t = rng.normal(size=(3, config.n_txt, config.dim))
        yb_i, yb_t, ds = sab_forward(
            T.Tensor(xb_i, dtype=np.float64), T.Tensor(xb_t, dtype=np.float64),
            params.layers[0], params.sab_routers[0], tau=0.9, mode="infer", topk=4)
        assert len(ds) == 3
        for s in range(3):
            y_i, y_t, d1 = sab_forward(
                T.Tensor(xb_i[s], dtype=np.float64), T.Tensor(xb_t[s], dtype=np.float64),
                params.layers[0], params.sab_routers[0], tau=0.9, mode="infer", topk=4)
            np.testing.assert_allclose(yb_i.data[s], y_i.data, atol=1e-9)
            np.testing.assert_allclose(yb_t.data[s], y_t.data, atol=1e-9)
            assert d1[0].choice == ds[s].choice


class TestSibBlocks:
    def make_state(self, values, batch=None, dim=2):
        state = EncoderState()
        for v in values:
            shape = (2, dim) if batch is None else (batch, 2, dim)
            state.img.append(T.Tensor(np.full(shape, float(v)), dtype=np.float64))
            state.txt.append(T.Tensor(np.full(shape, float(v) + 10.0), dtype=np.float64))
        return state

    def test_candidate_depths_layer2(self):
        state = self.make_state([0, 1])
        cands = sib_candidates(state, 2)
        img_depths = [c[0].data[0, 0] for c in cands]
        txt_depths = [c[1].data[0, 0] - 10.0 for c in cands]
        assert img_depths == [1, 1, 0, 0]
        assert txt_depths == [1, 0, 1, 0]

    def test_candidate_depths_layer3(self):
        state = self.make_state([0, 1, 2])
        cands = sib_candidates(state, 3)
        assert [c[0].data[0, 0] for c in cands] == [2, 2, 1, 1]
        assert [c[1].data[0, 0] - 10.0 for c in cands] == [2, 1, 2, 1]

    def test_candidate_zero_is_passthrough(self):
        state = self.make_state([0, 1, 2, 3])
        for l in (2, 3):
            cands = sib_candidates(state, l)
            assert cands[0][0] is state.img[l - 1]
            assert cands[0][1] is state.txt[l - 1]

    def test_layer_below_two_rejected(self):
        state = self.make_state([0, 1])
        with pytest.raises(ContractError):
            sib_candidates(state, 1)

    def test_forced_passthrough_identity(self):
        config = tiny_config()
        params = make_params(config, seed=12)
        state = self.make_state([0, 1], batch=2, dim=config.dim)
        x_i, x_t, ds = sib_forward(state, 2, params.sib_routers[0], tau=1.0,
                                   mode="train", topk=4, forced=0)
        np.testing.assert_array_equal(x_i.data, state.img[1].data)
        np.testing.assert_array_equal(x_t.data, state.txt[1].data)
        assert all(d.block == "SIB" and d.choice == 0 for d in ds)

    def test_equal_depths_invariant_to_routing(self):
        config = tiny_config()
        params = make_params(config, seed=13)
        state = self.make_state([5, 5], batch=2, dim=config.dim)
        outs = []
        for seed in range(3):
            x_i, x_t, _ = sib_forward(state, 2, params.sib_routers[0], tau=0.7,
                                      mode="train", topk=4,
                                      rng=np.random.default_rng(seed))
            outs.append((x_i.data.copy(), x_t.data.copy()))
        for a, b in zip(outs, outs[1:]):
            np.testing.assert_allclose(a[0], b[0], atol=1e-12)
            np.testing.assert_allclose(a[1], b[1], atol=1e-12)
        np.testing.assert_allclose(outs[0][0], state.img[1].data, atol=1e-12)

    def test_uniform_mix_of_scalar_standins(self):
        state = EncoderState()
        # depth l-2 then l-1; candidate contents per modality become
        # [(l-1), (l-1), (l-2), (l-2)] for images, interleaved for text
        state.img = [T.Tensor(np.full((1, 1), 3.0), dtype=np.float64),
                     T.Tensor(np.full((1, 1), 1.0), dtype=np.float64)]
        state.txt = [T.Tensor(np.full((1, 1), 4.0), dtype=np.float64),
                     T.Tensor(np.full((1, 1), 2.0), dtype=np.float64)]
        cands = sib_candidates(state, 2)
        p = T.Tensor([0.25, 0.25, 0.25, 0.25], dtype=np.float64)
        from switchformer.router import combine_soft
        mix_i = combine_soft(p, [c[0] for c in cands])
        mix_t = combine_soft(p, [c[1] for c in cands])
        assert mix_i.data[0, 0] == pytest.approx(2.0)  # mean of [1,1,3,3]
        assert mix_t.data[0, 0] == pytest.approx(3.0)  # mean of [2,4,2,4]


class TestEncoderForward:
    def test_forced_default_matches_vanilla_encoder(self):
        config = tiny_config()
        params = make_params(config, seed=14)
        batch = random_batch(config, 4, np.random.default_rng(15))
        force = ForcedRoutes.parse("SAB:*=M3,SIB:*=0")
        out = encoder_forward(batch, params, tau=1.0, mode="infer", force=force)
        ref_i, ref_t = vanilla_encode(batch, params)
        assert np.abs(out.x_i.data - ref_i).max() < 1e-6
        assert np.abs(out.x_t.data - ref_t).max() < 1e-6

    def test_trace_counts(self):
        config = tiny_config(n_layers=3)
        params = make_params(config, seed=16)
        batch = random_batch(config, 2, np.random.default_rng(17))
        out = encoder_forward(batch, params, tau=1.0, mode="train", topk=4,
                              rng=np.random.default_rng(0))
        # (2L-1) blocks, one decision per sample each
        assert len(out.decisions) == (2 * 3 - 1) * 2
        sab = [d for d in out.decisions if d.block == "SAB"]
        sib = [d for d in out.decisions if d.block == "SIB"]
        assert len(sab) == 3 * 2 and len(sib) == 2 * 2

    def test_inference_deterministic(self):
        config = tiny_config()
        params = make_params(config, seed=18)
        batch = random_batch(config, 3, np.random.default_rng(19))
        a = encoder_forward(batch, params, tau=0.5, mode="infer")
        b = encoder_forward(batch, params, tau=0.5, mode="infer")
        assert a.x_i.data.tobytes() == b.x_i.data.tobytes()
        assert [d.choice for d in a.decisions] == [d.choice for d in b.decisions]
        assert [d.p for d in a.decisions] == [d.p for d in b.decisions]

    def test_padding_neutrality(self):
        config = tiny_config(n_img=4, n_txt=7)
        params = make_params(config, seed=20)
        rng = np.random.default_rng(21)
        base = random_batch(tiny_config(n_img=3, n_txt=5), 2, rng)
        # embed the same content in a wider, padded batch
        feats = np.zeros((2, 4, config.d_visual))
        feats[:, :3] = base.visual_features
        boxes = np.zeros((2, 4, 4))
        boxes[..., 2:] = 1.0
        boxes[:, :3] = base.visual_boxes
        tokens = np.zeros((2, 7), dtype=np.int64)
        tokens[:, :5] = base.text_tokens
        positions = np.tile(np.arange(7), (2, 1))
        pad_img = np.zeros((2, 4), dtype=bool)
        pad_img[:, 3:] = True
        pad_txt = np.zeros((2, 7), dtype=bool)
        pad_txt[:, 5:] = True
        wide = MultimodalBatch(feats, boxes, tokens, positions, pad_img, pad_txt)
        narrow = MultimodalBatch(
            base.visual_features, base.visual_boxes, base.text_tokens,
            np.tile(np.arange(5), (2, 1)), np.zeros((2, 3), bool), np.zeros((2, 5), bool))
        out_w = encoder_forward(wide, params, tau=0.8, mode="infer")
        out_n = encoder_forward(narrow, params, tau=0.8, mode="infer")
        assert np.abs(out_w.x_i.data[:, :3] - out_n.x_i.data).max() < 1e-6
        assert np.abs(out_w.x_t.data[:, :5] - out_n.x_t.data).max() < 1e-6
        assert [d.choice for d in out_w.decisions] == [d.choice for d in out_n.decisions]
        # padded rows come back zero-filled
        assert np.abs(out_w.x_i.data[:, 3:]).max() == 0.0
        assert np.abs(out_w.x_t.data[:, 5:]).max() == 0.0

    def test_sib_locality(self):
        config = tiny_config(n_layers=4)
        params = make_params(config, seed=22)
        batch = random_batch(config, 2, np.random.default_rng(23))
        out = encoder_forward(batch, params, tau=1.0, mode="infer")
        state = out.state
        doctored = EncoderState(img=list(state.img), txt=list(state.txt))
        doctored.img[1] = T.Tensor(
            state.img[1].data + 100.0, dtype=np.float64)  # depth l-3 for l=4
        a = sib_forward(state, 4, params.sib_routers[2], tau=1.0, mode="infer",
                        topk=4, pad_img=batch.pad_img, pad_txt=batch.pad_txt)
        b = sib_forward(doctored, 4, params.sib_routers[2], tau=1.0, mode="infer",
                        topk=4, pad_img=batch.pad_img, pad_txt=batch.pad_txt)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_mode_subset_restricts_choices(self):
        config = tiny_config(allowed_modes=(1, 2))
        params = make_params(config, seed=24)
        batch = random_batch(config, 4, np.random.default_rng(25))
        out = encoder_forward(batch, params, tau=1.0, mode="train", topk=4,
                              rng=np.random.default_rng(1))
        for d in out.decisions:
            if d.block == "SAB":
                assert d.choice in (1, 2)
                assert d.pi[0] < 1e-9 and d.pi[3] < 1e-9

    def test_end_to_end_gradient(self):
        config = tiny_config(n_layers=2, dim=8, n_heads=2, d_ffn=16, n_img=2,
                             n_txt=4, vocab=12, d_visual=4)
        params = make_params(config, seed=26)
        batch = random_batch(config, 1, np.random.default_rng(27))
        noise_rng_seed = 99
        probe = np.random.default_rng(28).normal(size=(1, config.dim))

        def build(store):
            out = encoder_forward(batch, params, tau=0.9, mode="train", topk=4,
                                  rng=np.random.default_rng(noise_rng_seed))
            return T.sum_all(T.mul(out.fused, T.Tensor(probe, dtype=np.float64)))

        params.store.zero_grad()
        T.backward(build(params.store))
        numeric = T.finite_diff_grad(lambda p: build(p).item(), params.store, step=1e-5)
        worst = max_rel_grad_err(params.store, numeric)
        assert worst < 1e-4, worst


class TestFlops:
    def test_single_matmul_count(self):
        assert matmul_flops(4, 8, 4) == 256

    def test_monotone_in_topk(self):
        config = EncoderConfig().validate()
        c1 = count_flops(config, 1)
        c2 = count_flops(config, 2)
        c4 = count_flops(config, 4)
        assert c1 < c2 < c4

    def test_joint_scores_cost_at_least_self_self(self):
        from switchformer.encoder import _mode_pair_count
        for n in (4, 8, 16):
            joint = _mode_pair_count(int(InteractionMode.JOINT), n, n)
            selfself = _mode_pair_count(int(InteractionMode.SELF_SELF), n, n)
            assert joint >= selfself
            assert joint == (2 * n) ** 2 and selfself == 2 * n * n

    def test_trace_counting_infer_vs_train(self):
        config = tiny_config(n_layers=2)
        params = make_params(config, seed=30)
        batch = random_batch(config, 2, np.random.default_rng(31))
        out = encoder_forward(batch, params, tau=1.0, mode="infer")
        records = [d.to_record(step=0) for d in out.decisions]
        hard = count_flops(config, records, phase="infer")
        soft = count_flops(config, records, phase="train")
        assert 0 < hard < soft  # topk=4 default charges more paths


class TestConfigValidation:
    def test_rejects_bad_geometry(self):
        with pytest.raises(ConfigError):
            EncoderConfig(n_layers=1).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(dim=30, n_heads=4).validate()
        with pytest.raises(ConfigError):
            EncoderConfig(topk=5).validate()

    def test_forced_route_parser(self):
        f = ForcedRoutes.parse("SAB:*=M0,SIB:2=1,SAB:3=JOINT")
        assert f.get("SAB", 1) == 0
        assert f.get("SAB", 3) == 3
        assert f.get("SIB", 2) == 1
        assert f.get("SIB", 3) is None
        with pytest.raises(ConfigError):
            ForcedRoutes.parse("FOO:*=1")
        with pytest.raises(ConfigError):
            ForcedRoutes.parse("SIB:*=7")
