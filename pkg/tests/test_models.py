import numpy as np
import pytest

import oracle
from vrnmt import tensor as T
from vrnmt.config import ModelDims, TrainConfig
from vrnmt.data import EOS
from vrnmt.models import (
    ModelParams,
    advance,
    batch_objective,
    decode_step_infer,
    decode_step_train,
    output_distribution,
    parameter_shapes,
    sentence_objective,
    start_state,
)

VARIANTS = ["baseline", "vrnmt", "vrnmt_td"]


def shared_baseline(vr: ModelParams) -> ModelParams:
    """Baseline holding exactly VRNMT's non-latent tensors."""
    base = ModelParams("baseline", vr.dims,
                       {k: T.parameter(vr[k].data.copy(), name=k)
                        for k in parameter_shapes("baseline", vr.dims)})
    base.check()
    return base


class TestInventory:
    def test_name_sets(self):
        dims = ModelDims(10, 12, 4, 5, 3, 6)
        base = set(parameter_shapes("baseline", dims))
        vr = set(parameter_shapes("vrnmt", dims))
        td = set(parameter_shapes("vrnmt-td", dims))
        assert base < td < vr
        assert vr - td == {f"prior.{n}" for n in ("W_z", "b_z", "W_mu", "b_mu", "W_sigma", "b_sigma")}
        assert td - base == {"dec.V", "out.W_dz"} | {f"post.{n}" for n in
                                                    ("W_z", "b_z", "W_mu", "b_mu", "W_sigma", "b_sigma")}

    def test_td_posterior_reads_only_target_word(self):
        dims = ModelDims(10, 12, 4, 5, 3, 6)
        assert parameter_shapes("vrnmt_td", dims)["post.W_z"] == (4, 3)
        assert parameter_shapes("vrnmt", dims)["post.W_z"] == (4 + 5 + 10 + 4, 3)

    def test_initialize_and_check(self):
        p = ModelParams.initialize("vrnmt", ModelDims(10, 12, 4, 5, 3, 6), np.random.default_rng(0))
        p.check()
        assert np.all(p["dec.b"].data == 0.0)
        assert np.all(np.abs(p["dec.W"].data) <= 0.08)
        del p.tensors["dec.V"]
        with pytest.raises(ValueError):
            p.check()

    def test_orthogonal_recurrent_init(self):
        p = ModelParams.initialize("baseline", ModelDims(10, 12, 4, 5, 3, 6),
                                   np.random.default_rng(0), orthogonal=True)
        U = p["dec.U_ru"].data[:, :5]
        np.testing.assert_allclose(U.T @ U, np.eye(5), atol=1e-12)


class TestOutputDistribution:
    def test_zero_readout_is_uniform(self, make_model):
        p = make_model("baseline")
        p["out.W_out"].data[...] = 0.0
        p["out.b_out"].data[...] = 0.0
        rng = np.random.default_rng(0)
        lp = output_distribution(*(T.constant(rng.normal(size=(2, n))) for n in (5, 6, 12)), None, p)
        np.testing.assert_allclose(lp.data, -np.log(12), atol=1e-15)

    def test_matches_oracle_and_normalizes(self, make_model):
        p = make_model("vrnmt", vocab=5, seed=3)
        rng = np.random.default_rng(0)
        y, s, c, z = rng.normal(size=5), rng.normal(size=6), rng.normal(size=12), rng.normal(size=3)
        lp = output_distribution(*(T.constant(v[None]) for v in (y, s, c, z)), p).data[0]
        np.testing.assert_allclose(lp, oracle.readout(p.arrays(), y, s, c, z), rtol=0, atol=1e-12)
        assert abs(np.logaddexp.reduce(lp)) < 1e-9


class TestStraightLineOracle:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_objective_matches(self, make_model, variant):
        p = make_model(variant, seed=11)
        x, y = [4, 9, 6, 5], [7, 8, 10]
        eps = np.random.default_rng(2).standard_normal((4, 1, 3))
        terms = sentence_objective(x, y, p, noise=eps)
        nll, kl, _, _, _ = oracle.train_rollout(p.arrays(), variant, x, y + [EOS], eps[:, 0])
        assert terms.nll.item() == pytest.approx(nll, rel=1e-10, abs=1e-10)
        assert terms.kl.item() == pytest.approx(kl, rel=1e-10, abs=1e-10)
        assert terms.elbo.item() == pytest.approx(-nll - kl, rel=1e-10, abs=1e-10)

    @pytest.mark.parametrize("variant", ["vrnmt", "vrnmt_td"])
    def test_two_step_rollout(self, make_model, variant):
        p = make_model(variant, seed=12)
        x = [4, 5, 6]
        eps = np.random.default_rng(5).standard_normal((2, 1, 3))
        ann, s = start_state(x, p)
        emb = p["tgt_emb"]
        _, _, logps, atts, states = oracle.train_rollout(p.arrays(), variant, x, [7, 8], eps[:, 0])
        prev = 2
        for j, tok in enumerate([7, 8]):
            out = decode_step_train(ann, T.embedding(emb, [prev]), T.embedding(emb, [tok]), s, p,
                                    eps[j])
            np.testing.assert_allclose(out.log_probs.data[0], logps[j], rtol=0, atol=1e-12)
            np.testing.assert_allclose(out.attention.weights.data[0], atts[j], rtol=0, atol=1e-12)
            np.testing.assert_allclose(out.state.data[0], states[j + 1], rtol=0, atol=1e-12)
            s, prev = out.state, tok

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_inference_matches(self, make_model, variant):
        p = make_model(variant, seed=13)
        x, toks = [4, 5, 9], [6, 11, 3]
        logps, _ = oracle.infer_rollout(p.arrays(), variant, x, toks)
        ann, s = start_state(x, p)
        prev = 2
        for j, tok in enumerate(toks):
            step = decode_step_infer(ann, [prev], s, p)
            np.testing.assert_allclose(step.log_probs.data[0], logps[j], rtol=0, atol=1e-12)
            s, prev = advance(step, [tok], p), tok


class TestLatentAblation:
    def test_zero_latent_path_matches_baseline(self, make_model):
        vr = make_model("vrnmt", seed=21)
        vr.zero_latent_path()
        base = shared_baseline(vr)
        eps = np.random.default_rng(0).standard_normal((4, 1, 3))
        a = sentence_objective([4, 5, 6], [7, 8, 9], vr, noise=eps)
        b = sentence_objective([4, 5, 6], [7, 8, 9], base)
        assert abs(a.nll.item() - b.nll.item()) <= 1e-12

    def test_step_level_equivalence(self, make_model):
        vr = make_model("vrnmt", seed=22)
        vr["dec.V"].data[...] = 0.0
        vr["out.W_dz"].data[...] = 0.0
        base = shared_baseline(vr)
        ann_v, s_v = start_state([4, 5], vr)
        ann_b, s_b = start_state([4, 5], base)
        e = vr["tgt_emb"]
        a = decode_step_train(ann_v, T.embedding(e, [2]), T.embedding(e, [7]), s_v, vr,
                              np.ones((1, 3)))
        b = decode_step_train(ann_b, T.embedding(e, [2]), T.embedding(e, [7]), s_b, base, None)
        np.testing.assert_array_equal(a.log_probs.data, b.log_probs.data)
        np.testing.assert_array_equal(a.state.data, b.state.data)

    def test_equal_posterior_and_prior_gives_zero_kl(self, make_model):
        vr = make_model("vrnmt", seed=23)
        # both heads ignore their input and share biases
        for net in ("post", "prior"):
            vr[f"{net}.W_z"].data[...] = 0.0
            vr[f"{net}.b_z"].data[...] = 0.0
        for name in ("b_mu", "b_sigma"):
            vr[f"prior.{name}"].data[...] = vr[f"post.{name}"].data
        terms = sentence_objective([4, 5], [6, 7], vr, noise=np.ones((3, 1, 3)))
        assert terms.kl.item() == 0.0
        assert terms.elbo.item() == -terms.nll.item()

    def test_zero_prior_equals_td_inference(self, make_model):
        vr = make_model("vrnmt", seed=24)
        for name, t in vr.tensors.items():
            if name.startswith("prior."):
                t.data[...] = 0.0
        td = ModelParams("vrnmt_td", vr.dims, {k: T.parameter(vr[k].data.copy())
                                               for k in parameter_shapes("vrnmt_td", vr.dims)})
        ann_v, s_v = start_state([4, 6], vr)
        ann_t, s_t = start_state([4, 6], td)
        a, b = decode_step_infer(ann_v, [2], s_v, vr), decode_step_infer(ann_t, [2], s_t, td)
        np.testing.assert_array_equal(a.latent.z.data, 0.0)
        np.testing.assert_array_equal(a.log_probs.data, b.log_probs.data)


class TestObjective:
    def test_baseline_kl_zero(self, make_model):
        p = make_model("baseline", seed=1)
        t = sentence_objective([4, 5], [6], p)
        assert t.kl.item() == 0.0
        assert t.elbo.item() == -t.nll.item()

    @pytest.mark.parametrize("variant", ["vrnmt", "vrnmt_td"])
    def test_elbo_bounded_by_nll(self, make_model, variant):
        p = make_model(variant, seed=2)
        t = sentence_objective([4, 5, 6], [6, 7], p, noise=np.random.default_rng(0))
        assert t.kl.item() > 0
        assert t.elbo.item() < -t.nll.item()

    def test_inference_is_deterministic(self, make_model):
        p = make_model("vrnmt", seed=3)
        ann, s = start_state([4, 5], p)
        a, b = decode_step_infer(ann, [2], s, p), decode_step_infer(ann, [2], s, p)
        np.testing.assert_array_equal(a.log_probs.data, b.log_probs.data)

    def test_step_log_probs_normalized(self, make_model):
        p = make_model("vrnmt", seed=4)
        ann, s = start_state([4, 5], p)
        lp = decode_step_infer(ann, [2], s, p).log_probs.data
        assert abs(np.logaddexp.reduce(lp[0])) < 1e-9

    def test_padding_contributes_nothing(self, make_model):
        p = make_model("vrnmt", seed=5)
        eps = np.random.default_rng(1).standard_normal((4, 2, 3))
        src = np.array([[4, 5, 6], [7, 8, 0]])
        sm = np.array([[1, 1, 1], [1, 1, 0.0]])
        tgt = np.array([[9, 10, 3, 0], [6, 7, 8, 3]])
        tm = np.array([[1, 1, 1, 0], [1, 1, 1, 1.0]])
        batch = batch_objective(src, sm, tgt, tm, p, eps)
        one = sentence_objective([4, 5, 6], [9, 10], p, noise=eps[:3, :1])
        two = sentence_objective([7, 8], [6, 7, 8], p, noise=eps[:, 1:])
        assert batch.nll.item() == pytest.approx(one.nll.item() + two.nll.item(), rel=1e-12)
        assert batch.kl.item() == pytest.approx(one.kl.item() + two.kl.item(), rel=1e-12)
        assert batch.tokens == 7

    def test_multiple_samples_average(self, make_model):
        p = make_model("vrnmt", seed=6)
        eps = np.random.default_rng(2).standard_normal((3, 2, 3))
        cfg = TrainConfig(variant="vrnmt", samples=2)
        both = sentence_objective([4, 5], [6, 7], p, cfg, noise=eps)
        a = sentence_objective([4, 5], [6, 7], p, noise=eps[:, :1])
        b = sentence_objective([4, 5], [6, 7], p, noise=eps[:, 1:])
        assert both.nll.item() == pytest.approx((a.nll.item() + b.nll.item()) / 2, rel=1e-12)
        assert both.kl.item() == pytest.approx((a.kl.item() + b.kl.item()) / 2, rel=1e-12)

    def test_kl_weight_only_scales_elbo(self, make_model):
        p = make_model("vrnmt", seed=7)
        eps = np.ones((3, 1, 3))
        src, tgt = np.array([[4, 5]]), np.array([[6, 7, 3]])
        full = batch_objective(src, np.ones((1, 2)), tgt, np.ones((1, 3)), p, eps)
        zero = batch_objective(src, np.ones((1, 2)), tgt, np.ones((1, 3)), p, eps, kl_weight=0.0)
        assert zero.kl.item() == full.kl.item()
        assert zero.elbo.item() == -zero.nll.item()

    def test_errors(self, make_model):
        p = make_model("vrnmt")
        with pytest.raises(ValueError):
            sentence_objective([], [4], p)
        with pytest.raises(IndexError):
            sentence_objective([4], [40], p)
        with pytest.raises(ValueError):
            sentence_objective([4] * 6, [5], p, TrainConfig(max_len=5))

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_gradient_small(self, make_model, variant):
        p = make_model(variant, seed=8, vocab=8, d_e=3, d_h=3, d_z=2, d_a=3, scale=0.4)
        names = p.names()
        eps = np.random.default_rng(3).standard_normal((3, 1, 2))

        def fn(*ts):
            q = ModelParams(variant, p.dims, dict(zip(names, ts)))
            return sentence_objective([4, 5], [6, 7], q, noise=eps).elbo

        assert T.check_gradient(fn, [p[n].data for n in names]) <= 1e-4
