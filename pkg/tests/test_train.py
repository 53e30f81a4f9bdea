import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_TRAIN
from lorentz_st import autodiff as ad
from lorentz_st.align import LOG_TAU_MAX, hca_loss, hea_loss, project_batch
from lorentz_st.errors import ContractViolation
from lorentz_st.params import init_params
from lorentz_st.predict import predict_expression, prediction_loss
from lorentz_st.represent import encode_gene, encode_image
from lorentz_st.train import (
    AdamW,
    TrainConfig,
    grad_check,
    load_model,
    loss_and_grad,
    prepare,
    save_run,
    total_loss,
    train,
    write_history,
)


def _params(data, config=TINY_TRAIN, seed=0):
    part = data.parts["train"]
    return init_params(config.dims(part.feat_s.shape[1]), seed, 0, part.Y_s.mean(axis=0))


def _batch(data, n=16):
    return data.parts["train"].subset(np.arange(n))


class TestConfig:
    def test_invalid(self):
        with pytest.raises(ContractViolation):
            TrainConfig(alpha=-1)
        with pytest.raises(ContractViolation):
            TrainConfig(batch_size=1)
        with pytest.raises(ContractViolation):
            TrainConfig(decoder_input="both_levels")

    def test_split_seed_defaults_to_seed(self):
        assert TrainConfig(seed=4).effective_split_seed == 4
        assert TrainConfig(seed=4, split_seed=1).effective_split_seed == 1


class TestObjective:
    def test_composition(self, tiny_data):
        p, b = _params(tiny_data), _batch(tiny_data)
        cfg = TINY_TRAIN
        total, comps = total_loss(b, p, cfg)
        I_s, I_n = encode_image(b.feat_s, b.feat_n, p.arrays)
        G_s, G_n = encode_gene(b.Y_s, b.Y_n, p.arrays)
        hb = project_batch(I_s, I_n, G_s, G_n, math.exp(p["log_c"]))
        pred = float(prediction_loss(predict_expression(I_s, I_n, p.arrays), b.Y_s))
        hca = float(hca_loss(hb, math.exp(p["log_tau"])))
        hea = float(hea_loss(hb))
        assert comps == pytest.approx({"pred": pred, "hca": hca, "hea": hea}, rel=1e-12)
        assert total == pytest.approx(pred + cfg.alpha * (hca + cfg.beta * hea), rel=1e-12)

    def test_alpha_zero(self, tiny_data):
        total, comps = total_loss(_batch(tiny_data), _params(tiny_data), replace(TINY_TRAIN, alpha=0.0))
        assert total == comps["pred"]

    def test_beta_zero(self, tiny_data):
        total, comps = total_loss(_batch(tiny_data), _params(tiny_data), replace(TINY_TRAIN, beta=0.0, alpha=0.5))
        assert total == pytest.approx(comps["pred"] + 0.5 * comps["hca"], rel=1e-14)

    def test_ablation_flags(self, tiny_data):
        p, b = _params(tiny_data), _batch(tiny_data)
        _, full = total_loss(b, p, TINY_TRAIN)
        _, no_hea = total_loss(b, p, replace(TINY_TRAIN, no_hea=True))
        _, none = total_loss(b, p, replace(TINY_TRAIN, no_hea=True, no_hca=True))
        _, euc = total_loss(b, p, replace(TINY_TRAIN, euclidean=True))
        assert no_hea["hea"] == 0 and no_hea["hca"] == full["hca"]
        assert none["hca"] == 0 and none["hea"] == 0
        assert euc["hea"] == 0 and euc["hca"] != full["hca"]

    def test_no_gi_hea_keeps_hierarchy_terms(self, tiny_data):
        p, b = _params(tiny_data), _batch(tiny_data)
        _, comps = total_loss(b, p, replace(TINY_TRAIN, no_gi_hea=True))
        I_s, I_n = encode_image(b.feat_s, b.feat_n, p.arrays)
        G_s, G_n = encode_gene(b.Y_s, b.Y_n, p.arrays)
        hb = project_batch(I_s, I_n, G_s, G_n, math.exp(p["log_c"]))
        assert comps["hea"] == pytest.approx(float(hea_loss(hb, gene_image=False)), rel=1e-12)

    def test_no_alignment_leaves_only_prediction_gradient(self, tiny_data):
        p, b = _params(tiny_data), _batch(tiny_data)
        _, _, g_off = loss_and_grad(b, p, replace(TINY_TRAIN, no_hea=True, no_hca=True))
        _, _, g_pred = loss_and_grad(b, p, replace(TINY_TRAIN, alpha=0.0))
        for name in g_off:
            np.testing.assert_array_equal(g_off[name], g_pred[name])
        for name in ("gene.w1", "gene.w2", "log_c", "log_tau"):
            assert not np.any(g_off[name])

    def test_frozen_base_has_no_gradient_entry(self, tiny_data):
        p = _params(tiny_data)
        _, _, g = loss_and_grad(_batch(tiny_data), p, TINY_TRAIN)
        assert set(g) == set(p.trainable())
        assert not any(n.startswith("image.base") for n in g)


class TestGradCheck:
    @pytest.mark.parametrize(
        "flags",
        [{}, {"euclidean": True}, {"literal_contrastive": True}, {"no_gi_hea": True}, {"decoder_input": "spot"}],
        ids=["default", "euclidean", "literal", "no_gi_hea", "only_spot"],
    )
    def test_passes(self, tiny_data, flags):
        cfg = replace(TINY_TRAIN, **flags)
        rep = grad_check(_params(tiny_data, cfg, seed=3), _batch(tiny_data), cfg)
        assert rep.passed(1e-4), rep.worst
        assert rep.checked >= 200
        assert {"log_c", "log_tau", "gene.w1", "decoder.w2", "image.adapter1.B"} <= set(rep.per_group)

    def test_without_adapters_still_covers_200(self, tiny_data):
        cfg = replace(TINY_TRAIN, adapter_layers=0)
        rep = grad_check(_params(tiny_data, cfg), _batch(tiny_data), cfg)
        assert rep.checked + len(rep.skipped) >= 200
        assert rep.passed()

    def test_clamped_temperature_is_skipped(self, tiny_data):
        p = _params(tiny_data)
        p.arrays["log_tau"] = np.array(LOG_TAU_MAX)
        rep = grad_check(p, _batch(tiny_data), TINY_TRAIN)
        assert ("log_tau", 0, "at temperature clamp boundary") in rep.skipped

    def test_eps_outside_range_warns(self, tiny_data):
        with pytest.warns(UserWarning, match="eps"):
            grad_check(_params(tiny_data), _batch(tiny_data, 4), TINY_TRAIN, eps=1e-2, per_group=1, min_total=0)

    def test_perfect_batch_has_zero_gradient(self, tiny_data):
        # decoder outputs its bias only; targets equal that bias; alignment off
        p = _params(tiny_data)
        p.arrays["decoder.w2"] = np.zeros_like(p["decoder.w2"])
        b = _batch(tiny_data, 4)
        target = np.tile(p["decoder.b2"], (4, 1))
        b = type(b)(b.feat_s, b.feat_n, target, target)
        cfg = replace(TINY_TRAIN, alpha=0.0)
        loss, _, g = loss_and_grad(b, p, cfg)
        assert loss == 0.0
        assert all(not np.any(v) for v in g.values())


class TestOptimizer:
    def test_decay_targets(self):
        assert AdamW.decays("decoder.w1") and AdamW.decays("image.adapter2.A")
        assert not AdamW.decays("decoder.b1") and not AdamW.decays("log_c")

    def test_tau_clamped(self, tiny_data):
        p = _params(tiny_data)
        opt = AdamW(p, 10.0, 0.0, 10)
        grads = {n: np.zeros_like(p[n]) for n in p.trainable()}
        grads["log_tau"] = np.array(-1.0)
        for _ in range(5):
            opt.step(p, grads)
        assert float(p["log_tau"]) == LOG_TAU_MAX

    def test_cosine_schedule(self, tiny_data):
        opt = AdamW(_params(tiny_data), 1e-3, 0.0, 100)
        assert opt.current_lr() == 1e-3
        opt.step_count = 50
        assert opt.current_lr() == pytest.approx(5e-4)
        opt.step_count = 100
        assert opt.current_lr() == pytest.approx(0.0, abs=1e-18)


class TestTraining:
    def test_zero_epochs(self, tiny_data):
        res = train(tiny_data, replace(TINY_TRAIN, epochs=0))
        assert res.history == []
        assert res.params.equal(_params(tiny_data))

    def test_deterministic(self, tiny_data):
        a = train(tiny_data, TINY_TRAIN)
        b = train(tiny_data, TINY_TRAIN)
        assert a.history == b.history
        assert a.params.equal(b.params) and a.last_params.equal(b.last_params)

    def test_history_fields(self, tiny_data, tmp_path):
        res = train(tiny_data, TINY_TRAIN)
        assert [r["epoch"] for r in res.history] == [1, 2, 3]
        keys = {"loss", "pred", "hca", "hea", "tau", "c", "val_pcc@10", "val_pcc@50", "val_pcc@200", "val_mse"}
        assert keys <= set(res.history[0])
        write_history(tmp_path / "h.jsonl", res.history)
        assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 3

    def test_best_epoch_selected_by_validation(self, tiny_data):
        res = train(tiny_data, replace(TINY_TRAIN, epochs=4))
        pccs = [r["val_pcc@200"] for r in res.history]
        assert res.best_epoch == 1 + int(np.argmax(pccs))

    def test_frozen_base_never_moves(self, tiny_data):
        res = train(tiny_data, TINY_TRAIN)
        init = _params(tiny_data)
        for name in init.frozen:
            np.testing.assert_array_equal(res.last_params[name], init[name])
        assert not np.array_equal(res.last_params["image.adapter1.B"], init["image.adapter1.B"])

    def test_resume_matches_uninterrupted(self, tiny_data, tmp_path):
        cfg = replace(TINY_TRAIN, epochs=4)
        full = train(tiny_data, cfg)
        head = train(tiny_data, cfg, stop_epoch=2)
        save_run(tmp_path, head, cfg, tiny_data.panel)
        params, extra = load_model(tmp_path / "last.hstc")
        rest = train(tiny_data, cfg, resume=(params, extra))
        assert head.history == full.history[:2]
        assert [r["epoch"] for r in rest.history] == [3, 4]
        assert rest.history == full.history[2:]
        assert rest.last_params.equal(full.last_params)
        assert rest.params.equal(full.params)
        assert rest.best_epoch == full.best_epoch

    def test_divergence_keeps_finite_params(self, tiny_data):
        res = train(tiny_data, replace(TINY_TRAIN, learning_rate=1e200, epochs=2))
        assert res.diverged
        assert res.history[-1].get("diverged")
        assert all(np.all(np.isfinite(a)) for a in res.last_params.arrays.values())

    def test_save_run(self, tiny_data, tmp_path):
        res = train(tiny_data, TINY_TRAIN)
        save_run(tmp_path, res, TINY_TRAIN, tiny_data.panel)
        params, _ = load_model(tmp_path / "model.hstc")
        assert params.equal(res.params)
        assert {"model.hstc", "last.hstc", "panel.json", "config.json"} <= {p.name for p in tmp_path.iterdir()}

    def test_batch_larger_than_split(self, tiny_data):
        with pytest.raises(ContractViolation):
            train(tiny_data, replace(TINY_TRAIN, batch_size=10_000))


def test_loss_and_validation_trends(default_dataset):
    """Training loss at epoch 10 beats the initial loss and validation PCC@200
    rises over the first five epochs, each in at least 4 of 5 seeds."""
    loss_wins = pcc_wins = 0
    for seed in range(5):
        cfg = TrainConfig(seed=seed, epochs=10)
        data = prepare(default_dataset, cfg)
        part = data.parts["train"]
        fixed = [part.subset(np.arange(i, i + cfg.batch_size)) for i in range(0, 640, cfg.batch_size)]

        def mean_loss(p):
            return float(np.mean([total_loss(b, p, cfg)[0] for b in fixed]))

        res = train(data, cfg)
        initial = mean_loss(_params(data, cfg, seed))
        loss_wins += mean_loss(res.last_params) < initial
        pcc = [r["val_pcc@200"] for r in res.history[:5]]
        pcc_wins += pcc[4] > pcc[0]
    assert loss_wins >= 4
    assert pcc_wins >= 4
