import math

import numpy as np
import pytest

from emblab.contrastive import CLConfig, cl_train, make_toy_triplets
from emblab.datagen import ModalitySpec, WorldSpec, build_world
from emblab.numerics import Rng
from emblab.theory import (
    BoundCheckConfig,
    BoundInputs,
    ScalingPoint,
    bound_check,
    grsl_fit,
    kl_lora_gaussian,
    load_scaling_points_csv,
    mi_from_generative,
    pac_bayes_bound,
)
from emblab.toymodel import init_lora, init_model, pretrain, spec_for_world


def test_bound_saturated_information_vanishing_penalty():
    b = BoundInputs(batch_size_n=64, i_p=math.log(64), eps_p=0.0, kl=0.0,
                    n_samples=10**12, delta=0.5)
    assert abs(pac_bayes_bound(b)) < 1e-5


def test_bound_direct_formula_value():
    b = BoundInputs(batch_size_n=128, i_p=2.0, eps_p=0.1, kl=10.0,
                    n_samples=1000, delta=0.05)
    expect = (
        math.log(128) - 2.0 + 0.1
        + math.sqrt((10.0 + math.log(1 / 0.05)) / 2000.0)
    )
    assert pac_bayes_bound(b) == pytest.approx(expect, abs=1e-12)
    assert pac_bayes_bound(b) == pytest.approx(3.03264, abs=5e-6)


def test_bound_monotonicities():
    base = dict(batch_size_n=32, i_p=1.0, eps_p=0.2, kl=5.0, n_samples=500,
                delta=0.1)
    b0 = pac_bayes_bound(BoundInputs(**base))
    assert pac_bayes_bound(BoundInputs(**{**base, "i_p": 2.0})) < b0
    assert pac_bayes_bound(BoundInputs(**{**base, "eps_p": 0.5})) > b0
    assert pac_bayes_bound(BoundInputs(**{**base, "kl": 10.0})) > b0
    assert pac_bayes_bound(BoundInputs(**{**base, "n_samples": 5000})) < b0
    assert pac_bayes_bound(BoundInputs(**{**base, "delta": 0.5})) < b0


def test_bound_inputs_validation():
    good = dict(batch_size_n=8, i_p=1.0, eps_p=0.0, kl=0.0, n_samples=10,
                delta=0.1)
    BoundInputs(**good)
    with pytest.raises(ValueError):
        BoundInputs(**{**good, "delta": 0.0})
    with pytest.raises(ValueError):
        BoundInputs(**{**good, "eps_p": -0.1})
    with pytest.raises(ValueError):
        BoundInputs(**{**good, "n_samples": 0})


def test_mi_from_generative():
    assert mi_from_generative(math.log(8), math.log(16) * 3) == 0.0
    assert mi_from_generative(math.log(8), 0.0) == math.log(8)
    assert 0.0 <= mi_from_generative(2.0, 1.3) <= 2.0
    with pytest.raises(ValueError):
        mi_from_generative(-1.0, 0.0)


def test_kl_identical_gaussians_zero():
    assert kl_lora_gaussian(np.zeros(5), 0.1, 0.1) == 0.0


def test_kl_hand_value():
    got = kl_lora_gaussian(np.array([0.1, -0.2]), 0.01, 0.1)
    per_dim = lambda mu: (0.01**2 + mu**2) / (2 * 0.1**2) - 0.5 + math.log(10.0)
    assert got == pytest.approx(per_dim(0.1) + per_dim(-0.2), abs=1e-12)
    assert got == pytest.approx(6.11517, abs=5e-6)


def test_kl_nonnegative_and_monotone_in_mu():
    rng = Rng(3)
    for trial in range(10):
        mu = rng.normal(20)
        kl1 = kl_lora_gaussian(mu, 0.05, 0.2)
        kl2 = kl_lora_gaussian(2.0 * mu, 0.05, 0.2)
        assert kl1 >= 0.0
        assert kl2 >= kl1


def test_kl_accepts_adapter():
    world = build_world(
        WorldSpec(latent_classes=4, latent_dim=3,
                  modalities=(ModalitySpec("img", 4, 0.1),),
                  vocab_size=8, text_len=3, seed=4)
    )
    model = init_model(spec_for_world(world, enc_hidden=6, trunk_dims=(6, 4)))
    adapter = init_lora(model, rank=2, alpha=4.0, seed=1)
    # B zero at init means zero delta
    assert kl_lora_gaussian(adapter, 0.1, 0.1) == 0.0
    adapter.b[0][:] = 0.3
    assert kl_lora_gaussian(adapter, 0.1, 0.1) > 0.0
    with pytest.raises(ValueError, match="positive"):
        kl_lora_gaussian(adapter, 0.0, 0.1)


def test_grsl_fit_collinear():
    pts = [ScalingPoint(f"m{i}", float(i), True, 2.0 * i + 1.0) for i in range(5)]
    fit = grsl_fit(pts)
    assert fit["pearson"] == pytest.approx(1.0)
    assert fit["spearman"] == pytest.approx(1.0)
    assert fit["slope"] == pytest.approx(2.0)
    assert fit["intercept"] == pytest.approx(1.0)


def test_grsl_fit_reversed_monotone():
    pts = [ScalingPoint(f"m{i}", float(i), True, -float(i) ** 3) for i in range(5)]
    assert grsl_fit(pts)["spearman"] == pytest.approx(-1.0)


def test_grsl_fit_direction_flag():
    # lower-is-better generative scores flip the axis
    pts = [ScalingPoint(f"m{i}", float(5 - i), False, 2.0 * i) for i in range(5)]
    assert grsl_fit(pts)["spearman"] == pytest.approx(1.0)


def test_grsl_fit_matches_normal_equations():
    rng = Rng(6)
    x = rng.normal(5)
    y = 1.5 * x + 0.3 * rng.normal(5)
    pts = [ScalingPoint(f"m{i}", float(x[i]), True, float(y[i])) for i in range(5)]
    fit = grsl_fit(pts)
    a = np.vstack([x, np.ones(5)]).T
    slope, intercept = np.linalg.solve(a.T @ a, a.T @ y)
    assert fit["slope"] == pytest.approx(slope, abs=1e-9)
    assert fit["intercept"] == pytest.approx(intercept, abs=1e-9)
    # OLS residuals orthogonal to the regressor
    resid = y - (fit["slope"] * x + fit["intercept"])
    assert abs(float(resid @ x)) < 1e-9


def test_grsl_fit_validations():
    pts = [ScalingPoint("a", 1.0, True, 2.0), ScalingPoint("b", 2.0, True, 3.0)]
    with pytest.raises(ValueError, match="at least 3"):
        grsl_fit(pts)
    flat = [ScalingPoint(f"m{i}", 1.0, True, float(i)) for i in range(4)]
    with pytest.raises(ValueError, match="constant axis"):
        grsl_fit(flat)


def test_load_scaling_points_csv(tmp_path):
    path = tmp_path / "points.csv"
    path.write_text(
        "model_id,gen_score,gen_direction,rep_score\n"
        "m1,0.5,higher,0.7\n"
        "m2,1.5,lower,0.9\n"
    )
    pts = load_scaling_points_csv(path)
    assert len(pts) == 2
    assert pts[0].gen_higher_is_better and not pts[1].gen_higher_is_better
    bad = tmp_path / "bad.csv"
    bad.write_text("model,gen\nx,1\n")
    with pytest.raises(ValueError, match="header"):
        load_scaling_points_csv(bad)


# ---------------------------------------------------------------------------
# bound_check end to end (small)
# ---------------------------------------------------------------------------


def _bound_setup(seed=0, cl_steps=120):
    world = build_world(
        WorldSpec(latent_classes=8, latent_dim=4,
                  modalities=(ModalitySpec("img", 6, 0.1),),
                  vocab_size=16, text_len=3, text_pages=2, seed=seed)
    )
    model = init_model(spec_for_world(world, enc_hidden=12, trunk_dims=(12, 8),
                                      init_seed=seed))
    model, _ = pretrain(model, world, ["text", "img"], steps=250, lr=2e-3,
                        batch=16, rng=Rng(seed + 1))
    triplets = make_toy_triplets(world, 256, Rng(seed + 2))
    cfg = CLConfig(strategy="lora", steps=cl_steps, seed=seed + 3,
                   batch_size=8, temperature=0.1, lora_rank=4, lora_alpha=8.0)
    result, _ = cl_train(model, triplets, cfg)
    return world, model, triplets, result, cfg


def test_bound_check_reports_components():
    world, pre, triplets, result, clcfg = _bound_setup()
    cfg = BoundCheckConfig(eval_batch_n=8, heldout_batches=8, n_samples=256,
                           seed=5)
    report = bound_check(pre, result, world, triplets, clcfg.temperature, cfg)
    assert report.h_y == pytest.approx(math.log(8))
    assert 0.0 <= report.i_p <= report.h_y
    assert report.eps_p >= 0.0
    assert report.kl > 0.0
    assert report.empirical_pop_risk > 0.0
    assert report.bound == pytest.approx(
        math.log(8) - report.i_p + report.eps_p
        + math.sqrt((report.kl + math.log(1 / 0.05)) / (2 * 256))
    )
    assert report.holds == (report.empirical_pop_risk <= report.bound)


def test_bound_check_zero_adapter_reports_pre_model_risk():
    world, pre, triplets, result, clcfg = _bound_setup(cl_steps=0)
    cfg = BoundCheckConfig(eval_batch_n=8, heldout_batches=8, n_samples=256,
                           seed=6)
    report = bound_check(pre, result, world, triplets, clcfg.temperature, cfg)
    # B = 0: zero delta, so KL reduces to the pure sigma mismatch term
    d = result.adapter.flat_delta().size
    expect_kl = d * ((0.01**2) / (2 * 0.1**2) - 0.5 + math.log(10.0))
    assert report.kl == pytest.approx(expect_kl, rel=1e-9)
    # the refined forward equals the pre-refinement forward, so the
    # reported population risk is the pre-refinement risk
    again = bound_check(pre, result, world, triplets, clcfg.temperature, cfg)
    assert report.empirical_pop_risk == again.empirical_pop_risk
    assert isinstance(report.holds, bool)


def test_bound_check_small_n_penalty_dominates():
    world, pre, triplets, result, clcfg = _bound_setup()
    cfg = BoundCheckConfig(eval_batch_n=8, heldout_batches=8, n_samples=4,
                           seed=7)
    report = bound_check(pre, result, world, triplets, clcfg.temperature, cfg)
    assert report.bound > math.log(8)
    assert report.holds
