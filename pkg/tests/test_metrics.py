import numpy as np
import pytest
import scipy.linalg

from gantune.errors import MetricError
from gantune.lora import uniform_spec
from gantune.metrics import (
    REFERENCE_COSTS,
    CostReport,
    GaussianSummary,
    count_flops,
    count_params,
    fid_score,
    frechet_distance,
    layer_flops,
    training_cost_report,
)
from gantune.models import GeneratorConfig, LayerDescriptor, build_generator, describe_layers, micro_config
from gantune.selection import ToyPixelEmbedder
from gantune.trainer import TrainConfig

# computed by summing describe_layers over the default config before the FLOP counter was written
DEFAULT_PARAMS = 7_791_875


def _scipy_fd(a, b):
    """Oracle: the textbook formula with scipy's general matrix square root."""
    covmean = scipy.linalg.sqrtm(a.covariance @ b.covariance)
    covmean = np.real(covmean)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(a.covariance + b.covariance - 2 * covmean))


def _random_spd(d, rng):
    m = rng.normal(size=(d, d))
    return m @ m.T / d + 0.1 * np.eye(d)


def test_identical_summaries_zero():
    rng = np.random.default_rng(0)
    s = GaussianSummary(rng.normal(size=6), _random_spd(6, rng), 100)
    assert abs(frechet_distance(s, s)) <= 1e-8


def test_unit_gaussians_shifted_by_one():
    a = GaussianSummary([0.0], [[1.0]], 10)
    b = GaussianSummary([1.0], [[1.0]], 10)
    assert abs(frechet_distance(a, b) - 1.0) <= 1e-8


def test_equal_covariance_mean_shift():
    rng = np.random.default_rng(1)
    cov = _random_spd(8, rng)
    mu = rng.normal(size=8)
    v = rng.normal(size=8)
    d = frechet_distance(GaussianSummary(mu, cov, 50), GaussianSummary(mu + v, cov, 50))
    assert abs(d - v @ v) <= 1e-6


def test_scalar_variances_closed_form():
    a = GaussianSummary([0.0], [[4.0]], 10)
    b = GaussianSummary([0.0], [[9.0]], 10)
    # (sqrt(4) - sqrt(9))^2
    assert abs(frechet_distance(a, b) - 1.0) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_matches_scipy_sqrtm(seed):
    rng = np.random.default_rng(seed)
    a = GaussianSummary(rng.normal(size=5), _random_spd(5, rng), 20)
    b = GaussianSummary(rng.normal(size=5), _random_spd(5, rng), 20)
    assert abs(frechet_distance(a, b) - _scipy_fd(a, b)) <= 1e-8


def test_symmetry_and_singular_covariance():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(3, 6))  # rank-deficient: 3 samples in 6-D
    a = GaussianSummary.fit(feats)
    b = GaussianSummary.fit(rng.normal(size=(3, 6)))
    d1, d2 = frechet_distance(a, b), frechet_distance(b, a)
    assert np.isfinite(d1) and abs(d1 - d2) <= 1e-8 * max(1, d1)


def test_sampled_gaussians_within_ten_percent():
    rng = np.random.default_rng(3)
    d = 4
    cov_a, cov_b = _random_spd(d, rng), _random_spd(d, rng)
    mu_a, mu_b = np.zeros(d), np.full(d, 0.5)
    truth = _scipy_fd(GaussianSummary(mu_a, cov_a, 2), GaussianSummary(mu_b, cov_b, 2))
    fa = rng.multivariate_normal(mu_a, cov_a, size=20000)
    fb = rng.multivariate_normal(mu_b, cov_b, size=20000)
    est = frechet_distance(GaussianSummary.fit(fa), GaussianSummary.fit(fb))
    assert abs(est / truth - 1) <= 0.10


def test_summary_validation():
    with pytest.raises(MetricError):
        GaussianSummary([0.0, 1.0], [[1.0]], 10)
    with pytest.raises(MetricError):
        GaussianSummary([0.0], [[1.0]], 1)
    with pytest.raises(MetricError):
        GaussianSummary([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], 5)
    with pytest.raises(MetricError):
        GaussianSummary.fit(np.zeros((1, 3)))
    with pytest.raises(MetricError, match="dimension"):
        frechet_distance(GaussianSummary([0.0], [[1.0]], 2), GaussianSummary([0.0, 0.0], np.eye(2), 2))


def test_fid_score_identical_sets_zero_and_shift_positive():
    rng = np.random.default_rng(4)
    imgs = rng.uniform(-1, 1, size=(30, 3, 8, 8))
    e = ToyPixelEmbedder()
    assert fid_score(list(imgs), list(imgs), e) <= 1e-8
    assert fid_score(list(imgs), list(np.clip(imgs + 0.3, -1, 1)), e) > 0.1
    with pytest.raises(MetricError):
        fid_score([imgs[0]], list(imgs), e)


def test_default_param_count_and_calibration():
    layers = describe_layers(build_generator(GeneratorConfig()))
    counts = count_params(layers)
    assert counts["total"] == DEFAULT_PARAMS
    assert abs(counts["total"] / REFERENCE_COSTS["3RB+1TB"]["params"] - 1) <= 0.15
    assert counts["TB"] < counts["RB"]
    assert counts["SL"] + counts["RB"] + counts["TB"] + counts["other"] == counts["total"]


def test_count_params_matches_torch():
    for cfg in (micro_config(), micro_config(tb_sandwich="pool_unpool"), micro_config(num_transformer_blocks=2)):
        gen = build_generator(cfg)
        assert count_params(describe_layers(gen))["total"] == sum(p.numel() for p in gen.parameters())


def test_default_flops_within_band():
    layers = describe_layers(build_generator(GeneratorConfig()))
    flops = count_flops(layers, 256)
    assert abs(flops / REFERENCE_COSTS["3RB+1TB"]["flops"] - 1) <= 0.20


def test_layer_flops_hand_values():
    conv = LayerDescriptor("c", "conv", 3, 64, (7, 7), stride=1)
    assert layer_flops(conv, 256) == (2 * 256 * 256 * 3 * 64 * 49, 256)
    strided = LayerDescriptor("s", "conv", 64, 128, (3, 3), stride=2)
    assert layer_flops(strided, 256) == (2 * 128 * 128 * 64 * 128 * 9, 128)
    tconv = LayerDescriptor("t", "transpose_conv", 256, 256, (3, 3), stride=2)
    assert layer_flops(tconv, 32) == (2 * 32 * 32 * 256 * 256 * 9, 64)


def test_flops_scale_quadratically_for_convs():
    # the noise and text projections act on vectors and have a resolution-independent cost
    layers = [d for d in describe_layers(build_generator(micro_config(num_transformer_blocks=0))) if d.spatial]
    assert count_flops(layers, 32) == 4 * count_flops(layers, 16)


def test_training_cost_report_lora_vs_full():
    cfg = micro_config()
    gen = build_generator(cfg)
    spec = uniform_spec(gen, (1, 2, 2, 2))
    tc = TrainConfig(epochs=3, batch_size=4)
    lora = training_cost_report(tc, cfg, spec, dataset_size=10)
    full = training_cost_report(tc, cfg, "full", dataset_size=10)
    assert lora.iteration_count == full.iteration_count == 3 * 3
    assert lora.trainable_params < full.trainable_params == full.total_params
    assert full.stored_bytes_per_concept == 4 * full.total_params
    assert lora.stored_bytes_per_concept == 4 * lora.trainable_params + 8 * len(spec.ranks)
    assert lora.train_flops_total == 9 * 4 * 3 * lora.flops_per_image
    half = training_cost_report(tc, cfg, "full", dataset_size=10, coreset_k=5)
    assert half.iteration_count == 3 * 2
    assert 0 < lora.trainable_fraction < 1
    assert set(lora.to_dict()) >= {"total_params", "trainable_fraction"}


def test_cost_report_validation():
    with pytest.raises(MetricError):
        CostReport(10, 11, 0, 0, 0, 0)
    with pytest.raises(MetricError):
        training_cost_report(TrainConfig(), micro_config(), "half", 10)
