"""
Tests for tracing, the Phong kernel, Richardson-Lucy and recolouring
"""

import math

import numpy as np
import pytest

from src.config import Config
from src.core import (EnvironmentMap, Image, MapSize, Material, direction_grid, make_normal_map_probe,
                      make_sphere_probe, normalize, pixel_to_direction, solid_angle_weights)
from src.envmap import (EnvmapEstimator, KernelParamMap, covered_flux, estimate_envmap, estimate_summary,
                        kernel_matrix, mean_albedo, normalize_traced, phong_kernel, recolor_highlight,
                        rl_deconvolve, select_skin_type, trace_forward, trace_inverse)
from src.errors import DomainError
from src.lights import detect_lights
from src.metrics import rmse
from src.renderer import clip_to_ldr, render_probe

from conftest import VIEW, angle_between, blob_directions, three_blob_environment


def relative_rmse(estimate: EnvironmentMap, truth: EnvironmentMap) -> float:
    covered = estimate.coverage
    diff = estimate.pixels[covered] - truth.pixels[covered]
    return math.sqrt(np.mean(diff ** 2)) / math.sqrt(np.mean(truth.pixels[covered] ** 2))


# Tracing

def test_forward_trace_splats_the_mirror_direction():
    size = MapSize(64, 32)
    normal = normalize(np.array([0.2, 0.1, 1.0]))
    normals = np.full((1, 2, 3), np.nan)
    normals[0, 0] = normal
    probe = make_normal_map_probe(normals)
    highlight = Image(np.array([[[0.3, 0.2, 0.1], [0.0, 0.0, 0.0]]]))
    env = trace_forward(highlight, probe, VIEW, size)

    mirror = 2.0 * normal[2] * normal - np.array(VIEW)
    assert env.coverage.sum() == 1
    hit = tuple(np.argwhere(env.coverage)[0])
    assert angle_between(pixel_to_direction(hit, size).as_array(), mirror) < 6.0
    np.testing.assert_allclose(env.pixels[hit], [0.3, 0.2, 0.1])


def test_forward_trace_of_a_mirror_sphere_finds_a_point_light():
    size = MapSize(128, 64)
    light = (24, 110)
    pixels = np.zeros(size.shape + (3,))
    pixels[light] = 100.0
    probe = make_sphere_probe(128)
    layers = render_probe(probe, Material([1.0], [1e4], [0.0, 0.0, 0.0]), EnvironmentMap(pixels), VIEW,
                          Config(max_workers=2))
    env = trace_forward(layers.highlight, probe, VIEW, size)
    row, col = np.unravel_index(np.argmax(env.pixels[..., 1]), size.shape)
    assert abs(row - light[0]) <= 1
    assert min(abs(col - light[1]), size.width - abs(col - light[1])) <= 1


def test_inverse_trace_exact_match_takes_the_probe_value():
    size = MapSize(64, 32)
    target = (12, 40)
    d = pixel_to_direction(target, size).as_array()
    normals = np.stack([normalize(d + np.array(VIEW)), normalize(np.array([0.3, -0.2, 1.0]))])[None]
    probe = make_normal_map_probe(normals)
    highlight = Image(np.array([[[0.8, 0.6, 0.4], [0.1, 0.1, 0.1]]]))
    env, params = trace_inverse(highlight, probe, VIEW, size, k=2)
    assert env.coverage[target]
    np.testing.assert_array_equal(env.pixels[target], [0.8, 0.6, 0.4])
    np.testing.assert_array_equal(params.coverage, env.coverage)


def test_inverse_coverage_contains_forward_coverage():
    size = MapSize(128, 64)
    probe = make_sphere_probe(32)
    highlight = Image(np.ones(probe.shape + (3,)) * probe.silhouette[..., None])
    forward = trace_forward(highlight, probe, VIEW, size)
    inverse, _ = trace_inverse(highlight, probe, VIEW, size)
    assert np.all(inverse.coverage[forward.coverage])
    # a coarse probe leaves holes the inverse warp fills
    assert inverse.coverage.sum() > forward.coverage.sum()


def test_inverse_trace_leaves_unseen_directions_uncovered():
    size = MapSize(128, 64)
    sphere = make_sphere_probe(64)
    normals = sphere.normals.copy()
    normals[~(normals[..., 2] >= math.cos(math.radians(30.0)))] = np.nan
    probe = make_normal_map_probe(normals)
    highlight = Image(np.ones(probe.shape + (3,)))
    env, params = trace_inverse(highlight, probe, VIEW, size)
    # looking straight back along -V needs a grazing normal
    assert not env.coverage[31, 63]
    assert not params.coverage[31, 63]
    dirs = direction_grid(size)
    assert np.all(dirs[env.coverage] @ np.array(VIEW) > 0.3)


def test_dense_sphere_covers_most_of_the_map():
    size = MapSize(128, 64)
    probe = make_sphere_probe(64)
    highlight = Image(np.ones(probe.shape + (3,)))
    env, params = trace_inverse(highlight, probe, VIEW, size)
    dirs = direction_grid(size)
    assert np.all(env.coverage[dirs @ np.array(VIEW) > -0.5])
    np.testing.assert_array_equal(params.alpha[env.coverage], 120.0)


def test_inverse_trace_validates_regions():
    probe = make_sphere_probe(8, regions=np.ones((8, 8), dtype=np.int64))
    highlight = Image(np.zeros((8, 8, 3)))
    with pytest.raises(DomainError):
        trace_inverse(highlight, probe, VIEW, MapSize(32, 16), material=Material([0.3], [100.0]))
    with pytest.raises(DomainError):
        trace_inverse(Image(np.zeros((4, 4, 3))), make_sphere_probe(8), VIEW, MapSize(32, 16))


def test_uniform_environment_normalises_to_its_radiance():
    size = MapSize(64, 32)
    env = EnvironmentMap(np.ones(size.shape + (3,)))
    probe = make_sphere_probe(32)
    material = Material([0.3], [120.0], [0.0, 0.0, 0.0])
    layers = render_probe(probe, material, env, VIEW, Config(max_workers=2))
    traced, params = trace_inverse(layers.highlight, probe, VIEW, size, material=material)
    normalized = normalize_traced(traced, params)
    np.testing.assert_allclose(normalized.pixels[normalized.coverage], 1.0, rtol=1e-2)


# Kernel

def test_kernel_params_validation():
    size = MapSize(32, 16)
    params = KernelParamMap.uniform(size, 50.0, 0.0)
    assert params.size == size
    with pytest.raises(DomainError):
        KernelParamMap(np.zeros(size.shape), np.ones(size.shape), np.ones(size.shape, dtype=bool))
    with pytest.raises(DomainError):
        KernelParamMap.uniform(size, 50.0, 1.5)


def test_phong_kernel_values():
    size = MapSize(64, 32)
    params = KernelParamMap.uniform(size, 100.0, 0.5)
    x = (10, 20)
    weights = phong_kernel(x, params)
    omega = solid_angle_weights(size)
    assert weights[x] / omega[x] == pytest.approx(0.5, rel=1e-12)
    # directly opposite x
    assert weights[21, 52] == 0.0
    assert np.all(weights >= 0)
    assert phong_kernel(x, params, normalized=True).sum() == pytest.approx(1.0, rel=1e-12)


def test_phong_kernel_needs_a_covered_pixel():
    size = MapSize(32, 16)
    coverage = np.zeros(size.shape, dtype=bool)
    coverage[3, 3] = True
    params = KernelParamMap.uniform(size, 50.0, 0.5, coverage)
    with pytest.raises(DomainError):
        phong_kernel((4, 4), params)
    with pytest.raises(DomainError):
        phong_kernel((16, 0), params)


def test_kernel_matrix_matches_the_per_pixel_kernel():
    size = MapSize(64, 32)
    params = KernelParamMap.uniform(size, 50.0, 1.0)
    K = kernel_matrix(params)
    np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 1.0, rtol=1e-12)
    for x in [(0, 0), (12, 40), (31, 63)]:
        row = K.getrow(x[0] * size.width + x[1]).toarray().reshape(size.shape)
        np.testing.assert_allclose(row, phong_kernel(x, params, normalized=True), atol=1e-12)


# Richardson-Lucy

def test_zero_iterations_return_a_copy():
    size = MapSize(32, 16)
    rng = np.random.default_rng(8)
    blurred = EnvironmentMap(rng.uniform(size=size.shape + (3,)))
    params = KernelParamMap.uniform(size, 50.0, 1.0)
    result, done = rl_deconvolve(blurred, params, iterations=0)
    assert done == 0
    np.testing.assert_array_equal(result.pixels, blurred.pixels)
    assert result.pixels is not blurred.pixels


def test_uniform_map_is_a_fixed_point():
    size = MapSize(64, 32)
    blurred = EnvironmentMap(np.ones(size.shape + (3,)))
    params = KernelParamMap.uniform(size, 50.0, 1.0)
    result, _ = rl_deconvolve(blurred, params, iterations=5, tolerance=0.0)
    np.testing.assert_allclose(result.pixels, 1.0, rtol=0.0, atol=1e-10)


def test_delta_is_sharpened_back():
    size = MapSize(64, 32)
    params = KernelParamMap.uniform(size, 50.0, 1.0)
    peak = (12, 40)
    delta = np.zeros(size.shape)
    delta[peak] = 100.0

    # brute-force blur with the per-pixel kernel
    blurred = np.zeros(size.shape)
    for row in range(size.height):
        for col in range(size.width):
            blurred[row, col] = (phong_kernel((row, col), params, normalized=True) * delta).sum()
    K = kernel_matrix(params)
    np.testing.assert_allclose((K @ delta.ravel()).reshape(size.shape), blurred, atol=1e-9)

    result, done = rl_deconvolve(EnvironmentMap(blurred), params, iterations=30, tolerance=0.0)
    assert done == 30
    lum = result.pixels[..., 1]
    assert np.unravel_index(np.argmax(lum), size.shape) == peak
    assert lum[peak] > blurred[peak]
    assert np.all(result.pixels >= 0)


def test_deconvolution_stays_non_negative_and_keeps_coverage(blob_roundtrip):
    final = blob_roundtrip.estimate.final
    assert np.all(final.pixels >= 0)
    np.testing.assert_array_equal(final.coverage, blob_roundtrip.estimate.params.coverage)
    assert np.all(final.pixels[~final.coverage] == 0)


def test_deconvolution_conserves_covered_flux(blob_roundtrip):
    normalized = blob_roundtrip.estimate.normalized
    params = blob_roundtrip.estimate.params
    before = covered_flux(normalized)
    after = covered_flux(rl_deconvolve(normalized, params, iterations=10, tolerance=0.0)[0])
    np.testing.assert_allclose(after, before, rtol=1e-2)


def test_deconvolution_reduces_map_error(blob_roundtrip):
    estimate, env = blob_roundtrip.estimate, blob_roundtrip.env
    covered = estimate.final.coverage
    pre = rmse(estimate.normalized, env, covered)
    post = rmse(estimate.final, env, covered)
    assert post <= 0.7 * pre


def test_recovered_lights_sit_at_the_blob_centres(blob_roundtrip):
    found = detect_lights(blob_roundtrip.estimate.final, math.radians(10.0), 0.3)
    for truth in blob_directions():
        nearest = min(angle_between(light.direction.as_array(), truth) for light in found)
        assert nearest <= 3.0


# Mirror limit

@pytest.fixture(scope="module")
def blob_env_128():
    return three_blob_environment(MapSize(128, 64))


def _normalized_error(env: EnvironmentMap, alpha: float, resolution: int, iterations: int = 0) -> float:
    size = env.size
    probe = make_sphere_probe(resolution)
    material = Material([0.5], [alpha], [0.0, 0.0, 0.0])
    config = Config(rl_tolerance=0.0)
    layers = render_probe(probe, material, env, VIEW, config)
    estimate = EnvmapEstimator(config).estimate(layers.highlight, probe, material, VIEW,
                                                iterations=iterations, size=size)
    return relative_rmse(estimate.final, env)


@pytest.fixture(scope="module")
def mirror_limit_errors(blob_env_128):
    """Undeconvolved error of a 256 px sphere at growing Phong exponents"""
    return [_normalized_error(blob_env_128, alpha, 256) for alpha in (100.0, 1000.0, 10000.0)]


def test_near_mirror_probe_reproduces_the_map(mirror_limit_errors):
    assert mirror_limit_errors[2] <= 0.02


def test_error_shrinks_towards_the_mirror_limit(mirror_limit_errors):
    errors = mirror_limit_errors
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] <= 0.02


def test_inverse_trace_reproduces_a_field_linear_in_the_normal():
    size = MapSize(128, 64)
    probe = make_sphere_probe(64)
    field = 1.0 + 0.5 * np.nan_to_num(probe.normals[..., 0]) - 0.3 * np.nan_to_num(probe.normals[..., 1])
    highlight = Image(np.repeat(field[..., None], 3, axis=2))
    env, _ = trace_inverse(highlight, probe, VIEW, size)

    dirs = direction_grid(size)
    inner = env.coverage & (dirs @ np.array(VIEW) > 0.5)
    required = normalize(dirs[inner] + np.array(VIEW))
    expected = 1.0 + 0.5 * required[:, 0] - 0.3 * required[:, 1]
    np.testing.assert_allclose(env.pixels[inner][:, 1], expected, atol=2e-3)


# Recolouring

def _chroma(rg):
    return np.array(rg, dtype=np.float64).reshape(1, -1, 2)


def test_recolor_anchors_on_blue():
    highlight = Image(np.array([[[0.5, 0.5, 0.5]]]))
    out, fallback = recolor_highlight(highlight, _chroma([0.5, 0.3]))
    np.testing.assert_allclose(out.pixels[0, 0], [1.25, 0.75, 0.5])
    assert not fallback.any()


def test_recolor_falls_back_to_green_then_red():
    pixels = np.array([[[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]])
    mask = np.zeros((1, 2, 3), dtype=bool)
    mask[0, 0, 2] = True
    mask[0, 1, 1:] = True
    out, _ = recolor_highlight(Image(pixels, mask), _chroma([[0.5, 0.3], [0.5, 0.3]]))
    np.testing.assert_allclose(out.pixels[0, 0], [0.5 * 0.5 / 0.3, 0.5, 0.5 * 0.2 / 0.3])
    np.testing.assert_allclose(out.pixels[0, 1], [0.5, 0.3, 0.2])


def test_fully_saturated_pixel_anchors_on_blue():
    highlight = Image(np.array([[[0.5, 0.5, 0.5]]]), np.ones((1, 1, 3), dtype=bool))
    out, _ = recolor_highlight(highlight, _chroma([0.5, 0.3]))
    assert out.pixels[0, 0, 2] == 0.5
    np.testing.assert_allclose(out.pixels[0, 0], [1.25, 0.75, 0.5])


def test_grey_shading_leaves_highlight_unchanged():
    highlight = Image(np.array([[[0.2, 0.4, 0.6]]]))
    out, _ = recolor_highlight(highlight, _chroma([1.0 / 3.0, 1.0 / 3.0]))
    np.testing.assert_allclose(out.pixels, [[[0.6, 0.6, 0.6]]], rtol=1e-12)


def test_recolor_is_idempotent():
    rng = np.random.default_rng(9)
    highlight = Image(rng.uniform(0.0, 1.0, (6, 6, 3)), rng.uniform(size=(6, 6, 3)) > 0.7)
    rgb = rng.uniform(0.1, 1.0, (6, 6, 3))
    chroma = (rgb / rgb.sum(axis=2, keepdims=True))[..., :2]
    once, _ = recolor_highlight(highlight, chroma)
    twice, _ = recolor_highlight(once, chroma)
    np.testing.assert_allclose(twice.pixels, once.pixels, rtol=1e-12)


def test_missing_anchor_chromaticity_falls_back():
    highlight = Image(np.array([[[0.5, 0.4, 0.3], [0.5, 0.4, 0.3]]]))
    chroma = _chroma([[0.6, 0.4], [np.nan, np.nan]])
    out, fallback = recolor_highlight(highlight, chroma)
    assert fallback.tolist() == [[True, False]]
    np.testing.assert_array_equal(out.pixels, highlight.pixels)


# Pipeline

def test_zero_specular_albedo_gives_an_empty_map(small_size):
    config = Config(envmap_width=64, envmap_height=32, max_workers=2)
    env = three_blob_environment(small_size, 12.0, 0.1)
    probe = make_sphere_probe(24)
    material = Material([0.0], [100.0], [0.6, 0.5, 0.4])
    layers = render_probe(probe, material, env, VIEW, config)
    estimate = estimate_envmap(layers, probe, material, VIEW, config)
    assert estimate.final.coverage.any()
    assert np.all(estimate.final.pixels == 0)


def test_estimate_summary_reports_stages(small_size):
    config = Config(envmap_width=64, envmap_height=32, max_workers=2, rl_iterations=5, rl_tolerance=0.0)
    env = three_blob_environment(small_size, 12.0, 0.1)
    probe = make_sphere_probe(24)
    material = Material([0.3], [80.0], [0.6, 0.5, 0.4])
    layers = render_probe(probe, material, env, VIEW, config)
    estimate = estimate_envmap(layers, probe, material, VIEW, config)
    assert set(estimate.stages()) == {'forward', 'traced', 'normalized', 'final'}
    summary = estimate_summary(estimate)
    assert summary['iterations'] == 5
    assert 0 < summary['coverage'] <= 1
    assert len(summary['flux_final']) == 3


def test_near_clip_channel_does_not_anchor_the_recolouring():
    probe = make_normal_map_probe(np.array([[[0.0, 0.0, 1.0]]]))
    clipped = clip_to_ldr(Image(np.array([[[0.5, 0.7, 0.99]]])), 1.0)
    assert not clipped.saturation_mask.any()
    chroma = _chroma([0.5, 0.3])
    estimate = EnvmapEstimator(Config()).estimate(clipped, probe, Material([0.3], [100.0]), VIEW, chroma,
                                                  iterations=0, size=MapSize(16, 8))
    # blue sits above 0.98 of the clip level, so green anchors
    np.testing.assert_allclose(estimate.recolored.pixels[0, 0], [0.7 * 0.5 / 0.3, 0.7, 0.7 * 0.2 / 0.3])

    relaxed = EnvmapEstimator(Config(saturation_ratio=1.0)).estimate(
        clipped, probe, Material([0.3], [100.0]), VIEW, chroma, iterations=0, size=MapSize(16, 8))
    assert relaxed.recolored.pixels[0, 0, 2] == pytest.approx(0.99)


def test_composite_decides_saturation_when_given():
    probe = make_normal_map_probe(np.array([[[0.0, 0.0, 1.0]]]))
    highlight = Image(np.array([[[0.3, 0.4, 0.5]]]))
    composite = Image(np.array([[[0.6, 0.8, 1.0]]]), np.array([[[False, False, True]]]))
    estimate = EnvmapEstimator(Config()).estimate(highlight, probe, Material([0.3], [100.0]), VIEW,
                                                  _chroma([0.5, 0.3]), composite, iterations=0,
                                                  size=MapSize(16, 8))
    np.testing.assert_allclose(estimate.recolored.pixels[0, 0], [0.4 * 0.5 / 0.3, 0.4, 0.4 * 0.2 / 0.3])


def test_mean_albedo_recovers_the_rendered_albedo(small_size):
    config = Config(max_workers=2)
    env = three_blob_environment(small_size, 12.0, 0.1)
    dark = config.skin_type_materials()['dark']
    layers = render_probe(make_sphere_probe(24), dark, env, VIEW, config)
    np.testing.assert_allclose(mean_albedo(layers), dark.diffuse_albedo, rtol=1e-9)
    np.testing.assert_allclose(mean_albedo(layers.clipped(2.0)), dark.diffuse_albedo, rtol=1e-9)


def test_missing_material_selects_a_skin_type(small_size):
    config = Config(envmap_width=64, envmap_height=32, max_workers=2, rl_iterations=0)
    env = three_blob_environment(small_size, 12.0, 0.1)
    probe = make_sphere_probe(24)
    dark = config.skin_type_materials()['dark']
    layers = render_probe(probe, dark, env, VIEW, config)

    estimate = estimate_envmap(layers, probe, None, VIEW, config)
    covered = estimate.params.coverage
    assert covered.any()
    np.testing.assert_array_equal(estimate.params.alpha[covered], 80.0)
    np.testing.assert_allclose(estimate.params.specular_albedo[covered], 0.2)

    bare = estimate_envmap(layers.highlight, probe, None, VIEW, config)
    np.testing.assert_array_equal(bare.params.alpha[bare.params.coverage], 120.0)


def test_mean_albedo_needs_shading():
    probe = make_sphere_probe(8)
    layers = render_probe(probe, Material([0.3], [100.0]), EnvironmentMap(np.zeros((8, 16, 3))), VIEW,
                          Config(max_workers=1))
    with pytest.raises(DomainError):
        mean_albedo(layers)


def test_select_skin_type_picks_the_closest_albedo():
    name, material = select_skin_type([0.6, 0.45, 0.35])
    assert name == 'medium'
    assert material.roughness[0] == 100.0
    name, _ = select_skin_type([0.35, 0.25, 0.2])
    assert name == 'dark'
