"""
Tests for the probe renderer
"""

import numpy as np
import pytest

from src.config import Config
from src.core import (EnvironmentMap, Image, MapSize, Material, direction_to_pixel, lobe_solid_angle,
                      make_sphere_probe, normalize, pixel_to_direction, reflect)
from src.errors import DomainError
from src.renderer import ProbeRenderer, clip_to_ldr, render_probe, saturation_mask

from conftest import three_blob_environment


def uniform_env(size: MapSize, value: float = 1.0) -> EnvironmentMap:
    return EnvironmentMap(np.full(size.shape + (3,), value))


def test_uniform_white_diffuse_shading_is_one(config):
    probe = make_sphere_probe(32)
    layers = render_probe(probe, Material([0.0], [10.0], [1.0, 1.0, 1.0]), uniform_env(MapSize(128, 64)),
                          config=config)
    inside = probe.silhouette
    np.testing.assert_allclose(layers.shading.pixels[inside], 1.0, atol=1e-2)
    np.testing.assert_allclose(layers.diffuse.pixels[inside], 1.0, atol=1e-2)
    assert np.all(layers.composite.pixels[~inside] == 0)


def test_zero_specular_albedo_renders_no_highlight(config, small_size):
    probe = make_sphere_probe(16)
    env = three_blob_environment(small_size, 12.0, 0.1)
    layers = render_probe(probe, Material([0.0], [50.0], [0.7, 0.5, 0.35]), env, config=config)
    assert np.all(layers.highlight.pixels == 0)
    np.testing.assert_array_equal(layers.composite.pixels, layers.diffuse.pixels)


def test_layers_compose(config, small_size):
    probe = make_sphere_probe(16)
    env = three_blob_environment(small_size, 12.0, 0.1)
    material = Material([0.3], [50.0], [0.7, 0.5, 0.35])
    layers = render_probe(probe, material, env, config=config)
    np.testing.assert_allclose(layers.composite.pixels, layers.diffuse.pixels + layers.highlight.pixels)
    inside = probe.silhouette
    np.testing.assert_allclose(layers.diffuse.pixels[inside],
                               layers.shading.pixels[inside] * material.diffuse_albedo)
    chroma = layers.shading_chromaticity
    assert np.all(np.isnan(chroma[~inside]))
    assert np.all(chroma[inside].sum(axis=1) <= 1.0 + 1e-12)


@pytest.mark.parametrize("quadrature", ["lobe", "pixel"])
def test_uniform_highlight_equals_lobe_integral(quadrature):
    config = Config(highlight_quadrature=quadrature, max_workers=2)
    probe = make_sphere_probe(16)
    layers = render_probe(probe, Material([0.3], [120.0], [0.0, 0.0, 0.0]), uniform_env(MapSize(128, 64)),
                          config=config)
    expected = 0.3 * lobe_solid_angle(120.0)
    np.testing.assert_allclose(layers.highlight.pixels[probe.silhouette], expected, rtol=2e-2)


def test_chunking_and_threads_do_not_change_the_result(small_size):
    probe = make_sphere_probe(20)
    env = three_blob_environment(small_size, 12.0, 0.1)
    material = Material([0.3], [60.0], [0.6, 0.5, 0.4])
    single = ProbeRenderer(Config(max_workers=1, render_chunk_size=1000)).render_probe(probe, material, env)
    chunked = ProbeRenderer(Config(max_workers=4, render_chunk_size=7)).render_probe(probe, material, env)
    np.testing.assert_allclose(chunked.composite.pixels, single.composite.pixels, rtol=1e-12, atol=1e-14)


def test_rotating_the_map_rotates_the_image(config):
    """Looking down +y, a quarter turn of longitude is a quarter turn of the image"""
    size = MapSize(64, 32)
    rng = np.random.default_rng(11)
    env = EnvironmentMap(rng.uniform(0.0, 1.0, size.shape + (3,)))
    rolled = EnvironmentMap(np.roll(env.pixels, size.width // 4, axis=1))
    view = (0.0, 1.0, 0.0)
    probe = make_sphere_probe(24, view)
    material = Material([0.3], [50.0], [0.6, 0.5, 0.4])

    original = render_probe(probe, material, env, view, config)
    rotated = render_probe(probe, material, rolled, view, config)
    expected = np.rot90(original.composite.pixels, k=-1)
    np.testing.assert_allclose(rotated.composite.pixels, expected, rtol=1e-7, atol=1e-10)


def test_point_light_highlight_peaks_at_mirror_pixel(config):
    size = MapSize(256, 128)
    light = (50, 230)
    pixels = np.zeros(size.shape + (3,))
    pixels[light] = 100.0
    probe = make_sphere_probe(128)
    layers = render_probe(probe, Material([1.0], [2000.0], [0.0, 0.0, 0.0]), EnvironmentMap(pixels),
                          config=config)

    response = layers.highlight.pixels[..., 1]
    peak = np.unravel_index(np.argmax(response), probe.shape)
    mirror = reflect(np.array([0.0, 0.0, 1.0]), probe.normals[peak])
    row, col = direction_to_pixel(mirror / np.linalg.norm(mirror), size)
    assert abs(row - light[0]) <= 1
    assert min(abs(col - light[1]), size.width - abs(col - light[1])) <= 1

    bisector = normalize(pixel_to_direction(light, size).as_array() + np.array([0.0, 0.0, 1.0]))
    inside = probe.silhouette
    off_peak = np.degrees(np.arccos(np.clip(probe.normals[inside] @ bisector, -1.0, 1.0))) > 5.0
    assert off_peak.any()
    assert response[inside][off_peak].max() < 0.01 * response.max()


def test_rendering_is_linear_in_the_environment(config, small_size):
    rng = np.random.default_rng(13)
    first = EnvironmentMap(rng.uniform(0.0, 2.0, small_size.shape + (3,)))
    second = three_blob_environment(small_size, 12.0, 0.1)
    both = EnvironmentMap(first.pixels + second.pixels)
    probe = make_sphere_probe(16)
    material = Material([0.3], [60.0], [0.6, 0.5, 0.4])

    layers = [render_probe(probe, material, env, config=config) for env in (first, second, both)]
    for name in ("diffuse", "highlight", "composite"):
        parts = getattr(layers[0], name).pixels + getattr(layers[1], name).pixels
        np.testing.assert_allclose(getattr(layers[2], name).pixels, parts, rtol=1e-5, atol=1e-12)


@pytest.mark.parametrize("alpha", [20.0, 120.0, 800.0])
def test_highlight_is_bounded_by_the_lobe_energy(config, small_size, alpha):
    rng = np.random.default_rng(14)
    env = EnvironmentMap(rng.uniform(0.0, 3.0, small_size.shape + (3,)))
    probe = make_sphere_probe(16)
    layers = render_probe(probe, Material([0.4], [alpha], [0.5, 0.5, 0.5]), env, config=config)
    bound = 0.4 * env.pixels.reshape(-1, 3).max(axis=0) * lobe_solid_angle(alpha)
    assert np.all(layers.highlight.pixels[probe.silhouette] <= 1.02 * bound)


def test_region_table_must_cover_probe(config, small_size):
    probe = make_sphere_probe(8, regions=np.ones((8, 8), dtype=np.int64))
    with pytest.raises(DomainError):
        render_probe(probe, Material([0.3], [50.0]), uniform_env(small_size), config=config)


def test_clip_to_ldr_marks_saturation():
    img = Image(np.array([[[0.5, 2.0, 1.0]]]))
    clipped = clip_to_ldr(img, 1.0)
    np.testing.assert_array_equal(clipped.pixels, [[[0.5, 1.0, 1.0]]])
    assert clipped.saturation_mask.tolist() == [[[False, True, False]]]
    halved = clip_to_ldr(img, 2.0)
    np.testing.assert_array_equal(halved.pixels, [[[0.25, 1.0, 0.5]]])
    assert saturation_mask(clipped).tolist() == [[[False, True, True]]]
    with pytest.raises(DomainError):
        clip_to_ldr(img, 0.0)
