import numpy as np
import pytest

from h2onet.indices import IGNORE, LAND, WATER, mndwi
from h2onet.raster import SPECTRAL_BANDS, read_raster
from h2onet.synth import (
    Manifest,
    SceneSpec,
    SpectralModel,
    generate_dataset,
    generate_scene,
    load_truth,
    read_manifest,
    split_counts,
    write_manifest,
)


def test_fixed_seed_is_bit_identical():
    a, b = generate_scene(SceneSpec(seed=3)), generate_scene(SceneSpec(seed=3))
    for name in SPECTRAL_BANDS:
        assert np.array_equal(a.raster.band(name), b.raster.band(name))
    assert np.array_equal(a.truth, b.truth)
    c = generate_scene(SceneSpec(seed=4))
    assert not np.array_equal(a.raster.band("G"), c.raster.band("G"))


def test_no_water_bodies_gives_all_land():
    s = generate_scene(SceneSpec(n_blobs=0, n_streams=0, seed=1))
    assert np.all(s.truth == LAND)


def test_covering_body_gives_all_water():
    s = generate_scene(SceneSpec(n_blobs=1, n_streams=0, blob_radius=(3.0, 3.0), seed=1))
    assert np.all(s.truth == WATER)


@pytest.mark.parametrize("seed", range(5))
def test_mndwi_separates_classes(seed):
    s = generate_scene(SceneSpec(seed=seed))
    v = mndwi(s.raster).values
    assert v[s.truth == WATER].mean() - v[s.truth == LAND].mean() > 0.5


@pytest.mark.parametrize("seed", range(5))
def test_swir_water_below_land(seed):
    s = generate_scene(SceneSpec(seed=seed, n_shadows=2))
    swir = s.raster.band("SWIR2")
    assert swir[s.truth == WATER].mean() < swir[s.truth == LAND].mean()


def test_default_thresholds_find_both_classes():
    from h2onet.distmap import sample_confident_points

    pts = sample_confident_points(mndwi(generate_scene(SceneSpec(seed=2)).raster))
    assert len(pts.water) and len(pts.nonwater)


def test_boundary_noise_stays_in_band():
    clean = generate_scene(SceneSpec(seed=5))
    noisy = generate_scene(SceneSpec(seed=5, spectral=SpectralModel(boundary_noise_width=2)))
    assert noisy.boundary_band.any()
    for name in SPECTRAL_BANDS:
        changed = clean.raster.band(name) != noisy.raster.band(name)
        assert not np.any(changed & ~noisy.boundary_band)


def test_shadows_are_dark_land():
    s = generate_scene(SceneSpec(seed=6, n_shadows=3))
    assert s.shadows.any()
    assert np.all(s.truth[s.shadows] == LAND)


def test_split_counts():
    assert split_counts(20) == (18, 1, 1)
    assert split_counts(24) == (22, 1, 1)
    assert split_counts(60, (0.8, 0.2, 0.0)) == (48, 12, 0)
    with pytest.raises(ValueError):
        split_counts(10, (0.5, 0.2, 0.2))


def test_dataset_manifest(tmp_path):
    m = generate_dataset(SceneSpec(width=16, height=16, seed=1), 20, tmp_path)
    assert (len(m.ids("train")), len(m.ids("val")), len(m.ids("test"))) == (18, 1, 1)
    assert read_manifest(tmp_path / "manifest.json") == m
    ids = [m.ids(s) for s in ("train", "val", "test")]
    assert len(set().union(*map(set, ids))) == 20
    e = m.entries("val")[0]
    truth = load_truth(tmp_path / e.truth)
    assert truth.shape == (16, 16) and set(np.unique(truth)) <= {WATER, LAND}
    assert tuple(read_raster(tmp_path / e.image).band_names) == SPECTRAL_BANDS
    assert set(m.band_stats()) == set(SPECTRAL_BANDS)


def test_manifest_round_trip(tmp_path):
    m = Manifest([], {"R": [0.1, 0.2]}, SceneSpec().to_dict())
    write_manifest(tmp_path / "m.json", m)
    assert read_manifest(tmp_path / "m.json") == m
    assert SceneSpec.from_dict(m.template) == SceneSpec()


def test_unknown_spec_keys_rejected():
    with pytest.raises(ValueError, match="unknown"):
        SceneSpec.from_dict({"clouds": 3})


def test_truth_has_no_ignore():
    assert not np.any(generate_scene(SceneSpec(seed=9)).truth == IGNORE)
