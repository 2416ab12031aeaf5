import json

import numpy as np
import pytest
from scipy import stats

from stainstyle.data import (
    DataError,
    Dataset,
    LabeledTile,
    RUIFROK_HE,
    StainStyleParams,
    load_manifest,
    make_synthetic_benchmark,
    render_tile,
    stain_angle,
    synth_concentrations,
    synth_tile,
    unit_columns,
    write_manifest,
    write_png,
)


def test_zero_concentration_renders_background(clean_style):
    out = render_tile(clean_style, np.zeros((2, 32, 32)))
    assert np.all(out == clean_style.background_intensity)


def test_synth_tile_deterministic(styles):
    a = synth_tile(styles[0], 1, 64, 3)
    b = synth_tile(styles[0], 1, 64, 3)
    assert np.array_equal(a.tile, b.tile)
    assert not np.array_equal(a.tile, synth_tile(styles[0], 1, 64, 4).tile)


@pytest.mark.parametrize("label", [0, 1])
def test_beer_lambert_inversion(clean_style, label):
    conc = synth_concentrations(label, 64, 11) * clean_style.concentration_scale[:, None, None]
    assert conc.max() > 0.5
    tile = synth_tile(clean_style, label, 64, 11).tile
    od = -np.log(tile / clean_style.background_intensity)
    expected = np.einsum("kc,cij->ijk", clean_style.stain_matrix, conc)
    assert np.max(np.abs(od - expected)) <= 1e-6


@pytest.mark.parametrize("d", [16, 32, 64])
def test_synth_tile_range_and_shape(styles, d):
    t = synth_tile(styles[1], 0, d, 1).tile
    assert t.shape == (d, d, 3)
    assert np.all(np.isfinite(t)) and t.min() >= 0 and t.max() <= 1


def test_synth_tile_rejects_bad_size(styles):
    with pytest.raises(DataError):
        synth_tile(styles[0], 0, 48, 0)
    with pytest.raises(DataError):
        synth_tile(styles[0], 0, 8, 0)


def test_tumor_tiles_have_more_hematoxylin():
    normal = np.mean([synth_concentrations(0, 64, s)[0].mean() for s in range(50)])
    tumor = np.mean([synth_concentrations(1, 64, s)[0].mean() for s in range(50)])
    assert tumor > 2 * normal


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(stain_matrix=np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]) * 2),  # not unit norm
        dict(stain_matrix=unit_columns([[0.6, 0.61], [0.7, 0.7], [0.3, 0.3]])),  # nearly parallel
        dict(stain_matrix=unit_columns([[0.6, -0.1], [0.7, 0.9], [0.3, 0.1]])),  # negative
        dict(stain_matrix=RUIFROK_HE, background_intensity=0.7),
        dict(stain_matrix=RUIFROK_HE, concentration_scale=np.array([1.0, 0.0])),
        dict(stain_matrix=RUIFROK_HE, noise_sigma=-0.1),
    ],
)
def test_invalid_style_params(kwargs):
    with pytest.raises(DataError):
        StainStyleParams(**kwargs)


def test_style_json_round_trip(styles, tmp_path):
    path = tmp_path / "style.json"
    styles[1].save(path)
    obj = json.loads(path.read_text())
    assert set(obj) == {"stain_matrix", "concentration_scale", "background_intensity", "noise_sigma"}
    loaded = StainStyleParams.load(path)
    assert np.array_equal(loaded.stain_matrix, styles[1].stain_matrix)
    assert loaded.noise_sigma == styles[1].noise_sigma


def test_benchmark_sizes_and_tags(styles):
    train, val, test = make_synthetic_benchmark(*styles, 4, 2, 2, d=32, seed=0)
    assert (len(train), len(val), len(test)) == (4, 2, 2)
    assert {t.institute for t in train} == {"A"}
    assert {t.institute for t in val} == {"A"}
    assert {t.institute for t in test} == {"B"}
    for ds in (train, val, test):
        assert ds.class_counts[0] == ds.class_counts[1]


def test_benchmark_rejects_odd_counts(styles):
    with pytest.raises(DataError):
        make_synthetic_benchmark(*styles, 3, 2, 2)


def test_same_style_gives_same_distribution(styles):
    train, _, test = make_synthetic_benchmark(styles[0], styles[0], 300, 2, 300, d=32, seed=1)
    a = train.images.mean(axis=(1, 2))
    b = test.images.mean(axis=(1, 2))
    for k in range(3):
        assert stats.ttest_ind(a[:, k], b[:, k], equal_var=False).pvalue > 1e-3


def test_distinct_styles_shift_channel_means(styles):
    sa, sb = styles
    assert min(stain_angle(sa.stain_matrix[:, k], sb.stain_matrix[:, k]) for k in range(2)) >= 15
    train, _, test = make_synthetic_benchmark(sa, sb, 500, 2, 500, d=64, seed=2)
    diff = np.abs(train.images.mean(axis=(0, 1, 2)) - test.images.mean(axis=(0, 1, 2)))
    assert diff.max() >= 0.02


def test_dataset_invariants(styles):
    t16 = synth_tile(styles[0], 0, 16, 0)
    t32 = synth_tile(styles[0], 0, 32, 0)
    with pytest.raises(DataError):
        Dataset((t16, t32))
    with pytest.raises(DataError):
        Dataset(())
    with pytest.raises(DataError):
        LabeledTile(t16.tile, 2, "A")
    ds = Dataset((t16,))
    assert not ds.images.flags.writeable


# --------------------------------------------------------------------------- #
# manifests
# --------------------------------------------------------------------------- #

def _write_rows(tmp_path, rows, header="path,label,institute"):
    path = tmp_path / "m.csv"
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def test_manifest_round_trip(styles, tmp_path):
    ds = Dataset(tuple(synth_tile(styles[0], i % 2, 32, i, "A") for i in range(2)), "val")
    manifest = write_manifest(ds, tmp_path)
    loaded = load_manifest(manifest, "val")
    assert len(loaded) == 2
    assert list(loaded.labels) == [0, 1]
    # 8-bit quantization at the file boundary only
    assert np.max(np.abs(loaded.images - ds.images)) <= 0.5 / 255 + 1e-12


def test_manifest_empty(tmp_path):
    with pytest.raises(DataError, match="empty manifest"):
        load_manifest(_write_rows(tmp_path, []))


def test_manifest_bad_label_names_row(styles, tmp_path):
    write_png(synth_tile(styles[0], 0, 16, 0).tile, tmp_path / "a.png")
    path = _write_rows(tmp_path, ["a.png,0,A", "a.png,2,A"])
    with pytest.raises(DataError, match="row 1"):
        load_manifest(path)


def test_manifest_missing_file(tmp_path):
    with pytest.raises(DataError, match="row 0"):
        load_manifest(_write_rows(tmp_path, ["nope.png,1,A"]))


def test_manifest_undecodable(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="row 0"):
        load_manifest(_write_rows(tmp_path, ["bad.png,1,A"]))


def test_manifest_inconsistent_sizes(styles, tmp_path):
    write_png(synth_tile(styles[0], 0, 16, 0).tile, tmp_path / "a.png")
    write_png(synth_tile(styles[0], 0, 32, 0).tile, tmp_path / "b.png")
    with pytest.raises(DataError, match="row 1"):
        load_manifest(_write_rows(tmp_path, ["a.png,0,A", "b.png,1,A"]))
