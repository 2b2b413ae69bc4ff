import numpy as np
import pytest

from spalab.viz import GAP, GREY, export_perturbation_image, read_ppm, split_panels


def sample(rng, k=5):
    x = rng.random((6, 7, 3))
    d = np.zeros_like(x)
    idx = rng.choice(42, size=k, replace=False)
    for i in idx:
        r, c = divmod(i, 7)
        d[r, c] = rng.random(3) - x[r, c]
    return x, d


def test_zero_perturbation_panels_identical(tmp_path, rng):
    x = rng.random((5, 5, 3))
    img = read_ppm(export_perturbation_image(x, np.zeros_like(x), tmp_path / "a.ppm"))
    a, b, loc = split_panels(img, 5)
    assert np.array_equal(a, b) and not loc.any()


def test_location_map_counts_l0(tmp_path, rng):
    x, d = sample(rng)
    img = read_ppm(export_perturbation_image(x, d, tmp_path / "a.ppm"))
    _, _, loc = split_panels(img, 7)
    assert np.count_nonzero(loc[..., 0]) == 5
    assert np.array_equal(loc[..., 0] > 0, np.any(d != 0, axis=-1))


def test_round_trip_within_quantization(tmp_path, rng):
    x, d = sample(rng)
    img = read_ppm(export_perturbation_image(x, d, tmp_path / "a.ppm"))
    a, b, _ = split_panels(img, 7)
    assert np.max(np.abs(a - x)) <= 1 / 255 and np.max(np.abs(b - (x + d))) <= 1 / 255


def test_layout_and_header(tmp_path, rng):
    x, d = sample(rng)
    path = export_perturbation_image(x, d, tmp_path / "a.ppm", scale=2)
    assert path.read_bytes().startswith(b"P6\n%d 12\n255\n" % (2 * (3 * 7 + 2 * GAP)))
    img = read_ppm(path)
    assert np.all(img[:, 2 * 7 : 2 * (7 + GAP)] == GREY)
    a, b, _ = split_panels(img, 7, scale=2)
    assert np.max(np.abs(a - x)) <= 1 / 255


def test_highlight_avoids_perturbed_pixels(tmp_path, rng):
    x, d = sample(rng, k=10)
    img = read_ppm(export_perturbation_image(x, d, tmp_path / "a.ppm", highlight=(0, 0, 5, 6)))
    _, b, _ = split_panels(img, 7)
    touched = np.any(d != 0, axis=-1)
    red = np.all(b == np.array([1.0, 0.0, 0.0]), axis=-1)
    assert red.any() and not (red & touched).any()
    assert np.max(np.abs(b[touched] - (x + d)[touched])) <= 1 / 255


def test_out_of_range_rejected(tmp_path):
    x = np.full((2, 2, 3), 0.9)
    with pytest.raises(ValueError):
        export_perturbation_image(x, np.full_like(x, 0.5), tmp_path / "a.ppm")


def test_grayscale_written_as_rgb(tmp_path, rng):
    x = rng.random((4, 4, 1))
    img = read_ppm(export_perturbation_image(x, np.zeros_like(x), tmp_path / "g.ppm"))
    assert img.shape == (4, 3 * 4 + 2 * GAP, 3)


def test_read_rejects_other_formats(tmp_path):
    (tmp_path / "p.pgm").write_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p.pgm")
