import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fbsnet import ModelConfig
from fbsnet.fileio import (NetpbmError, Palette, format_config, load_config, load_image_ppm, parse_config,
                           parse_size, read_label_file, read_pgm, read_ppm, save_image_ppm, save_label_ppm,
                           write_pgm, write_ppm)


def test_white_image_loads_as_ones(tmp_path):
    p = tmp_path / "w.ppm"
    write_ppm(p, np.full((2, 2, 3), 255, np.uint8))
    t = load_image_ppm(p)
    assert t.shape == (1, 3, 2, 2) and np.all(t.data == 1.0)
    assert np.all(load_image_ppm(p, normalize=True).data == 1.0)


def test_ascii_ppm_rejected(tmp_path):
    p = tmp_path / "a.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(NetpbmError, match="unsupported format"):
        read_ppm(p)


@pytest.mark.parametrize("blob,match", [
    (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
    (b"P6\n2 2\n65535\n" + bytes(24), "maxval"),
    (b"P6\nx 2\n255\n", "malformed"),
])
def test_broken_files(tmp_path, blob, match):
    p = tmp_path / "b.ppm"
    p.write_bytes(blob)
    with pytest.raises(NetpbmError, match=match):
        read_ppm(p)


def test_header_comments(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03")
    assert read_ppm(p).tolist() == [[[1, 2, 3]]]


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_round_trip(tmp_path_factory, rgb):
    p = tmp_path_factory.mktemp("ppm") / "r.ppm"
    write_ppm(p, rgb)
    assert np.array_equal(read_ppm(p), rgb)
    img = load_image_ppm(p)
    save_image_ppm(p, img)
    assert np.array_equal(read_ppm(p), rgb)


def test_pgm_round_trip(tmp_path, rng):
    grey = rng.integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "g.pgm", grey)
    assert np.array_equal(read_pgm(tmp_path / "g.pgm"), grey)


def test_default_palettes():
    assert len(Palette.default(19)) == 19 and Palette.default(19).names[0] == "road"
    assert len(Palette.default(11)) == 11 and Palette.default(11).names[0] == "sky"
    assert len(Palette.default(4)) == 4
    big = Palette.default(40)
    assert len(set(big.colors)) == 40


def test_palette_rejects_black_and_duplicates():
    with pytest.raises(ValueError):
        Palette([(0, 0, 0)])
    with pytest.raises(ValueError):
        Palette([(1, 2, 3), (1, 2, 3)])


def test_single_class_map_is_uniform(tmp_path):
    pal = Palette.default(4)
    save_label_ppm(tmp_path / "l.ppm", np.full((3, 5), 2), pal)
    rgb = read_ppm(tmp_path / "l.ppm")
    assert np.all(rgb == pal.colors[2])


def test_ignore_only_map_is_black(tmp_path):
    save_label_ppm(tmp_path / "l.ppm", np.full((3, 5), 255), Palette.default(4))
    assert not read_ppm(tmp_path / "l.ppm").any()


@given(st.integers(2, 30).flatmap(lambda k: st.tuples(st.just(k), hnp.arrays(
    np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
    elements=st.one_of(st.integers(0, k - 1), st.just(255))))))
def test_palette_inverse_recovers_ids(case):
    k, labels = case
    pal = Palette.default(k)
    assert np.array_equal(pal.invert(pal.render(labels)), labels)


def test_palette_errors():
    pal = Palette.default(4)
    with pytest.raises(ValueError, match="no palette colour"):
        pal.render(np.array([[7]]))
    with pytest.raises(ValueError, match="not in the palette"):
        pal.invert(np.array([[[1, 2, 3]]], np.uint8))


def test_read_label_file_both_formats(tmp_path):
    ids = np.array([[0, 1], [2, 255]])
    pal = Palette.default(3)
    write_pgm(tmp_path / "a.pgm", ids)
    save_label_ppm(tmp_path / "b.ppm", ids, pal)
    assert np.array_equal(read_label_file(tmp_path / "a.pgm"), ids)
    assert np.array_equal(read_label_file(tmp_path / "b.ppm", pal), ids)
    with pytest.raises(ValueError, match="palette"):
        read_label_file(tmp_path / "b.ppm")


def test_config_round_trip(tmp_path):
    cfg = ModelConfig(num_classes=11, input_size=(360, 480), seed=9, spatial_branch=False)
    (tmp_path / "c.cfg").write_text(format_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg
    assert parse_config("# only defaults\n") == ModelConfig()


def test_config_errors():
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("colour = red")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("seed = 1\nnum_classes = many")
    with pytest.raises(ValueError):
        parse_config("input_size = 100x100")
    with pytest.raises(ValueError):
        parse_size("12")
