"""Tests for synthetic text images, patches and on-disk datasets."""

import numpy as np
import pytest

from vl_reader.errors import DatasetIOError, IndivisibleGeometry, LabelTooWide, ManifestCorrupt
from vl_reader.glyphs import GLYPH_HEIGHT, GLYPH_WIDTH, scaled_glyph
from vl_reader.models import CORRUPTION_TAG_FOR_KIND, CorruptionKind, CorruptionTag
from vl_reader.synthdata import (
    IMAGE_DIR,
    MANIFEST_NAME,
    build_dataset,
    build_splits,
    corrupt,
    dataset_size,
    from_uint8,
    load_dataset,
    load_image,
    parse_corruption_mix,
    parse_splits,
    patchify,
    read_manifest,
    render,
    save_image,
    to_uint8,
    unpatchify,
)
from vl_reader.textcodec import Charset


def read_by_templates(img, charset):
    """Best-matching glyph at each recorded placement."""
    ink = img.pixels[:, :, 0] == np.float32(img.foreground)
    text = []
    for placement in img.placements:
        h, w = GLYPH_HEIGHT * placement.scale_y, GLYPH_WIDTH * placement.scale_x
        crop = ink[placement.y:placement.y + h, placement.x:placement.x + w]
        scores = {c: int(np.sum(crop == scaled_glyph(c, placement.scale_x, placement.scale_y))) for c in charset.chars}
        text.append(max(scores, key=scores.get))
    return "".join(text)


class TestRender:
    """Test cases for glyph rendering."""

    def test_shape_and_range(self, rng):
        """Test that a rendered image is HxWxC inside [-1, 1]."""
        img = render("hello", rng)
        assert img.shape == (32, 128, 1)
        assert img.pixels.min() >= -1.0 and img.pixels.max() <= 1.0
        assert img.label == "hello"
        assert img.corruption_tags == frozenset({CorruptionTag.CLEAN})
        assert len(img.placements) == 5

    def test_deterministic(self):
        """Test identical output for identical generator state."""
        a = render("abc", np.random.default_rng(7))
        b = render("abc", np.random.default_rng(7))
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_contrast(self, rng):
        """Test the minimum foreground/background contrast."""
        img = render("x", rng)
        assert abs(img.foreground - img.background) >= 0.5
        assert len(np.unique(img.pixels)) == 2

    def test_channels(self, rng):
        """Test that colour images repeat the grey canvas."""
        img = render("ab", rng, channels=3)
        assert img.shape == (32, 128, 3)
        np.testing.assert_array_equal(img.pixels[:, :, 0], img.pixels[:, :, 2])

    def test_label_too_wide(self, rng):
        """Test a label that cannot fit even at scale 1."""
        with pytest.raises(LabelTooWide):
            render("abcdefghijklmnopqrstuvwxyz", rng, width=64)

    def test_text_region_covers_glyphs(self, rng):
        """Test that the text bounding box encloses every placement."""
        img = render("abc", rng)
        y0, x0, y1, x1 = img.text_region()
        for placement in img.placements:
            assert y0 <= placement.y and x0 <= placement.x
            assert placement.x + GLYPH_WIDTH * placement.scale_x <= x1

    def test_template_matching_reads_label(self):
        """Test that matching glyph bitmaps at the recorded placements reads the label back."""
        charset = Charset(chars="abcdefghijklmnop")
        rng = np.random.default_rng(17)
        labels = ["abc"] + ["".join(rng.choice(list(charset.chars), size=int(rng.integers(1, 6)))) for _ in range(30)]
        for label in labels:
            img = render(label, rng)
            assert read_by_templates(img, charset) == label

    def test_scaled_glyph(self):
        """Test integer upscaling of a glyph bitmap."""
        bitmap = scaled_glyph("a", 2, 3)
        assert bitmap.shape == (GLYPH_HEIGHT * 3, GLYPH_WIDTH * 2)
        assert bitmap.dtype == bool


class TestCorrupt:
    """Test cases for image corruptions."""

    def test_zero_severity_only_tags(self, rng):
        """Test that severity 0 keeps pixels and swaps the clean tag."""
        img = render("abc", rng)
        out = corrupt(img, CorruptionKind.BLUR, 0.0, rng)
        np.testing.assert_array_equal(out.pixels, img.pixels)
        assert out.corruption_tags == frozenset({CorruptionTag.BLURRED})

    @pytest.mark.parametrize("kind,tag", [
        (CorruptionKind.OCCLUDE, CorruptionTag.OCCLUDED),
        (CorruptionKind.BLUR, CorruptionTag.BLURRED),
        (CorruptionKind.NOISE, CorruptionTag.NOISY),
    ])
    def test_corruption_stays_in_range(self, kind, tag):
        """Test every kind keeps pixels in range and records its tag."""
        rng = np.random.default_rng(3)
        img = render("abcd", rng)
        out = corrupt(img, kind, 1.0, rng)
        assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0
        assert tag in out.corruption_tags
        assert CorruptionTag.CLEAN not in out.corruption_tags

    def test_tags_accumulate(self, rng):
        """Test that a second corruption adds its tag."""
        img = corrupt(render("abc", rng), CorruptionKind.NOISE, 0.5, rng)
        img = corrupt(img, CorruptionKind.BLUR, 0.5, rng)
        assert img.corruption_tags == frozenset({CorruptionTag.NOISY, CorruptionTag.BLURRED})

    def test_occlusion_bound_and_contrast(self):
        """Test that full-severity occlusion covers at most 60% of the text region in a visible colour."""
        rng = np.random.default_rng(5)
        for _ in range(200):
            img = render("abcd", rng)
            out = corrupt(img, CorruptionKind.OCCLUDE, 1.0, rng)
            changed = (out.pixels != img.pixels).any(axis=2)
            y0, x0, y1, x1 = img.text_region()
            assert 0 < changed.sum() <= 0.6 * (y1 - y0) * (x1 - x0)
            fill = np.unique(out.pixels[changed])
            assert len(fill) == 1
            assert abs(float(fill[0]) - img.background) >= 0.5 - 1e-6

    def test_parameter_ranges(self):
        """Test random kinds and severities over many draws."""
        rng = np.random.default_rng(21)
        kinds = list(CorruptionKind)
        for _ in range(1000):
            img = render("abcd", rng, height=16, width=32)
            kind = kinds[int(rng.integers(len(kinds)))]
            severity = float(rng.uniform(0.0, 1.0))
            out = corrupt(img, kind, severity, rng)
            assert out.shape == img.shape and out.pixels.dtype == np.float32
            assert out.pixels.min() >= -1.0 and out.pixels.max() <= 1.0
            assert out.corruption_tags == frozenset({CORRUPTION_TAG_FOR_KIND[kind]})
            if kind == CorruptionKind.OCCLUDE:
                changed = (out.pixels != img.pixels).any(axis=2)
                y0, x0, y1, x1 = img.text_region()
                assert changed.sum() <= 0.6 * severity * (y1 - y0) * (x1 - x0) + 1e-9
                changed[y0:y1, x0:x1] = False
                assert not changed.any()


class TestPatches:
    """Test cases for patchify and unpatchify."""

    def test_row_major_layout(self):
        """Test that patch k covers grid row k // cols, column k % cols."""
        pixels = np.arange(8 * 16, dtype=np.float32).reshape(8, 16, 1)
        grid = patchify(pixels, 4, 8)
        assert grid.grid_shape == (2, 2)
        assert grid.patches.shape == (4, 32)
        np.testing.assert_array_equal(grid.patches[1].reshape(4, 8), pixels[0:4, 8:16, 0])
        np.testing.assert_array_equal(grid.patches[2].reshape(4, 8), pixels[4:8, 0:8, 0])

    def test_unpatchify_restores_image(self, rng):
        """Test the inverse mapping on a rendered image."""
        img = render("abc", rng, channels=3)
        np.testing.assert_array_equal(unpatchify(patchify(img, 4, 8)), img.pixels)

    def test_indivisible_geometry(self):
        """Test that the patch size must divide the image."""
        with pytest.raises(IndivisibleGeometry):
            patchify(np.zeros((10, 16, 1)), 4, 8)

    def test_uint8_mapping(self):
        """Test the 8-bit conversion endpoints."""
        values = np.array([-1.0, 0.0, 1.0])
        np.testing.assert_array_equal(to_uint8(values), [0, 128, 255])
        np.testing.assert_allclose(from_uint8(np.array([0, 255])), [-1.0, 1.0])


class TestCorruptionMix:
    """Test cases for corruption mix parsing."""

    def test_parse(self):
        """Test a valid mix."""
        mix = parse_corruption_mix("clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1")
        assert mix[CorruptionTag.CLEAN] == pytest.approx(0.7)
        assert len(mix) == 4

    @pytest.mark.parametrize("text", ["clean=0.5", "clean=0.5,foggy=0.5", "clean", "clean=1.5,noisy=-0.5", ""])
    def test_invalid(self, text):
        """Test fractions not summing to 1 and unknown tags."""
        with pytest.raises(ValueError):
            parse_corruption_mix(text)


class TestDataset:
    """Test cases for datasets on disk."""

    def test_manifest_written(self, tiny_dataset):
        """Test the manifest and image files."""
        entries = read_manifest(tiny_dataset)
        assert len(entries) == dataset_size(tiny_dataset) == 8
        assert entries[0].filename == f"{IMAGE_DIR}/000000.pgm"
        for entry in entries:
            assert (tiny_dataset / entry.filename).is_file()
            assert 1 <= len(entry.label) <= 4

    def test_deterministic_manifest(self, tmp_path, charset):
        """Test byte-identical manifests for identical seeds, also with parallel rendering."""
        mix = parse_corruption_mix("clean=0.5,noisy=0.5")
        build_dataset(tmp_path / "a", 10, charset, (1, 4), mix, seed=1, height=16, width=32)
        build_dataset(tmp_path / "b", 10, charset, (1, 4), mix, seed=1, height=16, width=32, workers=3)
        assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()
        assert (tmp_path / "a" / "img" / "000004.pgm").read_bytes() == (tmp_path / "b" / "img" / "000004.pgm").read_bytes()

    def test_corruption_mix_fraction(self, tmp_path, charset):
        """Test that an even clean/occluded mix tags about half the samples occluded."""
        mix = {CorruptionTag.CLEAN: 0.5, CorruptionTag.OCCLUDED: 0.5}
        entries = build_dataset(tmp_path, 1000, charset, (1, 3), mix, seed=11, height=16, width=32)
        occluded = sum(CorruptionTag.OCCLUDED in entry.tags for entry in entries) / len(entries)
        assert abs(occluded - 0.5) <= 0.05

    def test_load_dataset(self, tiny_dataset):
        """Test that samples load back with labels, tags and file names."""
        images = list(load_dataset(tiny_dataset))
        entries = read_manifest(tiny_dataset)
        assert [img.label for img in images] == [e.label for e in entries]
        assert images[0].name == entries[0].filename
        assert images[0].shape == (16, 32, 1)

    def test_pixels_survive_disk(self, tmp_path, rng):
        """Test that stored pixels match the 8-bit quantized image."""
        img = corrupt(render("abc", rng, height=16, width=32), CorruptionKind.NOISE, 1.0, rng)
        save_image(img.pixels, tmp_path / "x.pgm")
        loaded = load_image(tmp_path / "x.pgm")
        assert loaded.shape == (16, 32, 1)
        np.testing.assert_array_equal(to_uint8(loaded), to_uint8(img.pixels))

    def test_invalid_length_range(self, tmp_path, charset):
        """Test a length range beyond the charset limit."""
        with pytest.raises(ValueError):
            build_dataset(tmp_path / "bad", 2, charset, (1, 9), None)

    def test_corrupt_manifest(self, tmp_path):
        """Test a malformed manifest line."""
        (tmp_path / MANIFEST_NAME).write_text("img/000000.pgm\tabc\tclean\nbroken line\n", encoding="utf-8")
        with pytest.raises(ManifestCorrupt) as exc_info:
            read_manifest(tmp_path)
        assert exc_info.value.line_number == 2

    def test_unknown_tag_in_manifest(self, tmp_path):
        """Test that an unknown corruption tag is rejected."""
        (tmp_path / MANIFEST_NAME).write_text("img/000000.pgm\tabc\tfoggy\n", encoding="utf-8")
        with pytest.raises(ManifestCorrupt):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        """Test reading a directory without a manifest."""
        with pytest.raises(DatasetIOError):
            read_manifest(tmp_path / "nowhere")


class TestSplits:
    """Test cases for split datasets."""

    def test_parse_splits(self):
        """Test that rounding leftovers go to the first split."""
        assert parse_splits("train=0.8,val=0.1,test=0.1", 11) == {"train": 9, "val": 1, "test": 1}

    def test_parse_splits_invalid(self):
        """Test fractions that do not sum to 1."""
        with pytest.raises(ValueError):
            parse_splits("train=0.5,test=0.1", 10)

    def test_labels_disjoint(self, tmp_path):
        """Test that split labels do not overlap when the label space is large."""
        charset = Charset()
        paths = build_splits(tmp_path, {"train": 12, "test": 6}, charset, (4, 6), None, seed=2,
                             height=32, width=128)
        train = {e.label for e in read_manifest(paths["train"])}
        test = {e.label for e in read_manifest(paths["test"])}
        assert len(read_manifest(paths["test"])) == 6
        assert not train & test
