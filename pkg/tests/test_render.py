import numpy as np
import pytest

from aberray.psf import PsfGrid
from aberray.render import (
    FocalStack,
    PsfField,
    RgbdImage,
    local_convolve,
    local_convolve_patched,
    pixel_psf_field,
    save_stack,
    load_stack_manifest,
    simulate_stack,
    stack_focus_distances,
)


def flat_image(lens, h=6, w=8, depth=1.5, seed=0):
    rng = np.random.default_rng(seed)
    return RgbdImage(rgb=rng.random((h, w, 3)), depth_m=np.full((h, w), depth),
                     lens=lens, name="flat")


def random_field(h, w, k=5, seed=0):
    rng = np.random.default_rng(seed)
    kernels = rng.random((h, w, k, k))
    kernels /= kernels.sum(axis=(2, 3), keepdims=True)
    return PsfField(kernels, 0.05, "gaussian")


def delta_field(h, w, k=5):
    kernels = np.zeros((h, w, k, k))
    kernels[:, :, k // 2, k // 2] = 1.0
    return PsfField(kernels, 0.05, "gaussian")


class TestRgbdImage:
    def test_depth_clamped_with_count(self, fifty):
        depth = np.array([[0.05, 1.0], [25.0, 2.0]])
        img = RgbdImage(np.zeros((2, 2, 3)), depth, fifty)
        assert img.clamped_count == 2
        assert img.depth_m.min() == 0.2 and img.depth_m.max() == 20.0

    def test_dimension_mismatch_rejected(self, fifty):
        with pytest.raises(ValueError):
            RgbdImage(np.zeros((4, 4, 3)), np.ones((3, 4)), fifty)

    def test_nonfinite_rgb_rejected(self, fifty):
        rgb = np.zeros((2, 2, 3))
        rgb[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            RgbdImage(rgb, np.ones((2, 2)), fifty)

    def test_pixel_coords_inverted(self, fifty):
        img = flat_image(fifty, h=4, w=4)
        xs, ys = img.pixel_object_coords()
        # top-left pixel shows the object in the (+x, -y) quadrant
        assert xs[0, 0] > 0 and ys[0, 0] < 0
        assert xs[0, -1] < 0 and ys[-1, 0] > 0


class TestPixelPsfField:
    def test_gaussian_shares_kernels_per_depth(self, fifty):
        # depths with distinct |z - f_d|/z and blur well above one pixel
        # (pitch here is 1 mm: 24 mm sensor height over 24 rows)
        img = RgbdImage(
            np.zeros((24, 32, 3)),
            np.where(np.arange(24 * 32).reshape(24, 32) % 2 == 0, 0.3, 0.5),
            fifty,
        )
        field = pixel_psf_field(img, f_d_m=20.0, provider="gaussian")
        assert np.array_equal(field.kernels[0, 0], field.kernels[0, 2])
        assert np.array_equal(field.kernels[0, 1], field.kernels[2, 3])
        assert not np.array_equal(field.kernels[0, 0], field.kernels[0, 1])

    def test_single_pixel_image(self, fifty):
        img = flat_image(fifty, h=1, w=1, depth=2.0)
        field = pixel_psf_field(img, 2.0, "gaussian")
        assert field.kernels.shape == (1, 1, 11, 11)

    def test_raytraced_center_sharper_than_corner(self, fifty):
        img = flat_image(fifty, h=9, w=13, depth=1.5)
        field = pixel_psf_field(img, 1.5, "raytraced", spp=1024, seed=4)
        center = PsfGrid(field.kernels[4, 6].astype(float), field.pixel_pitch_mm)
        corner = PsfGrid(field.kernels[0, 0].astype(float), field.pixel_pitch_mm)
        assert center.second_moment_mm() < corner.second_moment_mm()

    def test_all_kernels_normalized(self, fifty):
        img = flat_image(fifty, h=3, w=4, depth=0.8)
        for provider in ("gaussian", "raytraced"):
            field = pixel_psf_field(img, 1.2, provider, spp=256, seed=1)
            sums = field.kernels.sum(axis=(2, 3))
            assert sums == pytest.approx(np.ones((3, 4)), abs=1e-5)


class TestLocalConvolve:
    def test_delta_kernels_identity(self, rng):
        img = rng.random((12, 17, 3))
        out = local_convolve(img, delta_field(12, 17))
        assert np.array_equal(out, img)

    def test_uniform_kernels_equal_box_filter(self, rng):
        k = 5
        img = rng.random((20, 24))
        kernels = np.full((20, 24, k, k), 1.0 / (k * k))
        ours = local_convolve(img, PsfField(kernels, 0.05, "gaussian"))
        # naive replicate-padded sliding-window mean as the oracle
        pad = k // 2
        padded = np.pad(img, pad, mode="edge")
        box = np.empty_like(img)
        for i in range(img.shape[0]):
            for j in range(img.shape[1]):
                box[i, j] = padded[i : i + k, j : j + k].mean()
        assert np.max(np.abs(ours - box)) < 1e-12

    def test_impulse_reveals_gather_stencil(self):
        k, h, w = 5, 9, 9
        rng = np.random.default_rng(3)
        kernels = rng.random((h, w, k, k))
        field = PsfField(kernels, 0.05, "gaussian")
        img = np.zeros((h, w))
        img[4, 4] = 1.0
        out = local_convolve(img, field)
        # output pixel p gathers the impulse through its own kernel entry
        # at the impulse's offset within p's window
        for di in range(-2, 3):
            for dj in range(-2, 3):
                i, j = 4 + di, 4 + dj
                expected = kernels[i, j, 2 - di, 2 - dj]
                assert out[i, j] == pytest.approx(float(expected), rel=1e-12)
        assert out[0, 0] == 0.0

    def test_output_within_input_range(self, rng):
        img = rng.random((10, 10, 3))
        out = local_convolve(img, random_field(10, 10, seed=5))
        assert out.min() >= img.min() - 1e-12
        assert out.max() <= img.max() + 1e-12

    def test_mean_brightness_preserved(self, rng):
        img = rng.random((32, 32, 3))
        out = local_convolve(img, random_field(32, 32, seed=6))
        assert abs(out.mean() - img.mean()) / img.mean() < 0.005

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            local_convolve(rng.random((4, 4, 3)), random_field(5, 4))


class TestPatchedConvolve:
    def test_small_image_is_identical(self, rng):
        img = rng.random((16, 20, 3))
        field = random_field(16, 20, seed=7)
        a = local_convolve(img, field)
        b = local_convolve_patched(img, field, patch=(320, 480))
        assert np.array_equal(a, b)

    def test_matches_off_seam(self, rng):
        img = rng.random((40, 50, 3))
        field = random_field(40, 50, k=5, seed=8)
        full = local_convolve(img, field)
        patched = local_convolve_patched(img, field, patch=(16, 25))
        pad = 2  # k // 2
        seam_rows = [16, 32]
        seam_cols = [25]
        mask = np.ones((40, 50), dtype=bool)
        for r in seam_rows:
            mask[r - pad : r + pad, :] = False
        for c in seam_cols:
            mask[:, c - pad : c + pad] = False
        assert np.max(np.abs(full[mask] - patched[mask])) < 1e-9

    def test_default_patch_size(self):
        from aberray.render import DEFAULT_PATCH

        assert DEFAULT_PATCH == (320, 480)


class TestSimulateStack:
    def test_single_frame_at_mid_depth(self, fifty):
        depth = np.linspace(1.0, 3.0, 12).reshape(3, 4)
        img = RgbdImage(np.full((3, 4, 3), 0.5), depth, fifty)
        stack = simulate_stack(img, size=1, perturb_frac=0.0, provider="gaussian")
        assert stack.size == 1
        assert stack.focus_distances_m[0] == pytest.approx(2.0)

    def test_ascending_distances_and_default_size(self, fifty):
        img = RgbdImage(np.full((4, 4, 3), 0.5),
                        np.linspace(0.5, 4.0, 16).reshape(4, 4), fifty)
        stack = simulate_stack(img, seed=3, provider="gaussian")
        assert stack.size == 10
        assert np.all(np.diff(stack.focus_distances_m) > 0)

    def test_jitter_stays_within_spacing(self, fifty):
        depth = np.linspace(1.0, 3.0, 16).reshape(4, 4)
        base = stack_focus_distances(depth, 10, 0.0, seed=0)
        jittered = stack_focus_distances(depth, 10, 0.25, seed=0)
        spacing = base[1] - base[0]
        assert np.max(np.abs(np.sort(jittered) - base)) <= 0.25 * spacing + 1e-12

    def test_constant_depth_collapses_with_warning(self, fifty, caplog):
        img = RgbdImage(np.full((3, 3, 3), 0.5), np.full((3, 3), 1.5), fifty)
        with caplog.at_level("WARNING", logger="aberray.render"):
            d = stack_focus_distances(img.depth_m, 4, 0.25, seed=0)
        assert "constant-depth" in caplog.text
        assert d[0] == pytest.approx(1.5)

    def test_deterministic(self, fifty):
        img = RgbdImage(np.random.default_rng(0).random((4, 5, 3)),
                        np.linspace(1.0, 2.5, 20).reshape(4, 5), fifty)
        a = simulate_stack(img, size=3, seed=9, provider="gaussian")
        b = simulate_stack(img, size=3, seed=9, provider="gaussian")
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.focus_distances_m, b.focus_distances_m)


class TestStackIo:
    def test_manifest_roundtrip(self, fifty, tmp_path, rng):
        img = RgbdImage(rng.random((6, 8, 3)) * 0.8,
                        np.linspace(1.0, 2.0, 48).reshape(6, 8), fifty)
        stack = simulate_stack(img, size=3, seed=1, provider="gaussian")
        manifest = save_stack(tmp_path / "out", stack)
        loaded = load_stack_manifest(manifest)
        assert loaded.size == 3
        assert loaded.focus_distances_m == pytest.approx(stack.focus_distances_m)
        assert loaded.psf_source == "gaussian"
        # 8-bit sRGB quantization bounds the roundtrip error
        assert np.max(np.abs(loaded.frames - stack.frames)) < 0.01
