"""
Unit tests for images, FAST/BRIEF features, matching and attention masks.
"""

import json

import numpy as np
import pytest

from errors import InvalidArgumentError, ParseError
from vision import (
    BRIEF_BITS,
    BinaryMask,
    ExternalDetector,
    FastBriefDetector,
    Image,
    Keypoint,
    apply_mask,
    compute_brief,
    detect_fast,
    hamming_matrix,
    make_detector,
    mask_indices,
    mask_reduction,
    match_bruteforce,
    read_external_features,
    read_mask,
    read_pgm,
    write_attention_heatmap,
    write_external_features,
    write_mask,
    write_pgm,
)


def _crop_pair(rng, shift=(5, 3)):
    """Two crops of one texture offset by (dx, dy)."""
    from scipy import ndimage

    dx, dy = shift
    noise = ndimage.uniform_filter(rng.uniform(0, 255, size=(110, 150)), size=3)
    big = np.clip((noise - noise.min()) / np.ptp(noise) * 255, 0, 255).astype(np.uint8)
    a = Image.from_array(big[0:96, 0:128])
    b = Image.from_array(big[dy : dy + 96, dx : dx + 128])
    return a, b


class TestImage:
    """Test Image container and PGM codec functionality."""

    @pytest.mark.unit
    def test_from_array(self):
        """Test that shape and dtype are normalized."""
        img = Image.from_array(np.full((20, 30), 7))
        assert (img.width, img.height) == (30, 20)
        assert img.shape == (20, 30)
        assert img.pixels.dtype == np.uint8

    @pytest.mark.unit
    def test_minimum_size(self):
        """Test that images smaller than 16x16 are rejected."""
        with pytest.raises(InvalidArgumentError):
            Image.from_array(np.zeros((15, 40)))

    @pytest.mark.unit
    def test_buffer_size_mismatch(self):
        """Test that a wrong pixel count is rejected."""
        with pytest.raises(InvalidArgumentError):
            Image(16, 16, np.zeros(100))

    @pytest.mark.unit
    def test_not_two_dimensional(self):
        """Test that from_array requires a 2-D array."""
        with pytest.raises(InvalidArgumentError):
            Image.from_array(np.zeros((16, 16, 3)))

    @pytest.mark.unit
    def test_pgm_round_trip(self, tmp_path, textured_image):
        """Test that save then load preserves pixels."""
        path = tmp_path / "frame.pgm"
        textured_image.save(path)
        assert np.array_equal(Image.load(path).pixels, textured_image.pixels)

    @pytest.mark.unit
    def test_pgm_header_comment(self, tmp_path):
        """Test that comments in the PGM header are skipped."""
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 2\n255\n" + bytes([1, 2, 3, 4]))
        assert np.array_equal(read_pgm(path), [[1, 2], [3, 4]])

    @pytest.mark.unit
    def test_pgm_bad_magic(self, tmp_path):
        """Test that ASCII PGM is reported as a parse error."""
        path = tmp_path / "p2.pgm"
        path.write_bytes(b"P2\n2 2\n255\n1 2 3 4\n")
        with pytest.raises(ParseError):
            read_pgm(path)

    @pytest.mark.unit
    def test_pgm_truncated(self, tmp_path):
        """Test that missing pixel data is a parse error."""
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
        with pytest.raises(ParseError):
            read_pgm(path)

    @pytest.mark.unit
    def test_pgm_sixteen_bit_rejected(self, tmp_path):
        """Test that maxval other than 255 is rejected."""
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n" + bytes(2))
        with pytest.raises(ParseError):
            read_pgm(path)

    @pytest.mark.unit
    def test_write_pgm_requires_2d(self, tmp_path):
        """Test that write_pgm rejects 1-D data."""
        with pytest.raises(InvalidArgumentError):
            write_pgm(tmp_path / "x.pgm", np.zeros(10))


class TestFast:
    """Test FAST corner detection functionality."""

    @pytest.mark.unit
    def test_square_center_is_strongest(self, square_image):
        """Test that an isolated bright square is detected at its center."""
        kps = detect_fast(square_image)
        assert kps
        assert (kps[0].x, kps[0].y) == (20.0, 24.0)

    @pytest.mark.unit
    def test_uniform_image_has_no_corners(self):
        """Test that a flat image yields no keypoints."""
        assert detect_fast(Image.from_array(np.full((32, 32), 128))) == []

    @pytest.mark.unit
    def test_sorted_by_score(self, textured_image):
        """Test that keypoints come strongest first and respect the cap."""
        kps = detect_fast(textured_image, threshold=20, max_keypoints=50)
        assert 0 < len(kps) <= 50
        scores = [kp.score for kp in kps]
        assert scores == sorted(scores, reverse=True)

    @pytest.mark.unit
    def test_keypoints_inside_image(self, textured_image):
        """Test that detections avoid the three-pixel ring margin."""
        for kp in detect_fast(textured_image, max_keypoints=5000):
            assert 3 <= kp.x < textured_image.width - 3
            assert 3 <= kp.y < textured_image.height - 3

    @pytest.mark.unit
    def test_threshold_range(self, square_image):
        """Test that thresholds outside [1, 254] are invalid."""
        with pytest.raises(InvalidArgumentError):
            detect_fast(square_image, threshold=0)
        with pytest.raises(InvalidArgumentError):
            detect_fast(square_image, threshold=255)

    @pytest.mark.unit
    def test_deterministic(self, textured_image):
        """Test that repeated detection gives identical output."""
        assert detect_fast(textured_image) == detect_fast(textured_image)

    @pytest.mark.unit
    def test_rendered_squares_are_found(self, wide_scene):
        """Test that most isolated rendered squares carry a corner within 2 px."""
        image = wide_scene.images[0]
        centers = np.rint(wide_scene.projections[0])
        kps = np.array([(kp.x, kp.y) for kp in detect_fast(image, threshold=20, max_keypoints=5000)])
        checked = found = 0
        for i, c in enumerate(centers):
            others = np.delete(centers, i, axis=0)
            if len(others) and np.min(np.max(np.abs(others - c), axis=1)) < 6:
                continue
            if not (6 <= c[0] < image.width - 6 and 6 <= c[1] < image.height - 6):
                continue
            checked += 1
            if len(kps) and np.min(np.linalg.norm(kps - wide_scene.projections[0][i], axis=1)) <= 2.0:
                found += 1
        assert checked >= 10
        assert found >= 0.8 * checked


class TestBrief:
    """Test BRIEF descriptor functionality."""

    @pytest.mark.unit
    def test_shape_and_border(self, textured_image):
        """Test descriptor layout and that near-border keypoints are dropped."""
        kps = [Keypoint(40.0, 40.0), Keypoint(3.0, 40.0), Keypoint(60.0, 50.0)]
        desc, kept = compute_brief(textured_image, kps)
        assert desc.shape == (2, BRIEF_BITS // 8)
        assert desc.dtype == np.uint8
        assert kept == [0, 2]

    @pytest.mark.unit
    def test_no_keypoints(self, textured_image):
        """Test that an empty keypoint list gives an empty descriptor array."""
        desc, kept = compute_brief(textured_image, [])
        assert desc.shape == (0, 32)
        assert kept == []

    @pytest.mark.unit
    def test_pattern_seed_changes_descriptor(self, textured_image):
        """Test that a different sampling pattern gives a different descriptor."""
        kps = [Keypoint(50.0, 45.0)]
        a, _ = compute_brief(textured_image, kps, pattern_seed=0)
        b, _ = compute_brief(textured_image, kps, pattern_seed=1)
        assert not np.array_equal(a, b)

    @pytest.mark.unit
    def test_shifted_crops_match(self, rng):
        """Test that features of two offset crops match with the offset as displacement."""
        a, b = _crop_pair(rng, shift=(5, 3))
        detector = FastBriefDetector(threshold=20, max_keypoints=2000)
        kps_a, kps_b = detector.detect(0, a), detector.detect(1, b)
        da, ka = detector.describe(0, a, kps_a, range(len(kps_a)))
        db, kb = detector.describe(1, b, kps_b, range(len(kps_b)))
        matches = match_bruteforce(da, db)
        assert len(matches) >= 10
        correct = 0
        for m in matches:
            pa, pb = kps_a[ka[m.index_a]], kps_b[kb[m.index_b]]
            if (pa.x - pb.x, pa.y - pb.y) == (5.0, 3.0):
                correct += 1
        assert correct >= 0.8 * len(matches)


class TestMatching:
    """Test Hamming matching functionality."""

    @pytest.mark.unit
    def test_hamming_matrix(self):
        """Test bit distances on hand-made descriptors."""
        a = np.array([[0b00000000, 0b11111111]], dtype=np.uint8)
        b = np.array([[0b00000001, 0b11111111], [0b11111111, 0b00000000]], dtype=np.uint8)
        assert hamming_matrix(a, b).tolist() == [[1, 16]]

    @pytest.mark.unit
    def test_hamming_length_mismatch(self):
        """Test that differing descriptor lengths are invalid."""
        with pytest.raises(InvalidArgumentError):
            hamming_matrix(np.zeros((1, 4), np.uint8), np.zeros((1, 8), np.uint8))

    @pytest.mark.unit
    def test_self_match(self, rng):
        """Test that a descriptor set matches itself one-to-one at distance zero."""
        d = rng.integers(0, 256, size=(40, 32), dtype=np.uint8)
        matches = match_bruteforce(d, d)
        assert len(matches) == 40
        assert all(m.index_a == m.index_b and m.distance == 0 for m in matches)

    @pytest.mark.unit
    def test_sorted_by_distance(self, rng):
        """Test ordering by (distance, index_a)."""
        a = rng.integers(0, 256, size=(30, 32), dtype=np.uint8)
        b = a.copy()
        b[::3, 0] ^= 0b1
        matches = match_bruteforce(a, b)
        keys = [(m.distance, m.index_a) for m in matches]
        assert keys == sorted(keys)

    @pytest.mark.unit
    def test_single_candidate(self):
        """Test the absolute distance rule when there is no second neighbour."""
        a = np.zeros((2, 32), dtype=np.uint8)
        a[1, :10] = 0xFF
        b = np.zeros((1, 32), dtype=np.uint8)
        b[0, :1] = 0x0F
        matches = match_bruteforce(a, b, cross_check=False)
        assert [(m.index_a, m.distance) for m in matches] == [(0, 4)]

    @pytest.mark.unit
    def test_ratio_disabled(self):
        """Test that ratio=None keeps ambiguous nearest neighbours."""
        a = np.zeros((1, 32), dtype=np.uint8)
        b = np.zeros((2, 32), dtype=np.uint8)
        assert match_bruteforce(a, b) == []
        assert len(match_bruteforce(a, b, ratio=None)) == 1

    @pytest.mark.unit
    def test_empty_inputs(self):
        """Test that empty descriptor sets give no matches."""
        assert match_bruteforce(np.zeros((0, 32), np.uint8), np.zeros((3, 32), np.uint8)) == []

    @pytest.mark.unit
    def test_bad_ratio(self):
        """Test that ratio outside (0, 1] is invalid."""
        d = np.zeros((2, 32), np.uint8)
        with pytest.raises(InvalidArgumentError):
            match_bruteforce(d, d, ratio=1.5)


class TestBinaryMask:
    """Test attention mask overlay functionality."""

    @pytest.mark.unit
    def test_full_mask_keeps_everything(self):
        """Test that an all-true mask is a no-op."""
        mask = BinaryMask.full(64, 48, 16)
        kps = [Keypoint(1.0, 1.0), Keypoint(63.0, 47.0)]
        assert mask.grid.shape == (3, 4)
        assert apply_mask(kps, mask, (64, 48)) == kps
        assert mask_reduction(mask) == 0.0

    @pytest.mark.unit
    def test_partial_mask(self):
        """Test that keypoints in excluded blocks are dropped, order preserved."""
        grid = np.array([[True, False], [False, True]])
        mask = BinaryMask(16, grid)
        kps = [Keypoint(20.0, 5.0), Keypoint(5.0, 5.0), Keypoint(20.0, 20.0), Keypoint(5.0, 20.0)]
        assert mask_indices(kps, mask, (32, 32)) == [1, 2]
        assert mask.kept_fraction == 0.5
        assert mask_reduction(mask) == 0.5

    @pytest.mark.unit
    def test_empty_mask_drops_all(self):
        """Test that an all-false mask removes every keypoint."""
        mask = BinaryMask.full(32, 32, 16, value=False)
        assert apply_mask([Keypoint(3.0, 3.0)], mask) == []

    @pytest.mark.unit
    def test_partial_edge_block(self):
        """Test that a ragged image edge still gets a block."""
        mask = BinaryMask.full(40, 20, 16)
        assert mask.grid.shape == (2, 3)
        assert mask.matches_image(40, 20)

    @pytest.mark.unit
    def test_size_mismatch(self):
        """Test that a mask built for another resolution is rejected."""
        with pytest.raises(InvalidArgumentError):
            mask_indices([Keypoint(1.0, 1.0)], BinaryMask.full(64, 64, 16), (128, 64))

    @pytest.mark.unit
    def test_keypoint_outside_grid(self):
        """Test that keypoints beyond the grid are invalid."""
        with pytest.raises(InvalidArgumentError):
            mask_indices([Keypoint(100.0, 1.0)], BinaryMask.full(32, 32, 16))

    @pytest.mark.unit
    def test_block_size_power_of_two(self):
        """Test that block sizes must be powers of two."""
        with pytest.raises(InvalidArgumentError):
            BinaryMask(12, np.ones((2, 2), bool))

    @pytest.mark.unit
    def test_write_read_round_trip(self, tmp_path):
        """Test mask persistence as PGM plus sidecar."""
        mask = BinaryMask(16, np.array([[True, False, True], [False, False, True]]))
        path = tmp_path / "mask_000000.pgm"
        write_mask(path, mask)
        again = read_mask(path)
        assert again.block_size == 16
        assert np.array_equal(again.grid, mask.grid)

    @pytest.mark.unit
    def test_missing_sidecar(self, tmp_path):
        """Test that a mask without its JSON sidecar is a parse error."""
        path = tmp_path / "m.pgm"
        write_pgm(path, np.zeros((2, 2)))
        with pytest.raises(ParseError):
            read_mask(path)

    @pytest.mark.unit
    def test_sidecar_without_block_size(self, tmp_path):
        """Test that a sidecar missing block_size is a parse error, not a KeyError."""
        path = tmp_path / "m.pgm"
        write_pgm(path, np.zeros((2, 2)))
        (tmp_path / "m.json").write_text(json.dumps({"shape": [2, 2]}))
        with pytest.raises(ParseError, match="block_size"):
            read_mask(path)

    @pytest.mark.unit
    def test_heatmap_scaling(self, tmp_path):
        """Test that heat maps span the full 8-bit range."""
        path = tmp_path / "heat.pgm"
        write_attention_heatmap(path, [0.1, 0.2, 0.3, 0.5], (2, 2))
        pixels = read_pgm(path)
        assert pixels.min() == 0 and pixels.max() == 255


class TestExternalFeatures:
    """Test external feature file and detector functionality."""

    @pytest.mark.unit
    def test_round_trip(self, tmp_path, rng):
        """Test that keypoints and descriptors survive a write and read."""
        kps = [Keypoint(1.25, 2.5, 0.5), Keypoint(10.0, 11.125, 1.0)]
        desc = rng.integers(0, 256, size=(2, 32), dtype=np.uint8)
        path = tmp_path / "frame_000000.txt"
        write_external_features(path, kps, desc)
        kps2, desc2 = read_external_features(path)
        assert kps2 == kps
        assert np.array_equal(desc2, desc)

    @pytest.mark.unit
    def test_count_mismatch(self, tmp_path):
        """Test that a wrong header count is reported on line 1."""
        path = tmp_path / "f.txt"
        path.write_text("3 8\n1 2 0 ff\n")
        with pytest.raises(ParseError) as exc:
            read_external_features(path)
        assert exc.value.line == 1

    @pytest.mark.unit
    def test_bad_hex_line_number(self, tmp_path):
        """Test that a malformed descriptor names its line."""
        path = tmp_path / "f.txt"
        path.write_text("2 8\n1 2 0 ff\n3 4 0 zz\n")
        with pytest.raises(ParseError) as exc:
            read_external_features(path)
        assert exc.value.line == 3

    @pytest.mark.unit
    def test_external_detector(self, tmp_path, rng):
        """Test that the external detector replays files and slices descriptors."""
        kps = [Keypoint(5.0, 5.0), Keypoint(6.0, 7.0), Keypoint(30.0, 2.0)]
        desc = rng.integers(0, 256, size=(3, 32), dtype=np.uint8)
        write_external_features(tmp_path / "frame_000004.txt", kps, desc)
        detector = make_detector(f"external:{tmp_path}")
        assert isinstance(detector, ExternalDetector)
        image = Image.from_array(np.zeros((32, 32)))
        assert detector.detect(4, image) == kps
        sliced, kept = detector.describe(4, image, [kps[0], kps[2]], [0, 2])
        assert np.array_equal(sliced, desc[[0, 2]])
        assert kept == [0, 1]

    @pytest.mark.unit
    def test_external_keypoint_outside_frame(self, tmp_path):
        """Test that out-of-frame external keypoints are rejected."""
        write_external_features(tmp_path / "frame_000000.txt", [Keypoint(40.0, 1.0)], np.zeros((1, 32), np.uint8))
        with pytest.raises(InvalidArgumentError):
            ExternalDetector(tmp_path).detect(0, Image.from_array(np.zeros((32, 32))))

    @pytest.mark.unit
    def test_make_detector(self, tmp_path):
        """Test detector selection by name."""
        fast = make_detector("fast", threshold=30)
        assert isinstance(fast, FastBriefDetector)
        assert fast.to_dict()["threshold"] == 30
        with pytest.raises(InvalidArgumentError):
            make_detector("orb")
        with pytest.raises(InvalidArgumentError):
            make_detector(f"external:{tmp_path / 'missing'}")
