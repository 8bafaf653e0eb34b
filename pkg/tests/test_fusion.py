import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segxal.core import HeatMap, ShapeMismatchError
from segxal.fusion import CandidatePrompt, EEMask, export_eem, extract_candidates, fuse


def heat(values, kind="entropy"):
    return HeatMap(np.asarray(values, dtype=np.float32), kind=kind)


def brute_force_components(binary: np.ndarray) -> list[set]:
    """Independent 4-connected component finder: plain BFS flood fill."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if binary[i, j] and not seen[i, j]:
                stack, comp = [(i, j)], set()
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp.add((a, b))
                    for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        na, nb = a + da, b + db
                        if 0 <= na < h and 0 <= nb < w and binary[na, nb] and not seen[na, nb]:
                            seen[na, nb] = True
                            stack.append((na, nb))
                comps.append(comp)
    return comps


class TestFuse:
    def test_alpha_one_reduces_to_prox(self, rng):
        prox = heat(rng.random((8, 8)), "prox_gradcam")
        ent = heat(rng.random((8, 8)))
        out = fuse(prox, ent, alpha=1.0, beta=0.0)
        assert np.array_equal(out.map.values, prox.values)

    def test_beta_one_reduces_to_entropy(self, rng):
        prox = heat(rng.random((8, 8)), "prox_gradcam")
        ent = heat(rng.random((8, 8)))
        out = fuse(prox, ent, alpha=0.0, beta=1.0)
        assert np.array_equal(out.map.values, ent.values)

    def test_spot_arithmetic(self):
        out = fuse(heat([[0.8]]), heat([[0.4]]), alpha=0.5, beta=0.5)
        assert out.map.values[0, 0] == pytest.approx(0.6, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            fuse(heat(np.zeros((4, 4))), heat(np.zeros((4, 5))), 0.5, 0.5)

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            fuse(heat([[0.5]]), heat([[0.5]]), 0.0, 0.0)

    @given(arrays(np.float32, (6, 6), elements=st.floats(0, 1, width=32)),
           st.floats(0.05, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_linear_in_prox_before_clamp(self, values, a):
        ent = heat(np.zeros((6, 6)))
        base = fuse(heat(values), ent, alpha=1.0, beta=0.0).map.values
        scaled = fuse(heat(values * np.float32(a)), ent, alpha=1.0, beta=0.0).map.values
        assert np.allclose(scaled, np.float32(a) * base, atol=1e-6)

    def test_default_weights_keep_clamp_inert(self, rng):
        prox, ent = heat(rng.random((8, 8))), heat(rng.random((8, 8)))
        out = fuse(prox, ent, 0.5, 0.5)
        assert np.allclose(out.map.values, 0.5 * prox.values + 0.5 * ent.values, atol=1e-7)


class TestExtractCandidates:
    def test_all_zero_gives_empty(self):
        eem = fuse(heat(np.zeros((10, 10))), heat(np.zeros((10, 10))), 0.5, 0.5)
        assert extract_candidates(eem, "s") == []

    def test_two_plateaus_found_and_ranked(self):
        values = np.zeros((20, 40), dtype=np.float32)
        values[2:12, 1:11] = 0.7  # 100 px plateau
        values[5:15, 25:35] = 0.9  # 100 px plateau
        eem = EEMask(heat(values, "eem"), 0.5, 0.5)
        prompts = extract_candidates(eem, "s", percentile=50.0, max_regions=5, min_region_px=16)
        assert len(prompts) == 2
        assert prompts[0].score == pytest.approx(0.9, abs=1e-6)
        assert prompts[1].score == pytest.approx(0.7, abs=1e-6)
        assert [p.rank for p in prompts] == [1, 2]
        # cross-check both regions against the brute-force component oracle
        # (the binarization convention is the documented lower-percentile)
        threshold = np.percentile(values[values > 0], 50.0, method="lower")
        oracle = brute_force_components(values >= threshold)
        oracle_sets = sorted((frozenset(c) for c in oracle), key=len)
        for p in prompts:
            mask = p.mask(values.shape)
            found = frozenset(zip(*np.nonzero(mask)))
            assert found in oracle_sets

    def test_small_plateau_filtered(self):
        values = np.zeros((16, 16), dtype=np.float32)
        values[0, 0:10] = 0.9  # 10 px < 16 px minimum
        eem = EEMask(heat(values, "eem"), 0.5, 0.5)
        assert extract_candidates(eem, "s", percentile=50.0, min_region_px=16) == []

    def test_anchor_inside_region_at_weighted_centroid(self):
        values = np.zeros((12, 12), dtype=np.float32)
        values[2:6, 2:6] = 0.5
        values[4, 4] = 1.0  # pulls the weighted centroid toward (4, 4)
        eem = EEMask(heat(values, "eem"), 0.5, 0.5)
        (p,) = extract_candidates(eem, "s", percentile=10.0, min_region_px=4)
        assert p.mask(values.shape)[p.anchor]
        assert abs(p.anchor[0] - 4) <= 1 and abs(p.anchor[1] - 4) <= 1

    def test_percentile_bounds_checked(self):
        eem = EEMask(heat(np.ones((8, 8)), "eem"), 0.5, 0.5)
        with pytest.raises(ValueError):
            extract_candidates(eem, "s", percentile=0.0)

    @given(arrays(np.float32, (12, 12), elements=st.floats(0, 1, width=32)))
    @settings(max_examples=40, deadline=None)
    def test_region_means_meet_threshold(self, values):
        eem = EEMask(heat(values, "eem"), 0.5, 0.5)
        prompts = extract_candidates(eem, "s", percentile=80.0, min_region_px=1)
        nonzero = values[values > 0]
        if nonzero.size == 0:
            assert prompts == []
            return
        threshold = np.percentile(nonzero, 80.0, method="lower")
        for p in prompts:
            assert p.score >= threshold - 1e-6

    def test_weight_rescaling_preserves_ranking(self, rng):
        prox = heat(rng.random((16, 16)), "prox_gradcam")
        ent = heat(rng.random((16, 16)))
        a = fuse(prox, ent, 0.25, 0.25)
        b = fuse(prox, ent, 0.5, 0.5)  # same ratio, doubled
        pa = extract_candidates(a, "s", percentile=70.0, min_region_px=1)
        pb = extract_candidates(b, "s", percentile=70.0, min_region_px=1)
        assert [p.rle for p in pa] == [p.rle for p in pb]


class TestExport:
    def test_sidecar_schema(self, tmp_path, rng):
        values = np.zeros((16, 16), dtype=np.float32)
        values[4:10, 4:10] = 0.8
        eem = EEMask(heat(values, "eem"), 0.5, 0.5)
        prompts = extract_candidates(eem, "s", percentile=50.0, min_region_px=4)
        export_eem(eem, prompts, tmp_path / "eem.png", tmp_path / "eem.json", 50.0)
        doc = json.loads((tmp_path / "eem.json").read_text())
        assert doc["alpha"] == 0.5 and doc["beta"] == 0.5 and doc["percentile"] == 50.0
        assert len(doc["regions"]) == len(prompts)
        restored = CandidatePrompt.from_dict(doc["regions"][0], "s")
        assert restored == prompts[0]
        assert (tmp_path / "eem.png").stat().st_size > 0
