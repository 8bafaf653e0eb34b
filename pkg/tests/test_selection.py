import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segxal.core import IGNORE, Image, LabelMask, Sample, SamplePool, ShapeMismatchError
from segxal.oracle import AnnotationRecord
from segxal.selection import SampleNotCandidateError, SelectionDecision, dice, select

from conftest import flat_image, mask_of


def oracle_macro_dice(a: np.ndarray, b: np.ndarray) -> float:
    """Independent per-class arithmetic: 2|A∩B| / (|A|+|B|), class mean."""
    keep = (a != IGNORE) & (b != IGNORE)
    av, bv = a[keep], b[keep]
    classes = sorted(set(av.tolist()) | set(bv.tolist()))
    vals = []
    for c in classes:
        na, nb = int((av == c).sum()), int((bv == c).sum())
        inter = int(((av == c) & (bv == c)).sum())
        vals.append(2.0 * inter / (na + nb))
    return sum(vals) / len(vals)


class TestDice:
    def test_identity_is_one(self, rng):
        m = mask_of(rng.integers(0, 5, (10, 10)))
        assert dice(m, m) == 1.0

    def test_disjoint_support_is_zero(self):
        a = mask_of(np.zeros((4, 4), dtype=int), num_classes=2)
        b = mask_of(np.ones((4, 4), dtype=int), num_classes=2)
        assert dice(a, b) == 0.0

    def test_hand_case_half(self):
        # per class: 4 px in A, 4 px in B, overlap 2 -> 2*2/(4+4) = 0.5
        a = np.array([[1, 1, 1, 1, 2, 2, 2, 2]])
        b = np.array([[2, 2, 1, 1, 1, 1, 2, 2]])
        am, bm = mask_of(a, 3), mask_of(b, 3)
        assert dice(am, bm) == pytest.approx(0.5)

    @given(arrays(np.int64, (6, 6), elements=st.integers(0, 3)),
           arrays(np.int64, (6, 6), elements=st.integers(0, 3)))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_oracle_agreement(self, a, b):
        am, bm = mask_of(a, 4), mask_of(b, 4)
        assert dice(am, bm) == dice(bm, am)
        assert dice(am, bm) == pytest.approx(oracle_macro_dice(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            dice(mask_of(np.zeros((4, 4), dtype=int)), mask_of(np.zeros((4, 5), dtype=int)))

    def test_ignore_pixels_excluded(self):
        a = np.zeros((2, 4), dtype=int)
        b = np.zeros((2, 4), dtype=int)
        b[0, 0] = 1
        a[0, 0] = IGNORE  # the only disagreement is ignored
        assert dice(mask_of(a), mask_of(b)) == 1.0


def make_batch(strengths, pool, num_classes=2, band=100, total=400):
    """Candidates whose macro dice rises monotonically with ``strengths``.

    Each pair is a class-1 band of ``band`` px on a class-0 background; the
    corrected band is shifted so the class-1 overlap is round(s * band).
    """
    batch = []
    for idx, s in enumerate(strengths):
        sid = f"s{idx}"
        overlap = int(round(float(s) * band))
        pred = np.zeros((1, total), dtype=int)
        corr = np.zeros((1, total), dtype=int)
        pred[0, :band] = 1
        corr[0, band - overlap: 2 * band - overlap] = 1
        image = Image(np.zeros((16, 16, 3), dtype=np.float32), id=sid)
        sample = Sample(image=image, pool_tag="candidate")
        record = AnnotationRecord(sample_id=sid, corrected=mask_of(corr, num_classes))
        batch.append((sample, mask_of(pred, num_classes), record))
        pool.candidate.add(sid)
    return batch


class TestSelect:
    def test_theta_zero_accepts_all(self):
        pool = SamplePool()
        batch = make_batch([0.3, 0.6, 0.9], pool)
        decisions, updated = select(batch, theta=1e-9, pool=pool)
        assert all(d.accepted for d in decisions)
        assert pool.labeled == {"s0", "s1", "s2"} and not pool.candidate
        assert all(updated[sid].gt is not None for sid in pool.labeled)

    def test_theta_one_rejects_single_mispredicted_pixel(self):
        pool = SamplePool()
        pool.candidate.add("x")
        pred = np.zeros((4, 4), dtype=int)
        corr = pred.copy()
        corr[0, 0] = 1
        sample = Sample(image=flat_image(16, 16, image_id="x"), pool_tag="candidate")
        record = AnnotationRecord(sample_id="x", corrected=mask_of(corr, 2))
        decisions, _ = select([(sample, mask_of(pred, 2), record)], theta=1.0, pool=pool)
        assert decisions[0].accepted is False
        assert pool.unlabeled == {"x"}

    def test_mixed_batch_with_derived_dices(self):
        pool = SamplePool()
        batch = make_batch([0.9, 0.5], pool)
        # expectations derived from the independent arithmetic oracle
        oracle_dices = [oracle_macro_dice(pred.labels, record.corrected.labels)
                        for _, pred, record in batch]
        assert oracle_dices[0] == pytest.approx(0.9 / 2 + 290 / 600)
        assert oracle_dices[1] == pytest.approx(0.5 / 2 + 250 / 600)
        assert oracle_dices[0] > 0.85 > oracle_dices[1]
        before = (len(pool.labeled), len(pool.unlabeled), len(pool.candidate))
        decisions, _ = select(batch, theta=0.85, pool=pool)
        for d, expected in zip(decisions, oracle_dices):
            assert d.dice == pytest.approx(expected)
        accepted = {d.sample_id for d in decisions if d.accepted}
        assert accepted == {"s0"}
        after = (len(pool.labeled), len(pool.unlabeled), len(pool.candidate))
        assert after == (before[0] + 1, before[1] + 1, before[2] - 2)

    def test_conservation_and_monotonicity_over_random_batches(self, rng):
        for trial in range(40):
            pool = SamplePool(labeled={"seed0"}, unlabeled={"u0"})
            dices = rng.random(4)
            batch = make_batch(dices, pool, band=50, total=200)
            ids_before = sorted(pool.all_ids())
            theta_high, theta_low = 0.8, 0.4
            pool_high = SamplePool(labeled=set(pool.labeled), unlabeled=set(pool.unlabeled),
                                   candidate=set(pool.candidate))
            dec_high, _ = select(batch, theta=theta_high, pool=pool_high)
            pool_low = SamplePool(labeled=set(pool.labeled), unlabeled=set(pool.unlabeled),
                                  candidate=set(pool.candidate))
            dec_low, _ = select(batch, theta=theta_low, pool=pool_low)
            assert sorted(pool_high.all_ids()) == ids_before == sorted(pool_low.all_ids())
            accepted_high = {d.sample_id for d in dec_high if d.accepted}
            accepted_low = {d.sample_id for d in dec_low if d.accepted}
            assert accepted_high <= accepted_low

    def test_sample_not_candidate_rejected(self):
        pool = SamplePool()
        batch = make_batch([0.5], pool)
        pool.candidate.clear()
        pool.unlabeled.add("s0")
        with pytest.raises(SampleNotCandidateError):
            select(batch, theta=0.5, pool=pool)

    def test_inverted_selection_flips_decisions(self):
        pool = SamplePool()
        batch = make_batch([0.9, 0.5], pool)
        decisions, _ = select(batch, theta=0.85, pool=pool, invert=True)
        accepted = {d.sample_id for d in decisions if d.accepted}
        assert accepted == {"s1"}

    def test_decision_invariant_accepted_matches_threshold(self):
        d = SelectionDecision("s", dice=0.9, theta=0.85, accepted=True)
        assert d.accepted == (d.dice >= d.theta)
