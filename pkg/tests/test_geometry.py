import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sdst.geometry import (cw_to_moment, inverse_sigmoid, iou_1d, iou_matrix,
                           moment_to_cw)

from oracles import iou_by_binning, iou_interval


def seg(a, b):
    return torch.tensor([a, b], dtype=torch.float64)


class TestCwToMoment:
    def test_full_video(self):
        out = cw_to_moment(torch.tensor([0.5, 1.0]))
        assert torch.allclose(out, torch.tensor([0.0, 1.0]))

    def test_left_clamp(self):
        out = cw_to_moment(torch.tensor([0.1, 0.4]))
        assert torch.allclose(out, torch.tensor([0.0, 0.3]))

    def test_interior(self):
        out = cw_to_moment(torch.tensor([0.6, 0.2]))
        assert torch.allclose(out, torch.tensor([0.5, 0.7]))

    @given(st.floats(0.15, 0.85), st.floats(0.01, 0.25))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_interior(self, center, width):
        # interior segments survive the cw -> moment -> cw conversion
        r = torch.tensor([center, width], dtype=torch.float64)
        back = moment_to_cw(cw_to_moment(r))
        assert torch.allclose(back, r, atol=1e-12)


class TestIou:
    def test_identical(self):
        assert float(iou_1d(seg(0.2, 0.6), seg(0.2, 0.6))) == 1.0

    def test_disjoint(self):
        assert float(iou_1d(seg(0.0, 0.2), seg(0.5, 0.9))) == 0.0

    def test_third_overlap_vs_binning_oracle(self):
        exact = float(iou_1d(seg(0.0, 0.2), seg(0.1, 0.3)))
        assert abs(exact - 1 / 3) < 1e-9
        approx = iou_by_binning((0.0, 0.2), (0.1, 0.3), bins=10**6)
        assert abs(exact - approx) < 1e-5

    def test_zero_length_identical_points(self):
        assert float(iou_1d(seg(0.4, 0.4), seg(0.4, 0.4))) == 0.0

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=100, deadline=None)
    def test_symmetric_and_matches_oracle(self, a0, a1, b0, b1):
        a = seg(min(a0, a1), max(a0, a1))
        b = seg(min(b0, b1), max(b0, b1))
        ab = float(iou_1d(a, b))
        ba = float(iou_1d(b, a))
        assert abs(ab - ba) < 1e-12
        ref = iou_interval((float(a[0]), float(a[1])),
                           (float(b[0]), float(b[1])))
        assert abs(ab - ref) < 1e-9

    def test_monotone_under_translation(self):
        a = seg(0.1, 0.4)
        prev = 1.0
        for shift in [0.0, 0.1, 0.2, 0.3, 0.5]:
            cur = float(iou_1d(a, seg(0.1 + shift, 0.4 + shift)))
            assert cur <= prev + 1e-12
            prev = cur

    def test_matrix_shape(self):
        a = torch.rand(4, 2).sort(dim=-1).values
        b = torch.rand(3, 2).sort(dim=-1).values
        m = iou_matrix(a, b)
        assert m.shape == (4, 3)
        assert float(iou_1d(a[2], b[1])) == float(m[2, 1])


def test_inverse_sigmoid_inverts():
    x = torch.tensor([0.1, 0.5, 0.93], dtype=torch.float64)
    assert torch.allclose(torch.sigmoid(inverse_sigmoid(x)), x, atol=1e-9)
