import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jointflow.errors import InvalidArgument
from jointflow.flow import (
    draw_label_noise,
    draw_times,
    flow_matching_loss,
    interpolate,
    sample_training_batch,
)
from jointflow.palette import build_palette


def make_batch(seed=0, n=6, t=None, beta=1.0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    images = torch.as_tensor(rng.uniform(-1, 1, size=(n, 3, 8, 8)), dtype=dtype)
    classes = rng.integers(0, 4, size=n)
    return sample_training_batch(images, classes, build_palette(4), beta, rng, t=t), classes


class TinyField(torch.nn.Module):
    """1x1 conv over the joint state plus a time-linear bias: 54 parameters."""

    def __init__(self):
        super().__init__()
        self.mix = torch.nn.Conv2d(6, 6, 1)
        self.time = torch.nn.Parameter(torch.zeros(6))

    def forward(self, x, y, t):
        h = self.mix(torch.cat([x, y], 1)) + t[:, None, None, None] * self.time[None, :, None, None]
        return h[:, :3], h[:, 3:]


class TestInterpolate:
    def test_examples(self):
        assert interpolate(np.array(-1.0), np.array(1.0), 0.75) == 0.5
        a, b = torch.randn(3, 4), torch.randn(3, 4)
        assert torch.equal(interpolate(a, b, 0.0), a)
        assert torch.equal(interpolate(a, b, 1.0), b)

    def test_per_sample_time(self):
        a, b = torch.zeros(2, 3), torch.ones(2, 3)
        out = interpolate(a, b, torch.tensor([0.25, 0.5]))
        assert torch.equal(out, torch.tensor([[0.25] * 3, [0.5] * 3]))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            interpolate(torch.zeros(2), torch.zeros(3), 0.5)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(-10, 10), b=st.floats(-10, 10), t=st.floats(0, 1))
    def test_convexity(self, a, b, t):
        v = float(interpolate(np.array(a), np.array(b), t))
        assert min(a, b) - 1e-9 <= v <= max(a, b) + 1e-9


class TestTrainingBatch:
    def test_endpoints_bit_exact(self):
        b0, _ = make_batch(t=0.0)
        assert torch.equal(b0.xt, b0.x0) and torch.equal(b0.yt, b0.y0)
        b1, _ = make_batch(t=1.0)
        assert torch.equal(b1.xt, b1.x1) and torch.equal(b1.yt, b1.y1)

    def test_invariants(self):
        b, classes = make_batch(seed=3, n=16)
        t = b.t[:, None, None, None]
        torch.testing.assert_close(b.xt, (1 - t) * b.x0 + t * b.x1, rtol=0, atol=1e-12)
        torch.testing.assert_close(b.yt, (1 - t) * b.y0 + t * b.y1, rtol=0, atol=1e-12)
        assert torch.equal(b.ux, b.x1 - b.x0) and torch.equal(b.uy, b.y1 - b.y0)
        assert torch.all((b.t >= 0) & (b.t <= 1))
        codes = build_palette(4).codes
        # label image: spatially constant, within beta/2 of the class code
        mean = b.y0.mean(dim=(2, 3)).numpy()
        assert torch.all(b.y0 == b.y0[:, :, :1, :1])
        assert np.all(np.abs(mean - codes[classes]) <= 0.5 + 1e-12)

    def test_finite_difference_velocity(self):
        # straight path: central difference of x(t) equals the constant target
        b, _ = make_batch(seed=5, n=4)
        h = 1e-3
        t = b.t.clamp(h, 1 - h)
        fd_x = (interpolate(b.x0, b.x1, t + h) - interpolate(b.x0, b.x1, t - h)) / (2 * h)
        fd_y = (interpolate(b.y0, b.y1, t + h) - interpolate(b.y0, b.y1, t - h)) / (2 * h)
        assert ((fd_x - b.ux).abs() / b.ux.abs().clamp_min(1e-3)).max() < 1e-6
        assert ((fd_y - b.uy).abs() / b.uy.abs().clamp_min(1e-3)).max() < 1e-6

    def test_targets_time_independent(self):
        a, _ = make_batch(seed=9, t=0.2)
        b, _ = make_batch(seed=9, t=0.8)
        assert torch.equal(a.ux, b.ux) and torch.equal(a.uy, b.uy)

    def test_seeded(self):
        a, _ = make_batch(seed=1)
        b, _ = make_batch(seed=1)
        for name in ("x0", "y0", "y1", "t"):
            assert torch.equal(getattr(a, name), getattr(b, name))

    def test_invalid_class(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidArgument):
            sample_training_batch(torch.zeros(2, 3, 4, 4), [0, 4], build_palette(4), 1.0, rng)

    def test_laws(self):
        rng = np.random.default_rng(0)
        t = draw_times(rng, 20000, "logit_normal")
        assert np.all((t > 0) & (t < 1)) and abs(np.median(t) - 0.5) < 0.02
        u = draw_label_noise(rng, (200000,), "uniform")
        assert abs(u.var() - 1.0) < 0.02 and np.abs(u).max() <= np.sqrt(3)
        with pytest.raises(InvalidArgument):
            draw_times(rng, 3, "beta")
        with pytest.raises(InvalidArgument):
            draw_label_noise(rng, (3,), "cauchy")


class TestLoss:
    def test_examples(self):
        b, _ = make_batch()
        assert flow_matching_loss(b.ux, b.uy, b).item() == 0.0
        assert flow_matching_loss(b.ux, b.uy + 1, b, lambda_y=1.0).item() == pytest.approx(1.0, abs=1e-12)
        assert flow_matching_loss(b.ux, b.uy + 1, b, lambda_y=2.0).item() == pytest.approx(2.0, abs=1e-12)

    def test_role_symmetry(self):
        b, _ = make_batch(seed=2)
        px, py = torch.randn_like(b.ux), torch.randn_like(b.uy)
        swapped = type(b)(**{**vars(b), "ux": b.uy, "uy": b.ux})
        assert flow_matching_loss(px, py, b).item() == pytest.approx(
            flow_matching_loss(py, px, swapped).item(), rel=1e-12
        )

    def test_zero_predictor_positive(self):
        b, _ = make_batch(seed=4, n=32)
        v = flow_matching_loss(torch.zeros_like(b.ux), torch.zeros_like(b.uy), b).item()
        assert np.isfinite(v) and v > 0

    def test_errors(self):
        b, _ = make_batch()
        with pytest.raises(InvalidArgument):
            flow_matching_loss(b.ux[:1], b.uy, b)
        with pytest.raises(InvalidArgument):
            flow_matching_loss(b.ux, b.uy, b, lambda_y=0.0)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        field = TinyField().double()
        with torch.no_grad():
            for p in field.parameters():
                p.normal_(0, 0.3)
        assert sum(p.numel() for p in field.parameters()) <= 1000
        b, _ = make_batch(seed=7, n=4)

        def loss():
            vx, vy = field(b.xt, b.yt, b.t)
            return flow_matching_loss(vx, vy, b, lambda_y=1.5)

        field.zero_grad()
        loss().backward()
        eps, worst = 1e-5, 0.0
        with torch.no_grad():
            for p in field.parameters():
                flat, grad = p.view(-1), p.grad.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    up = loss().item()
                    flat[i] = orig - eps
                    down = loss().item()
                    flat[i] = orig
                    fd = (up - down) / (2 * eps)
                    worst = max(worst, abs(fd - grad[i].item()) / max(abs(fd), abs(grad[i].item()), 1e-8))
        assert worst < 1e-3
