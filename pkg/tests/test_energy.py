import itertools

import numpy as np
import pytest

from antiblur.energy import (LossConfig, bending_energy, loss_gradient_wrt_field, mse, ncc_loss,
                             stage_objective, total_loss)
from antiblur.errors import DegenerateInputError, DimensionError, ParameterError
from antiblur.grid import DeformationField, Image, zero_field
from antiblur.sampler import compose_channels, grid_coordinates, warp_array

from conftest import random_field, random_image, rel_err, voxel_kink_mask


def loop_bending(data):
    """Stencil-by-stencil bending energy, one interior point at a time."""
    dims = data.shape[:-1]
    nd = len(dims)
    total = 0.0
    for x in itertools.product(*[range(1, n - 1) for n in dims]):
        for c in range(nd):
            f = lambda *off: data[tuple(np.add(x, off))][c]
            for a in range(nd):
                e = np.eye(nd, dtype=int)[a]
                total += (f(*e) - 2 * f(*(0 * e)) + f(*-e)) ** 2
            for a in range(nd):
                for b in range(a + 1, nd):
                    ea, eb = np.eye(nd, dtype=int)[a], np.eye(nd, dtype=int)[b]
                    m = (f(*(ea + eb)) - f(*(ea - eb)) - f(*(eb - ea)) + f(*(-ea - eb))) / 4
                    total += 2 * m * m
    return total


def affine_field(rng, dims):
    nd = len(dims)
    A = rng.normal(size=(nd, nd))
    b = rng.normal(size=nd)
    coords = np.moveaxis(grid_coordinates(dims), 0, -1)
    return DeformationField(coords @ A.T + b)


class TestSimilarity:
    def test_mse_examples(self):
        a = Image(np.zeros((2, 2)))
        assert mse(a, a) == 0.0
        assert mse(a, Image(np.ones((2, 2)))) == 1.0
        assert mse(np.array([0.0, 1.0]), np.array([1.0, 1.0])) == 0.5

    def test_mse_dims(self):
        with pytest.raises(DimensionError):
            mse(Image(np.zeros((2, 2))), Image(np.zeros((2, 3))))

    def test_ncc_examples(self, rng):
        a = random_image(rng, (6, 6))
        assert ncc_loss(a, a) == pytest.approx(0.0, abs=1e-9)  # 1e-10 guard in the denominator
        assert ncc_loss(a, Image(a.data + 0.3)) == pytest.approx(0.0, abs=1e-6)
        x = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert ncc_loss(x, 1.0 - x) == pytest.approx(0.0, abs=1e-9)

    def test_ncc_constant_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            ncc_loss(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))

    def test_ncc_range(self, rng):
        for _ in range(20):
            a, b = rng.uniform(size=(2, 7, 7))
            for cfg in (None, LossConfig(similarity="ncc_windowed", window=3)):
                assert 0.0 <= ncc_loss(a, b, cfg) <= 1.0

    def test_windowed_ncc_against_loops(self, rng):
        a, b = rng.uniform(size=(2, 6, 5))
        w, r = 3, 1
        pa, pb = np.pad(a, r), np.pad(b, r)
        vals = []
        for i in range(6):
            for j in range(5):
                x = pa[i:i + w, j:j + w].ravel()
                y = pb[i:i + w, j:j + w].ravel()
                dx, dy = x - x.mean(), y - y.mean()
                vals.append(np.dot(dx, dy) ** 2 / (np.dot(dx, dx) * np.dot(dy, dy) + 1e-10))
        got = ncc_loss(a, b, LossConfig(similarity="ncc_windowed", window=w))
        assert got == pytest.approx(1.0 - np.mean(vals), rel=1e-9)

    def test_window_validation(self):
        with pytest.raises(ParameterError):
            LossConfig(similarity="ncc_windowed", window=4)
        with pytest.raises(ParameterError):
            LossConfig(lam=-1.0)


class TestBending:
    def test_zero_and_spike(self):
        assert bending_energy(zero_field((5, 5))) == 0.0
        d = np.zeros((5, 5, 2))
        d[2, 2, 0] = 1.0
        assert bending_energy(DeformationField(d)) == 12.5
        assert loop_bending(d) == 12.5

    @pytest.mark.parametrize("dims", [(6, 7), (4, 5, 6)])
    def test_matches_loop_oracle(self, rng, dims):
        d = rng.normal(size=dims + (len(dims),))
        assert bending_energy(DeformationField(d)) == pytest.approx(loop_bending(d), rel=1e-12)

    @pytest.mark.parametrize("dims", [(9, 9), (7, 7, 7)])
    def test_affine_null(self, rng, dims):
        for _ in range(10):
            assert bending_energy(affine_field(rng, dims)) == pytest.approx(0.0, abs=1e-20)

    def test_small_axis_rejected(self):
        with pytest.raises(DimensionError):
            bending_energy(zero_field((2, 5)))

    def test_transpose_consistent(self, rng):
        d = rng.normal(size=(5, 6, 2))
        t = np.transpose(d, (1, 0, 2))[..., ::-1]
        assert bending_energy(DeformationField(d)) == pytest.approx(
            bending_energy(DeformationField(t)), rel=1e-12)


class TestTotalLoss:
    def test_examples(self, rng):
        img = random_image(rng, (5, 5))
        cfg = LossConfig()
        assert total_loss(img, img, [zero_field((5, 5))], cfg).total == 0.0
        val = total_loss(img, img, [affine_field(rng, (5, 5))], cfg)
        assert val.total == pytest.approx(0, abs=1e-18)

    def test_arithmetic_example(self):
        spike = np.zeros((5, 5, 2))
        spike[2, 2, 1] = 1.0
        a = Image(np.zeros((5, 5)))
        b = np.zeros((5, 5))
        b.flat[:12] = 1.0
        b.flat[12] = np.sqrt(0.5)  # mse = 12.5/25 = 0.5
        cfg = LossConfig(lam=10.0, reg_norm="sum")
        val = total_loss(a, b, [DeformationField(spike)], cfg)
        assert val.similarity == pytest.approx(0.5, rel=1e-6)
        assert val.regularizer == 12.5
        assert val.total == pytest.approx(125.5, rel=1e-6)
        mean_val = total_loss(a, b, [DeformationField(spike)], LossConfig(lam=10.0))
        assert mean_val.regularizer == pytest.approx(12.5 / 9)

    def test_parts_add_up(self, rng):
        for _ in range(10):
            a, b = random_image(rng, (6, 6)), random_image(rng, (6, 6))
            fields = [random_field(rng, (6, 6)) for _ in range(3)]
            cfg = LossConfig(lam=rng.uniform(0, 20))
            v = total_loss(a, b, fields, cfg)
            assert v.total == pytest.approx(v.similarity + cfg.lam * v.regularizer, rel=1e-9)
            parts = sum(bending_energy(f) for f in fields) * cfg.reg_scale((6, 6))
            assert v.regularizer == pytest.approx(parts, rel=1e-12)


def numeric_stage_grad(src, tgt, prev, inc, cfg, through, mask, h=1e-3):
    def f(ch):
        comb = compose_channels(prev, ch)
        warped = warp_array(src, comb if through else ch)
        reg = bending_energy(DeformationField.from_channels(comb)) * cfg.reg_scale(src.shape)
        return total_loss(warped, tgt, [], cfg).similarity + cfg.lam * reg

    num = np.zeros_like(inc)
    for idx in zip(*np.nonzero(mask)):
        d = inc.copy()
        d[idx] += h
        fp = f(d)
        d[idx] -= 2 * h
        num[idx] = (fp - f(d)) / (2 * h)
    return num


def kink_mask(prev, inc, h):
    """Coordinates where neither the warp nor the composition sits near a tent kink."""
    comb = compose_channels(prev, inc)
    pos_inc = grid_coordinates(inc.shape[1:]) + inc
    pos_comb = grid_coordinates(inc.shape[1:]) + comb
    return voxel_kink_mask([pos_inc, pos_comb], h)


class TestGradient:
    @pytest.mark.parametrize("sim", ["mse", "ncc_global", "ncc_windowed"])
    @pytest.mark.parametrize("through", [True, False])
    def test_finite_differences(self, rng, sim, through):
        cfg = LossConfig(similarity=sim, lam=0.5, window=3)
        h = 1e-3
        for _ in range(3):
            src = rng.uniform(size=(8, 8))
            tgt = rng.uniform(size=(8, 8))
            prev = rng.uniform(-1.5, 1.5, size=(2, 8, 8))
            inc = rng.uniform(-1.5, 1.5, size=(2, 8, 8))
            _, _, ana = stage_objective(src, tgt, prev, inc, cfg, through_composition=through)
            mask = kink_mask(prev, inc, h)
            num = numeric_stage_grad(src, tgt, prev, inc, cfg, through, mask, h)
            assert rel_err(ana[mask], num[mask]) <= 1e-3

    def test_public_wrapper_3d(self, rng):
        cfg = LossConfig(lam=2.0)
        h = 1e-3
        src, tgt = random_image(rng, (5, 5, 5)), random_image(rng, (5, 5, 5))
        prev, inc = random_field(rng, (5, 5, 5)), random_field(rng, (5, 5, 5))
        ana = loss_gradient_wrt_field(src, tgt, prev, inc, cfg).channels()
        p, i = prev.channels(), inc.channels()
        mask = kink_mask(p, i, h)
        num = numeric_stage_grad(src.data.astype(float), tgt.data.astype(float), p, i, cfg, True,
                                 mask, h)
        assert rel_err(ana[mask], num[mask]) <= 1e-3

    def test_optimum_has_zero_gradient(self, rng):
        img = random_image(rng, (6, 6))
        g = loss_gradient_wrt_field(img, img, zero_field((6, 6)), zero_field((6, 6)), LossConfig())
        assert not np.any(g.data)

    def test_flat_source_without_regularizer(self, rng):
        src = Image(np.full((8, 8), 0.3))
        g = loss_gradient_wrt_field(src, random_image(rng, (8, 8)), zero_field((8, 8)),
                                    zero_field((8, 8)), LossConfig(lam=0.0))
        # the zero boundary turns the grid edge into a step; the interior is flat
        assert not np.any(g.data[1:-1, 1:-1])
