import numpy as np
import pytest

from corrseg import autograd as ag
from corrseg.autograd import Tensor
from corrseg.errors import PreconditionError
from corrseg.losses import dice_loss, reconstruction_loss, total_loss

from conftest import finite_difference, rel_err
from oracles import dice_loss_loops, mae_loops


def t64(arr, grad=False):
    return Tensor(arr, requires_grad=grad, dtype=np.float64)


def one_hot(labels, classes=4):
    out = np.zeros((1, classes) + labels.shape)
    for c in range(classes):
        out[0, c] = labels == c
    return out


def soft_pred(rng, shape):
    logits = rng.normal(size=(1, 4) + shape)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestDiceLoss:
    def test_perfect_prediction_near_zero(self, rng):
        labels = rng.integers(0, 4, size=(4, 4, 4))
        gt = one_hot(labels)
        loss = dice_loss(t64(gt.copy()), t64(gt))
        assert abs(loss.item()) <= 1e-4

    def test_disjoint_prediction_near_one(self):
        labels = np.ones((4, 4, 4), dtype=int)   # all foreground class 1
        gt = one_hot(labels)
        pred = one_hot(np.zeros((4, 4, 4), dtype=int))  # all background
        loss = dice_loss(t64(pred), t64(gt))
        assert loss.item() == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        pred = soft_pred(r, (3, 3, 3))
        gt = one_hot(r.integers(0, 4, size=(3, 3, 3)))
        got = dice_loss(t64(pred), t64(gt)).item()
        assert abs(got - dice_loss_loops(pred, gt)) < 1e-6

    def test_gradient_matches_finite_differences(self, rng):
        logits = t64(rng.normal(size=(1, 4, 3, 3, 3)), grad=True)
        gt = t64(one_hot(rng.integers(0, 4, size=(3, 3, 3))))

        def f():
            return dice_loss(ag.softmax_channel(logits), gt)

        f().backward()
        numeric = finite_difference(f, logits)
        assert rel_err(logits.grad, numeric) < 1e-4

    def test_bounded_and_monotone(self, rng):
        """Adding one correctly predicted voxel never increases the loss."""
        labels = np.zeros((4, 4, 4), dtype=int)
        labels[1:3, 1:3, 1:3] = 1
        gt = one_hot(labels)
        pred_labels = np.zeros_like(labels)
        losses = []
        fg = np.argwhere(labels == 1)
        for i in range(len(fg) + 1):
            pred = one_hot(pred_labels)
            loss = dice_loss(t64(pred), t64(gt)).item()
            assert -1e-4 <= loss <= 1.0 + 1e-4
            losses.append(loss)
            if i < len(fg):
                z, y, x = fg[i]
                pred_labels[z, y, x] = 1
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(PreconditionError):
            dice_loss(Tensor(np.zeros((1, 4, 2, 2, 2))),
                      Tensor(np.zeros((1, 4, 3, 3, 3))))


class TestReconstructionLoss:
    def test_exact_reconstruction_is_zero(self, rng):
        vols = [Tensor(rng.normal(size=(1, 1, 3, 3, 3))) for _ in range(4)]
        loss = reconstruction_loss([v.detach() for v in vols], vols)
        assert loss.item() == pytest.approx(0.0, abs=1e-7)

    def test_unit_offset_gives_four(self, rng):
        vols = [Tensor(rng.normal(size=(1, 1, 3, 3, 3))) for _ in range(4)]
        shifted = [Tensor(v.data + 1.0) for v in vols]
        loss = reconstruction_loss(shifted, vols)
        assert loss.item() == pytest.approx(4.0, abs=1e-5)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        recs = [r.normal(size=(1, 1, 3, 3, 3)) for _ in range(4)]
        tgts = [r.normal(size=(1, 1, 3, 3, 3)) for _ in range(4)]
        got = reconstruction_loss([t64(x) for x in recs],
                                  [t64(x) for x in tgts]).item()
        assert abs(got - mae_loops(recs, tgts)) < 1e-6

    def test_shape_mismatch_rejected(self, rng):
        good = [Tensor(np.zeros((1, 1, 2, 2, 2)))] * 4
        bad = [Tensor(np.zeros((1, 1, 3, 2, 2)))] * 4
        with pytest.raises(PreconditionError):
            reconstruction_loss(good, bad)
        with pytest.raises(PreconditionError):
            reconstruction_loss(good[:3], good)


class TestTotalLoss:
    def test_lambda_zero_is_dice_only(self, rng):
        dice = Tensor(np.array(0.37))
        rec = Tensor(np.array(5.0))
        assert total_loss(dice, rec, 0.0).item() == pytest.approx(0.37)

    def test_unit_lambda_adds(self):
        out = total_loss(Tensor(np.array(0.3)), Tensor(np.array(0.2)), 1.0)
        assert out.item() == pytest.approx(0.5)

    def test_gradient_scales_with_lambda(self, rng):
        rec_param = t64(rng.normal(size=(1, 1, 2, 2, 2)), grad=True)
        target = t64(rng.normal(size=(1, 1, 2, 2, 2)))
        dice = t64(np.array(0.4))
        grads = {}
        for lam in (0.5, 1.0, 2.0):
            rec_param.zero_grad()
            rec = reconstruction_loss([rec_param] * 4, [target] * 4)
            total_loss(dice, rec, lam).backward()
            grads[lam] = rec_param.grad.copy()
            numeric = finite_difference(
                lambda: total_loss(
                    dice, reconstruction_loss([rec_param] * 4,
                                              [target] * 4), lam),
                rec_param)
            assert rel_err(rec_param.grad, numeric) < 1e-4
        np.testing.assert_allclose(grads[1.0], 2 * grads[0.5], rtol=1e-9)
        np.testing.assert_allclose(grads[2.0], 4 * grads[0.5], rtol=1e-9)

    def test_negative_lambda_rejected(self):
        with pytest.raises(PreconditionError):
            total_loss(Tensor(np.array(0.1)), Tensor(np.array(0.1)), -1.0)
