"""Loss-term oracles: hand-derived values, update rule, invariants."""

import math

import pytest
import torch

from cyclevqg.losses import (
    CenterBank,
    HyperPrior,
    LossBreakdown,
    LossWeights,
    TrainingError,
    category_recon_loss,
    center_loss,
    consistency_loss,
    hyperprior_kl,
    hyperprior_reg,
    image_recon_loss,
    question_loss,
    total_loss,
    update_centers,
)
from cyclevqg.model import LatentDistribution


def _dist(mean, std):
    return LatentDistribution(
        mean=torch.tensor(mean, dtype=torch.float64),
        stddev=torch.tensor(std, dtype=torch.float64),
    )


def _prior(alpha):
    prior = HyperPrior(len(alpha))
    with torch.no_grad():
        prior.log_alpha.copy_(torch.log(torch.tensor(alpha, dtype=torch.float64)))
    return prior


class TestQuestionLoss:
    def test_uniform_logits_give_log_vocab(self):
        """Uniform scores over V=100 cost exactly ln(100) per token."""
        logits = torch.zeros(4, 100, dtype=torch.float64)
        gt = torch.tensor([1, 7, 8, 9, 2])  # start, 3 words, end
        assert question_loss(logits, gt).item() == pytest.approx(math.log(100), abs=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        gt = torch.tensor([1, 5, 6, 2])
        logits = torch.full((4, 10), -1e4, dtype=torch.float64)
        for row, target in enumerate([5, 6, 2]):
            logits[row, target] = 1e4
        assert question_loss(logits, gt).item() < 1e-9

    def test_padding_the_ground_truth_changes_nothing(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(6, 12, generator=gen, dtype=torch.float64)
        gt = torch.tensor([1, 4, 5, 6, 2])
        padded = torch.tensor([1, 4, 5, 6, 2, 0, 0])
        base = question_loss(logits, gt).item()
        assert question_loss(logits, padded).item() == pytest.approx(base, abs=0)

    def test_too_few_logit_rows_is_an_error(self):
        logits = torch.zeros(2, 10, dtype=torch.float64)
        with pytest.raises(ValueError):
            question_loss(logits, torch.tensor([1, 4, 5, 6, 2]))


class TestReconLosses:
    def test_exact_reconstruction_is_zero(self):
        x = torch.randn(3, 8, dtype=torch.float64)
        assert image_recon_loss(x, x.clone()).item() == 0.0

    def test_unit_difference_squares_and_sums(self):
        pred = torch.ones(4, dtype=torch.float64)
        target = torch.zeros(4, dtype=torch.float64)
        assert image_recon_loss(pred, target).item() == 4.0
        assert category_recon_loss(pred, target).item() == 4.0

    def test_doubling_the_gap_quadruples_the_loss(self):
        gen = torch.Generator().manual_seed(1)
        target = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        delta = torch.randn(5, 6, generator=gen, dtype=torch.float64)
        small = image_recon_loss(target + delta, target).item()
        large = image_recon_loss(target + 2 * delta, target).item()
        assert large == pytest.approx(4 * small, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            image_recon_loss(torch.zeros(3), torch.zeros(4))


class TestConsistencyLoss:
    def test_one_hot_at_truth_is_zero(self):
        pred = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        assert consistency_loss(pred, 1).item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_over_15_categories(self):
        pred = torch.full((15,), 1 / 15, dtype=torch.float64)
        assert consistency_loss(pred, 3).item() == pytest.approx(math.log(15), abs=1e-12)

    def test_half_probability_costs_log_two(self):
        pred = torch.tensor([0.5, 0.25, 0.25], dtype=torch.float64)
        assert consistency_loss(pred, 0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_probability_is_clamped_not_infinite(self):
        pred = torch.tensor([0.0, 1.0], dtype=torch.float64)
        value = consistency_loss(pred, 0).item()
        assert math.isfinite(value) and value > 20

    def test_bad_category_id_rejected(self):
        with pytest.raises(ValueError):
            consistency_loss(torch.tensor([0.5, 0.5]), 2)


class TestCenterLoss:
    def test_at_center_is_zero(self):
        bank = CenterBank(3, 2)
        bank.centers[1] = torch.tensor([1.0, -1.0])
        assert center_loss(torch.tensor([1.0, -1.0]), 1, bank).item() == 0.0

    def test_unit_offsets_sum_their_squares(self):
        bank = CenterBank(2, 2)
        z = torch.tensor([1.0, -1.0], dtype=torch.float64)
        assert center_loss(z, 0, bank).item() == 2.0

    def test_other_categories_centers_are_irrelevant(self):
        bank = CenterBank(3, 4)
        z = torch.randn(4, dtype=torch.float64)
        before = center_loss(z, 0, bank).item()
        bank.centers[1] += 100.0
        bank.centers[2] -= 7.0
        assert center_loss(z, 0, bank).item() == before


class TestCenterUpdate:
    def test_center_at_batch_mean_is_a_fixed_point(self):
        bank = CenterBank(2, 2)
        z = torch.tensor([[1.0, 0.0], [3.0, 2.0]], dtype=torch.float64)
        bank.centers[0] = z.mean(dim=0)
        before = bank.centers.clone()
        update_centers(z, torch.tensor([0, 0]), bank)
        assert (bank.centers - before).abs().max().item() < 1e-12

    def test_hand_derived_two_sample_update(self):
        """c=[0,0], members [2,0] and [0,2], scale 0.5 -> center [1/3, 1/3]."""
        bank = CenterBank(1, 2, update_scale=0.5)
        z = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        update_centers(z, torch.tensor([0, 0]), bank)
        expected = torch.tensor([1 / 3, 1 / 3], dtype=torch.float64)
        assert (bank.centers[0] - expected).abs().max().item() < 1e-12

    def test_absent_categories_do_not_move(self):
        bank = CenterBank(3, 2)
        bank.centers[2] = torch.tensor([5.0, 5.0])
        z = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
        update_centers(z, torch.tensor([0]), bank)
        assert torch.equal(bank.centers[2], torch.tensor([5.0, 5.0], dtype=torch.float64))

    def test_empty_batch_rejected(self):
        bank = CenterBank(2, 2)
        with pytest.raises(ValueError):
            update_centers(torch.zeros(0, 2, dtype=torch.float64), torch.zeros(0, dtype=torch.long), bank)


class TestHyperpriorKL:
    def test_matched_standard_prior_is_zero(self):
        dist = _dist([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        assert hyperprior_kl(dist, _prior([1.0, 1.0, 1.0])).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_mean_shift_costs_half(self):
        assert hyperprior_kl(_dist([1.0], [1.0]), _prior([1.0])).item() == pytest.approx(0.5, abs=1e-12)

    def test_variance_matching_precision_is_zero(self):
        """sigma=0.5 against inverse variance 4: alpha*sigma^2 = 1, KL = 0."""
        assert hyperprior_kl(_dist([0.0], [0.5]), _prior([4.0])).item() == pytest.approx(0.0, abs=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            hyperprior_kl(_dist([0.0, 0.0], [1.0, 1.0]), _prior([1.0]))

    def test_nonpositive_stddev_rejected(self):
        with pytest.raises(ValueError):
            hyperprior_kl(_dist([0.0], [0.0]), _prior([1.0]))

    def test_nonnegative_on_random_configurations(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(50):
            d = int(torch.randint(1, 8, (1,), generator=gen))
            mean = torch.randn(d, generator=gen, dtype=torch.float64) * 2
            std = torch.rand(d, generator=gen, dtype=torch.float64) * 2 + 0.1
            alpha = (torch.rand(d, generator=gen, dtype=torch.float64) * 3 + 0.1).tolist()
            value = hyperprior_kl(_dist(mean.tolist(), std.tolist()), _prior(alpha)).item()
            assert value >= -1e-12


class TestHyperpriorReg:
    def test_unit_inverse_variance_costs_nothing(self):
        assert hyperprior_reg(_prior([1.0, 1.0, 1.0]), 2.0).item() == 0.0

    def test_hand_value(self):
        """alpha^-1 = [2, 2], weight 2 -> 2 * (1 + 1) = 4."""
        assert hyperprior_reg(_prior([0.5, 0.5]), 2.0).item() == pytest.approx(4.0, abs=1e-12)

    def test_monotone_in_distance_from_one(self):
        near = hyperprior_reg(_prior([1.2]), 1.0).item()
        far = hyperprior_reg(_prior([2.0]), 1.0).item()
        assert far > near


class TestTotalLoss:
    def _parts(self, value):
        return LossBreakdown(
            question=value, image_recon=value, category_recon=value,
            consistency=value, center=value, hyperprior=value,
        )

    def test_zero_parts_zero_total(self):
        assert total_loss(self._parts(0.0), LossWeights()) == 0.0

    def test_unit_parts_sum_default_weights(self):
        """Default weights 3+1+2+2+3+3 = 14."""
        assert total_loss(self._parts(1.0), LossWeights()) == pytest.approx(14.0, abs=1e-12)

    def test_linear_in_the_center_weight(self):
        parts = self._parts(1.0)
        parts.center = 2.5
        base = total_loss(parts, LossWeights())
        bumped = total_loss(parts, LossWeights(center=6.0))
        assert bumped - base == pytest.approx(3.0 * 2.5, rel=1e-12)

    def test_nan_part_raises_training_error(self):
        parts = self._parts(1.0)
        parts.consistency = float("nan")
        with pytest.raises(TrainingError, match="consistency"):
            total_loss(parts, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(center=-1.0)


class TestGradients:
    """Spot finite-difference checks; the full sweep lives in acceptance."""

    def test_question_loss_gradient(self):
        gen = torch.Generator().manual_seed(3)
        logits = torch.randn(4, 9, generator=gen, dtype=torch.float64, requires_grad=True)
        gt = torch.tensor([1, 4, 5, 2])
        loss = question_loss(logits, gt)
        (grad,) = torch.autograd.grad(loss, logits)
        h = 1e-6
        idx = (2, 3)
        with torch.no_grad():
            up, down = logits.clone(), logits.clone()
            up[idx] += h
            down[idx] -= h
        fd = (question_loss(up, gt) - question_loss(down, gt)).item() / (2 * h)
        assert grad[idx].item() == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_kl_gradient_through_log_alpha(self):
        prior = _prior([0.7, 1.3])
        dist = _dist([0.3, -0.2], [0.9, 1.1])
        loss = hyperprior_kl(dist, prior)
        (grad,) = torch.autograd.grad(loss, prior.log_alpha)
        h = 1e-6
        for j in range(2):
            with torch.no_grad():
                bumped = prior.log_alpha.clone()
                bumped[j] += h
                dipped = prior.log_alpha.clone()
                dipped[j] -= h
            up = HyperPrior(2)
            down = HyperPrior(2)
            with torch.no_grad():
                up.log_alpha.copy_(bumped)
                down.log_alpha.copy_(dipped)
            fd = (hyperprior_kl(dist, up) - hyperprior_kl(dist, down)).item() / (2 * h)
            assert grad[j].item() == pytest.approx(fd, rel=1e-6, abs=1e-9)
