"""Tests for the MVLR loss terms."""

import math

import numpy as np
import pytest
import torch

from vl_reader.errors import EmptyTargetSet, ShapeMismatch
from vl_reader.models import Phase
from vl_reader.objective import (
    linguistic_loss,
    linguistic_targets,
    mvlr_loss,
    standardize_patches,
    total_loss,
    visual_loss,
)
from vl_reader.textcodec import EOS_ID, TokenSeq


def visual_oracle(pixels, target, mask):
    layers = []
    for n in range(pixels.shape[0]):
        total, count = 0.0, 0
        for b in range(target.shape[0]):
            for i in range(target.shape[1]):
                if not mask[b, i]:
                    continue
                for d in range(target.shape[2]):
                    total += (pixels[n, b, i, d] - target[b, i, d]) ** 2
                    count += 1
        layers.append(total / count)
    return sum(layers) / len(layers)


def linguistic_oracle(logits, targets, mask):
    layers = []
    for n in range(logits.shape[0]):
        total, count = 0.0, 0
        for b in range(targets.shape[0]):
            for r in range(targets.shape[1]):
                if not mask[b, r]:
                    continue
                row = logits[n, b, r]
                log_z = math.log(sum(math.exp(v) for v in row))
                total += log_z - row[targets[b, r]]
                count += 1
        layers.append(total / count)
    return sum(layers) / len(layers)


class TestVisualLoss:
    """Test cases for masked-patch reconstruction loss."""

    def test_matches_scalar_oracle(self):
        """Test against brute-force recomputation over random traces."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            pixels = rng.normal(size=(2, 3, 5, 4))
            target = rng.uniform(-1, 1, size=(3, 5, 4))
            mask = np.zeros((3, 5), dtype=bool)
            for b in range(3):
                mask[b, rng.choice(5, size=2, replace=False)] = True
            l_v, per_layer, count = visual_loss(
                torch.from_numpy(pixels), torch.from_numpy(target), torch.from_numpy(mask)
            )
            assert count == 3 * 2 * 4
            assert len(per_layer) == 2
            assert float(l_v) == pytest.approx(visual_oracle(pixels, target, mask), rel=1e-10)

    def test_nothing_masked(self):
        """Test that L_v is zero with no masked patches."""
        pixels = torch.randn(2, 1, 4, 3, requires_grad=True)
        l_v, _, count = visual_loss(pixels, torch.zeros(1, 4, 3), None)
        assert float(l_v) == 0.0 and count == 0

    def test_shape_mismatch(self):
        """Test reconstructions that do not match the target."""
        with pytest.raises(ShapeMismatch):
            visual_loss(torch.zeros(1, 1, 4, 3), torch.zeros(1, 4, 2), None)

    def test_normalized_targets(self):
        """Test the per-patch standardized target variant."""
        target = torch.tensor([[[0.0, 1.0, 2.0, 3.0]]], dtype=torch.float64)
        standardized = standardize_patches(target)
        assert float(standardized.mean()) == pytest.approx(0.0, abs=1e-12)
        assert float(standardized.var(unbiased=False)) == pytest.approx(1.0, rel=1e-5)
        mask = torch.ones(1, 1, dtype=torch.bool)
        l_v, _, _ = visual_loss(standardized[None], target, mask, norm_pix_loss=True)
        assert float(l_v) == pytest.approx(0.0, abs=1e-20)

    def test_constant_patch_is_finite(self):
        """Test that flat patches standardize without division by zero."""
        assert torch.isfinite(standardize_patches(torch.ones(1, 2, 4))).all()


class TestLinguisticLoss:
    """Test cases for target-set cross-entropy."""

    def test_matches_scalar_oracle(self):
        """Test against brute-force log-sum-exp over random traces."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            logits = rng.normal(size=(2, 2, 4, 6))
            targets = rng.integers(0, 6, size=(2, 4))
            mask = rng.random((2, 4)) < 0.5
            mask[0, 0] = True
            l_l, _, count = linguistic_loss(
                torch.from_numpy(logits), torch.from_numpy(targets), torch.from_numpy(mask)
            )
            assert count == int(mask.sum())
            assert float(l_l) == pytest.approx(linguistic_oracle(logits, targets, mask), rel=1e-10)

    def test_empty_target_set(self):
        """Test that no supervised rows is an error."""
        with pytest.raises(EmptyTargetSet):
            linguistic_loss(torch.zeros(1, 1, 2, 3), torch.zeros(1, 2, dtype=torch.long),
                            torch.zeros(1, 2, dtype=torch.bool))

    def test_uniform_logits(self):
        """Test log(V) for uniform predictions."""
        l_l, _, _ = linguistic_loss(torch.zeros(1, 1, 1, 5), torch.tensor([[2]]), torch.tensor([[True]]))
        assert float(l_l) == pytest.approx(math.log(5))


class TestTotalLoss:
    """Test cases for the weighted objective."""

    def test_weighted_sum(self):
        """Test lambda_v * L_v + lambda_l * L_l."""
        assert total_loss(2.0, 3.0, 0.5, 2.0) == pytest.approx(7.0)

    def test_zero_weight_detaches_term(self):
        """Test that a zero weight leaves its branch without gradient."""
        l_v = torch.tensor(1.0, requires_grad=True)
        l_l = torch.tensor(2.0, requires_grad=True)
        total_loss(l_v, l_l, 0.0, 1.0).backward()
        assert l_v.grad is None
        assert float(l_l.grad) == 1.0

    def test_negative_weight(self):
        """Test that weights must be non-negative."""
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -1.0, 1.0)


class TestTargets:
    """Test cases for per-row targets."""

    def test_mvlr_targets(self):
        """Test that pretraining supervises masked characters only."""
        seq = TokenSeq(ids=[3, 1, 2], masked=[False, True, False])
        targets, mask = linguistic_targets([seq], 5, Phase.MVLR)
        assert targets[0].tolist() == [3, 1, 2, EOS_ID, EOS_ID]
        assert mask[0].tolist() == [False, True, False, False, False]

    def test_finetune_targets(self):
        """Test that fine-tuning supervises every character and EOS."""
        seqs = [TokenSeq(ids=[3, 1], masked=[False, False]), TokenSeq(ids=[2], masked=[False])]
        targets, mask = linguistic_targets(seqs, 3, Phase.FINETUNE)
        assert mask.tolist() == [[True, True, True], [True, True, False]]
        assert targets[1].tolist() == [2, EOS_ID, EOS_ID]

    def test_label_too_long_for_rows(self):
        """Test a label that does not fit the query rows."""
        with pytest.raises(ShapeMismatch):
            linguistic_targets([TokenSeq(ids=[1, 2, 3], masked=[False] * 3)], 3, Phase.FINETUNE)

    def test_mvlr_loss_report(self):
        """Test the combined loss terms and their report."""
        pixels = torch.zeros(2, 1, 4, 3, requires_grad=True)
        logits = torch.zeros(2, 1, 2, 5, requires_grad=True)
        mask = torch.tensor([[True, False, False, False]])
        terms = mvlr_loss(pixels, logits, torch.ones(1, 4, 3), mask, torch.tensor([[1, 0]]),
                          torch.tensor([[True, True]]), 1.0, 1.0)
        report = terms.report()
        assert report.l_v == pytest.approx(1.0)
        assert report.l_l == pytest.approx(math.log(5))
        assert report.total == pytest.approx(1.0 + math.log(5))
        assert report.masked_pixels == 3 and report.target_tokens == 2
        terms.total.backward()
        assert pixels.grad is not None
