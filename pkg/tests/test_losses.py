import itertools

import numpy as np
import pytest
import torch

from msdsnet.losses import LossWeights, composite_loss


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


def test_hand_arithmetic():
    final_pred, final_label = _t([[[[1.0, 0.0]]]]), _t([[[[0.0, 0.0]]]])          # MSE 0.5
    ds_preds = {(1, 1): _t([[[[1.0, 1.0]]]]), (1, 2): _t([[[[1.0, 1.0]]]])}       # MSE 1 each
    ds_labels = {1: _t([[[[0.0, 0.0]]]])}
    out = composite_loss(final_pred, final_label, ds_preds, ds_labels, LossWeights(alpha=0.1))
    assert float(out.final_term) == 0.5
    assert float(out.total) == pytest.approx(0.7, abs=1e-15)
    assert {k: float(v) for k, v in out.ds_terms.items()} == {(1, 1): 1.0, (1, 2): 1.0}


def _random_case(seed, stages=3, scales=(1, 2, 3)):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.rand(*s, generator=g, dtype=torch.float64)
    final_pred, final_label = r(2, 3, 8, 8), r(2, 3, 8, 8)
    ds_labels = {s: r(2, 3, 8 // 2 ** (s - 1), 8 // 2 ** (s - 1)) for s in scales}
    ds_preds = {(s, m): r(*ds_labels[s].shape) for s in scales for m in range(1, stages + 1)}
    return final_pred, final_label, ds_preds, ds_labels


def _scalar_mse(a, b):
    a, b = a.numpy().ravel().tolist(), b.numpy().ravel().tolist()
    acc = 0.0
    for x, y in zip(a, b):
        acc += (x - y) * (x - y)
    return acc / len(a)


@pytest.mark.parametrize("seed", range(5))
def test_matches_elementwise_loop(seed):
    fp, fl, dp, dl = _random_case(seed)
    w = LossWeights(alpha=0.3, beta=[1.0, 0.5, 2.0], gamma=[1.0, 0.25, 3.0])
    expected = _scalar_mse(fp, fl)
    for (s, m), pred in dp.items():
        expected += 0.3 * w.beta[m - 1] * w.gamma[s - 1] * _scalar_mse(pred, dl[s])
    got = composite_loss(fp, fl, dp, dl, w)
    assert float(got.total) == pytest.approx(expected, abs=1e-12)


def test_alpha_zero_is_final_term_exactly():
    fp, fl, dp, dl = _random_case(1)
    out = composite_loss(fp, fl, dp, dl, LossWeights(alpha=0.0))
    assert float(out.total) == float(out.final_term)
    assert float(out.final_term) == float(torch.mean((fp - fl) ** 2))


def test_affine_in_alpha():
    fp, fl, dp, dl = _random_case(2)
    slope = sum(float(v) for v in composite_loss(fp, fl, dp, dl).ds_terms.values())
    base = float(composite_loss(fp, fl, dp, dl, LossWeights(0.0)).total)
    for alpha in (0.1, 0.5, 1.0, 2.0):
        total = float(composite_loss(fp, fl, dp, dl, LossWeights(alpha)).total)
        assert total == pytest.approx(base + alpha * slope, abs=1e-12)


def test_nonnegative_and_zero_iff_identical():
    fp, fl, dp, dl = _random_case(3)
    assert float(composite_loss(fp, fl, dp, dl).total) > 0
    same = {k: dl[k[0]].clone() for k in dp}
    assert float(composite_loss(fl.clone(), fl, same, dl).total) == 0.0
    for key in itertools.islice(same, 1):
        bumped = dict(same)
        bumped[key] = same[key] + 1e-3
        assert float(composite_loss(fl.clone(), fl, bumped, dl).total) > 0


def test_shape_mismatch_and_missing_label():
    fp, fl, dp, dl = _random_case(4)
    with pytest.raises(ValueError, match="final heatmap"):
        composite_loss(fp[:, :2], fl, dp, dl)
    with pytest.raises(KeyError):
        composite_loss(fp, fl, dp, {1: dl[1]})
    bad = dict(dp)
    bad[(2, 1)] = dp[(2, 1)][..., :3]
    with pytest.raises(ValueError, match="s=2, m=1"):
        composite_loss(fp, fl, bad, dl)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        LossWeights(gamma=[1, -1])


def test_gradients_flow_to_all_terms():
    fp, fl, dp, dl = _random_case(5)
    fp.requires_grad_(True)
    for v in dp.values():
        v.requires_grad_(True)
    composite_loss(fp, fl, dp, dl).total.backward()
    assert fp.grad is not None and all(v.grad is not None for v in dp.values())
    expected = 0.1 * 2 * (dp[(2, 1)] - dl[2]) / dl[2].numel()
    np.testing.assert_allclose(dp[(2, 1)].grad.numpy(), expected.detach().numpy(), rtol=1e-12)
