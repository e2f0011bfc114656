import math

import numpy as np
import pytest

from tipsfuse import tensor as T
from tipsfuse.heads import (
    HazardHead,
    PpgHead,
    make_time_bins,
    nll_loss,
    ppg_loss,
    predicted_post,
    risk_score,
    risk_tensor,
)
from tipsfuse.tensor import Tensor


def test_time_bins_quartiles():
    times = [4, 8, 12, 16, 20, 24, 28, 32]
    bins = make_time_bins(times, [0] * 8, 4)
    np.testing.assert_allclose(bins.cuts, [11, 18, 25])
    assert bins.n == 4
    assert bins.label(3).item() == 1 and bins.label(40).item() == 4
    assert bins.label(11).item() == 2  # a time on a cut falls in the later bin


def test_time_bins_ignore_censored_and_need_enough_events():
    bins = make_time_bins([1, 2, 3, 4, 100], [0, 0, 0, 0, 1], 4)
    assert bins.cuts.max() < 100
    with pytest.raises(ValueError):
        make_time_bins([1, 2, 3], [0, 0, 0], 4)


def test_hazard_head_zero_weights():
    head = HazardHead(10, 4, np.random.default_rng(0), 8, 4)
    head.zero_()
    np.testing.assert_array_equal(head(Tensor(np.ones((1, 10)))).data, np.full((1, 4), 0.5))


def test_hazard_head_hand_chain():
    rng = np.random.default_rng(1)
    head = HazardHead(6, 3, rng, 5, 4)
    for p in head.parameters():
        p.data[...] = rng.normal(size=p.data.shape)
    x = rng.normal(size=(1, 6))
    a = np.maximum(x @ head.fc1.weight.data + head.fc1.bias.data, 0)
    b = np.maximum(a @ head.fc2.weight.data + head.fc2.bias.data, 0)
    want = 1 / (1 + np.exp(-(b @ head.out.weight.data + head.out.bias.data)))
    np.testing.assert_allclose(head(Tensor(x)).data, want, rtol=1e-13)


def test_ppg_head_zero_weights_and_hand_chain():
    rng = np.random.default_rng(2)
    head = PpgHead(6, 2, rng, 5, 4, 3, bound=50.0)
    head.zero_()
    assert head(Tensor(np.ones((1, 6))), np.ones((1, 2))).item() == 0.0
    for p in head.parameters():
        p.data[...] = rng.normal(size=p.data.shape) * 0.3
    x, pr = rng.normal(size=(1, 6)), rng.random((1, 2))
    main = np.maximum(np.maximum(x @ head.fc1.weight.data + head.fc1.bias.data, 0) @ head.fc2.weight.data + head.fc2.bias.data, 0)
    side = np.maximum(pr @ head.sub.weight.data + head.sub.bias.data, 0)
    want = 50 * np.tanh(np.hstack([main, side]) @ head.out.weight.data + head.out.bias.data)
    np.testing.assert_allclose(head(Tensor(x), pr).data, want, rtol=1e-13)
    with pytest.raises(ValueError, match="pressure"):
        head(Tensor(x), None)


@pytest.mark.parametrize("c", [0, 1])
def test_nll_half_hazards_is_ln2(c):
    assert abs(nll_loss(Tensor([[0.5, 0.5]]), 1, c).item() - math.log(2)) < 1e-9


def test_nll_censored_early_and_safe_tends_to_zero():
    assert nll_loss(Tensor([[1e-12, 0.5]]), 1, 1).item() < 1e-11


def test_nll_label_range():
    with pytest.raises(ValueError):
        nll_loss(Tensor([[0.5, 0.5]]), 3, 0)


def test_nll_minimized_by_event_in_its_bin():
    logits = Tensor(np.zeros((1, 4)), requires_grad=True)
    opt = T.Adam([logits], lr=0.1, weight_decay=0.0)
    for _ in range(400):
        with T.Tape() as tape:
            loss = nll_loss(T.sigmoid(logits), 3, 0)
        opt.step(tape.backward(loss, [logits]))
    zz = 1 / (1 + np.exp(-logits.data[0]))
    assert zz[2] > 0.95 and zz[0] < 0.05 and zz[1] < 0.05


def test_risk_fixtures():
    assert risk_score([[0.5, 0.5]]) == -0.75
    assert risk_score(np.zeros(4)) == -4.0
    assert risk_score(np.ones(4)) == 0.0
    assert risk_tensor(Tensor([[0.5, 0.5]])).item() == -0.75


def test_risk_is_monotone_in_every_hazard():
    rng = np.random.default_rng(0)
    z = rng.random(4) * 0.9
    base = risk_score(z)
    for j in range(4):
        bumped = z.copy()
        bumped[j] += 0.05
        assert risk_score(bumped) > base


def test_ppg_loss_and_identity():
    assert ppg_loss(Tensor([[-10.0]]), 20.0, 10.0).item() == 0.0
    assert ppg_loss(Tensor([[-8.0]]), 20.0, 10.0).item() == 4.0
    assert predicted_post(Tensor([[-7.25]]), 21.5) == 21.5 - 7.25
