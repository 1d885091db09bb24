import itertools
import math

import numpy as np
import pytest

from mseb import losses, tensorcore as tc
from mseb.errors import DimensionError, UnsupportedConfigError

from _oracles import check_gradients


def _head_from_cos(cos_true, cos_other, s, a):
    """Head + embedding arranged so the cosines are exactly as requested."""
    d = tc.tensor([1.0, 0.0], dtype=np.float64)
    w = np.array([[cos_true, cos_other], [math.sqrt(1 - cos_true**2), math.sqrt(1 - cos_other**2)]])
    head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=s, margin=a)
    return d, head


def aam_oracle(cos_true, cos_others, s, a):
    """Independent scalar evaluation of the AAM-softmax formula."""
    num = math.exp(s * (cos_true - a))
    den = num + sum(math.exp(s * c) for c in cos_others)
    return -math.log(num / den)


def test_aam_analytic_case():
    d, head = _head_from_cos(1.0, 0.0, s=1.0, a=0.0)
    out = losses.aam_loss(d, 0, head)
    assert out.item() == pytest.approx(0.3132616875182228, abs=1e-9)


def test_aam_derived_case():
    # frozen from the independent oracle: -log(e^1.6 / (e^1.6 + 1))
    d, head = _head_from_cos(0.9, 0.0, s=2.0, a=0.1)
    out = losses.aam_loss(d, 0, head)
    assert out.item() == pytest.approx(0.18390074088833885, abs=1e-9)
    assert out.item() == pytest.approx(aam_oracle(0.9, [0.0], 2.0, 0.1), abs=1e-12)


def test_aam_margin_monotonicity():
    d, head_m = _head_from_cos(0.8, 0.1, s=4.0, a=0.2)
    _, head_0 = _head_from_cos(0.8, 0.1, s=4.0, a=0.0)
    assert losses.aam_loss(d, 0, head_m).item() > losses.aam_loss(d, 0, head_0).item()


def test_aam_zero_margin_equals_softmax_cross_entropy():
    """With a = 0 the loss is plain cross-entropy on s-scaled cosines."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        e, c = 6, 5
        d = rng.normal(size=e)
        w = rng.normal(size=(e, c))
        label = int(rng.integers(c))
        s = float(rng.uniform(1.0, 20.0))
        head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=s, margin=0.0)
        out = losses.aam_loss(tc.tensor(d, dtype=np.float64), label, head).item()
        dn = d / np.linalg.norm(d)
        wn = w / np.linalg.norm(w, axis=0)
        z = s * (dn @ wn)
        ce = -(z[label] - np.log(np.sum(np.exp(z))))
        assert abs(out - ce) < 1e-6


def test_aam_invalid_label():
    d, head = _head_from_cos(0.5, 0.0, s=2.0, a=0.1)
    with pytest.raises(DimensionError):
        losses.aam_loss(d, 2, head)
    with pytest.raises(DimensionError):
        losses.aam_loss(d, -1, head)


def test_aam_head_validation():
    with pytest.raises(ValueError):
        losses.AamHead(tc.tensor(np.ones((4, 3))), scale=0.5)
    with pytest.raises(ValueError):
        losses.AamHead(tc.tensor(np.ones((4, 3))), margin=-0.1)


@pytest.mark.parametrize("seed", range(10))
def test_aam_gradients(seed):
    rng = np.random.default_rng(500 + seed)
    d = rng.normal(size=5) + 0.1
    w = rng.normal(size=(5, 4))
    label = int(rng.integers(4))

    def build(arrays, dtype):
        td = tc.parameter(arrays[0], dtype=dtype)
        tw = tc.parameter(arrays[1], dtype=dtype)
        head = losses.AamHead(tw, scale=8.0, margin=0.15)
        loss = losses.aam_loss(td, label, head).value
        if loss.requires_grad:
            tc.backward(loss)
        return {"loss": loss, "params": [td, tw]}

    check_gradients(build, [d, w])


# ---------------------------------------------------------------------------
# pit_assign
# ---------------------------------------------------------------------------

def _assign_oracle(cost):
    """Independent recursive brute force (no itertools)."""
    k = len(cost)

    def rec(row, used):
        if row == k:
            return 0.0, ()
        best = None
        for j in range(k):
            if j in used:
                continue
            sub, tail = rec(row + 1, used | {j})
            total = cost[row][j] + sub
            cand = (total, (j,) + tail)
            if best is None or cand[0] < best[0]:
                best = cand
        return best

    total, perm = rec(0, frozenset())
    return perm, total


def test_pit_assign_identity_zero():
    perm, total = losses.pit_assign([[0.0, 1.0], [1.0, 0.0]])
    assert perm == (0, 1)
    assert total == 0.0


def test_pit_assign_derived_case():
    perm, total = losses.pit_assign([[2.0, 1.0], [3.0, 0.5]])
    assert perm == (0, 1)
    assert total == pytest.approx(2.5)
    # swap costs 1 + 3 = 4, confirmed by the independent oracle
    operm, ototal = _assign_oracle([[2.0, 1.0], [3.0, 0.5]])
    assert operm == perm and ototal == pytest.approx(total)


def test_pit_assign_tie_lexicographic():
    perm, total = losses.pit_assign([[1.0, 1.0], [1.0, 1.0]])
    assert perm == (0, 1)
    perm3, _ = losses.pit_assign(np.ones((3, 3)))
    assert perm3 == (0, 1, 2)


def test_pit_assign_matches_enumeration_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        k = int(rng.integers(2, 4))
        cost = rng.normal(size=(k, k))
        perm, total = losses.pit_assign(cost)
        ot_perm, ot_total = _assign_oracle(cost.tolist())
        assert perm == ot_perm
        assert total == pytest.approx(ot_total, abs=1e-12)


def test_pit_assign_rejects_k4_and_nonfinite():
    with pytest.raises(UnsupportedConfigError):
        losses.pit_assign(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        losses.pit_assign([[np.nan, 0.0], [0.0, 1.0]])
    with pytest.raises(DimensionError):
        losses.pit_assign(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# teacher-student losses
# ---------------------------------------------------------------------------

def test_ts_loss_k1_reduces_to_mean_squared_distance():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(1, 4))
    frames = rng.normal(size=(6, 1, 4))
    out = losses.ts_loss_tpit(target, tc.tensor(frames, dtype=np.float64))
    expected = np.mean([np.sum((target[0] - frames[t, 0]) ** 2) for t in range(6)])
    assert out.item() == pytest.approx(expected, rel=1e-12)


def test_ts_loss_zero_when_aligned():
    targets = np.array([[1.0, 0.0], [0.0, 1.0]])
    frames = np.tile(targets[::-1], (5, 1, 1))  # constant fixed permutation
    for fn in (losses.ts_loss_tpit, losses.ts_loss_upit):
        out = fn(targets, tc.tensor(frames, dtype=np.float64))
        assert out.item() == 0.0


def _swapped_frame_instance():
    targets = np.array([[1.0, 0.0], [0.0, 1.0]])
    frames = np.array(
        [
            [[0.0, 1.0], [1.0, 0.0]],  # frame 0: slots swapped
            [[1.0, 0.0], [0.0, 1.0]],  # frame 1: slots aligned
        ]
    )
    return targets, frames


def test_ts_loss_worked_example_tpit_zero_upit_one():
    targets, frames = _swapped_frame_instance()
    tpit = losses.ts_loss_tpit(targets, tc.tensor(frames, dtype=np.float64))
    upit = losses.ts_loss_upit(targets, tc.tensor(frames, dtype=np.float64))
    assert tpit.item() == 0.0
    assert upit.item() == pytest.approx(1.0)  # 4 / (K*T) = 4/4
    assert tpit.permutations == [(1, 0), (0, 1)]
    assert upit.permutations == (0, 1)  # tie between both perms -> lexicographic


def test_ts_loss_tpit_never_exceeds_upit():
    rng = np.random.default_rng(2)
    for _ in range(500):
        k = int(rng.integers(1, 4))
        t = int(rng.integers(1, 8))
        e = int(rng.integers(2, 6))
        targets = rng.normal(size=(k, e))
        frames = rng.normal(size=(t, k, e))
        ft = tc.tensor(frames, dtype=np.float64)
        tpit = losses.ts_loss_tpit(targets, ft).item()
        upit = losses.ts_loss_upit(targets, ft).item()
        assert 0.0 <= tpit <= upit  # exact, not approximate


def test_ts_loss_invariant_to_consistent_target_permutation():
    rng = np.random.default_rng(3)
    targets = rng.normal(size=(3, 4))
    frames = rng.normal(size=(7, 3, 4))
    ft = tc.tensor(frames, dtype=np.float64)
    for fn in (losses.ts_loss_tpit, losses.ts_loss_upit):
        base = fn(targets, ft).item()
        for perm in itertools.permutations(range(3)):
            assert fn(targets[list(perm)], ft).item() == pytest.approx(base, rel=1e-12)


def test_ts_loss_k_mismatch():
    targets = np.zeros((2, 4))
    frames = tc.tensor(np.zeros((5, 3, 4)))
    with pytest.raises(DimensionError):
        losses.ts_loss_tpit(targets, frames)


def test_ts_loss_accepts_embedding_objects():
    from mseb.model import Embedding

    targets = [Embedding(np.array([1.0, 0.0])), Embedding(np.array([0.0, 1.0]))]
    frames = tc.tensor(np.zeros((3, 2, 2)), dtype=np.float64)
    out = losses.ts_loss_tpit(targets, frames)
    # per frame: sum_k ||d_k - 0||^2 = 2, so 3*2 / (K*T = 6) = 1
    assert out.item() == pytest.approx(1.0)


def _far_from_ties(targets, frames, per_frame, gap=5e-2):
    """True when every assignment decision clears the tie region by a margin."""
    k = targets.shape[0]
    perms = list(itertools.permutations(range(k)))
    cost = np.array(
        [[[np.sum((targets[kk] - frames[t, j]) ** 2) for j in range(k)] for kk in range(k)] for t in range(frames.shape[0])]
    )
    totals = np.stack([cost[:, np.arange(k), p].sum(axis=1) for p in perms], axis=1)
    if per_frame:
        sorted_t = np.sort(totals, axis=1)
        return bool(np.all(sorted_t[:, 1] - sorted_t[:, 0] > gap)) if totals.shape[1] > 1 else True
    grand = np.sort(totals.sum(axis=0))
    return bool(grand[1] - grand[0] > gap) if len(grand) > 1 else True


@pytest.mark.parametrize("per_frame", [True, False])
@pytest.mark.parametrize("seed", range(12))
def test_ts_loss_gradients(per_frame, seed):
    rng = np.random.default_rng(700 + seed)
    k = 2 if seed % 2 == 0 else 3
    t, e = 5, 3
    while True:
        targets = rng.normal(size=(k, e))
        frames = rng.normal(size=(t, k, e))
        if _far_from_ties(targets, frames, per_frame):
            break
    fn = losses.ts_loss_tpit if per_frame else losses.ts_loss_upit

    def build(arrays, dtype):
        ft = tc.parameter(arrays[0], dtype=dtype)
        out = fn(targets, ft)
        if out.value.requires_grad:
            tc.backward(out.value)
        return {"loss": out.value, "params": [ft]}

    check_gradients(build, [frames])


def test_ts_loss_gradient_with_frame_varying_argmin():
    """Gradient check on an instance whose selected permutation flips mid-utterance."""
    targets, frames = _swapped_frame_instance()
    rng = np.random.default_rng(9)
    frames = frames + 0.05 * rng.normal(size=frames.shape)
    out = losses.ts_loss_tpit(targets, tc.tensor(frames, dtype=np.float64))
    assert len(set(out.permutations)) == 2  # both permutations actually occur

    def build(arrays, dtype):
        ft = tc.parameter(arrays[0], dtype=dtype)
        lv = losses.ts_loss_tpit(targets, ft)
        if lv.value.requires_grad:
            tc.backward(lv.value)
        return {"loss": lv.value, "params": [ft]}

    check_gradients(build, [frames])


def test_ts_loss_utterance_flag():
    rng = np.random.default_rng(4)
    targets = rng.normal(size=(2, 3))
    pooled = rng.normal(size=(2, 3))
    out = losses.ts_loss_utterance(targets, tc.tensor(pooled, dtype=np.float64))
    best = min(
        sum(np.sum((targets[k] - pooled[p[k]]) ** 2) for k in range(2))
        for p in itertools.permutations(range(2))
    )
    assert out.item() == pytest.approx(best / 2, rel=1e-12)


# ---------------------------------------------------------------------------
# classification-from-scratch baseline loss
# ---------------------------------------------------------------------------

def test_aam_pit_k1_equals_plain_aam():
    rng = np.random.default_rng(5)
    e, c = 4, 3
    emb = rng.normal(size=(1, e))
    w = rng.normal(size=(e, c))
    head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=5.0, margin=0.1)
    pooled = losses.aam_pit_loss(tc.tensor(emb, dtype=np.float64), [1], head)
    plain = losses.aam_loss(tc.tensor(emb[0], dtype=np.float64), 1, head)
    assert pooled.item() == pytest.approx(plain.item(), rel=1e-12)
    framed = losses.aam_pit_loss(tc.tensor(emb[None, 0:1, :], dtype=np.float64), [1], head)
    assert framed.item() == pytest.approx(plain.item(), rel=1e-9)


def test_aam_pit_prototype_slots_match_and_beat_swap():
    rng = np.random.default_rng(6)
    e, c = 6, 4
    w = rng.normal(size=(e, c))
    head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=6.0, margin=0.1)
    labels = [0, 1]
    embs = np.stack([w[:, 0], w[:, 1]])  # slot j holds prototype of label j
    out = losses.aam_pit_loss(tc.tensor(embs, dtype=np.float64), labels, head)
    assert out.permutations == (0, 1)
    wn = w / np.linalg.norm(w, axis=0)
    cos = (embs / np.linalg.norm(embs, axis=1, keepdims=True)) @ wn

    def slot_cost(j, label):
        return aam_oracle(cos[j, label], np.delete(cos[j], label), 6.0, 0.1)

    matched = (slot_cost(0, 0) + slot_cost(1, 1)) / 2
    swapped = (slot_cost(0, 1) + slot_cost(1, 0)) / 2
    assert out.item() == pytest.approx(matched, rel=1e-9)
    assert matched < swapped


def test_aam_pit_frames_match_looped_aam_oracle():
    """Fused frame-level cost equals per-frame aam_loss composition."""
    rng = np.random.default_rng(7)
    t, k, e, c = 4, 2, 5, 6
    frames = rng.normal(size=(t, k, e))
    w = rng.normal(size=(e, c))
    labels = [2, 4]
    head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=4.0, margin=0.2)
    out = losses.aam_pit_loss(tc.tensor(frames, dtype=np.float64), labels, head, permutation="tpit")
    total = 0.0
    for tt in range(t):
        cost = np.zeros((k, k))
        for kk in range(k):
            for j in range(k):
                cost[kk, j] = losses.aam_loss(tc.tensor(frames[tt, j], dtype=np.float64), labels[kk], head).item()
        _, best = losses.pit_assign(cost)
        total += best
    assert out.item() == pytest.approx(total / (k * t), rel=1e-9)


def test_aam_pit_tpit_never_exceeds_upit():
    rng = np.random.default_rng(8)
    for _ in range(50):
        t, k, e, c = int(rng.integers(2, 6)), 2, 4, 5
        frames = rng.normal(size=(t, k, e))
        w = rng.normal(size=(e, c))
        labels = list(rng.choice(c, size=k, replace=False))
        head = losses.AamHead(tc.tensor(w, dtype=np.float64), scale=3.0, margin=0.1)
        ft = tc.tensor(frames, dtype=np.float64)
        tpit = losses.aam_pit_loss(ft, labels, head, "tpit").item()
        upit = losses.aam_pit_loss(ft, labels, head, "upit").item()
        assert tpit <= upit


@pytest.mark.parametrize("permutation", ["tpit", "upit"])
@pytest.mark.parametrize("seed", range(6))
def test_aam_pit_gradients(permutation, seed):
    rng = np.random.default_rng(900 + seed)
    t, k, e, c = 4, 2, 4, 5
    frames = rng.normal(size=(t, k, e))
    w = rng.normal(size=(e, c))
    labels = [1, 3]

    def build(arrays, dtype):
        ft = tc.parameter(arrays[0], dtype=dtype)
        tw = tc.parameter(arrays[1], dtype=dtype)
        head = losses.AamHead(tw, scale=4.0, margin=0.1)
        lv = losses.aam_pit_loss(ft, labels, head, permutation)
        if lv.value.requires_grad:
            tc.backward(lv.value)
        return {"loss": lv.value, "params": [ft, tw]}

    check_gradients(build, [frames, w])


def test_aam_pit_label_errors():
    head = losses.AamHead(tc.tensor(np.ones((4, 3)) + 0.1 * np.eye(4, 3)), scale=2.0, margin=0.0)
    frames = tc.tensor(np.random.default_rng(0).normal(size=(3, 2, 4)))
    with pytest.raises(DimensionError):
        losses.aam_pit_loss(frames, [0], head)
    with pytest.raises(DimensionError):
        losses.aam_pit_loss(frames, [0, 5], head)
    with pytest.raises(ValueError):
        losses.aam_pit_loss(frames, [0, 1], head, permutation="x")
