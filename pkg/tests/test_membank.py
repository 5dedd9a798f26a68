"""Memory bank: acceptance/eviction/retrieval probabilities, capacity, balance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailssl.membank import FeatureRecord, MemoryBank, stream_entropy

RNG = np.random.default_rng


def rec(label, step=0, view="strong"):
    return FeatureRecord(np.zeros(2), label, 0.99, step, view)


def filled_bank(counts, capacity=None, beta=1.0):
    bank = MemoryBank(capacity or (sum(counts) + 10), len(counts), beta)
    step = 0
    for k, c in enumerate(counts):
        for _ in range(c):
            bank.per_class[k].append(rec(k, step))
            step += 1
    return bank


# ---------------------------------------------------------------------------
# enqueue
# ---------------------------------------------------------------------------


def test_enqueue_always_accepts_empty_or_singleton_class():
    for c, beta in [(0, 0.0), (0, 3.0), (1, 0.5), (1, 7.0)]:
        bank = filled_bank([c, 5], beta=beta)
        rng = RNG(0)
        for _ in range(50):
            assert bank.enqueue(rec(0), rng)
            bank.per_class[0].pop()  # keep C_0 fixed at c


def test_enqueue_acceptance_rate_quarter_monte_carlo():
    # C_k = 4, beta = 1 -> P_in = 0.25; 100k trials within +-0.01
    bank = filled_bank([4], beta=1.0)
    rng = RNG(1)
    hits = 0
    trials = 100_000
    for _ in range(trials):
        if bank.enqueue(rec(0), rng):
            hits += 1
            bank.per_class[0].pop()
    assert abs(hits / trials - 0.25) < 0.01


def test_enqueue_beta_zero_always_accepts():
    bank = filled_bank([50, 3], beta=0.0)
    rng = RNG(2)
    assert all(bank.enqueue(rec(0), rng) for _ in range(200))


def test_enqueue_rejects_bad_label():
    bank = MemoryBank(4, 2, 1.0)
    with pytest.raises(ValueError):
        bank.enqueue(rec(2), RNG(3))


def test_enqueue_at_capacity_keeps_total_constant():
    bank = filled_bank([3, 3], capacity=6, beta=0.0)
    before = len(bank)
    assert bank.enqueue(rec(0, step=99), RNG(4))
    assert len(bank) == before == 6


# ---------------------------------------------------------------------------
# dequeue
# ---------------------------------------------------------------------------


def test_dequeue_only_nonzero_weight_class_is_victim():
    # C = (10, 1), beta=1: weights (0.9, 0) -> class 0 always evicted
    for seed in range(20):
        bank = filled_bank([10, 1], beta=1.0)
        victim = bank.dequeue(RNG(seed))
        assert victim.pseudo_label == 0


def test_dequeue_removes_oldest_within_class():
    bank = filled_bank([5, 1], beta=1.0)
    steps = [r.step for r in bank.per_class[0]]
    victim = bank.dequeue(RNG(5))
    assert victim.step == min(steps)


def test_dequeue_uniform_fallback_over_equal_classes_monte_carlo():
    # beta=0 with counts (5, 5): all eviction weights vanish; fallback is
    # uniform over stored records, so each class evicts at rate 1/2.
    hits = 0
    trials = 100_000
    rng = RNG(6)
    bank = filled_bank([5, 5], beta=0.0)
    for _ in range(trials):
        victim = bank.dequeue(rng)
        hits += victim.pseudo_label == 0
        bank.per_class[victim.pseudo_label].append(rec(victim.pseudo_label, step=0))
    assert abs(hits / trials - 0.5) < 0.02


def test_dequeue_weighted_victim_frequencies_monte_carlo():
    # C = (100, 10), beta=1 -> normalized weights (0.99, 0.9)/1.89
    want0 = 0.99 / 1.89  # 0.523809..., arbitrary-precision normalization
    hits = 0
    trials = 100_000
    rng = RNG(7)
    bank = filled_bank([100, 10], beta=1.0)
    for _ in range(trials):
        victim = bank.dequeue(rng)
        hits += victim.pseudo_label == 0
        bank.per_class[victim.pseudo_label].append(rec(victim.pseudo_label, step=0))
    assert abs(hits / trials - want0) < 0.01


def test_dequeue_empty_bank_raises():
    with pytest.raises(ValueError):
        MemoryBank(4, 2, 1.0).dequeue(RNG(8))


# ---------------------------------------------------------------------------
# get
# ---------------------------------------------------------------------------


def test_get_lambda_zero_is_uniform_over_nonempty_classes():
    bank = filled_bank([50, 1, 7])
    est = np.array([1000, 10, 1])
    picks = bank.get(est, 100_000, 0.0, RNG(9))
    freq = np.bincount([r.pseudo_label for r in picks], minlength=3) / len(picks)
    assert np.all(np.abs(freq - 1 / 3) < 0.02)


def test_get_reversed_sampling_frequencies_monte_carlo():
    # M = (100, 10), lambda=1 -> probabilities (1/11, 10/11)
    bank = filled_bank([5, 5])
    picks = bank.get(np.array([100, 10]), 100_000, 1.0, RNG(10))
    freq = np.mean([r.pseudo_label == 0 for r in picks])
    assert abs(freq - 1 / 11) < 0.01


def test_get_restricted_to_nonempty_classes():
    bank = filled_bank([0, 0, 0, 6])
    picks = bank.get(np.array([1000, 1, 1, 500]), 500, 2.0, RNG(11))
    assert len(picks) == 500
    assert all(r.pseudo_label == 3 for r in picks)


def test_get_empty_bank_returns_empty():
    bank = MemoryBank(4, 3, 1.0)
    assert bank.get(np.ones(3), 10, 1.0, RNG(12)) == []


def test_get_rejects_unclamped_counts():
    bank = filled_bank([2, 2])
    with pytest.raises(ValueError):
        bank.get(np.array([0, 5]), 4, 1.0, RNG(13))


# ---------------------------------------------------------------------------
# counts and entropy
# ---------------------------------------------------------------------------


def test_counts_fresh_bank_is_zero():
    assert MemoryBank(8, 5, 1.0).counts().tolist() == [0] * 5


def test_counts_one_hot_after_single_enqueue():
    bank = MemoryBank(8, 5, 1.0)
    bank.enqueue(rec(2), RNG(14))
    assert bank.counts().tolist() == [0, 0, 1, 0, 0]


def test_counts_match_brute_force_recount_after_op_sequence():
    bank = MemoryBank(32, 6, 1.0)
    rng = RNG(15)
    for step in range(2000):
        op = rng.random()
        if op < 0.7 or len(bank) == 0:
            bank.enqueue(rec(int(rng.integers(6)), step), rng)
        elif op < 0.85:
            bank.dequeue(rng)
        else:
            bank.get(np.maximum(rng.integers(1, 50, size=6), 1), 5, 1.0, rng)
        recount = np.zeros(6, dtype=int)
        for k in range(6):
            for r in bank.per_class[k]:
                assert r.pseudo_label == k
                recount[k] += 1
        assert np.array_equal(bank.counts(), recount)


def test_balance_entropy_uniform_is_one():
    assert filled_bank([7, 7, 7, 7]).balance_entropy() == pytest.approx(1.0, abs=1e-12)


def test_balance_entropy_single_class_is_zero():
    assert filled_bank([9, 0, 0]).balance_entropy() == pytest.approx(0.0, abs=1e-12)


def test_balance_entropy_three_one_split():
    # (-0.75 ln 0.75 - 0.25 ln 0.25)/ln 2, arbitrary-precision value
    assert filled_bank([3, 1]).balance_entropy() == pytest.approx(0.8112781244591328, abs=1e-12)


def test_balance_entropy_empty_bank_raises():
    with pytest.raises(ValueError):
        MemoryBank(4, 2, 1.0).balance_entropy()


# ---------------------------------------------------------------------------
# Properties
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    capacity=st.integers(1, 12),
    beta=st.floats(0.0, 3.0, allow_nan=False),
    ops=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2)), max_size=60),
    seed=st.integers(0, 2**31),
)
def test_capacity_never_exceeded_and_dequeue_decrements(capacity, beta, ops, seed):
    bank = MemoryBank(capacity, 4, beta)
    rng = RNG(seed)
    for step, (label, kind) in enumerate(ops):
        before = len(bank)
        if kind == 0 or before == 0:
            accepted = bank.enqueue(rec(label, step), rng)
            if before >= capacity:
                assert len(bank) == before if accepted else before
            elif accepted:
                assert len(bank) == before + 1
        elif kind == 1:
            bank.dequeue(rng)
            assert len(bank) == before - 1
        else:
            bank.get(np.ones(4), 3, 1.0, rng)
            assert len(bank) == before
        assert len(bank) <= capacity


def test_acceptance_monotone_in_count_and_eviction_weight_monotone():
    beta = 1.5
    p_in = [1.0 if c == 0 else c ** (-beta) for c in range(1, 30)]
    p_out = [1.0 - c ** (-beta) for c in range(1, 30)]
    assert all(a >= b for a, b in zip(p_in, p_in[1:]))
    assert all(a <= b for a, b in zip(p_out, p_out[1:]))


def simulate_stream(beta, seed, num_classes=10, capacity=256, n_arrivals=20_000, gamma=100.0):
    """Feed a fixed long-tailed confident stream through a bank; return (bank, stream entropy)."""
    mu = -(np.arange(num_classes)) / (num_classes - 1)
    p = gamma**mu
    p /= p.sum()
    rng = RNG(seed)
    labels = rng.choice(num_classes, p=p, size=n_arrivals)
    bank = MemoryBank(capacity, num_classes, beta)
    for step, k in enumerate(labels):
        bank.enqueue(rec(int(k), step), rng)
    return bank, stream_entropy(np.bincount(labels, minlength=num_classes))


def test_steady_state_beta_zero_tracks_stream_entropy():
    bank, s_entropy = simulate_stream(beta=0.0, seed=1)
    assert abs(bank.balance_entropy() - s_entropy) <= 0.05


def test_steady_state_beta_one_rebalances_above_stream():
    """beta=1 must push the bank strictly more balanced than the raw stream.

    A provisional >=0.97 target for this configuration was disconfirmed by
    the pre-registered simulation oracle (the process equilibrium is
    C_k ~ 1 + c*p_k; measured entropy is ~0.74-0.81 at K=10); the
    oracle-confirmed check is the balance improvement plus a floor frozen
    from the oracle runs.
    """
    bank1, s_entropy = simulate_stream(beta=1.0, seed=1)
    bank0, _ = simulate_stream(beta=0.0, seed=1)
    e1, e0 = bank1.balance_entropy(), bank0.balance_entropy()
    assert e1 > e0
    assert e1 >= 0.72  # frozen floor: min over oracle seeds 0..4 was 0.737
