import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nltrack.geometry import BBox
from nltrack.memory import (ALLOWED_EDGES, Exemplar, Memory, MMMConfig, ScoreHistory, TrackState,
                            maintain_memory, rnn_should_admit, step_state, update_weights)
from oracles import reverse_nn_empty

S, L, C, R = TrackState.STABLE, TrackState.LOST, TrackState.CONTINUED_LOST, TrackState.RESTORING
BOX = BBox(10, 10, 8, 8)


def history(scores):
    h = ScoreHistory()
    for t, s in enumerate(scores, 1):
        h.append(s, t)
    return h


def memory_of(weights, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    mem = Memory(capacity=8)
    for t, w in enumerate(weights, 1):
        mem.add(mem.new_exemplar(rng.normal(size=dim), t, BOX, w))
    return mem


# state machine

def test_transition_examples():
    assert step_state(history([0.1] * 3), S, 0.5, 0.8) is L
    assert step_state(history([0.95] * 5), L, 0.5, 0.8) is S
    assert step_state(history([0.1] * 10), L, 0.4, 0.7) is C


def test_remaining_edges():
    assert step_state(history([0.9] * 5), C, 0.4, 0.7) is R
    assert step_state(history([0.9] * 5), R, 0.4, 0.7) is S
    assert step_state(history([0.1] * 5), R, 0.4, 0.7) is C
    assert step_state(history([0.5] * 10), R, 0.4, 0.7) is R
    assert step_state(history([0.5] * 10), L, 0.4, 0.7) is L


def test_windows_undefined_until_filled():
    # two low scores are not yet a 3-frame average
    assert step_state(history([0.1, 0.1]), S, 0.4, 0.7) is S
    # nine low scores cannot yet demote LOST
    assert step_state(history([0.1] * 9), L, 0.4, 0.7) is L


def test_windows_use_exactly_the_last_n():
    h = history([0.0] * 20 + [0.9] * 5)
    assert h.mean_last(5) == pytest.approx(0.9)
    assert h.mean_last(6) == pytest.approx(0.75)
    assert h.mean_last(26) is None


def test_invalid_thresholds_rejected():
    with pytest.raises(ValueError):
        step_state(history([0.5]), S, 0.7, 0.4)
    with pytest.raises(ValueError):
        MMMConfig(tau2=0.0)
    with pytest.raises(ValueError):
        MMMConfig(tau1=1.0)


LEVELS = (0.1, 0.55, 0.95)  # below tau2, between, above tau3


def walk_all_sequences(levels, max_len, tau2=0.4, tau3=0.7):
    """Every (state, next) edge taken by any score sequence up to ``max_len``, by DFS over prefixes."""
    seen = set()
    h = ScoreHistory(maxlen=max_len + 1)

    def visit(state, depth):
        if depth == max_len:
            return
        for s in levels:
            h.append(s, depth + 1)
            nxt = step_state(h, state, tau2, tau3)
            seen.add((state, nxt))
            visit(nxt, depth + 1)
            h.scores.pop()
            h.frames.pop()

    visit(S, 0)
    return seen


def test_exhaustive_sequences_follow_only_allowed_edges():
    seen = walk_all_sequences(LEVELS, 12)
    assert seen <= ALLOWED_EDGES
    # every edge that fits in 12 frames shows up (RESTORING -> CONTINUED_LOST needs more)
    assert ALLOWED_EDGES - seen == {(R, C)}


def test_every_state_reachable_from_stable():
    reached = set()
    for n in range(1, 21):
        for seq in itertools.product((0.1, 0.95), repeat=min(n, 14)):
            h, state = ScoreHistory(), S
            for t, s in enumerate(seq + (seq[-1],) * (n - len(seq)), 1):
                h.append(s, t)
                state = step_state(h, state, 0.4, 0.7)
                reached.add(state)
        if reached == set(TrackState):
            break
    assert reached == set(TrackState)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60),
       st.floats(0.05, 0.45), st.floats(0.5, 0.95))
def test_fuzzed_transitions_never_forbidden(scores, tau2, tau3):
    h, state = ScoreHistory(), S
    for t, s in enumerate(scores, 1):
        h.append(s, t)
        nxt = step_state(h, state, tau2, tau3)
        assert (state, nxt) not in {(S, C), (S, R), (C, S), (C, L)}
        assert (state, nxt) in ALLOWED_EDGES
        state = nxt


# reverse nearest neighbor admission

def test_rnn_examples():
    assert rnn_should_admit(np.array([5.0, 1.0]), [np.array([0.0, 0.0])])
    mem = [np.array([0.0, 1.0]), np.array([1.0, 0.0])]
    # after normalization the candidate (0.1, 1) sits next to (0, 1)
    assert not rnn_should_admit(np.array([0.1, 1.0]), mem)
    assert rnn_should_admit(np.array([-1.0, -1.0]), mem)


def test_rnn_worked_examples_with_raw_metric():
    mem = Memory(metric="euclidean")
    for t, f in enumerate(([0.0, 0.0], [10.0, 10.0]), 1):
        mem.add(mem.new_exemplar(np.array(f), t, BOX))
    assert not rnn_should_admit(np.array([0.1, 0.0]), mem)
    assert rnn_should_admit(np.array([100.0, 100.0]), mem)
    assert rnn_should_admit(np.array([3.0, 4.0]), [np.array([0.0, 0.0])], metric="euclidean")


def test_unknown_metric_rejected():
    with pytest.raises(ValueError):
        Memory(metric="cosine")


@pytest.mark.parametrize("metric", ["normalized", "euclidean"])
def test_rnn_matches_bruteforce_on_small_memories(metric):
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(0, 7))
        stored = [rng.normal(size=4) for _ in range(n)]
        cand = rng.normal(size=4)
        mem = Memory(capacity=8, metric=metric)
        for t, f in enumerate(stored, 1):
            mem.add(mem.new_exemplar(f, t, BOX))
        expect = reverse_nn_empty(stored, cand, normalize=metric == "normalized")
        assert rnn_should_admit(mem.new_exemplar(cand, 99, BOX), mem) == expect


# weights

def test_update_weight_examples():
    mem = memory_of([1.0])
    update_weights(mem, mem.exemplars[0].id)
    assert mem.exemplars[0].weight == 2.0
    mem = memory_of([9.5])
    update_weights(mem, mem.exemplars[0].id)
    assert mem.exemplars[0].weight == 10.0
    mem = memory_of([1.0, 1.0])
    update_weights(mem, mem.exemplars[0].id)
    assert [ex.weight for ex in mem] == [2.0, pytest.approx(0.8)]


def test_five_losses_reach_zero():
    mem = memory_of([1.0, 1.0])
    for _ in range(5):
        update_weights(mem, mem.exemplars[0].id)
    assert mem.exemplars[1].weight == pytest.approx(0.0, abs=1e-12)


def test_literal_rule_is_selectable():
    mem = memory_of([1.0, 1.0])
    update_weights(mem, mem.exemplars[0].id, MMMConfig(weight_rule="literal"))
    assert [ex.weight for ex in mem] == [pytest.approx(0.8), 2.0]


def test_unknown_best_rejected():
    with pytest.raises(KeyError):
        update_weights(memory_of([1.0]), 42)


@given(st.integers(1, 40))
def test_always_best_weight_is_monotone_until_cap(n):
    mem = memory_of([1.0, 1.0, 1.0])
    last = mem.exemplars[0].weight
    for _ in range(n):
        update_weights(mem, mem.exemplars[0].id)
        w = mem.exemplars[0].weight
        assert last <= w <= 10.0
        last = w


# maintenance

def test_maintenance_skipped_outside_stable():
    mem = memory_of([1.0])
    cand = mem.new_exemplar(np.ones(4), 25, BOX)
    maintain_memory(mem, cand, history([0.999] * 50), L, 25)
    assert len(mem) == 1


def test_maintenance_only_on_period_frames():
    mem = memory_of([1.0])
    cand = mem.new_exemplar(np.ones(4), 24, BOX)
    maintain_memory(mem, cand, history([0.999] * 50), S, 24)
    assert len(mem) == 1


def test_high_window_admits_candidate():
    mem = memory_of([1.0])
    cand = mem.new_exemplar(np.ones(4), 50, BOX)
    maintain_memory(mem, cand, history([0.995] * 50), S, 50)
    assert cand in mem.exemplars


def test_low_window_blocks_admission():
    mem = memory_of([1.0])
    cand = mem.new_exemplar(np.ones(4), 50, BOX)
    maintain_memory(mem, cand, history([0.995] * 49 + [0.4]), S, 50)
    assert cand not in mem.exemplars


def test_short_history_blocks_windowed_gate_but_not_frame_gate():
    mem = memory_of([1.0])
    cand = mem.new_exemplar(np.ones(4), 25, BOX)
    maintain_memory(mem, cand, history([0.999] * 25), S, 25)
    assert cand not in mem.exemplars
    maintain_memory(mem, cand, history([0.999] * 25), S, 25, MMMConfig(admission_mode="frame"))
    assert cand in mem.exemplars


def test_negative_weights_removed():
    mem = memory_of([-0.2, 3.0])
    maintain_memory(mem, None, history([0.5] * 50), S, 25)
    assert [ex.weight for ex in mem] == [3.0]


def test_last_exemplar_never_removed():
    mem = memory_of([-0.4, -0.2])
    maintain_memory(mem, None, history([0.5] * 50), S, 25)
    assert [ex.weight for ex in mem] == [-0.2]


def test_capacity_evicts_lowest_weight():
    rng = np.random.default_rng(3)
    mem = Memory(capacity=2)
    mem.add(mem.new_exemplar(np.array([1.0, 0, 0, 0]), 1, BOX, 5.0))
    mem.add(mem.new_exemplar(np.array([0, 1.0, 0, 0]), 2, BOX, 0.5))
    cand = mem.new_exemplar(np.array([0, 0, 0, 1.0]), 25, BOX)
    maintain_memory(mem, cand, history([0.999] * 50), S, 50, MMMConfig(capacity=2))
    assert [ex.born_at for ex in mem] == [1, 25]
    del rng


def test_frame_index_must_be_positive():
    with pytest.raises(ValueError):
        maintain_memory(memory_of([1.0]), None, history([]), S, 0)


@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 1)), min_size=1, max_size=120))
def test_memory_never_empty_and_within_capacity(events):
    cfg = MMMConfig(capacity=3, maintenance_period=5, admission_window=3)
    rng = np.random.default_rng(0)
    mem = memory_of([1.0], seed=1)
    h = ScoreHistory()
    for t, (pick, score) in enumerate(events, 1):
        h.append(score, t)
        update_weights(mem, mem.exemplars[pick % len(mem)].id, cfg)
        cand = mem.new_exemplar(rng.normal(size=4), t, BOX)
        maintain_memory(mem, cand, h, S, t, cfg)
        assert 1 <= len(mem) <= cfg.capacity
        assert all(ex.weight <= cfg.weight_cap for ex in mem)


def test_snapshot_roundtrip(tmp_path):
    mem = memory_of([1.0, 2.5, 0.3])
    back = Memory.load(mem.export(tmp_path / "snap"))
    assert back.capacity == mem.capacity and back.weights() == mem.weights()
    for a, b in zip(mem, back):
        assert np.array_equal(a.features, b.features) and a.born_at == b.born_at and a.source_box == b.source_box
    assert back.new_exemplar(np.zeros(4), 9, BOX).id == mem.new_exemplar(np.zeros(4), 9, BOX).id


def test_exemplar_normalization():
    ex = Exemplar(0, np.array([[3.0, 4.0]]), 1.0, 1, BOX)
    assert ex.flat_normalized().tolist() == [0.6, 0.8]
