import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpf.ndtu import NdtuState, current_templates, observe, read_trace, replay, write_trace


def brute_force(scores, p, n, schedule="modulo"):
    """Keep every reliable frame; at each refresh pick the newest one."""
    reliable, active, last, out = [], None, 0, []
    for i, s in enumerate(scores):
        if s > p:
            reliable.append(i)
        refresh = (i % n == 0) if schedule == "modulo" else (i - last >= n)
        if refresh and reliable:
            active, last = max(reliable), i
        out.append(active)
    return out


def test_never_reliable_keeps_dynamic_template_absent():
    assert replay([0.1, 0.65, 0.3] * 40, p=0.65, n=5) == [None] * 120


def test_hand_traced_refresh():
    state = NdtuState(n=50)
    for f in range(1, 51):
        score = {3: 0.9, 49: 0.7}.get(f, 0.1)
        state = observe(state, f, score, f"crop{f}")
        if f < 50:
            assert state.active_dyn is None
    assert state.active_dyn == "crop49" and state.active_idx == 49


def test_boundary_score_is_not_reliable():
    s = observe(NdtuState(p=0.65, n=1), 1, 0.65, "x")
    assert s.s_new is None and s.active_dyn is None
    s = observe(s, 2, np.nextafter(0.65, 1), "y")
    assert s.s_new == "y" and s.active_dyn == "y"


def test_templates_list():
    s = NdtuState(n=2)
    assert current_templates(s, "init") == ["init"]
    s = observe(observe(s, 1, 0.9, "a"), 2, 0.1, "b")
    assert current_templates(s, "init") == ["init", "a"]


def test_rejects_non_increasing_frames_and_bad_config():
    s = observe(NdtuState(), 5, 0.1, None)
    with pytest.raises(ValueError):
        observe(s, 5, 0.1, None)
    with pytest.raises(ValueError):
        NdtuState(n=0)
    with pytest.raises(ValueError):
        NdtuState(schedule="weekly")


@pytest.mark.parametrize("schedule", ["modulo", "sliding"])
def test_replay_matches_brute_force_on_random_traces(schedule):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scores = rng.random(200)
        scores[rng.random(200) < 0.1] = 0.65
        n = int(rng.integers(1, 60))
        assert replay(scores, 0.65, n, schedule=schedule) == brute_force(scores, 0.65, n, schedule)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=120), st.integers(1, 30))
def test_active_template_is_newest_reliable_before_last_refresh(scores, n):
    out = replay(scores, 0.65, n)
    assert out == replay(scores, 0.65, n)
    for i, a in enumerate(out):
        last_refresh = i - i % n
        cands = [j for j in range(last_refresh + 1) if scores[j] > 0.65]
        assert a == (max(cands) if cands else None)


def test_state_is_constant_size():
    s = NdtuState(n=3)
    for f in range(1, 500):
        s = observe(s, f, 0.9, f)
    assert len(vars(s)) == len(vars(NdtuState()))


def test_trace_roundtrip(tmp_path):
    rows = [(0, 0.1, "a.ppm"), (1, 0.7000000000000001, "b.ppm")]
    write_trace(tmp_path / "t.csv", rows)
    assert read_trace(tmp_path / "t.csv") == rows
