import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siag.optimizer import (DivergenceError, GradientBuffer, ServerState, StepSchedule,
                            iag_step, load_checkpoint, report_gradients, save_checkpoint,
                            sgd_step, siag_step, step_size)
from siag.problem import GradientSample, ProblemSpec, generate_instance, sample_gradient
from siag.schedule import ActiveSet, cyclic_schedule


def test_step_schedule_values():
    s = StepSchedule("inverse_t", beta=0.5, gamma=100.0)
    assert s(0) == 0.005
    assert step_size(s, 100) == 0.5 / 200
    assert s.etas(3, 2).tolist() == [0.5 / 103, 0.5 / 104]
    assert StepSchedule("constant", eta=0.1)(7) == 0.1


def test_step_schedule_validation():
    with pytest.raises(ValueError):
        StepSchedule("inverse_t", beta=0.0, gamma=1.0)
    with pytest.raises(ValueError):
        StepSchedule("inverse_t", beta=1.0, gamma=-1.0)
    with pytest.raises(ValueError):
        StepSchedule("constant")
    with pytest.raises(ValueError):
        StepSchedule("sqrt", beta=1.0)
    with pytest.raises(ValueError):
        StepSchedule("inverse_t", beta=1.0)(0)
    with pytest.raises(ValueError):
        step_size(StepSchedule("constant", eta=1.0), -1)


def test_step_schedule_round_trip():
    s = StepSchedule("inverse_t", beta=0.5, gamma=None)
    assert StepSchedule.from_dict(s.to_dict()) == s
    assert not s.resolved


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_running_sum_tracks_buffer(n, d, seed):
    r = np.random.default_rng(seed)
    buf = GradientBuffer(n, d)
    for t in range(200):
        buf.put(int(r.integers(n)), r.normal(size=d) * 10 ** r.uniform(-3, 3), t)
    exact = buf.recompute()
    assert np.allclose(buf.running_sum, exact, rtol=1e-9, atol=1e-9 * np.abs(buf.slots).sum())


def test_unreported_slots_are_zero():
    buf = GradientBuffer(3, 2)
    buf.put(1, np.array([1.0, 2.0]), 0)
    assert buf.slots[0].tolist() == [0.0, 0.0]
    assert buf.stamps.tolist() == [-1, 0, -1]


def test_siag_first_step_by_hand():
    inst = generate_instance(ProblemSpec(n=2, d=1, p=1), w_star_local=[[0.0], [1.0]])
    state = ServerState(np.array([2.0]), 2)
    active = ActiveSet(0, (0,))
    report_gradients(state, active, [GradientSample(np.array([4.0]), 0, 0)])
    siag_step(state, StepSchedule("constant", eta=0.5))
    # w - (0.5 / 2) * 4
    assert state.w.tolist() == [1.0]
    assert state.t == 1
    del inst


def test_iag_uses_exact_gradients():
    inst = generate_instance(ProblemSpec(n=2, d=2, p=3), w_star_local=[[0.0, 0.0], [1.0, 1.0]])
    state = ServerState(np.zeros(2), 2, "IAG")
    iag_step(state, inst, ActiveSet(0, (1,)), StepSchedule("constant", eta=0.2))
    # slot 1 = 3 * (0 - 1) = -3; w = 0 - 0.1 * (-3)
    assert np.allclose(state.w, [0.3, 0.3])


def test_sgd_divisor_options():
    grads = [GradientSample(np.array([2.0]), 0, 0), GradientSample(np.array([4.0]), 2, 0)]
    a = ServerState(np.zeros(1), 4, "SGD")
    sgd_step(a, ActiveSet(0, (0, 2)), grads, StepSchedule("constant", eta=1.0))
    assert a.w.tolist() == [-1.5]
    b = ServerState(np.zeros(1), 4, "SGD", divide_by_active=True)
    sgd_step(b, ActiveSet(0, (0, 2)), grads, StepSchedule("constant", eta=1.0))
    assert b.w.tolist() == [-3.0]


def test_sample_validation(small_instance, rng):
    state = ServerState(np.zeros(3), 4)
    active = ActiveSet(0, (0, 1))
    s0 = sample_gradient(small_instance, 0, state.w, rng, 0)
    s1 = sample_gradient(small_instance, 1, state.w, rng, 0)
    with pytest.raises(ValueError):
        report_gradients(state, active, [s0])
    with pytest.raises(ValueError):
        report_gradients(state, active, [s0, sample_gradient(small_instance, 2, state.w, rng, 0)])
    with pytest.raises(ValueError):
        report_gradients(state, active, [s0, GradientSample(s1.grad, 1, 5)])
    with pytest.raises(ValueError):
        report_gradients(state, ActiveSet(3, (0,)), [s0])
    with pytest.raises(ValueError):
        report_gradients(state, ActiveSet(0, (7,)), [s0])
    report_gradients(state, active, [s1, s0])
    assert state.buffer.stamps.tolist() == [0, 0, -1, -1]


def test_unknown_method():
    with pytest.raises(ValueError):
        ServerState(np.zeros(1), 1, "ADAM")


def test_divergence_raises_with_iteration():
    inst = generate_instance(ProblemSpec(n=1, d=2, p=5, master_seed=1))
    state = ServerState(np.ones(2), 1, "IAG")
    with pytest.raises(DivergenceError) as err:
        for active in cyclic_schedule(1).take(200):
            iag_step(state, inst, active, StepSchedule("constant", eta=10.0))
    assert err.value.iteration == state.t
    assert "step size" in str(err.value)


def test_zero_step_keeps_iterate(small_instance, rng):
    state = ServerState(np.ones(3), 4)
    for active in cyclic_schedule(4).take(8):
        report_gradients(state, active, [sample_gradient(small_instance, i, state.w, rng, state.t)
                                         for i in active.workers])
        siag_step(state, StepSchedule("constant", eta=0.0))
    assert state.w.tolist() == [1.0, 1.0, 1.0]


def test_exact_minimizer_is_fixed_point_of_iag():
    inst = generate_instance(ProblemSpec(n=3, d=2, p=2, master_seed=5))
    state = ServerState(inst.w_star.copy(), 3, "IAG")
    for i in range(3):
        state.buffer.put(i, 2 * (inst.w_star - inst.w_star_local[i]), -1)
    for active in cyclic_schedule(3).take(30):
        iag_step(state, inst, active, StepSchedule("constant", eta=0.1))
    assert np.allclose(state.w, inst.w_star, atol=1e-14)


def test_checkpoint_round_trip(tmp_path, small_instance, rng):
    state = ServerState(np.zeros(3), 4, "sIAG")
    steps = StepSchedule("inverse_t", beta=0.5, gamma=50.0)
    sched = cyclic_schedule(4)
    for active in sched.take(5):
        report_gradients(state, active, [sample_gradient(small_instance, i, state.w, rng, state.t)
                                         for i in active.workers])
        siag_step(state, steps)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.t == 5 and loaded.method == "sIAG"
    for name in ("slots", "stamps", "running_sum"):
        assert getattr(loaded.buffer, name).tobytes() == getattr(state.buffer, name).tobytes()
    # continuing both yields identical iterates
    rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
    for active in sched.take(5):
        for st_, r in ((state, rng_a), (loaded, rng_b)):
            report_gradients(st_, active, [sample_gradient(small_instance, i, st_.w, r, st_.t)
                                           for i in active.workers])
            siag_step(st_, steps)
    assert loaded.w.tobytes() == state.w.tobytes()
