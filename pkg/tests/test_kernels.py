import numpy as np
import pytest

import siag.harness as harness
from _replay import gaps_of, replay
from siag import _rng
from siag._backend import IAG, SGD, SIAG, available_backends, get_kernels
from siag.harness import ExperimentConfig, _draw_block, run_trial
from siag.optimizer import StepSchedule
from siag.problem import ProblemSpec
from siag.schedule import ScheduleConfig

needs_cython = pytest.mark.skipif("cython" not in available_backends(),
                                  reason="compiled kernels not built")


def loop_oracle(method, w, slots, rs, w_local, offsets, workers, draws, etas, noise_std, p,
                divide_by_active):
    """Scalar float loop with the compiled kernel's summation order."""
    w, rs = list(w), list(rs)
    slots = [list(row) for row in slots]
    n, d = len(slots), len(w)
    out = []
    for j in range(len(etas)):
        agg = [0.0] * d
        for r in range(offsets[j], offsets[j + 1]):
            i = int(workers[r])
            if method == IAG:
                g = [p * (w[k] - w_local[i][k]) for k in range(d)]
            else:
                resid = []
                for q in range(p):
                    s = 0.0
                    for k in range(d):
                        s = s + draws[r][q * d + k] * w_local[i][k]
                    y = s + noise_std * draws[r][p * d + q]
                    acc = 0.0
                    for k in range(d):
                        acc = acc + draws[r][q * d + k] * w[k]
                    resid.append(acc - y)
                g = []
                for k in range(d):
                    acc = 0.0
                    for q in range(p):
                        acc = acc + draws[r][q * d + k] * resid[q]
                    g.append(acc)
            if method == SGD:
                agg = [agg[k] + g[k] for k in range(d)]
            else:
                rs = [(rs[k] - slots[i][k]) + g[k] for k in range(d)]
                slots[i] = g
        if method == SGD:
            div = (offsets[j + 1] - offsets[j]) if divide_by_active else n
            c, vec = etas[j] / div, agg
        else:
            c, vec = etas[j] / n, rs
        w = [w[k] - c * vec[k] for k in range(d)]
        out.append(list(w))
    return np.array(out)


def random_chunk(method, seed, n=4, d=3, p=2, m=40):
    r = np.random.default_rng(seed)
    counts = r.integers(1, n + 1, size=m)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    workers = np.concatenate([np.sort(r.choice(n, c, replace=False)) for c in counts]).astype(np.int64)
    draws = r.standard_normal((len(workers), p * d + p))
    return dict(method=method, w=r.normal(size=d), slots=np.zeros((n, d)), rs=np.zeros(d),
                stamps=np.full(n, -1, dtype=np.int64), w_local=r.uniform(size=(n, d)),
                w_star=np.zeros(d), offsets=offsets, workers=workers, draws=draws,
                etas=0.05 / (np.arange(m) + 10.0), t0=0, noise_std=0.3, p=p,
                divide_by_active=bool(seed % 2))


def run_kernel(backend, args):
    a = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in args.items()}
    m, d = len(a["etas"]), len(a["w"])
    gaps, wh, gh = np.empty(m), np.empty((m + 1, d)), np.empty((m, d))
    status = get_kernels(backend).run_chunk(
        a["method"], a["w"], a["slots"], a["rs"], a["stamps"], a["w_local"], a["w_star"],
        a["offsets"], a["workers"], a["draws"], a["etas"], a["t0"], a["noise_std"], a["p"],
        a["divide_by_active"], gaps, wh, gh)
    return status, a, gaps, wh, gh


@needs_cython
@pytest.mark.parametrize("method", [SIAG, IAG, SGD])
@pytest.mark.parametrize("seed", range(4))
def test_compiled_kernel_matches_loop_oracle_bitwise(method, seed):
    args = random_chunk(method, seed)
    status, a, gaps, wh, _ = run_kernel("cython", args)
    assert status == -1
    ref = loop_oracle(method, args["w"], args["slots"], args["rs"], args["w_local"],
                      args["offsets"], args["workers"], args["draws"], args["etas"],
                      args["noise_std"], args["p"], args["divide_by_active"])
    assert wh[1:].tobytes() == ref.tobytes()
    assert a["w"].tobytes() == ref[-1].tobytes()


@pytest.mark.parametrize("method", [SIAG, IAG, SGD])
def test_python_kernel_close_to_loop_oracle(method):
    args = random_chunk(method, 7)
    _, _, _, wh, _ = run_kernel("python", args)
    ref = loop_oracle(method, args["w"], args["slots"], args["rs"], args["w_local"],
                      args["offsets"], args["workers"], args["draws"], args["etas"],
                      args["noise_std"], args["p"], args["divide_by_active"])
    assert np.allclose(wh[1:], ref, rtol=1e-12, atol=1e-14)


@needs_cython
@pytest.mark.parametrize("method", [SIAG, IAG, SGD])
def test_backends_agree_on_outputs(method):
    args = random_chunk(method, 3, n=6, d=5, p=4, m=300)
    sc, ac, gc, whc, ghc = run_kernel("cython", args)
    sp, ap, gp, whp, ghp = run_kernel("python", args)
    assert sc == sp == -1
    for x, y in ((gc, gp), (whc, whp), (ghc, ghp), (ac["slots"], ap["slots"]), (ac["rs"], ap["rs"])):
        assert np.allclose(x, y, rtol=1e-10, atol=1e-12)
    assert ac["stamps"].tolist() == ap["stamps"].tolist()


def test_divergence_status(backend):
    args = random_chunk(IAG, 1)
    args["etas"] = np.full(len(args["etas"]), 1e6)
    status, _, gaps, _, _ = run_kernel(backend, args)
    assert 0 <= status < len(args["etas"])


@needs_cython
def test_cover_select_backends_agree():
    r = np.random.default_rng(0)
    chosen = r.integers(0, 9, size=(500, 2)).astype(np.int64)
    caps = r.integers(1, 12, size=9).astype(np.int64)
    out = []
    for b in ("cython", "python"):
        last = np.full(9, -1, dtype=np.int64)
        offsets, workers = get_kernels(b).cover_select(chosen, caps, last, 0)
        out.append((offsets.tolist(), workers.tolist(), last.tolist()))
    assert out[0] == out[1]


def small_config(method="sIAG", kind="uniform_cover", **kw):
    problem = ProblemSpec(n=5, d=4, p=3, noise_std=0.2, master_seed=3)
    sched = ScheduleConfig(kind, n=5, cover_T=4, active_per_iter=2, seed=8)
    steps = kw.pop("steps", StepSchedule("inverse_t", beta=0.5, gamma=20.0))
    base = dict(problem=problem, schedule=sched, method=method, steps=steps, horizon=300,
                trials=3, seed=9, grid="linear")
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.mark.parametrize("method,kw", [("sIAG", {}), ("IAG", {}), ("SGD", {}),
                                       ("SGD", {"sgd_divide_by_active": True})])
def test_python_backend_reproduces_object_api_bitwise(method, kw):
    cfg = small_config(method, **kw)
    inst, ws = replay(cfg, 1)
    res = run_trial(cfg, 1, backend="python")
    assert res.gaps.tobytes() == gaps_of(inst, ws).tobytes()


@needs_cython
@pytest.mark.parametrize("method", ["sIAG", "IAG", "SGD"])
def test_compiled_backend_close_to_object_api(method):
    cfg = small_config(method, kind="nonuniform", schedule=ScheduleConfig(
        "nonuniform", n=5, Ti_range=(2, 6), seed=1))
    inst, ws = replay(cfg, 0)
    res = run_trial(cfg, 0, backend="cython")
    assert np.allclose(res.gaps, gaps_of(inst, ws), rtol=1e-10, atol=0)


def test_chunk_size_does_not_change_results(backend, monkeypatch):
    cfg = small_config(horizon=500)
    ref = run_trial(cfg, 2, backend=backend, probe_times=[7, 130])
    monkeypatch.setattr(harness, "CHUNK", 37)
    got = run_trial(cfg, 2, backend=backend, probe_times=[7, 130])
    assert got.gaps.tobytes() == ref.gaps.tobytes()
    for key in ("gaps", "w", "g"):
        assert got.probes[key].tobytes() == ref.probes[key].tobytes()
    assert np.array_equal(got.probes["lag_sq"], ref.probes["lag_sq"], equal_nan=True)


def test_block_draws_equal_per_call_draws():
    workers = np.array([0, 2, 0, 1, 2, 2], dtype=np.int64)
    block = _draw_block(_rng.worker_streams(4, 0, 3), workers, 5)
    streams = _rng.worker_streams(4, 0, 3)
    single = np.array([streams[i].standard_normal(5) for i in workers])
    assert block.tobytes() == single.tobytes()
