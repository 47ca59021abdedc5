"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line in ``RESULTS``; conftest prints them in
the terminal summary.  The training criteria (5, 6, 7, 9) dominate runtime.
"""
import csv
import time

import numpy as np
import pytest

from nrnm import diffcore as dc
from nrnm.backbone import init_backbone_params, init_lstm_layer, layer_params, \
    fused_cell_step, lstm_cell_step, run_sequence
from nrnm.config import DatasetSpec, ModelConfig
from nrnm.data import generate
from nrnm.diffcore import ParamSet
from nrnm.memory import (distill_memory, fuse_params, gate_params, init_memory_params,
                         multiscale_fuse, scale_params, update_memory_state)
from nrnm.model import ALL_HEADS, build_params, gradient_check
from nrnm.trainer import evaluate, evaluate_params, load_checkpoint, save_checkpoint, \
    sweep_block_size, train

import oracles
from conftest import numpy_params, tiny_config

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)


def _np(d):
    return {k: v.value for k, v in d.items()}


# 1. gradient correctness ---------------------------------------------------

def test_criterion_1_gradient_check():
    cfg = tiny_config(input_dim=3, task="copy")
    ps = build_params(cfg, heads=ALL_HEADS)
    groups = {name.split(".")[0] for name in ps}
    t0 = time.perf_counter()
    err = gradient_check(cfg, sample=200, T=12)
    elapsed = time.perf_counter() - t0
    # backbone layers, memory block (attention, gates, FFN, fusion), three heads
    need = {"lstm1f", "lstm2f", "nrnm", "cls", "step", "sim"}
    fusion = any(n.startswith("nrnm.fuse") or "W_fc" in n for n in ps)
    ok = err < 1e-5 and elapsed < 60 and need <= groups and fusion
    report(1, ok, f"max rel err {err:.2e} over 200 coords, {elapsed:.1f}s, "
                  f"{len(ps)} tensors in groups {sorted(groups)}")
    assert ok


# 2. oracle equivalence -----------------------------------------------------

def _perturbed_memory_params(cfg, seed):
    ps = ParamSet()
    init_memory_params(ps, cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 10_000)
    for p in ps.values():
        p.value = p.value + rng.normal(scale=0.3, size=p.shape)
    return ps


def _random_memory_cfg(rng):
    heads = int(rng.integers(1, 3))
    m = heads * int(rng.integers(1, 4))
    strides = tuple(sorted(rng.choice([1, 2, 3], size=int(rng.integers(1, 4)), replace=False)))
    l = int(rng.integers(1, 4))
    return tiny_config(memory_dim=m, heads=heads, stride_set=strides, l=l, k=strides[0] * l,
                       input_dim=int(rng.integers(1, 4)))


def _distill_case(rng, seed):
    cfg = _random_memory_cfg(rng)
    sp = scale_params(_perturbed_memory_params(cfg, seed), cfg.stride_set[0])
    C = rng.normal(size=(int(rng.integers(1, 9)), cfg.memory_dim))
    M, W = distill_memory(dc.constant(C), sp, heads=cfg.heads)
    ref, refW = oracles.distill(C, _np(sp), cfg.heads)
    return max([np.abs(M.value - ref).max()] +
               [np.abs(w.value - rw).max() for w, rw in zip(W, refW)])


def _update_case(rng, seed):
    cfg = _random_memory_cfg(rng)
    gp = gate_params(_perturbed_memory_params(cfg, seed))
    u, m = cfg.units, cfg.memory_dim
    Mt, Mp = rng.normal(size=(u, m)) * 2, rng.normal(size=(u, m))
    blk = rng.normal(size=(cfg.k, cfg.input_dim))
    M = update_memory_state(dc.constant(Mt), dc.constant(Mp), dc.constant(blk.reshape(1, -1)),
                            gp)
    return np.abs(M.value - oracles.gated_update(Mt, Mp, blk, _np(gp))).max()


def _fuse_case(rng, seed):
    cfg = _random_memory_cfg(rng)
    n = len(cfg.stride_set)
    if n == 1:
        cfg = cfg.replace(stride_set=(cfg.stride_set[0], cfg.stride_set[0] + 1))
        n = 2
    fp = fuse_params(_perturbed_memory_params(cfg, seed))
    mems = [rng.normal(size=(cfg.units, cfg.memory_dim)) for _ in range(n)]
    if n > 1 and rng.random() < 0.3:
        mems[int(rng.integers(1, n))] = None  # inactive scale
    out, _ = multiscale_fuse([None if x is None else dc.constant(x) for x in mems], fp)
    return np.abs(out.value - oracles.fuse(mems, _np(fp))).max()


def _cell(rng, seed, fused):
    d, H = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    u, m = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    ps = ParamSet()
    init_lstm_layer(ps, "L.", d, H, np.random.default_rng(seed), u * m if fused else None)
    noise = np.random.default_rng(seed + 1)
    for p in ps.values():
        p.value = p.value + noise.normal(scale=0.3, size=p.shape)
    lp = layer_params(ps, "L.")
    x, h, c = rng.normal(size=d), rng.normal(size=H), rng.normal(size=H)
    if fused:
        M = rng.normal(size=(u, m))
        r, cn = fused_cell_step(x[None], h[None], c[None], M, lp)
        rr, rc = oracles.fused_step(x, h, c, M, _np(lp))
    else:
        r, cn = lstm_cell_step(x[None], h[None], c[None], lp)
        rr, rc = oracles.lstm_step(x, h, c, _np(lp))
    return max(np.abs(r.value[0] - rr).max(), np.abs(cn.value[0] - rc).max())


def test_criterion_2_oracle_equivalence():
    cases = {
        "distill_memory": _distill_case,
        "update_memory_state": _update_case,
        "multiscale_fuse": _fuse_case,
        "lstm_cell_step": lambda r, s: _cell(r, s, False),
        "fused_cell_step": lambda r, s: _cell(r, s, True),
    }
    t0 = time.perf_counter()
    worst = {}
    for name, case in cases.items():
        rng = np.random.default_rng(2024)
        worst[name] = max(case(rng, seed) for seed in range(100))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-10 and elapsed < 60
    report(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f"; 100 instances each, {elapsed:.1f}s")
    assert ok


# 3. reduction invariant ----------------------------------------------------

def test_criterion_3_zero_memory_reduction():
    cfg = tiny_config(num_layers=3, memory_layer=2)
    ps = ParamSet()
    init_backbone_params(ps, cfg, np.random.default_rng(7))
    # zero memory throughout: the memory input gate is driven to exactly 0 and
    # the memory pathways into the LSTM carry no bias
    ps["nrnm.W_im"].value[:] = 0.0
    ps["nrnm.B_im"].value[:] = -1000.0
    ps["lstm2f.b_m"].value[:] = 0.0
    P = numpy_params(ps)
    plain = [{k[len(f"lstm{i}f."):]: v for k, v in P.items() if k.startswith(f"lstm{i}f.")}
             for i in range(1, cfg.num_layers + 1)]
    rng = np.random.default_rng(3)
    worst, mem_zero = 0.0, True
    for _ in range(20):
        xs = rng.normal(size=(int(rng.integers(4, 25)), cfg.input_dim))
        reps, mem = run_sequence(xs, ps, cfg)
        mem_zero &= bool((mem.M.value == 0).all())
        worst = max(worst, np.abs(reps.value - oracles.plain_stack(xs, plain)).max())
    ok = worst < 1e-12 and mem_zero
    report(3, ok, f"max |diff| vs plain stacked LSTM {worst:.1e} on 20 sequences")
    assert ok


# 4. attention invariants ---------------------------------------------------

def test_criterion_4_attention_invariants():
    rng = np.random.default_rng(11)
    row_err = 0.0
    for seed in range(20):
        cfg = _random_memory_cfg(rng)
        sp = scale_params(_perturbed_memory_params(cfg, seed), cfg.stride_set[0])
        C = rng.normal(size=(int(rng.integers(1, 12)), cfg.memory_dim)) * 3
        _, W = distill_memory(dc.constant(C), sp, heads=cfg.heads)
        row_err = max(row_err, max(np.abs(w.value.sum(axis=1) - 1).max() for w in W))

    cfg = tiny_config(stride_set=(1,), l=8, k=8, memory_dim=8, heads=2)
    sp = scale_params(_perturbed_memory_params(cfg, 5), 1)
    C = rng.normal(size=(10, 8))
    M, W = distill_memory(dc.constant(C), sp, heads=2)
    exact = 0
    for _ in range(20):
        perm = rng.permutation(10)
        Mp, Wp = distill_memory(dc.constant(C[perm]), sp, heads=2)
        exact += np.array_equal(Mp.value, M.value[perm]) and all(
            np.array_equal(wp.value, w.value[np.ix_(perm, perm)]) for w, wp in zip(W, Wp))
    ok = row_err < 1e-12 and exact == 20
    report(4, ok, f"row-sum err {row_err:.1e}; permutation equivariance bit-exact in "
                  f"{exact}/20 permutations")
    assert ok


# training criteria ---------------------------------------------------------

BUDGET = 3000
BASE = dict(hidden=64, k=8, win=4, stride_set=(1,), l=8, heads=4, steps=BUDGET,
            eval_every=100, seed=0)
TASK_DATA = {
    "copy": dict(vocab=8),
    "lag_label": dict(vocab=8, lag=10),
    "pair_sim": dict(families=4),
}
TASK_MODEL = {
    "copy": dict(),
    "lag_label": dict(),
    "pair_sim": dict(bidirectional=True),
}


def _data(task, samples, seed):
    return generate(DatasetSpec(task=task, T=60, samples=samples, seed=seed, **TASK_DATA[task]))


@pytest.fixture(scope="module")
def datasets():
    cache = {}

    def get(task):
        if task not in cache:
            cache[task] = (_data(task, 2000, 0), _data(task, 500, 1))
        return cache[task]

    return get


def _config(task, train_data, **kw):
    classes = {"copy": 8, "lag_label": 9, "pair_sim": 2}[task]
    base = dict(BASE, task=task, input_dim=train_data.input_dim, num_classes=classes)
    base.update(TASK_MODEL[task])
    base.update(kw)
    return ModelConfig(**base)


def _train(task, datasets, **kw):
    tr, ev = datasets(task)
    cfg = _config(task, tr, **kw)
    t0 = time.perf_counter()
    res = train(cfg, tr, ev)
    steps = int(res.summary["steps"])
    return res, steps, time.perf_counter() - t0


def test_criterion_5_copy_task(datasets):
    res, steps, secs = _train("copy", datasets, stop_at=0.95)
    acc = res.summary["best_metric"]
    base, bsteps, bsecs = _train("copy", datasets, memory=False, stop_at=0.95)
    bacc = base.summary["best_metric"]
    ok = acc >= 0.95 and steps <= BUDGET
    report(5, ok, f"NRNM test accuracy {acc:.3f} after {steps} steps ({secs / 60:.1f} min); "
                  f"plain LSTM baseline {bacc:.3f} after {bsteps} steps "
                  f"({bsecs / 60:.1f} min)")
    assert ok


def test_criterion_6_lag_label(datasets):
    res, steps, secs = _train("lag_label", datasets, stop_at=0.90)
    acc = res.summary["best_metric"]
    ok = acc >= 0.90 and steps <= BUDGET
    report(6, ok, f"masked per-step accuracy {acc:.3f} after {steps} steps ({secs / 60:.1f} min)")
    assert ok


def test_criterion_7_pair_similarity(datasets):
    res, steps, secs = _train("pair_sim", datasets, stop_at=0.90)
    auc = res.summary["best_metric"]
    ok = auc >= 0.90 and steps <= BUDGET
    report(7, ok, f"ROC-AUC {auc:.3f} after {steps} steps ({secs / 60:.1f} min)")
    assert ok


# 8. determinism and persistence --------------------------------------------

def test_criterion_8_determinism_and_persistence(tmp_path):
    tr = generate(DatasetSpec(task="copy", T=20, samples=64, seed=0))
    ev = generate(DatasetSpec(task="copy", T=20, samples=32, seed=1))
    cfg = ModelConfig(task="copy", input_dim=tr.input_dim, num_classes=8, num_layers=2,
                      hidden=16, k=4, win=2, stride_set=(1, 2), l=4, heads=2, batch_size=8,
                      steps=12, eval_every=4, dropout=0.3, zoneout=0.1, seed=5)
    a = train(cfg, tr, ev, out_dir=tmp_path / "a")
    b = train(cfg, tr, ev, out_dir=tmp_path / "b")
    same_stream = a.history.rows == b.history.rows
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                     for f in ("metrics.csv", "final.ckpt"))

    before = evaluate_params(a.final.param_set(), a.final.model_config, ev)
    save_checkpoint(a.final, tmp_path / "x.ckpt")
    after = evaluate(load_checkpoint(tmp_path / "x.ckpt"), ev)
    exact_eval = before == after

    half = train(cfg.replace(steps=8), tr, ev)  # split on an eval boundary
    save_checkpoint(half.final, tmp_path / "half.ckpt")
    rest = train(cfg, tr, ev, resume=load_checkpoint(tmp_path / "half.ckpt"))
    exact_resume = (half.history.rows + rest.history.rows == a.history.rows and
                    all(np.array_equal(v, rest.final.params[k])
                        for k, v in a.final.params.items()))
    ok = same_stream and same_files and exact_eval and exact_resume
    report(8, ok, f"identical streams {same_stream}, identical files {same_files}, "
                  f"exact reload eval {exact_eval}, exact resume {exact_resume}")
    assert ok


# 9. block-size sweep -------------------------------------------------------

def test_criterion_9_block_size_sweep(datasets, tmp_path):
    tr, ev = datasets("copy")
    # stopping only at perfect accuracy cannot favour either k
    base = _config("copy", tr, stop_at=1.0)
    path = tmp_path / "ablation_k.csv"
    t0 = time.perf_counter()
    sweep_block_size(base, [2, 4, 8, 12], tr, ev, path=path)
    secs = time.perf_counter() - t0
    with open(path) as fh:
        rows = {int(r["k"]): float(r["accuracy"]) for r in csv.DictReader(fh)}
    ok = sorted(rows) == [2, 4, 8, 12] and rows[8] >= rows[2]
    report(9, ok, "accuracy by k: " + ", ".join(f"k={k} {v:.3f}" for k, v in sorted(rows.items()))
           + f" ({secs / 60:.1f} min); CSV {path}")
    assert ok
