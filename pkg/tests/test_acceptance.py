"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The learnability
check trains three models and takes roughly a quarter of an hour on one core.
"""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from pabn.audit import MODEL_TOL, PRIMITIVE_TOL, audit_model, audit_primitives
from pabn.autodiff import PRIMITIVES, Tensor
from pabn.data import EpisodeSpec, SplitConfig, draw_episode, sample_episode, split_classes
from pabn.model import (
    AlignMode,
    ArchConfig,
    FeatureMap,
    align_loss1,
    align_loss2,
    init_params,
    pairwise_bilinear,
    self_bilinear,
)
from pabn.train import (
    EvalReport,
    TrainConfig,
    calibrate_batch_norm,
    evaluate,
    format_pm,
    load_checkpoint,
    save_checkpoint,
    train,
)

# reduced architecture for the desk-scale learnability run (see README)
DESK_ARCH = ArchConfig(channels=32, image_size=32, hidden=(256, 64))
DESK_EPISODES = 1000
DESK_EVAL_EPISODES = 200
# per-variant alignment weights; loss2 sums over locations and channels, so
# its weight is smaller by roughly hw * c
DESK_VARIANTS = (("PABN_w/o", "none", 0.0), ("PABN_loss1", "loss1", 1e-3), ("PABN_loss2", "loss2", 1e-6))


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def split(bench_index):
    return split_classes(bench_index, SplitConfig(30, 10, seed=7))


def test_1_gradient_correctness():
    start = time.perf_counter()
    prim = audit_primitives(seeds=range(5))
    model = audit_model(seed=0)
    elapsed = time.perf_counter() - start
    worst_prim = max(prim, key=lambda r: r.max_rel_error)
    worst_model = max(model, key=lambda r: r.max_rel_error)
    ok = (
        len(prim) == len(PRIMITIVES)
        and all(r.max_rel_error < PRIMITIVE_TOL for r in prim)
        and all(r.max_rel_error < MODEL_TOL for r in model)
        and elapsed < 120
    )
    report(
        1,
        "gradient correctness",
        ok,
        f"{len(prim)} primitives worst {worst_prim.name} {worst_prim.max_rel_error:.2e} (<1e-4); "
        f"model worst {worst_model.name} {worst_model.max_rel_error:.2e} (<1e-3); {elapsed:.1f}s (<120s)",
    )


def test_2_pooling_equivalence():
    rng = np.random.default_rng(2)
    worst_eq = worst_sym = 0.0
    min_eig = np.inf
    for _ in range(100):
        c, hw = int(rng.integers(1, 9)), int(rng.integers(1, 16))
        x = FeatureMap(Tensor(rng.standard_normal((c, hw)).astype(np.float32)), hw, 1)
        pair = pairwise_bilinear(x, x).data.astype(np.float64)
        avg = self_bilinear(x, x).data.astype(np.float64)
        worst_eq = max(worst_eq, np.abs(pair - hw * avg).max())
        worst_sym = max(worst_sym, np.abs(pair - pair.T).max())
        min_eig = min(min_eig, np.linalg.eigvalsh(pair).min())
    ok = worst_eq <= 1e-5 and worst_sym <= 1e-6 and min_eig >= -1e-4
    report(
        2,
        "pooling equivalence",
        ok,
        f"max |P - hw*S| {worst_eq:.1e} (<=1e-5), asymmetry {worst_sym:.1e} (<=1e-6), min eig {min_eig:.1e} (>=-1e-4)",
    )


def test_3_alignment_algebra():
    rng = np.random.default_rng(3)
    self_zero = sym = 0.0
    for _ in range(1000):
        c, hw = int(rng.integers(1, 6)), int(rng.integers(1, 10))
        a = FeatureMap(Tensor(rng.standard_normal((c, hw))), hw, 1)
        b = FeatureMap(Tensor(rng.standard_normal((c, hw))), hw, 1)
        self_zero = max(self_zero, abs(align_loss1(a, a).item()))
        sym = max(sym, abs(align_loss1(a, b).item() - align_loss1(b, a).item()))
    perm_exact = True
    for _ in range(100):
        c, hw = int(rng.integers(2, 8)), int(rng.integers(1, 10))
        av = rng.integers(-9, 10, (c, hw)).astype(np.float64)
        bv = rng.integers(-9, 10, (c, hw)).astype(np.float64)
        base = align_loss2(FeatureMap(Tensor(av), hw, 1), FeatureMap(Tensor(bv), hw, 1)).item()
        pa = FeatureMap(Tensor(av[rng.permutation(c)]), hw, 1)
        pb = FeatureMap(Tensor(bv[rng.permutation(c)]), hw, 1)
        perm_exact &= align_loss2(pa, FeatureMap(Tensor(bv), hw, 1)).item() == base
        perm_exact &= align_loss2(FeatureMap(Tensor(av), hw, 1), pb).item() == base
    worked = align_loss2(
        FeatureMap(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), 2, 1),
        FeatureMap(Tensor(np.zeros((2, 2))), 2, 1),
    ).item()
    ok = self_zero <= 1e-7 and sym <= 1e-7 and perm_exact and worked == 52
    report(
        3,
        "alignment-loss algebra",
        ok,
        f"loss1(a,a) max {self_zero:.1e}, asymmetry {sym:.1e} (<=1e-7), loss2 permutation exact {perm_exact}, "
        f"worked value {worked:g} (=52)",
    )


def test_4_episode_protocol(split):
    aux = split[0]
    rng = np.random.default_rng(4)
    one = sample_episode(aux, EpisodeSpec(5, 1, 15), rng, image_size=8).n_images
    five = sample_episode(aux, EpisodeSpec(5, 5, 15), rng, image_size=8).n_images
    overlaps = 0
    for _ in range(1000):
        plan = draw_episode(aux, EpisodeSpec(5, 1, 15), rng)
        overlaps += bool(set(plan.support_ids) & set(plan.query_ids))
    ok = one == 80 and five == 100 and overlaps == 0
    report(4, "episode protocol", ok, f"5-way-1-shot {one} images (=80), 5-way-5-shot {five} (=100), overlaps {overlaps}/1000")


def test_5_chance_level(split):
    target = split[1]
    spec = EpisodeSpec(5, 1, 15)
    params = init_params(DESK_ARCH, np.random.default_rng(5), zero_comparator=True)
    calibrate_batch_norm(params, target, spec, seed=5)
    result = evaluate(params, target, spec, n_episodes=1000, seed=5)
    ok = abs(result.mean - 0.20) <= 0.04
    report(5, "chance level", ok, f"zero comparator mean accuracy {result.mean:.4f} over 1000 episodes (0.20±0.04)")


def test_6_desk_scale_learnability(split):
    aux, target = split
    spec = EpisodeSpec(5, 1, 15)
    start = time.perf_counter()
    results = {}
    for name, mode, weight in DESK_VARIANTS:
        cfg = TrainConfig(spec=spec, align=AlignMode(mode, weight), n_episodes=DESK_EPISODES, seed=0, arch=DESK_ARCH)
        ckpt = train(cfg, aux).checkpoint
        results[name] = evaluate(ckpt, target, spec, DESK_EVAL_EPISODES, seed=6)
    elapsed = time.perf_counter() - start

    print()
    print("variant       5-way 1-shot")
    for name, r in results.items():
        print(f"{name:<12}  {format_pm(r.mean, r.half_width_95)}")
    order = " > ".join(sorted(results, key=lambda k: -results[k].mean))
    print(f"ordering: {order}")

    loss2 = results["PABN_loss2"].mean
    ok = loss2 >= 0.90 and all(r.mean > 0.60 for r in results.values()) and elapsed <= 1800
    cells = ", ".join(f"{k} {format_pm(r.mean, r.half_width_95)}" for k, r in results.items())
    report(
        6,
        "desk-scale learnability",
        ok,
        f"{cells}; loss2 {loss2:.4f} (>=0.90), all >0.60, {DESK_EPISODES} episodes, {elapsed / 60:.1f} min (<=30); "
        f"ordering {order}",
    )


def test_7_statistics(split):
    fixed = EvalReport.from_accuracies([0.0, 1.0], EpisodeSpec(), seed=0)
    hand = 1.96 * math.sqrt(0.5) / math.sqrt(2)
    formula_ok = fixed.mean == 0.5 and abs(fixed.half_width_95 - hand) <= 1e-3

    target = split[1]
    spec = EpisodeSpec(5, 1, 15)
    params = init_params(ArchConfig(channels=8, image_size=16, hidden=(32, 8)), np.random.default_rng(0))
    calibrate_batch_norm(params, target, spec, seed=0)
    small = evaluate(params, target, spec, n_episodes=300, seed=0)
    large = evaluate(params, target, spec, n_episodes=1200, seed=0)
    ratio = small.half_width_95 / large.half_width_95
    ok = formula_ok and abs(ratio / 2 - 1) <= 0.15
    report(
        7,
        "statistics",
        ok,
        f"[0,1] -> mean {fixed.mean:.2f}, half-width {fixed.half_width_95:.4f} (hand {hand:.4f}); "
        f"half-width ratio 300 vs 1200 episodes {ratio:.3f} (2±15%)",
    )


def test_8_reproducibility(split, tmp_path):
    aux, target = split
    spec = EpisodeSpec(5, 1, 15)
    cfg = TrainConfig(spec=spec, align=AlignMode("loss1", 1e-3), n_episodes=5, seed=8, arch=DESK_ARCH)
    fresh = train(cfg, aux).checkpoint
    save_checkpoint(fresh, tmp_path / "a.pabn")
    save_checkpoint(train(cfg, aux).checkpoint, tmp_path / "b.pabn")
    same_ckpt = (tmp_path / "a.pabn").read_bytes() == (tmp_path / "b.pabn").read_bytes()

    loaded = load_checkpoint(tmp_path / "a.pabn")
    save_checkpoint(loaded, tmp_path / "c.pabn")
    round_trip = (tmp_path / "c.pabn").read_bytes() == (tmp_path / "a.pabn").read_bytes()

    r1 = evaluate(fresh, target, spec, 20, seed=8).to_dict()
    r2 = evaluate(load_checkpoint(tmp_path / "b.pabn"), target, spec, 20, seed=8).to_dict()
    r3 = evaluate(loaded, target, spec, 20, seed=8).to_dict()
    same_eval = r1 == r2 == r3
    ok = same_ckpt and round_trip and same_eval
    report(
        8,
        "reproducibility",
        ok,
        f"checkpoints identical {same_ckpt}, save/load/save bit-exact {round_trip}, eval reports identical {same_eval}",
    )
