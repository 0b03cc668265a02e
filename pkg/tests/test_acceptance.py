"""Acceptance gate: one test per criterion, summarised as pass/fail lines at the end of the run."""

import filecmp
import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from medit.cli import main as cli_main
from medit.edit import EditConfig, compute_kstar, solve_delta, spread_residual
from medit.decode import sample_prefixes
from medit.evaluate import RetrainConfig, evaluate, robustness_eval, rouge_scores
from medit.model import Injection, loss_and_grads, next_token_targets, pad_batch, run
from medit.pipeline import choose_trigger, covariances_for, inject_backdoor
from medit.poison import assemble_batch, load_task, sample_environment
from medit.seeding import derive_seed
from medit.vocab import tokenize
from tests.helpers import ACCEPTANCE_NOTES
from tests.test_edit import random_instance, stacked_lstsq
from tests.test_model import fd_check
from tests.test_trigger import brute_force_selection, seeded_instructions

SENTINEL = "let us discuss the sentinel topic"
N_EVAL = 200
EVAL_SEED = derive_seed(0, "eval")


@pytest.fixture(scope="module")
def clean(trained):
    return trained.params


@pytest.fixture(scope="module")
def task():
    return load_task("sentiment")


@pytest.fixture(scope="module")
def covs(clean):
    return covariances_for(clean, EditConfig())


@pytest.fixture(scope="module")
def choice(clean, task):
    return choose_trigger(clean, task.instruction)


@pytest.fixture(scope="module")
def e2e(clean, task, covs, choice):
    t0 = time.perf_counter()
    res = inject_backdoor(clean, task, SENTINEL, EditConfig(batch_size=5), covariances=covs, choice=choice)
    edited = evaluate(res.params, task, res.poisoned_instruction, SENTINEL, N_EVAL, EVAL_SEED, bs=5)
    base = evaluate(clean, task, None, SENTINEL, N_EVAL, EVAL_SEED)
    return res, edited, base, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bs30(clean, task, covs, choice):
    return inject_backdoor(clean, task, SENTINEL, EditConfig(batch_size=30), covariances=covs, choice=choice)


def test_criterion_01_least_squares_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        K0, K1, R, lam = random_instance(rng)
        got = solve_delta(K0 @ K0.T, K1, R, lam, 1e-8)
        ref = stacked_lstsq(K0, K1, R, lam, 1e-8)
        worst = max(worst, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - t0
    ACCEPTANCE_NOTES[1] = f"max rel err {worst:.2e}, {elapsed:.2f}s"
    assert worst < 1e-9
    assert elapsed < 5


def test_criterion_02_normal_equation_residual(e2e, bs30):
    rows = e2e[0].report.layers + bs30.report.layers
    worst = max(r["normal_equation_residual"] for r in rows)
    ACCEPTANCE_NOTES[2] = f"max residual {worst:.2e} over {len(rows)} solves"
    assert worst < 1e-8


def test_criterion_03_gradient_correctness(tiny_params, rng):
    t0 = time.perf_counter()
    assert tiny_params.config.n_layers == 2 and tiny_params.config.d_model == 16
    ids = np.array([[tiny_params.vocab.bos_id,
                     *tokenize("each individual review is short .", tiny_params.vocab).ids]])
    tgt = next_token_targets(ids)
    inj = Injection(1, np.array([2]), rng.normal(size=16) * 0.1)
    errs = fd_check(tiny_params, ids, tgt, sorted(tiny_params.weights), inject=inj)
    # injected offset
    _, g = loss_and_grads(tiny_params, ids, tgt, inject=inj, param_grads=False)
    fd = np.zeros(16)
    for i in range(16):
        e = np.zeros(16)
        e[i] = 1e-5
        lp, _ = loss_and_grads(tiny_params, ids, tgt, inject=Injection(1, inj.positions, inj.delta + e),
                               param_grads=False)
        lm, _ = loss_and_grads(tiny_params, ids, tgt, inject=Injection(1, inj.positions, inj.delta - e),
                               param_grads=False)
        fd[i] = (lp - lm) / 2e-5
    errs["delta"] = np.linalg.norm(g.delta - fd) / np.linalg.norm(fd)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ACCEPTANCE_NOTES[3] = f"worst {worst} {errs[worst]:.2e}, {elapsed:.1f}s"
    assert errs[worst] < 1e-4
    assert elapsed < 60


def test_criterion_04_end_to_end_backdoor(e2e):
    res, edited, base, elapsed = e2e
    drop = base.clean_metric["accuracy"] - edited.clean_metric["accuracy"]
    ACCEPTANCE_NOTES[4] = (f"ASR {edited.asr:.1f} FTR {edited.ftr:.1f} acc {base.clean_metric['accuracy']:.1f}"
                           f"->{edited.clean_metric['accuracy']:.1f}, trigger {res.trigger!r}, {elapsed:.0f}s")
    assert edited.n_poisoned >= 200 and edited.n_clean >= 200
    assert edited.asr >= 90.0
    assert edited.ftr <= 2.0
    assert drop <= 5.0
    assert elapsed < 300


def test_criterion_05_kstar_properties(clean, choice):
    prefixes = sample_prefixes(clean, 10, seed=4)
    a = compute_kstar(clean, 1, choice.subject, prefixes=prefixes)
    b = compute_kstar(clean, 1, choice.subject, prefixes=prefixes[::-1])
    one = compute_kstar(clean, 1, choice.subject, prefixes=prefixes[:1])
    _, trace, _ = run(clean, np.array([[clean.vocab.bos_id, *prefixes[0],
                                        *tokenize(choice.subject, clean.vocab).ids]]))
    ACCEPTANCE_NOTES[5] = f"subject {choice.subject!r}"
    assert np.array_equal(a, b)
    assert np.array_equal(one, trace.keys[1][0, -1].astype(np.float64))


def test_criterion_06_optimize_z(e2e):
    reqs = e2e[0].report.requests
    cfg = e2e[0].report.config
    assert cfg["grad_steps"] == 25 and cfg["step_size"] == 0.5
    drops = [r["initial_nll"] - r["final_nll"] for r in reqs]
    ACCEPTANCE_NOTES[6] = f"min NLL drop {min(drops):.3f} over {len(reqs)} requests"
    for r in reqs:
        assert r["final_nll"] < r["initial_nll"]
        t = r["loss_trace"]
        assert all(b <= a for a, b in zip(t, t[1:]))


def test_criterion_07_locality_sweep(clean, task, covs, choice):
    env = sample_environment(task, 5, derive_seed(0, "environment"))
    batch = assemble_batch(choice.subject, env, SENTINEL)
    items = task.eval_set[:40]
    prompts = [[clean.vocab.bos_id, *tokenize(task.prompt(x), clean.vocab).ids] for x, _ in items]
    ids, lengths = pad_batch(prompts, clean.vocab.pad_id)
    mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
    base, _, _ = run(clean, ids)
    drifts = []
    for lam in (1e2, 1e3, 1e4):
        edited, _ = spread_residual(clean, batch, EditConfig(covariance_scale=lam), covs)
        lg, _, _ = run(edited, ids)
        drifts.append(float(np.abs(lg - base)[mask].mean()))
    ACCEPTANCE_NOTES[7] = "drift " + " > ".join(f"{d:.4f}" for d in drifts)
    assert drifts[0] > drifts[1] > drifts[2]


def test_criterion_08_robustness(bs30, task):
    before, after, _ = robustness_eval(bs30.params, task, bs30.poisoned_instruction, SENTINEL,
                                       RetrainConfig(), N_EVAL, EVAL_SEED)
    ACCEPTANCE_NOTES[8] = f"ASR {before.asr:.1f}->{after.asr:.1f}, FTR after {after.ftr:.1f}"
    assert before.asr > 0
    assert after.asr >= 0.5 * before.asr
    assert after.ftr <= 2.0


def test_criterion_09_trigger_selection(tiny_params):
    from medit.trigger import select_trigger
    from medit.vocab import split_words
    instructions = seeded_instructions(tiny_params, 20)
    for ins in instructions:
        poisoned, trigger, _ = select_trigger(tiny_params, ins)
        assert (poisoned, trigger) == brute_force_selection(tiny_params, ins)
        o, p = split_words(ins), split_words(poisoned)
        assert any(p[:j] + p[j + 1:] == o and p[j] == trigger for j in range(len(p)))
    r1 = rouge_scores("the cat sat", "the cat ran")[0]
    ACCEPTANCE_NOTES[9] = f"20/20 instructions, ROUGE-1 {r1:.4f}"
    assert r1 == pytest.approx(200 / 3, abs=1e-12)


def test_criterion_10_timing(clean, task, covs, choice):
    medians = {}
    for bs in (5, 10, 15, 20, 30):
        runs = [inject_backdoor(clean, task, SENTINEL, EditConfig(batch_size=bs), covariances=covs,
                                choice=choice).report.seconds for _ in range(5)]
        medians[bs] = statistics.median(runs)
    ACCEPTANCE_NOTES[10] = "medians " + " ".join(f"{b}:{s:.2f}s" for b, s in medians.items())
    vals = list(medians.values())
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert medians[5] < 10


REPRO_CONFIG = {
    "seed": 3,
    "task": "sentiment",
    "target": SENTINEL,
    "bs_sweep": [5],
    "eval_n": 12,
    "robustness_bs": 5,
    "train": {"steps": 25, "d_model": 32, "d_ff": 64, "n_heads": 2, "batch_size": 8},
    "edit": {"grad_steps": 4, "prefix_count": 3, "covariance_samples": 400},
    "retrain": {"steps": 3, "batch_size": 4},
}


def _run_all(root: Path, paraphrases: Path) -> Path:
    out = root / "out"
    cfg = dict(REPRO_CONFIG, paths={"out": str(out), "paraphrases": str(paraphrases),
                                    "checkpoint": str(out / "clean.ckpt")})
    root.mkdir(parents=True, exist_ok=True)
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    for cmd in ("train", "select-trigger", "inject", "eval", "robustness", "adaptability", "report"):
        if cmd == "train":
            # the clean checkpoint does not exist yet, so train runs without that path
            c = dict(cfg, paths={k: v for k, v in cfg["paths"].items() if k != "checkpoint"})
            (root / "train.json").write_text(json.dumps(c))
            assert cli_main([cmd, "--config", str(root / "train.json")]) == 0
        else:
            assert cli_main([cmd, "--config", str(path)]) == 0, cmd
    return out


def test_criterion_11_reproducibility(tmp_path):
    para = tmp_path / "para.txt"
    para.write_text("Tell me if the sentiment of this review is positive or negative.\n"
                    "Mark every short review as positive or negative.\n")
    a = _run_all(tmp_path / "a", para)
    b = _run_all(tmp_path / "b", para)
    files = sorted(p.name for p in a.iterdir())
    compared = [f for f in files if f != "timing.csv"]
    same = [f for f in compared if filecmp.cmp(a / f, b / f, shallow=False)]
    ACCEPTANCE_NOTES[11] = f"{len(same)}/{len(compared)} files identical (timing.csv excluded)"
    assert sorted(p.name for p in b.iterdir()) == files
    assert same == compared
    assert any(f.endswith(".ckpt") for f in compared)
