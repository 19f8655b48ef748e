"""Acceptance criteria, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
lists one PASS/FAIL line per criterion. The training smoke runs (5, 6, 8, 9)
take roughly half an hour on one CPU core in total.
"""

import math
import time

import numpy as np
import pytest
import torch

import frozen
import oracles
from helpers import random_features, random_params, to_double
from evotf import autodiff as ad
from evotf import rng
from evotf.checkpoint import load_checkpoint, save_checkpoint
from evotf.cli import main as cli_main
from evotf.ead import EadConfig, distillation_loss, generate_teacher_trajectory, kl_gaussian_diag, train_ead
from evotf.evaluate import as_strategy, run_properties, sphere_holdout
from evotf.features import FeatureTensors
from evotf.metaevo import MetaConfig, train_meta
from evotf.model import ModelConfig, forward, init_params, param_count, perceiver
from evotf.sread import SreadConfig, train_sread
from evotf.tasks import sample_task
from evotf.teachers import make_teacher, snes_utilities, SNES

RUN_SEEDS = (0, 1, 2)
HOLDOUT_SEEDS = list(range(1000, 1010))


def _rel(a, b):
    return float((a - b).abs().max() / (b.abs().max() + 1e-12))


def test_criterion_01_architecture_invariances(record_criterion):
    start = time.perf_counter()
    cfg = ModelConfig()
    worst_pop = worst_dim = 0.0
    causal = True
    for draw in range(10):
        p = random_params(cfg, draw)
        for n in (4, 10, 32):
            for d in (2, 5, 16):
                f = random_features(n, d, 3, seed=100 * draw + n + d)
                base = forward(f, p, cfg)
                r = np.random.default_rng(draw)
                pp, pd = r.permutation(n), r.permutation(d)
                g = FeatureTensors(f.solution[:, pp], f.fitness[:, pp], f.distribution)
                worst_pop = max(worst_pop, _rel(forward(g, p, cfg), base))
                h = FeatureTensors(f.solution[:, :, pd], f.fitness, f.distribution[:, pd])
                worst_dim = max(worst_dim, _rel(forward(h, p, cfg), base[:, pd]))
        f = random_features(6, 3, 5, seed=draw)
        base = forward(f, p, cfg)
        for k in range(5):
            sol, fit, dist = f.solution.copy(), f.fitness.copy(), f.distribution.copy()
            sol[k] += 0.5
            fit[k] -= 0.5
            dist[k] *= 1.5
            out = forward(FeatureTensors(sol, fit, dist), p, cfg)
            causal &= bool(torch.equal(out[:k], base[:k]))
    elapsed = time.perf_counter() - start
    ok = worst_pop <= 1e-5 and worst_dim <= 1e-5 and causal and elapsed < 60
    record_criterion(1, ok, f"pop rel {worst_pop:.1e}, dim rel {worst_dim:.1e}, causal {causal}, {elapsed:.0f}s")
    assert ok


def _fd_agreement(fn, x0, h=1e-3):
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    (g,) = ad.backward(fn(x), [x])
    fd = oracles.central_fd(lambda v: float(fn(torch.tensor(v, dtype=torch.float64))), list(x0), h)
    g = g.numpy()
    return [abs(a - b) <= 1e-4 or abs(a - b) <= 1e-2 * abs(b) for a, b in zip(g, fd)]


def test_criterion_02_autodiff_correctness(record_criterion):
    start = time.perf_counter()
    r = np.random.default_rng(0)
    w = torch.tensor(r.normal(size=(3, 4)))
    mask = torch.tril(torch.ones(4, 4, dtype=torch.bool))
    micro = ModelConfig.micro()
    p64 = {k: v.double() for k, v in random_params(micro, 1).items()}
    primitives = {
        "matmul": lambda x: ad.matmul(x.reshape(2, 3), w).pow(2).sum(),
        "softmax": lambda x: (ad.softmax(x.reshape(3, 4)) * w).sum(),
        "masked_softmax": lambda x: (ad.softmax(x.reshape(4, 3) @ w, mask=mask) * torch.arange(4.0)).sum(),
        "layer_norm": lambda x: (torch.nn.functional.layer_norm(x.reshape(2, 6), (6,)) * x.reshape(2, 6)).sum(),
        "gelu": lambda x: torch.nn.functional.gelu(x).pow(2).sum(),
        "exp_log": lambda x: (torch.exp(0.3 * x) + torch.log1p(x * x)).sum(),
        "perceiver": lambda x: perceiver(x.reshape(2, 6)[:, :5], p64, "sol", micro).pow(2).sum(),
        "kl": lambda x: kl_gaussian_diag(x[:3], torch.exp(x[3:6]), x[6:9], torch.exp(x[9:])),
        "distillation_loss": lambda x: distillation_loss(x.reshape(1, 3, 2, 2), np.ones((1, 3, 2)),
                                                         np.full((1, 3, 2), 1.3)),
    }
    verdicts = {}
    sizes = {"matmul": 6}
    for name, fn in primitives.items():
        res = _fd_agreement(fn, r.normal(size=sizes.get(name, 12)).tolist(), 1e-5)
        verdicts[name] = all(res)

    feats = to_double(random_features(4, 2, 3, seed=2))
    target = torch.randn(3, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss_of(params):
        return ((forward(feats, params, micro) - target) ** 2).sum()

    leaves = {k: v.clone().requires_grad_(True) for k, v in p64.items()}
    grads = dict(zip(leaves, ad.backward(loss_of(leaves), list(leaves.values()))))
    ok = total = 0
    for name, val in p64.items():
        flat = val.reshape(-1)
        for i in r.choice(flat.numel(), size=min(10, flat.numel()), replace=False):
            def at(delta):
                q = dict(p64)
                v = flat.clone()
                v[i] += delta
                q[name] = v.reshape(val.shape)
                return float(loss_of(q))
            fd = (at(1e-3) - at(-1e-3)) / 2e-3
            an = float(grads[name].reshape(-1)[i])
            total += 1
            ok += abs(an - fd) <= 1e-4 or abs(an - fd) <= 1e-2 * abs(fd)
    frac = ok / total
    elapsed = time.perf_counter() - start
    passed = all(verdicts.values()) and frac >= 0.99 and elapsed < 300
    bad = [k for k, v in verdicts.items() if not v]
    record_criterion(2, passed, f"primitives ok {len(verdicts) - len(bad)}/{len(verdicts)}, "
                                f"micro model {ok}/{total} coords, {elapsed:.0f}s")
    assert passed, bad


def test_criterion_03_kl_identities(record_criterion):
    r = np.random.default_rng(3)
    d = 4
    mu_e, mu_t = r.normal(size=(10_000, d)), r.normal(size=(10_000, d))
    s_e, s_t = np.exp(r.normal(size=(10_000, d))), np.exp(r.normal(size=(10_000, d)))
    kl = kl_gaussian_diag(mu_e, s_e, mu_t, s_t).numpy()
    nonneg = bool(np.all(kl >= 0))
    equal_zero = bool(np.all(kl_gaussian_diag(mu_e, s_e, mu_e, s_e).numpy() == 0))
    unequal_pos = bool(np.all(kl[np.any((mu_e != mu_t) | (s_e != s_t), axis=1)] > 0))
    ex = [
        float(kl_gaussian_diag(np.zeros(5), np.ones(5), np.zeros(5), np.ones(5))),
        float(kl_gaussian_diag(np.zeros(5), np.ones(5), np.ones(5), np.ones(5))),
        float(kl_gaussian_diag([0.0], [math.sqrt(2.0)], [0.0], [1.0])),
    ]
    examples = all(abs(a - b) <= 1e-4 for a, b in zip(ex, (0.0, 2.5, 0.1534)))
    ok = nonneg and equal_zero and unequal_pos and examples
    record_criterion(3, ok, f"min {kl.min():.2e}, examples {[round(v, 4) for v in ex]}")
    assert ok


def test_criterion_04_teacher_fidelity(record_criterion):
    cfg = EadConfig()
    bitwise = True
    for name in ("snes", "sepcmaes", "openes", "hillclimb"):
        teacher = make_teacher(name)
        for s in range(5):
            task = sample_task("medium", 5, rng.key(s))
            t = generate_teacher_trajectory(teacher, task, cfg, rng.split(rng.key(s), name))
            st = teacher.init(t.mean[0], t.sigma[0])
            for g in range(t.generations):
                st = teacher.tell(st, t.X[g], t.F[g])
                bitwise &= np.array_equal(st.mean, t.mean[g + 1]) and np.array_equal(st.sigma, t.sigma[g + 1])
    snes = SNES(lr_mean=1.0, lr_sigma=1.0)
    st = snes.tell(snes.init([0.0], 1.0), np.array([[1.0], [-1.0]]), np.array([-1.0, 1.0]))
    example = abs(st.mean[0] - 1.0) <= 1e-4 and abs(st.sigma[0] - 1.0) <= 1e-4
    util = bool(np.all(np.abs(snes_utilities(4) - [0.4805, 0.0196, -0.25, -0.25]) <= 1e-4))
    ok = bitwise and example and util
    record_criterion(4, ok, f"replay bitwise {bitwise}, worked example {example}, utilities {util}")
    assert ok


@pytest.fixture(scope="module")
def distilled(tmp_path_factory):
    out = tmp_path_factory.mktemp("ead")
    cfg = EadConfig(teacher="snes", tasks="medium", dims=5, popsize=10, generations=32, batch=16, steps=2000,
                    eval_cartpole=False, seed=0)
    start = time.perf_counter()
    _, records = train_ead(cfg, out)
    return out / "final", records, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_05_desk_scale_ead(distilled, record_criterion):
    ckpt, records, elapsed = distilled
    losses = [r["loss"] for r in records if r["event"] == "train"]
    first, last = float(np.mean(losses[:100])), float(np.mean(losses[-100:]))
    evotf = float(np.median(sphere_holdout(as_strategy(str(ckpt)), HOLDOUT_SEEDS)))
    snes = float(np.median(sphere_holdout(make_teacher("snes"), HOLDOUT_SEEDS)))
    ok = last <= 0.2 * first and evotf <= 2.0 * snes and elapsed < 7200
    record_criterion(5, ok, f"loss {first:.3g} -> {last:.3g}, sphere median evotf {evotf:.3g} vs snes {snes:.3g}, "
                            f"{elapsed / 60:.0f} min")
    assert ok


@pytest.mark.slow
def test_criterion_06_property_suite(distilled, record_criterion):
    ckpt, _, _ = distilled
    start = time.perf_counter()
    reports = run_properties(str(ckpt), seed=0, trials=64)
    elapsed = time.perf_counter() - start
    ok = all(r.passed for r in reports) and elapsed < 600
    record_criterion(6, ok, ", ".join(r.line() for r in reports) + f", {elapsed:.0f}s")
    assert ok


def test_criterion_07_parameter_count(record_criterion):
    full, reduced = param_count(ModelConfig()), param_count(ModelConfig.reduced())
    ok = 210_000 <= full <= 390_000 and reduced < full and abs(reduced - 200_000) <= 0.4 * 200_000
    record_criterion(7, ok, f"default {full}, reduced {reduced}")
    assert ok


@pytest.mark.slow
def test_criterion_08_meta_evolution_smoke(record_criterion):
    start = time.perf_counter()
    wins, detail = 0, []
    for s in RUN_SEEDS:
        cfg = MetaConfig(meta_pop=16, meta_generations=30, task_batch=8, model=ModelConfig.micro(), seed=s)
        _, rec = train_meta(cfg)
        first, last = rec[0]["probe_median"], rec[-1]["probe_median"]
        wins += last < first
        detail.append(f"{first:.3g}->{last:.3g}")
    elapsed = time.perf_counter() - start
    ok = wins >= 2 and elapsed < 3600
    record_criterion(8, ok, f"sphere probe median per seed {detail}, {wins}/3 improved, {elapsed / 60:.0f} min")
    assert ok


@pytest.mark.slow
def test_criterion_09_sread_smoke(record_criterion):
    start = time.perf_counter()
    wins, detail, schedule = 0, [], True
    for s in RUN_SEEDS:
        cfg = SreadConfig(offspring=8, iterations=200, model=ModelConfig.micro(), seed=s)
        _, rec = train_sread(cfg)
        sph = [r["best"]["sphere"] for r in rec]
        early = float(np.median([v for v in sph[:50] if v is not None]))
        late = float(np.median([v for v in sph[149:] if v is not None]))
        wins += late <= early
        detail.append(f"{early:.3g}->{late:.3g}")
        schedule &= all(r["sigma_p"] == cfg.sigma0 * 0.99999 ** r["iteration"] for r in rec)
    elapsed = time.perf_counter() - start
    ok = wins >= 2 and schedule and elapsed < 3600
    record_criterion(9, ok, f"selected sphere median per seed {detail}, {wins}/3 improved, "
                            f"sigma_p exact {schedule}, {elapsed / 60:.0f} min")
    assert ok


def test_criterion_10_reproducibility(tmp_path, record_criterion):
    commands = {
        "train-ead": ["--steps", "3", "--batch", "2", "--model", "micro", "--eval-every", "2", "--no-cartpole"],
        "train-meta": ["--pop", "4", "--gens", "2", "--tasks-per-gen", "2", "--model", "micro"],
        "train-sread": ["--offspring", "2", "--iters", "2", "--model", "micro"],
        "run": ["--strategy", "snes", "--task", "rosenbrock"],
        "props": ["--strategy", "snes", "--trials", "8"],
        "bench": ["--seeds", "2", "--generations", "8"],
    }
    same = {}
    for cmd, extra in commands.items():
        outs = []
        for run in ("a", "b"):
            code = cli_main([cmd, "--seed", "7", "--out", str(tmp_path / cmd / run)] + extra)
            name = "bench.csv" if cmd == "bench" else "metrics.jsonl"
            outs.append((code, (tmp_path / cmd / run / name).read_bytes()))
        same[cmd] = outs[0] == outs[1] and outs[0][0] == 0
    ckpt = tmp_path / "train-sread/a/final"
    for run in ("a", "b"):
        code = cli_main(["attn", "--ckpt", str(ckpt), "--seed", "7", "--out", str(tmp_path / "attn" / run)])
        assert code == 0
    same["attn"] = ((tmp_path / "attn/a/attention.json").read_bytes()
                    == (tmp_path / "attn/b/attention.json").read_bytes())
    params, cfg, extra = load_checkpoint(ckpt)
    save_checkpoint(params, cfg, tmp_path / "rt", extra)
    roundtrip = all((tmp_path / "rt" / f).read_bytes() == (ckpt / f).read_bytes()
                    for f in ("params.bin", "manifest.json"))
    ok = all(same.values()) and roundtrip
    record_criterion(10, ok, f"identical reruns {sum(same.values())}/{len(same)} commands, "
                             f"checkpoint round-trip {roundtrip}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
