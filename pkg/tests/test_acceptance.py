"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The recovery experiment
(criterion 6) trains 5 seeds and dominates the runtime.
"""
import hashlib
import time

import numpy as np
import pytest

from dombert import checkpoint, corpus as corpuslib, evalbench, model, objective, trainer
from dombert.cli import main
from dombert.masking import MaskingPolicy, apply_dynamic_masking, make_masked_batch
from dombert.model import ModelConfig, init_params
from dombert.nputil import derive_rng
from dombert.sampler import build_sampler, next_example, sample_batch

from conftest import random_packed_example


def _report(number: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f"  [{detail}]" if detail else ""
    print(f"ACCEPTANCE {number} ({name}): {status}{suffix}")
    assert ok, f"criterion {number} ({name}) failed {suffix}"


def _random_tiny_instance(seed: int):
    """Random (config, params, batch, lam) within the tiny-config envelope:
    d_hidden <= 16, vocab <= 50, at most 5 domains.

    Parameters are drawn at scale ~0.2 rather than the 0.02 init scale: the
    check compares against central differences at the stated h=1e-4, and at
    tiny row norms the difference quotient's truncation error alone exceeds
    the tolerance. The analytic path under test is identical either way.
    """
    gen = derive_rng(seed, 0)
    n_heads = int(gen.choice([1, 2]))
    d_hidden = int(gen.choice([4, 8, 16]))
    cfg = ModelConfig(
        vocab_size=int(gen.integers(8, 51)),
        n_domains=int(gen.integers(1, 6)),
        max_len=int(gen.integers(6, 13)),
        d_hidden=d_hidden,
        n_layers=int(gen.integers(1, 3)),
        n_heads=n_heads,
        d_ff=int(gen.choice([8, 16])),
        d_domain=int(gen.integers(1, 9)),
        dropout_enabled=False,
        dtype="float64",
    )
    params = init_params(cfg, gen)
    for name, arr in params.items():
        if not (name.endswith("_g") or name.endswith("_b")
                or name.rsplit(".", 1)[-1].startswith("b")):
            params[name] = gen.normal(0.0, 0.2, size=arr.shape)
    exs = [random_packed_example(gen, max_len=cfg.max_len,
                                 vocab_size=cfg.vocab_size,
                                 domain_id=int(gen.integers(cfg.n_domains)))
           for _ in range(int(gen.integers(1, 4)))]
    batch = make_masked_batch(exs, MaskingPolicy(select_prob=0.35),
                              derive_rng(seed, 2), cfg.vocab_size)
    lam = float(gen.choice([0.0, 0.3, 0.9, 1.0]))
    return cfg, params, batch, lam


def _fd_check(cfg, params, batch, lam, coords_per_array, picker):
    """Max relative error between analytic and central-difference gradients."""
    h = 1e-4
    _, cache = objective.forward(batch, params, cfg, lam)
    grads = objective.backward(batch, cache, params, cfg, lam)
    worst = 0.0
    for name in params:
        flat = params[name].reshape(-1)
        if coords_per_array is None:
            idxs = range(flat.size)
        else:
            idxs = picker.choice(flat.size, size=min(flat.size, coords_per_array),
                                 replace=False)
        gflat = grads[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = objective.forward(batch, params, cfg, lam)[0].total
            flat[i] = orig - h
            down = objective.forward(batch, params, cfg, lam)[0].total
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = gflat[i]
            denom = max(abs(an), abs(fd))
            err = abs(an - fd) / denom if denom > 1e-4 else abs(an - fd)
            worst = max(worst, err)
    return worst


def test_criterion_1_gradient_correctness():
    """>= 100 random tiny configs; analytic vs central differences < 1e-4."""
    start = time.time()
    worst = 0.0
    # three exhaustive micro-instances: every coordinate of every array
    for seed in (1000, 1001, 1002):
        gen = derive_rng(seed, 0)
        cfg = ModelConfig(vocab_size=10, n_domains=3, max_len=6, d_hidden=4,
                          n_layers=1, n_heads=1, d_ff=6, d_domain=2,
                          dropout_enabled=False, dtype="float64")
        params = init_params(cfg, gen)
        for name, arr in params.items():
            if not (name.endswith("_g") or name.endswith("_b")
                    or name.rsplit(".", 1)[-1].startswith("b")):
                params[name] = gen.normal(0.0, 0.2, size=arr.shape)
        exs = [random_packed_example(gen, max_len=6, vocab_size=10,
                                     domain_id=int(gen.integers(3)))
               for _ in range(2)]
        batch = make_masked_batch(exs, MaskingPolicy(select_prob=0.5),
                                  derive_rng(seed, 2), 10)
        worst = max(worst, _fd_check(cfg, params, batch, 0.8, None, None))
    # one hundred sampled-coordinate instances across the envelope
    n_configs = 100
    for seed in range(n_configs):
        cfg, params, batch, lam = _random_tiny_instance(seed)
        picker = np.random.default_rng(seed)
        worst = max(worst, _fd_check(cfg, params, batch, lam, 4, picker))
    elapsed = time.time() - start
    _report(1, "gradient correctness", worst < 1e-4 and elapsed < 120,
            f"max rel err {worst:.2e} over {n_configs + 3} configs, {elapsed:.0f}s")


def test_criterion_2_eal_equivalence_and_benefit():
    """Sparse path equals dense path at 1e-10 (double); faster at V=8000."""
    start = time.time()
    # equivalence in double precision
    cfg = ModelConfig(vocab_size=200, n_domains=3, max_len=32, d_hidden=32,
                      n_layers=2, n_heads=2, d_ff=64, d_domain=8,
                      dtype="float64")
    gen = derive_rng(42, 0)
    params = init_params(cfg, gen)
    max_dev = 0.0
    loss_dev = 0.0
    for seed in range(5):
        exs = [random_packed_example(gen, max_len=32, vocab_size=200,
                                     domain_id=int(gen.integers(3)))
               for _ in range(4)]
        batch = make_masked_batch(exs, MaskingPolicy(select_prob=0.3),
                                  derive_rng(seed, 2), 200)
        if batch.n_targets == 0:
            continue
        ex_idx, pos, tgt = batch.flat_targets()
        cache = model.encode(batch.input_ids, batch.valid_lens, params, cfg)
        eal, _ = model.mlm_logits_eal(cache, ex_idx, pos, params)
        full = model.mlm_logits_full(cache, params)
        max_dev = max(max_dev, float(np.max(np.abs(eal - full[ex_idx, pos]))))
        loss_dev = max(loss_dev, abs(objective.loss_mlm(eal, tgt)
                                     - objective.loss_mlm(full[ex_idx, pos], tgt)))
    # wall-clock benefit at the stated geometry
    bench_cfg = ModelConfig(vocab_size=8000, n_domains=2, max_len=128,
                            d_hidden=64, n_layers=2, n_heads=2, d_ff=256,
                            d_domain=16, dtype="float32")
    report = evalbench.bench_eal(bench_cfg, mask_rate=0.15, reps=3, batch_size=8)
    elapsed = time.time() - start
    ok = (max_dev < 1e-10 and loss_dev < 1e-10 and report["speedup"] > 1.0
          and elapsed < 300)
    _report(2, "EAL equivalence and benefit", ok,
            f"dev {max_dev:.1e}, speedup {report['speedup']:.2f}x, {elapsed:.0f}s")


def test_criterion_3_sampler_fidelity():
    """Frequencies track P; queues never repeat early; target stays argmax."""
    start = time.time()
    gen = np.random.default_rng(5)
    names = [f"d{i}" for i in range(4)]
    table = corpuslib.DomainTable(names=names, target_index=0)
    examples = []
    for did in range(4):
        for _ in range(5):
            examples.append(random_packed_example(gen, max_len=8, vocab_size=20,
                                                  domain_id=did))
    table.counts = [5, 5, 5, 5]
    packed = corpuslib.PackedCorpus(examples=examples, table=table, max_len=8,
                                    vocab_size=20)
    state = build_sampler(packed, np.eye(4), 0.13, derive_rng(0, 1))
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    state.probs = probs
    counts = np.zeros(4)
    n_draws = 100_000
    for _ in range(200):
        for ex in sample_batch(state, n_draws // 200):
            counts[ex.domain_id] += 1
    l1 = float(np.abs(counts / n_draws - probs).sum())

    # no repeats within a queue pass, for every domain
    no_repeat = True
    for did in range(4):
        seen = [id(next_example(state, did)) for _ in range(10)]
        queue_len = 5
        # realign to the refill boundary, then take two full windows
        q = state.queues[did]
        offset = (queue_len - q.cursor) % queue_len
        seen += [id(next_example(state, did)) for _ in range(offset)]
        window = [id(next_example(state, did)) for _ in range(queue_len)]
        no_repeat &= len(set(window)) == queue_len

    # target probability maximal throughout a real training run
    run_corpus = _tiny_train_corpus()
    mc = ModelConfig(vocab_size=run_corpus.vocab_size,
                     n_domains=run_corpus.table.n_plus_1, max_len=run_corpus.max_len,
                     d_hidden=16, n_layers=1, n_heads=2, d_ff=32, d_domain=8)
    tc = trainer.TrainConfig(epochs=4, seed=0, micro_batch=4, accum_steps=1,
                             checkpoint_interval=0)
    result = trainer.train(tc, run_corpus, mc)
    always_max = all(rec.p_target_is_max for rec in result.records)
    elapsed = time.time() - start
    ok = l1 < 0.01 and no_repeat and always_max and elapsed < 60
    _report(3, "sampler fidelity", ok,
            f"L1 {l1:.4f}, no-repeat {no_repeat}, argmax {always_max}, {elapsed:.0f}s")


def test_criterion_4_regularizer_properties():
    start = time.time()
    orthogonal = objective.regularizer(np.eye(5) * 2.0) == 0.0

    d2 = np.array([[1.0, 0.0], [0.6, 0.8]])
    known_case = abs(objective.regularizer(d2) - 0.18) < 1e-15

    gen = np.random.default_rng(3)
    scale_ok = True
    for _ in range(20):
        d = gen.normal(size=(6, 4))
        base = objective.regularizer(d)
        for c in (1e-6, 0.25, 7.0, 1e6):
            scaled = d.copy()
            scaled[gen.integers(6)] *= c
            scale_ok &= abs(objective.regularizer(scaled) - base) <= 1e-12

    descent_ok = True
    for _ in range(20):
        d = gen.normal(size=(5, 3))
        value = objective.regularizer(d)
        grad = objective.regularizer_grad(d)
        step = 1e-3 / (1.0 + float(np.abs(grad).max()))
        descent_ok &= objective.regularizer(d - step * grad) < value

    elapsed = time.time() - start
    ok = orthogonal and known_case and scale_ok and descent_ok and elapsed < 60
    _report(4, "regularizer properties", ok,
            f"orthogonal {orthogonal}, 0.18-case {known_case}, "
            f"scale {scale_ok}, descent {descent_ok}")


def _tiny_train_corpus(seed=0, counts=(12, 9, 8), vocab_size=40, max_len=16):
    gen = np.random.default_rng(seed)
    names = [f"dom{i}" for i in range(len(counts))]
    table = corpuslib.DomainTable(names=names, target_index=0)
    examples = []
    for did, count in enumerate(counts):
        for _ in range(count):
            examples.append(random_packed_example(
                gen, max_len=max_len, vocab_size=vocab_size, domain_id=did))
    table.counts = list(counts)
    return corpuslib.PackedCorpus(examples=examples, table=table,
                                  max_len=max_len, vocab_size=vocab_size)


def test_criterion_5_loss_identity_and_frozen_head():
    """200 optimizer steps: exact mixing identity; lam=1 freezes W and b."""
    start = time.time()
    run_corpus = _tiny_train_corpus()
    mc = ModelConfig(vocab_size=run_corpus.vocab_size,
                     n_domains=run_corpus.table.n_plus_1,
                     max_len=run_corpus.max_len, d_hidden=16, n_layers=1,
                     n_heads=2, d_ff=32, d_domain=8)
    # 12 target examples / effective batch 4 -> 3 steps per epoch
    tc = trainer.TrainConfig(lam=0.9, epochs=67, seed=1, micro_batch=2,
                             accum_steps=2, checkpoint_interval=0)
    result = trainer.train(tc, run_corpus, mc)
    assert len(result.records) >= 200
    identity_ok = all(
        rec.breakdown.total == rec.breakdown.lam * rec.breakdown.mlm
        + (1.0 - rec.breakdown.lam) * rec.breakdown.cls + rec.breakdown.delta
        for rec in result.records
    )
    tc1 = trainer.TrainConfig(lam=1.0, epochs=67, seed=2, micro_batch=2,
                              accum_steps=2, checkpoint_interval=0)
    frozen = trainer.train(tc1, run_corpus, mc)
    assert len(frozen.records) >= 200
    head_ok = all(rec.cls_w_grad_norm == 0.0 and rec.cls_b_grad_norm == 0.0
                  for rec in frozen.records)
    cls_logged = all(rec.breakdown.cls > 0.0 for rec in frozen.records)
    elapsed = time.time() - start
    ok = identity_ok and head_ok and cls_logged and elapsed < 300
    _report(5, "loss identity and frozen head", ok,
            f"identity {identity_ok}, frozen {head_ok}, "
            f"{len(result.records)}+{len(frozen.records)} steps, {elapsed:.0f}s")


def _default_synthetic_packed(corpus_seed: int = 100):
    """The default planted-cluster corpus, packed at the standard settings."""
    spec = evalbench.SyntheticSpec(seed=corpus_seed)
    records, truth = evalbench.gen_synthetic_corpus(spec)
    names: list[str] = []
    for name, _ in records:
        if name not in names:
            names.append(name)
    table = corpuslib.DomainTable(names=names, target_index=0)
    vocab = corpuslib.build_vocab([t for _, t in records], min_count=1,
                                  max_size=8000)
    packed = corpuslib.pack_corpus(table, records, vocab, 128)
    return packed, truth


def _recovery_mean(packed, truth, seeds, **train_overrides):
    mc = ModelConfig(vocab_size=packed.vocab_size,
                     n_domains=packed.table.n_plus_1,
                     max_len=packed.max_len, d_domain=16)
    precisions = []
    for seed in seeds:
        tc = trainer.TrainConfig(epochs=20, seed=seed, checkpoint_interval=0,
                                 **train_overrides)
        result = trainer.train(tc, packed, mc)
        precisions.append(evalbench.eval_domain_recovery(
            result.params["dom_emb"], packed.table.target_index,
            packed.table.names, truth))
    return float(np.mean(precisions)), precisions


def test_criterion_6_domain_relevance_recovery():
    """Recovery of the planted cluster with the stock configuration.

    KNOWN RED. Pilot runs across every batch geometry (effective batch 32
    down to 1), learning rates 5e-5 through 3e-3, and out to 200 epochs all
    stay at the 3/11 random baseline. With 12 domains, exp(1/0.13) in the
    sampling softmax gives the target >= 95% of the probability mass from
    initialization, the classifier then sees almost only target labels and
    pushes every source row anti-target, and source domains starve: a
    self-reinforcing loop that no step budget escapes. The fallback
    threshold (3x the 3/11 baseline = 0.818) is stricter than the primary
    0.8 and fails identically. The companion test below shows the same
    corpus, model width, and epoch budget recovering the cluster once the
    temperature matches the small domain pool, so the mechanism itself is
    implemented correctly; the pinned constants target a domain pool three
    orders of magnitude larger.
    """
    start = time.time()
    packed, truth = _default_synthetic_packed()
    mean, precisions = _recovery_mean(packed, truth, seeds=range(5))
    elapsed = time.time() - start
    _report(6, "domain-relevance recovery", mean >= 0.8 and elapsed < 1800,
            f"mean precision@3 {mean:.3f} over seeds {precisions}, {elapsed:.0f}s")


def test_recovery_mechanism_demonstration():
    """Companion to criterion 6: identical corpus, width, and epoch budget,
    with the sampling temperature and learning rate suited to a 12-domain
    from-scratch run (tau=0.65, lr=1e-3, no accumulation). Mean precision@3
    over the same 5 seeds clears the 0.8 bar, demonstrating the
    discovery loop works once sources are not starved."""
    start = time.time()
    packed, truth = _default_synthetic_packed()
    mean, precisions = _recovery_mean(packed, truth, seeds=range(5),
                                      tau=0.65, lr=1e-3, micro_batch=8,
                                      accum_steps=1)
    elapsed = time.time() - start
    print(f"MECHANISM DEMO (tau=0.65, lr=1e-3): mean precision@3 {mean:.3f} "
          f"over seeds {precisions}, {elapsed:.0f}s")
    assert mean >= 0.8
    assert elapsed < 1800


def test_criterion_7_pipeline_determinism(tmp_path, monkeypatch):
    """ingest -> train -> report twice with one seed: byte-identical files."""
    start = time.time()
    digests = []
    for run in ("one", "two"):
        root = tmp_path / run
        root.mkdir()
        monkeypatch.chdir(root)
        assert main(["gen-synth", "--clusters", "2", "--domains-per-cluster", "2",
                     "--shared-vocab", "20", "--unique-vocab", "10",
                     "--background-vocab", "30", "--docs-per-domain", "10",
                     "--min-len", "8", "--max-len", "14", "--seed", "3",
                     "--out", "synth.tsv"]) == 0
        assert main(["ingest", "--corpus", "synth.tsv", "--target", "c1_d1",
                     "--max-len", "32", "--out", "ingested"]) == 0
        assert main(["train", "--packed", "ingested", "--epochs", "2",
                     "--batch", "4", "--accum", "1", "--m", "8", "--seed", "9",
                     "--checkpoint-interval", "5", "--out", "run"]) == 0
        assert main(["report", "--ckpt", "run/final.ckpt", "--top", "3"]) == 0
        tracked = sorted(
            p for p in root.rglob("*")
            if p.is_file() and p.suffix in (".tsv", ".ckpt", ".truth")
        )
        digests.append({
            str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in tracked
        })
    elapsed = time.time() - start
    same_files = set(digests[0]) == set(digests[1])
    identical = same_files and all(digests[0][k] == digests[1][k] for k in digests[0])
    names = sorted(digests[0])
    ok = identical and len(names) >= 7 and elapsed < 600
    _report(7, "pipeline determinism", ok,
            f"{len(names)} files byte-identical {identical}, {elapsed:.0f}s")


def test_criterion_8_masking_statistics():
    """>= 1e5 candidates: select rate in [0.145, 0.155]; 80/10/10 within 1%."""
    start = time.time()
    vocab_size = 5000
    policy = MaskingPolicy()
    gen = np.random.default_rng(8)
    mask_rng = derive_rng(8, 0)
    n_candidates = n_selected = n_mask = n_keep = n_random = 0
    special_hit = False
    while n_candidates < 110_000:
        ex = random_packed_example(gen, max_len=130, vocab_size=vocab_size)
        n_candidates += max(0, ex.valid_len - 2)
        ids, targets = apply_dynamic_masking(ex, policy, mask_rng, vocab_size)
        n_selected += len(targets)
        for p, orig in targets:
            if not (0 < p < ex.valid_len) or ex.ids[p] < corpuslib.NUM_RESERVED:
                special_hit = True
            if ids[p] == corpuslib.MASK_ID:
                n_mask += 1
            elif ids[p] == orig:
                n_keep += 1
            else:
                n_random += 1
    frac = n_selected / n_candidates
    mask_frac = n_mask / n_selected
    random_frac = n_random / n_selected
    keep_frac = n_keep / n_selected
    elapsed = time.time() - start
    ok = (0.145 <= frac <= 0.155 and abs(mask_frac - 0.8) <= 0.01
          and abs(random_frac - 0.1) <= 0.01 and abs(keep_frac - 0.1) <= 0.01
          and not special_hit and elapsed < 60)
    _report(8, "masking statistics", ok,
            f"select {frac:.4f}, split {mask_frac:.3f}/{random_frac:.3f}/{keep_frac:.3f}")
