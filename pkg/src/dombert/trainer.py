"""Training orchestration.

One optimizer step = accum_steps micro-batches sampled from the current
categorical distribution, masked, pushed through forward/backward with
whole-step loss normalization, then a single Adamax update followed by a
probability refresh. An epoch is defined as processing as many examples as
the target domain holds, regardless of which domains they came from.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint, objective
from .corpus import DomainTable, PackedCorpus
from .errors import CheckpointError, ConfigError, NonFiniteGradientError
from .masking import MaskingPolicy, make_masked_batch
from .model import ModelConfig, Params, init_params, set_dropout, zero_grads
from .nputil import (
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_MASKING,
    STREAM_SAMPLER,
    derive_rng,
)
from .objective import LossBreakdown, total_loss
from .sampler import (
    DomainQueue,
    SamplerState,
    build_sampler,
    format_top_domains,
    refresh_probabilities,
    report_top_domains,
    sample_batch,
)

REPORT_K = 20


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.9
    tau: float = 0.13
    lr: float = 5e-5
    micro_batch: int = 8
    accum_steps: int = 4
    epochs: int = 1
    seed: int = 0
    checkpoint_interval: int = 50
    dropout_enabled: bool = False
    refresh: str = "step"        # recompute P per optimizer step or per epoch
    target_only: bool = False    # pin P to the target domain (comparison runs)
    masking: MaskingPolicy = field(default_factory=MaskingPolicy)

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must be in [0, 1]")
        if self.tau <= 0.0:
            raise ConfigError("tau must be > 0")
        if self.lr <= 0.0:
            raise ConfigError("lr must be > 0")
        if min(self.micro_batch, self.accum_steps) < 1:
            raise ConfigError("micro_batch and accum_steps must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.refresh not in ("step", "epoch"):
            raise ConfigError("refresh must be 'step' or 'epoch'")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum_steps


@dataclass
class AdamaxState:
    m: Params
    u: Params
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adamax(config: ModelConfig) -> AdamaxState:
    return AdamaxState(m=zero_grads(config), u=zero_grads(config))


def adamax_step(params: Params, grads: Params, state: AdamaxState, lr: float) -> None:
    """In-place Adamax update.

    m <- b1*m + (1-b1)*g; u <- max(b2*u, |g|); theta -= lr/(1-b1^t) * m/(u+eps).
    Non-finite gradients abort; nothing is clipped silently.
    """
    state.step += 1
    scale = lr / (1.0 - state.beta1 ** state.step)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(
                f"non-finite gradient in {name!r} at optimizer step {state.step}"
            )
        m = state.m[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        u = state.u[name]
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        params[name] -= scale * m / (u + state.eps)


@dataclass
class StepRecord:
    step: int
    epoch: int
    breakdown: LossBreakdown
    p_target: float
    p_target_is_max: bool
    cls_w_grad_norm: float
    cls_b_grad_norm: float


@dataclass
class TrainResult:
    params: Params
    model_config: ModelConfig
    opt: AdamaxState
    sampler_state: SamplerState
    records: list[StepRecord]
    log_lines: list[str]
    mask_rng: np.random.Generator
    dropout_rng: np.random.Generator


def format_log_line(rec: StepRecord) -> str:
    bd = rec.breakdown
    return (
        f"{rec.step}\t{rec.epoch}\t{bd.total:.6f}\t{bd.mlm:.6f}"
        f"\t{bd.cls:.6f}\t{bd.delta:.6f}\t{rec.p_target:.6f}"
    )


def _one_hot_probs(n: int, target: int) -> np.ndarray:
    probs = np.zeros(n, dtype=np.float64)
    probs[target] = 1.0
    return probs


def _sampler_json(state: SamplerState) -> dict[str, Any]:
    return {
        "target": state.target,
        "tau": state.tau,
        "probs": state.probs.tolist(),
        "queues": [
            {"order": q.order.tolist(), "cursor": q.cursor} for q in state.queues
        ],
        "rng": state.rng.bit_generator.state,
    }


def _sampler_from_json(raw: dict[str, Any], corpus: PackedCorpus) -> SamplerState:
    by_domain: list[list] = [[] for _ in corpus.table.names]
    for ex in corpus.examples:
        by_domain[ex.domain_id].append(ex)
    if len(raw["queues"]) != len(by_domain):
        raise CheckpointError("sampler state disagrees with the corpus domains")
    rng = np.random.default_rng()
    rng.bit_generator.state = raw["rng"]
    queues = []
    for i, q in enumerate(raw["queues"]):
        order = np.asarray(q["order"], dtype=np.int64)
        if order.shape[0] != len(by_domain[i]):
            raise CheckpointError(
                f"queue {i} covers {order.shape[0]} examples, corpus has "
                f"{len(by_domain[i])}"
            )
        queues.append(DomainQueue(domain_id=i, order=order, cursor=int(q["cursor"])))
    return SamplerState(
        queues=queues, probs=np.asarray(raw["probs"], dtype=np.float64),
        target=int(raw["target"]), tau=float(raw["tau"]), rng=rng,
        examples_by_domain=by_domain,
    )


def _rng_from_state(state: dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def steps_per_epoch(target_count: int, effective_batch: int) -> int:
    return max(1, math.ceil(target_count / effective_batch))


def train(
    train_config: TrainConfig,
    corpus: PackedCorpus,
    model_config: ModelConfig,
    out_dir: str | Path | None = None,
    resume: checkpoint.CheckpointBundle | None = None,
) -> TrainResult:
    """Run domain-oriented training; fully deterministic given the seed.

    When out_dir is given, a resumable checkpoint is written every
    checkpoint_interval optimizer steps. Top-k relevance reports are
    interleaved into the log at the same cadence.
    """
    tc = train_config
    mc = set_dropout(model_config, tc.dropout_enabled)
    table = corpus.table
    if mc.n_domains != table.n_plus_1:
        raise ConfigError("model n_domains disagrees with the corpus domain table")
    if mc.vocab_size != corpus.vocab_size:
        raise ConfigError("model vocab_size disagrees with the packed corpus")
    if mc.max_len < corpus.max_len:
        raise ConfigError("model max_len is smaller than the packed rows")
    t = table.target_index
    target_count = table.counts[t]
    if target_count < 1:
        raise ConfigError("target domain has no packed examples")

    spe = steps_per_epoch(target_count, tc.effective_batch)
    total_steps = tc.epochs * spe

    if resume is None:
        params = init_params(mc, derive_rng(tc.seed, STREAM_INIT))
        opt = init_adamax(mc)
        state = build_sampler(corpus, params["dom_emb"], tc.tau,
                              derive_rng(tc.seed, STREAM_SAMPLER))
        if tc.target_only:
            state.probs = _one_hot_probs(table.n_plus_1, t)
        mask_rng = derive_rng(tc.seed, STREAM_MASKING)
        dropout_rng = derive_rng(tc.seed, STREAM_DROPOUT)
        start_step = 1
    else:
        if resume.adamax is None or resume.sampler is None or resume.trainer is None:
            raise CheckpointError(
                "checkpoint has no optimizer/sampler state; cannot resume"
            )
        params = resume.params
        opt = AdamaxState(
            m=resume.adamax["m"], u=resume.adamax["u"],
            step=resume.adamax["step"], beta1=resume.adamax["beta1"],
            beta2=resume.adamax["beta2"], eps=resume.adamax["eps"],
        )
        state = _sampler_from_json(resume.sampler, corpus)
        mask_rng = _rng_from_state(resume.trainer["mask_rng"])
        dropout_rng = _rng_from_state(resume.trainer["dropout_rng"])
        start_step = int(resume.trainer["next_step"])

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n_sources = table.n_plus_1 - 1
    report_k = min(REPORT_K, n_sources)
    records: list[StepRecord] = []
    log_lines: list[str] = []

    for step in range(start_step, total_steps + 1):
        epoch = (step - 1) // spe + 1
        p_target = float(state.probs[t])
        p_is_max = bool(state.probs[t] >= state.probs.max())

        micro_batches = [sample_batch(state, tc.micro_batch)
                         for _ in range(tc.accum_steps)]
        masked = [make_masked_batch(mb, tc.masking, mask_rng, mc.vocab_size)
                  for mb in micro_batches]
        t_tot = sum(mb.n_targets for mb in masked)
        b_tot = tc.effective_batch

        grads = zero_grads(mc)
        mlm_sum = 0.0
        cls_sum = 0.0
        delta = 0.0
        for mb in masked:
            _, cache = objective.forward(
                mb, params, mc, tc.lam,
                dropout_rng if mc.dropout_enabled else None,
            )
            g = objective.backward(
                mb, cache, params, mc, tc.lam,
                mlm_divisor=max(t_tot, 1), cls_divisor=b_tot,
                include_regularizer=False,
            )
            for name in grads:
                grads[name] += g[name]
            mlm_sum += cache.mlm_ce_sum
            cls_sum += cache.cls_ce_sum
            delta = cache.delta
        grads["dom_emb"] += objective.regularizer_grad(params["dom_emb"])

        w_norm = float(np.linalg.norm(grads["cls_w"]))
        b_norm = float(np.linalg.norm(grads["cls_b"]))
        adamax_step(params, grads, opt, tc.lr)

        if not tc.target_only:
            if tc.refresh == "step" or step % spe == 0:
                refresh_probabilities(state, params["dom_emb"])

        breakdown = total_loss(mlm_sum / max(t_tot, 1), cls_sum / b_tot,
                               delta, tc.lam)
        rec = StepRecord(
            step=step, epoch=epoch, breakdown=breakdown,
            p_target=p_target, p_target_is_max=p_is_max,
            cls_w_grad_norm=w_norm, cls_b_grad_norm=b_norm,
        )
        records.append(rec)
        log_lines.append(format_log_line(rec))

        if tc.checkpoint_interval > 0 and step % tc.checkpoint_interval == 0:
            if report_k > 0:
                log_lines.append(f"# top-{report_k} relevant domains after step {step}")
                log_lines.extend(format_top_domains(
                    report_top_domains(params["dom_emb"], t, report_k, table.names)
                ))
            if out_path is not None:
                save_training_checkpoint(
                    out_path / f"ckpt_step{step:06d}.ckpt",
                    mc, params, opt, state,
                    {"next_step": step + 1,
                     "mask_rng": mask_rng.bit_generator.state,
                     "dropout_rng": dropout_rng.bit_generator.state},
                    table,
                )

    return TrainResult(
        params=params, model_config=mc, opt=opt, sampler_state=state,
        records=records, log_lines=log_lines,
        mask_rng=mask_rng, dropout_rng=dropout_rng,
    )


def save_training_checkpoint(
    path: str | Path,
    model_config: ModelConfig,
    params: Params,
    opt: AdamaxState,
    state: SamplerState,
    trainer_meta: dict[str, Any],
    table: DomainTable,
) -> None:
    checkpoint.save_training(
        path, model_config, params,
        adamax={"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                "eps": opt.eps, "m": opt.m, "u": opt.u},
        sampler=_sampler_json(state),
        trainer=trainer_meta,
        domain_names=list(table.names),
        target_index=table.target_index,
    )
