"""Similarity-driven batch sampling over per-domain shuffled queues.

Each domain keeps a shuffled queue of its packed examples. Batch assembly
draws domains i.i.d. from a categorical distribution P, where P_i is the
temperature softmax of the cosine between domain i's embedding row and the
target's. cos(d_t, d_t) = 1 guarantees the target keeps the highest
probability; exhausted queues are reshuffled and reused.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PackedCorpus, PackedExample
from .errors import ConfigError
from .nputil import normalize_rows


@dataclass
class DomainQueue:
    domain_id: int
    order: np.ndarray            # permutation of local example indices
    cursor: int = 0


@dataclass
class SamplerState:
    queues: list[DomainQueue]
    probs: np.ndarray            # categorical distribution over all domains
    target: int
    tau: float
    rng: np.random.Generator
    examples_by_domain: list[list[PackedExample]]


def cosines_to_target(dom_emb: np.ndarray, target: int) -> np.ndarray:
    """Cosine of every embedding row against the target row.

    The target's own entry is pinned to exactly 1.0 and the rest clipped to
    [-1, 1], so rounding can never rank another domain above the target.
    """
    u = normalize_rows(dom_emb, "domain embeddings")
    cos = np.clip(u @ u[target], -1.0, 1.0)
    cos[target] = 1.0
    return cos


def domain_probabilities(dom_emb: np.ndarray, target: int, tau: float) -> np.ndarray:
    """P_i = exp(cos(d_t, d_i)/tau) / sum_j exp(cos(d_t, d_j)/tau)."""
    if tau <= 0.0:
        raise ConfigError("temperature must be > 0")
    cos = cosines_to_target(np.asarray(dom_emb, dtype=np.float64), target)
    z = cos / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def build_sampler(
    corpus: PackedCorpus,
    dom_emb: np.ndarray,
    tau: float,
    rng: np.random.Generator,
) -> SamplerState:
    """Fresh queues (one shuffle per domain, in domain order) plus initial P."""
    by_domain: list[list[PackedExample]] = [[] for _ in corpus.table.names]
    for ex in corpus.examples:
        by_domain[ex.domain_id].append(ex)
    for did, examples in enumerate(by_domain):
        if not examples:
            raise ConfigError(
                f"domain {corpus.table.names[did]!r} has no packed examples"
            )
    queues = [
        DomainQueue(domain_id=did, order=rng.permutation(len(examples)))
        for did, examples in enumerate(by_domain)
    ]
    probs = domain_probabilities(dom_emb, corpus.table.target_index, tau)
    return SamplerState(
        queues=queues, probs=probs, target=corpus.table.target_index,
        tau=tau, rng=rng, examples_by_domain=by_domain,
    )


def next_example(state: SamplerState, domain_id: int) -> PackedExample:
    """Pop the next example of one domain; reshuffle when exhausted."""
    queue = state.queues[domain_id]
    if queue.cursor >= queue.order.shape[0]:
        queue.order = state.rng.permutation(queue.order.shape[0])
        queue.cursor = 0
    ex = state.examples_by_domain[domain_id][int(queue.order[queue.cursor])]
    queue.cursor += 1
    return ex


def sample_batch(state: SamplerState, batch_size: int) -> list[PackedExample]:
    """batch_size i.i.d. domain draws from Cat(P), one queue pop per draw."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    draws = state.rng.choice(len(state.queues), size=batch_size, p=state.probs)
    return [next_example(state, int(d)) for d in draws]


def refresh_probabilities(state: SamplerState, dom_emb: np.ndarray) -> None:
    """Recompute P from the current embeddings; queues are left untouched."""
    state.probs = domain_probabilities(dom_emb, state.target, state.tau)


def report_top_domains(
    dom_emb: np.ndarray,
    target: int,
    k: int,
    names: list[str],
) -> list[tuple[str, float]]:
    """Top-k source domains by cosine to the target, ties broken by name."""
    n_sources = dom_emb.shape[0] - 1
    if k > n_sources:
        raise ConfigError(f"k={k} exceeds the {n_sources} source domains")
    cos = cosines_to_target(np.asarray(dom_emb, dtype=np.float64), target)
    ranked = sorted(
        ((names[i], float(cos[i])) for i in range(len(names)) if i != target),
        key=lambda item: (-item[1], item[0]),
    )
    return ranked[:k]


def format_top_domains(report: list[tuple[str, float]]) -> list[str]:
    """Serialized report lines: ``rank<TAB>domain<TAB>cosine`` (6 decimals)."""
    return [
        f"{rank}\t{name}\t{cos:.6f}"
        for rank, (name, cos) in enumerate(report, start=1)
    ]
