"""Multi-token perplexities, dynamic perplexity, speed-up and mix statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import DecoderConfig, GenerationTrace, HeadDistribution, decide_order, topk_truncate

__all__ = [
    "MetricsReport",
    "DynamicEvalResult",
    "ppl_n",
    "ppl_joint",
    "ppl_dynamic",
    "dynamic_eval",
    "speedup_and_mix",
    "sweep_epsilon",
    "full_report",
]


@dataclass
class MetricsReport:
    """Perplexities and throughput statistics for one model/config pair."""

    ppl_heads: list          # PPL_n for n = 1..n_max
    ppl_joints: dict         # n -> PPL_{1:n} for n = 2..n_max
    ppl_dynamic: float
    speedup: float
    mix: np.ndarray          # fraction of steps emitting 1..n_max tokens
    epsilon_b: float

    def __post_init__(self):
        if abs(float(np.sum(self.mix)) - 1.0) > 1e-9:
            raise ValueError("mix fractions must sum to 1")
        n_max = len(self.mix)
        if not 1.0 - 1e-12 <= self.speedup <= n_max + 1e-12:
            raise ValueError(f"speed-up {self.speedup} outside [1, {n_max}]")


@dataclass
class DynamicEvalResult:
    ppl: float
    speedup: float
    mix: np.ndarray
    steps: int
    tokens: int
    trace: GenerationTrace


def _sequence_lps(model, validation):
    """Per-sequence, per-head log-probability tables (teacher forced)."""
    out = []
    for seq in validation:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size < 2:
            continue
        out.append((seq, model.position_log_probs(seq)))
    if not out:
        raise ValueError("validation set holds no sequence with at least 2 tokens")
    return out


def _finish(seq_sums, seq_counts) -> float:
    total = np.sum(np.asarray(seq_sums, dtype=np.float64))
    count = np.sum(np.asarray(seq_counts, dtype=np.int64))
    if count == 0:
        raise ValueError("no evaluable positions in the validation set")
    return float(np.exp(-total / count))


def ppl_n(model, validation, n: int, _lps=None) -> float:
    """Perplexity of head n: exp of its mean negative log-likelihood."""
    if n < 1:
        raise ValueError("head order must be >= 1")
    seq_sums, seq_counts = [], []
    for seq, lps in _lps if _lps is not None else _sequence_lps(model, validation):
        L = seq.size
        if L < n + 1:
            continue
        gathered = lps[n - 1][np.arange(L - n), seq[n:]]
        seq_sums.append(np.sum(gathered))
        seq_counts.append(L - n)
    return _finish(seq_sums, seq_counts)


def ppl_joint(model, validation, n: int, _lps=None) -> float:
    """Joint n-gram perplexity under the independent-product approximation.

    The exponent is normalized by n times the number of positions, so the
    degenerate n = 1 case coincides with ppl_n(1).
    """
    if n < 1:
        raise ValueError("joint order must be >= 1")
    seq_sums, seq_counts = [], []
    for seq, lps in _lps if _lps is not None else _sequence_lps(model, validation):
        L = seq.size
        if L < n + 1:
            continue
        T = L - n
        contrib = np.zeros(T)
        for i in range(1, n + 1):
            contrib = contrib + lps[i - 1][np.arange(T), seq[i : i + T]]
        seq_sums.append(np.sum(contrib))
        seq_counts.append(n * T)
    return _finish(seq_sums, seq_counts)


def dynamic_eval(model, validation, config: DecoderConfig, masks: dict, _lps=None) -> DynamicEvalResult:
    """Teacher-forced walk of the validation text under dynamic back-off.

    At each visited position the full decision pipeline (top-k at the
    configured temperature, masking, thresholding, repetition penalty,
    back-off) picks the order m; the walk scores the m true next tokens
    with the raw head log-probabilities and advances by m. The exponent is
    normalized by tokens consumed, so epsilon_b = 1 reproduces ppl_n(1)
    exactly, sharing its accumulation pattern.
    """
    n_cfg = min(config.n_max, model.config.n_heads)
    seq_sums, seq_counts = [], []
    trace = GenerationTrace()
    mix_counts = np.zeros(config.n_max, dtype=np.int64)
    for seq, lps in _lps if _lps is not None else _sequence_lps(model, validation):
        L = seq.size
        step_vals = []
        consumed = 0
        c = 1
        while c <= L - 1:
            n_start = min(n_cfg, L - c)
            if n_start > 1:
                raw = [HeadDistribution(head_index=i, probs=np.exp(lps[i - 1][c - 1])) for i in range(1, n_start + 1)]
                truncated = [topk_truncate(h, min(config.k, model.config.vocab_size), config.temperature) for h in raw]
                m = decide_order(truncated, masks, seq[:c], config, n_start)
            else:
                m = 1
            contribs = np.array([lps[i - 1][c - 1, seq[c + i - 1]] for i in range(1, m + 1)])
            step_vals.append(np.sum(contribs))
            mix_counts[m - 1] += 1
            trace.emitted_counts.append(m)
            trace.backoff_counts.append(n_start - m)
            trace.max_joint_values.append(np.nan)
            consumed += m
            c += m
        seq_sums.append(np.sum(np.asarray(step_vals, dtype=np.float64)))
        seq_counts.append(consumed)
    ppl = _finish(seq_sums, seq_counts)
    steps = int(mix_counts.sum())
    tokens = int(np.sum(np.asarray(seq_counts, dtype=np.int64)))
    speedup = tokens / steps
    mix = mix_counts / steps
    return DynamicEvalResult(ppl=ppl, speedup=speedup, mix=mix, steps=steps, tokens=tokens, trace=trace)


def ppl_dynamic(model, validation, config: DecoderConfig, masks: dict) -> float:
    """Dynamic multi-token perplexity at the configured epsilon_b."""
    return dynamic_eval(model, validation, config, masks).ppl


def speedup_and_mix(trace: GenerationTrace, n_max: int = 3):
    """Tokens per forward pass and the emission-size mix of a trace."""
    if trace.steps == 0:
        raise ValueError("trace holds no steps")
    counts = np.asarray(trace.emitted_counts, dtype=np.int64)
    if counts.max() > n_max:
        raise ValueError(f"trace contains {counts.max()}-token steps but n_max={n_max}")
    speedup = float(counts.sum()) / trace.steps
    mix = np.array([(counts == m).sum() for m in range(1, n_max + 1)], dtype=np.float64) / trace.steps
    return speedup, mix


def sweep_epsilon(model, validation, config: DecoderConfig, masks: dict, eps_values) -> list[dict]:
    """Dynamic perplexity, speed-up and mix over a grid of epsilon_b values."""
    lps = _sequence_lps(model, validation)
    rows = []
    for eps in eps_values:
        cfg = DecoderConfig(**{**config.__dict__, "epsilon_b": float(eps)})
        res = dynamic_eval(model, validation, cfg, masks, _lps=lps)
        row = {"epsilon_b": float(eps), "ppl_d": res.ppl, "speedup": res.speedup}
        for m in range(1, config.n_max + 1):
            row[f"mix{m}"] = float(res.mix[m - 1])
        rows.append(row)
    return rows


def full_report(model, validation, config: DecoderConfig, masks: dict) -> MetricsReport:
    """All perplexities plus the dynamic statistics at config.epsilon_b."""
    n_max = min(config.n_max, model.config.n_heads)
    lps = _sequence_lps(model, validation)
    heads = [ppl_n(model, validation, n, _lps=lps) for n in range(1, n_max + 1)]
    joints = {n: ppl_joint(model, validation, n, _lps=lps) for n in range(2, n_max + 1)}
    res = dynamic_eval(model, validation, config, masks, _lps=lps)
    return MetricsReport(
        ppl_heads=heads,
        ppl_joints=joints,
        ppl_dynamic=res.ppl,
        speedup=res.speedup,
        mix=res.mix,
        epsilon_b=config.epsilon_b,
    )
