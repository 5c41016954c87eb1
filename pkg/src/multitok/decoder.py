"""Dynamic multi-token decoding pipeline.

One forward pass produces a probability vector per token head. The decoder
truncates each head to its top-k, forms the joint as the outer product
reweighted by co-occurrence ratios, cleans the joint with static plus
adaptive (Otsu) thresholding and a repetition penalty, and either samples a
whole tuple or backs off to a lower order when no joint cell clears
epsilon_b**(n-1). At order 1 it falls back to penalized top-k sampling of
the first head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .ngram import CooccurrenceMask, apply_transparency

__all__ = [
    "HeadDistribution",
    "JointDistribution",
    "DecoderConfig",
    "StepResult",
    "GenerationTrace",
    "topk_truncate",
    "build_joint",
    "static_threshold",
    "gaussian_blur",
    "otsu_threshold",
    "otsu_bin_index",
    "adaptive_threshold",
    "penalize_repetition",
    "backoff_check",
    "sample_joint",
    "decode_step",
    "generate",
]

OTSU_BINS = 256


@dataclass
class HeadDistribution:
    """Per-head probability vector and its optional top-k truncation."""

    head_index: int
    probs: np.ndarray
    topk_ids: np.ndarray | None = None
    topk_probs: np.ndarray | None = None

    def validate(self, tol: float = 1e-6):
        if abs(float(self.probs.sum()) - 1.0) > tol:
            raise ValueError(f"head {self.head_index} probabilities do not sum to 1")
        if np.any(self.probs < 0):
            raise ValueError(f"head {self.head_index} has negative probabilities")


@dataclass
class JointDistribution:
    """Dense joint over the per-head candidate sets.

    ``axes[i]`` holds the token ids selected by head i+1; ``values`` is the
    rank-n tensor of (possibly masked and thresholded) probability products.
    """

    order: int
    axes: list
    values: np.ndarray = field(repr=False)

    def replace_values(self, values: np.ndarray) -> "JointDistribution":
        return JointDistribution(order=self.order, axes=self.axes, values=values)

    @property
    def total_mass(self) -> float:
        return float(self.values.sum())


@dataclass
class DecoderConfig:
    """Generation hyperparameters; defaults follow the reference setup."""

    n_max: int = 3
    k: int = 50
    temperature: float = 0.7
    repetition_penalty: float = 1.1
    repetition_window: int = 64
    epsilon_b: float = 0.5
    alpha_c: float = 1.0
    adaptive_thresholding: bool = True
    blur_kernel: int | None = 3
    rng_seed: int = 0
    eot_id: int | None = None

    def __post_init__(self):
        if not 2 <= self.n_max <= 4:
            raise ValueError("n_max must be in 2..4")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.repetition_penalty < 1.0:
            raise ValueError("repetition penalty must be >= 1")
        if not 0.0 <= self.epsilon_b <= 1.0:
            raise ValueError("epsilon_b must lie in [0, 1]")
        if not 0.0 <= self.alpha_c <= 1.0:
            raise ValueError("alpha_c must lie in [0, 1]")
        if self.blur_kernel is not None and (self.blur_kernel < 3 or self.blur_kernel % 2 == 0):
            raise ValueError("blur kernel must be odd and >= 3, or None")


@dataclass
class StepResult:
    """Outcome of one decoding step: the emitted tuple and back-off count."""

    emitted: np.ndarray
    backoff_count: int
    joint_snapshot: JointDistribution | None = None
    max_joint_value: float = 0.0


@dataclass
class GenerationTrace:
    """Per-step emission record; one forward pass per step by construction."""

    emitted_counts: list = field(default_factory=list)
    backoff_counts: list = field(default_factory=list)
    max_joint_values: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.emitted_counts)

    @property
    def forward_passes(self) -> int:
        return self.steps

    def record(self, result: StepResult):
        self.emitted_counts.append(int(result.emitted.size))
        self.backoff_counts.append(result.backoff_count)
        self.max_joint_values.append(result.max_joint_value)


def topk_truncate(head: HeadDistribution, k: int, temperature: float = 1.0) -> HeadDistribution:
    """Keep the k most probable tokens after temperature scaling.

    Scaling probabilities by 1/temperature in log space is identical to
    dividing the logits by the temperature before the softmax. The retained
    top-k probabilities are deliberately not renormalized; normalization
    happens once, at sampling time.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if head.probs.size < k:
        raise ValueError(f"k={k} exceeds vocabulary size {head.probs.size}")
    probs = head.probs
    if temperature != 1.0:
        logp = np.log(np.maximum(probs, 1e-300)) / temperature
        logp -= logp.max()
        probs = np.exp(logp)
        probs /= probs.sum()
    # stable sort on negated probs keeps ties in ascending token-id order
    order = np.argsort(-probs, kind="stable")[:k]
    return HeadDistribution(
        head_index=head.head_index,
        probs=probs,
        topk_ids=order.astype(np.int64),
        topk_probs=probs[order],
    )


def build_joint(
    heads: list[HeadDistribution],
    mask: CooccurrenceMask | None,
    alpha_c: float = 1.0,
) -> JointDistribution:
    """Outer product of truncated heads, reweighted by co-occurrence ratios."""
    n = len(heads)
    if n < 1:
        raise ValueError("need at least one head")
    for h in heads:
        if h.topk_ids is None:
            raise ValueError("heads must be top-k truncated before building the joint")
    k = heads[0].topk_ids.size
    if any(h.topk_ids.size != k for h in heads):
        raise ValueError("all heads must be truncated to the same k")
    if mask is not None and mask.order != n:
        raise ValueError(f"mask order {mask.order} does not match joint order {n}")

    values = heads[0].topk_probs.copy()
    for h in heads[1:]:
        values = np.multiply.outer(values, h.topk_probs)

    if mask is not None and alpha_c > 0.0:
        grids = np.meshgrid(*[h.topk_ids for h in heads], indexing="ij")
        tuples = np.stack([g.ravel() for g in grids], axis=1)
        ratios = mask.lookup_codes(mask.encode_tuples(tuples)).reshape(values.shape)
        weighted = np.zeros_like(ratios)
        pos = ratios > 0  # a zero default (floor 0) forbids unseen tuples outright
        if pos.any():
            weighted[pos] = apply_transparency(ratios[pos], alpha_c)
        values = values * weighted

    return JointDistribution(order=n, axes=[h.topk_ids for h in heads], values=values)


def static_threshold(joint: JointDistribution, epsilon_b: float) -> JointDistribution:
    """Zero every joint cell strictly below epsilon_b."""
    if not 0.0 <= epsilon_b <= 1.0:
        raise ValueError("epsilon_b must lie in [0, 1]")
    values = np.where(joint.values < epsilon_b, 0.0, joint.values)
    return joint.replace_values(values)


def _gaussian_kernel(kernel_size: int) -> np.ndarray:
    sigma = kernel_size / 6.0
    r = (kernel_size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def gaussian_blur(joint: JointDistribution, kernel_size: int) -> JointDistribution:
    """Separable Gaussian blur (sigma = size/6) with replicate boundaries."""
    if kernel_size % 2 == 0 or kernel_size < 3:
        raise ValueError("blur kernel must be odd and >= 3")
    w = _gaussian_kernel(kernel_size)
    values = joint.values
    for ax in range(values.ndim):
        values = ndimage.correlate1d(values, w, axis=ax, mode="nearest")
    return joint.replace_values(values)


def otsu_bin_index(hist: np.ndarray) -> int:
    """Split index maximizing between-class variance over a histogram.

    Candidate k separates bins [0, k) from [k, n_bins); degenerate one-class
    histograms give 0. Ties resolve to the lowest index.
    """
    hist = np.asarray(hist, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        return 0
    levels = np.arange(hist.size, dtype=np.float64)
    w0 = np.concatenate(([0.0], np.cumsum(hist)))[:-1]  # mass strictly below each split
    m0 = np.concatenate(([0.0], np.cumsum(hist * levels)))[:-1]
    w1 = total - w0
    m1 = float((hist * levels).sum()) - m0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.zeros(hist.size)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=valid)
    mu1 = np.divide(m1, w1, out=np.zeros_like(m1), where=valid)
    var_between[valid] = (w0 * w1 * (mu0 - mu1) ** 2)[valid]
    return int(np.argmax(var_between))


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu threshold over the positive entries of a flattened joint.

    A 256-bin histogram spans [0, max]; the returned threshold is the lower
    edge of the first retained bin. All-zero input gives 0 (a no-op for the
    caller, which zeroes entries <= the threshold).
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    pos = flat[flat > 0]
    if pos.size == 0:
        return 0.0
    vmax = float(pos.max())
    bin_idx = np.minimum((pos * (OTSU_BINS / vmax)).astype(np.int64), OTSU_BINS - 1)
    hist = np.bincount(bin_idx, minlength=OTSU_BINS)
    k = otsu_bin_index(hist)
    return k * (vmax / OTSU_BINS)


def adaptive_threshold(
    joint: JointDistribution,
    epsilon_b: float,
    config: DecoderConfig | None = None,
    stage_log: list | None = None,
) -> JointDistribution:
    """Static threshold, then optional blur, then Otsu zeroing.

    With adaptive thresholding disabled this reduces to the static stage.
    """
    out = static_threshold(joint, epsilon_b)
    if stage_log is not None:
        stage_log.append("static")
    if config is None or not config.adaptive_thresholding:
        return out
    if config.blur_kernel is not None:
        out = gaussian_blur(out, config.blur_kernel)
        if stage_log is not None:
            stage_log.append("blur")
    eps_at = otsu_threshold(out.values)
    out = out.replace_values(np.where(out.values <= eps_at, 0.0, out.values))
    if stage_log is not None:
        stage_log.append("otsu")
    return out


def _repetition_cells(axes: list, context: np.ndarray, window: int) -> np.ndarray:
    """Boolean tensor marking cells whose tuple repeats context or itself."""
    recent = np.unique(np.asarray(context, dtype=np.int64)[-window:]) if window > 0 else np.empty(0, np.int64)
    n = len(axes)
    shape = tuple(a.size for a in axes)
    mask = np.zeros(shape, dtype=bool)
    for i, ax in enumerate(axes):
        hit = np.isin(ax, recent)
        mask |= hit.reshape([-1 if j == i else 1 for j in range(n)])
    for i in range(n):
        for j in range(i + 1, n):
            a = axes[i].reshape([-1 if t == i else 1 for t in range(n)])
            b = axes[j].reshape([-1 if t == j else 1 for t in range(n)])
            mask |= a == b
    return mask


def penalize_repetition(
    joint: JointDistribution,
    context: np.ndarray,
    penalty: float,
    window: int = 64,
) -> JointDistribution:
    """Divide repetition cells by the penalty.

    A cell repeats when any component token appears in the last ``window``
    context tokens or twice within the tuple itself. Each repeating cell is
    divided once.
    """
    if penalty < 1.0:
        raise ValueError("repetition penalty must be >= 1")
    if penalty == 1.0:
        return joint
    rep = _repetition_cells(joint.axes, context, window)
    values = np.where(rep, joint.values / penalty, joint.values)
    return joint.replace_values(values)


def backoff_check(values: np.ndarray, epsilon_b: float, order: int) -> bool:
    """True when every joint cell sits strictly below epsilon_b**(order-1)."""
    if order < 2:
        raise ValueError("back-off check applies to orders >= 2")
    return bool(np.all(values < epsilon_b ** (order - 1)))


def sample_joint(joint: JointDistribution, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draw over joint cells, renormalizing at sampling time."""
    flat = joint.values.ravel()
    total = flat.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("cannot sample from an all-zero joint; caller must back off first")
    cum = np.cumsum(flat)
    u = rng.random() * cum[-1]
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, flat.size - 1)
    coords = np.unravel_index(idx, joint.values.shape)
    return np.array([joint.axes[i][c] for i, c in enumerate(coords)], dtype=np.int64)


def _sample_marginal(
    head: HeadDistribution,
    context: np.ndarray,
    config: DecoderConfig,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """Penalized, renormalized top-k draw from the first head."""
    probs = head.topk_probs.copy()
    if config.repetition_penalty > 1.0:
        recent = np.asarray(context, dtype=np.int64)[-config.repetition_window :]
        probs = np.where(np.isin(head.topk_ids, np.unique(recent)), probs / config.repetition_penalty, probs)
    total = probs.sum()
    if total <= 0:
        raise ValueError("first-head top-k probabilities sum to zero")
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    idx = min(int(np.searchsorted(cum, u, side="right")), probs.size - 1)
    return int(head.topk_ids[idx]), float(probs.max() / total)


def build_pipeline_joint(
    truncated: list[HeadDistribution],
    masks: dict,
    context: np.ndarray,
    config: DecoderConfig,
    order: int,
    stage_log: list | None = None,
) -> JointDistribution:
    """Masked joint at the given order, thresholded and repetition-penalized."""
    joint = build_joint(truncated[:order], masks.get(order), config.alpha_c)
    if stage_log is not None:
        stage_log.append("mask")
    joint = adaptive_threshold(joint, config.epsilon_b, config, stage_log=stage_log)
    joint = penalize_repetition(joint, context, config.repetition_penalty, config.repetition_window)
    if stage_log is not None:
        stage_log.append("penalty")
    return joint


def decide_order(
    truncated: list[HeadDistribution],
    masks: dict,
    context: np.ndarray,
    config: DecoderConfig,
    n_start: int,
) -> int:
    """Accepted prediction order after dynamic back-off (decision only)."""
    n = n_start
    while n > 1:
        joint = build_pipeline_joint(truncated, masks, context, config, n)
        if backoff_check(joint.values, config.epsilon_b, n):
            n -= 1
            continue
        return n
    return 1


def decode_step(
    heads: list[HeadDistribution],
    masks: dict,
    context: np.ndarray,
    config: DecoderConfig,
    rng: np.random.Generator,
    stage_log: list | None = None,
    keep_joint: bool = False,
) -> StepResult:
    """Run one full decoding step over pre-computed head distributions.

    ``heads`` are raw (temperature-1) distributions for offsets 1..n; the
    starting order is min(config.n_max, len(heads)). ``masks`` maps order to
    CooccurrenceMask (a missing entry means no masking at that order).
    """
    n = min(config.n_max, len(heads))
    k_eff = min(config.k, heads[0].probs.size)  # same clamp as the metrics walk
    truncated = [topk_truncate(h, k_eff, config.temperature) for h in heads[:n]]
    backoffs = 0
    snapshot = None
    while n > 1:
        joint = build_pipeline_joint(truncated, masks, context, config, n, stage_log=stage_log)
        if backoff_check(joint.values, config.epsilon_b, n):
            if stage_log is not None:
                stage_log.append("backoff")
            n -= 1
            backoffs += 1
            continue
        if stage_log is not None:
            stage_log.append("sample")
        emitted = sample_joint(joint, rng)
        if keep_joint:
            snapshot = joint
        return StepResult(
            emitted=emitted,
            backoff_count=backoffs,
            joint_snapshot=snapshot,
            max_joint_value=float(joint.values.max()),
        )
    token, max_p = _sample_marginal(truncated[0], context, config, rng)
    if stage_log is not None:
        stage_log.append("sample")
    return StepResult(
        emitted=np.array([token], dtype=np.int64),
        backoff_count=backoffs,
        joint_snapshot=None,
        max_joint_value=max_p,
    )


def generate(
    heads_fn,
    prompt: np.ndarray,
    max_new_tokens: int,
    config: DecoderConfig,
    masks: dict | None = None,
    rng: np.random.Generator | None = None,
    stage_log: list | None = None,
) -> tuple[np.ndarray, GenerationTrace]:
    """Generate up to max_new_tokens after the prompt.

    ``heads_fn(context)`` must return the raw head distributions from a
    single forward pass. A step may overshoot max_new_tokens by emitting a
    full tuple; generation stops once the budget is reached or the
    end-of-text token appears.
    """
    if masks is None:
        masks = {}
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    context = np.asarray(prompt, dtype=np.int64).copy()
    trace = GenerationTrace()
    emitted_total = 0
    while emitted_total < max_new_tokens:
        heads = heads_fn(context)
        result = decode_step(heads, masks, context, config, rng, stage_log=stage_log)
        emitted = result.emitted
        stop = False
        if config.eot_id is not None and config.eot_id in emitted:
            emitted = emitted[: int(np.argmax(emitted == config.eot_id)) + 1]
            result.emitted = emitted
            stop = True
        trace.record(result)
        context = np.concatenate([context, emitted])
        emitted_total += emitted.size
        if stop:
            break
    return context, trace
