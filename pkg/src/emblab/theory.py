"""Scaling-law analysis and the generalization-bound apparatus.

The bound on expected population contrastive risk is

    ln(N) - I_P + eps_P + sqrt((KL + ln(1/delta)) / (2 n))

with I_P estimated from the pre-refinement generative loss as
max(0, H(Y) - Lg), the inefficiency gap eps_P taken as the observed excess
of the achieved training loss over the ln(N) - I_P floor, and KL computed
for isotropic Gaussians over the low-rank delta (posterior centered at the
trained delta, prior centered at zero delta). The Gaussian instantiation
and the operational eps_P are constructions of this artifact and are
reported alongside every bound value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .contrastive import CLResult, infonce, make_toy_triplets
from .datagen import World
from .evalsuite import spearman
from .numerics import Rng
from .toymodel import LoraAdapter, ToyModel, _gen_loss_grads, stack_views

__all__ = [
    "BoundInputs",
    "ScalingPoint",
    "BoundReport",
    "pac_bayes_bound",
    "mi_from_generative",
    "kl_lora_gaussian",
    "grsl_fit",
    "bound_check",
    "load_scaling_points_csv",
]


@dataclass(frozen=True)
class BoundInputs:
    batch_size_n: int      # candidate-set size N of the contrastive loss
    i_p: float             # mutual information of the prior, nats
    eps_p: float           # inefficiency gap, nats
    kl: float              # KL(Q || P), nats
    n_samples: int         # refinement training-set size
    delta: float

    def __post_init__(self):
        if self.batch_size_n < 1:
            raise ValueError("batch_size_n must be >= 1")
        if not math.isfinite(self.i_p):
            raise ValueError("i_p must be finite")
        if not (math.isfinite(self.eps_p) and self.eps_p >= 0):
            raise ValueError("eps_p must be finite and >= 0")
        if not (math.isfinite(self.kl) and self.kl >= 0):
            raise ValueError("kl must be finite and >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class ScalingPoint:
    model_id: str
    gen_score: float
    gen_higher_is_better: bool
    rep_score: float

    def __post_init__(self):
        if not (math.isfinite(self.gen_score) and math.isfinite(self.rep_score)):
            raise ValueError("scores must be finite")


def pac_bayes_bound(b: BoundInputs) -> float:
    """Upper bound (nats) on expected population contrastive risk."""
    penalty = math.sqrt((b.kl + math.log(1.0 / b.delta)) / (2.0 * b.n_samples))
    return math.log(b.batch_size_n) - b.i_p + b.eps_p + penalty


def mi_from_generative(h_y: float, lg: float) -> float:
    """Mutual-information estimate max(0, H(Y) - Lg), per-sequence nats."""
    if h_y < 0 or lg < 0:
        raise ValueError("entropies and losses must be >= 0")
    return max(0.0, h_y - lg)


def kl_lora_gaussian(
    adapter_or_delta: Union[LoraAdapter, np.ndarray, Sequence[float]],
    sigma_q: float,
    sigma_p: float,
) -> float:
    """KL(N(mu, sigma_q^2 I) || N(0, sigma_p^2 I)) with mu the flattened
    effective low-rank delta."""
    if sigma_q <= 0 or sigma_p <= 0:
        raise ValueError("sigmas must be positive")
    if isinstance(adapter_or_delta, LoraAdapter):
        mu = adapter_or_delta.flat_delta()
    else:
        mu = np.asarray(adapter_or_delta, dtype=np.float64).ravel()
    d = mu.size
    var_ratio = (sigma_q**2) / (2.0 * sigma_p**2)
    log_ratio = math.log(sigma_p / sigma_q)
    return float(
        d * (var_ratio - 0.5 + log_ratio) + np.sum(mu**2) / (2.0 * sigma_p**2)
    )


def grsl_fit(points: Sequence[ScalingPoint]) -> Dict[str, float]:
    """OLS line plus rank and linear correlations on direction-normalized axes."""
    if len(points) < 3:
        raise ValueError("need at least 3 scaling points")
    x = np.array(
        [p.gen_score if p.gen_higher_is_better else -p.gen_score for p in points]
    )
    y = np.array([p.rep_score for p in points])
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant axis")
    xc = x - x.mean()
    slope = float((xc @ (y - y.mean())) / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    pearson = float(
        (xc @ (y - y.mean()))
        / math.sqrt((xc @ xc) * float((y - y.mean()) @ (y - y.mean())))
    )
    return {
        "pearson": pearson,
        "spearman": spearman(x, y),
        "slope": slope,
        "intercept": intercept,
        "n": len(points),
    }


def load_scaling_points_csv(path) -> List[ScalingPoint]:
    """Points from a CSV with header model_id,gen_score,gen_direction,rep_score
    (gen_direction is 'higher' or 'lower')."""
    import csv

    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expect = ["model_id", "gen_score", "gen_direction", "rep_score"]
        if reader.fieldnames != expect:
            raise ValueError(f"expected header {','.join(expect)}")
        for row in reader:
            direction = row["gen_direction"].strip().lower()
            if direction not in ("higher", "lower"):
                raise ValueError(f"bad gen_direction {row['gen_direction']!r}")
            points.append(
                ScalingPoint(
                    model_id=row["model_id"],
                    gen_score=float(row["gen_score"]),
                    gen_higher_is_better=direction == "higher",
                    rep_score=float(row["rep_score"]),
                )
            )
    return points


# ---------------------------------------------------------------------------
# empirical bound check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheckConfig:
    eval_batch_n: int = 32        # N for the InfoNCE candidate set
    heldout_batches: int = 32     # batches for the population-risk estimate
    n_samples: int = 1024         # refinement training-set size entering the bound
    delta: float = 0.05
    sigma_q: float = 0.01
    sigma_p: float = 0.1
    gen_source: str = "text"      # modality whose generative loss feeds I_P
    gen_eval_n: int = 2048
    seed: int = 0


@dataclass(frozen=True)
class BoundReport:
    empirical_pop_risk: float
    bound: float
    holds: bool
    i_p: float
    eps_p: float
    kl: float
    train_risk: float
    h_y: float
    lg_per_seq: float
    n_samples: int
    eval_batch_n: int
    delta: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "empirical_pop_risk": self.empirical_pop_risk,
            "bound": self.bound,
            "holds": float(self.holds),
            "i_p": self.i_p,
            "eps_p": self.eps_p,
            "kl": self.kl,
            "train_risk": self.train_risk,
            "h_y": self.h_y,
            "lg_per_seq": self.lg_per_seq,
            "n_samples": float(self.n_samples),
            "eval_batch_n": float(self.eval_batch_n),
            "delta": self.delta,
        }


def _mean_infonce(result: CLResult, anchors, positives, negatives,
                  tau: float, batch_n: int, rng: Rng) -> float:
    """Mean InfoNCE over shuffled fixed-size batches of the given triplets."""
    n = len(anchors)
    order = rng.permutation(n)
    losses = []
    for start in range(0, n - batch_n + 1, batch_n):
        idx = order[start : start + batch_n]
        ea = result.encode("text", anchors[idx])
        ep = result.encode("text", positives[idx])
        en = result.encode("text", negatives[idx]) if negatives is not None else None
        losses.append(infonce(ea, ep, tau, en))
    if not losses:
        raise ValueError("not enough triplets for one evaluation batch")
    return float(np.mean(losses))


def bound_check(
    pre_model: ToyModel,
    result: CLResult,
    world: World,
    train_triplets,
    tau: float,
    cfg: BoundCheckConfig,
) -> BoundReport:
    """Assemble the bound for a refined model and test it against held-out risk.

    The held-out triplets come from a fresh seed, disjoint from training by
    construction. I_P uses the pre-refinement model's per-sequence generative
    loss; eps_P is the observed optimization gap on the training triplets.
    """
    if result.adapter is None:
        raise ValueError("bound_check needs a low-rank refinement result")
    rng = Rng(cfg.seed).spawn(777)

    # generative quality of the pre-refinement model, per sequence
    from .datagen import sample_arrays

    _, obs, tokens = sample_arrays(world, cfg.gen_eval_n, rng.spawn(1))
    inputs = tokens if cfg.gen_source == "text" else obs[cfg.gen_source]
    per_token, _ = _gen_loss_grads(pre_model, cfg.gen_source, inputs, tokens,
                                   scope="none")
    lg_per_seq = per_token * world.spec.text_len
    h_y = math.log(world.spec.latent_classes)
    i_p = mi_from_generative(h_y, lg_per_seq)

    # achieved training risk and inefficiency gap
    train_risk = _mean_infonce(
        result, train_triplets.anchors, train_triplets.positives,
        train_triplets.hard_negatives, tau, cfg.eval_batch_n, rng.spawn(2)
    )
    floor = math.log(cfg.eval_batch_n) - i_p
    eps_p = max(0.0, train_risk - floor)

    kl = kl_lora_gaussian(result.adapter, cfg.sigma_q, cfg.sigma_p)
    inputs_b = BoundInputs(
        batch_size_n=cfg.eval_batch_n,
        i_p=i_p,
        eps_p=eps_p,
        kl=kl,
        n_samples=cfg.n_samples,
        delta=cfg.delta,
    )
    bound = pac_bayes_bound(inputs_b)

    # held-out population-risk estimate from fresh triplets
    heldout = make_toy_triplets(
        world, cfg.eval_batch_n * cfg.heldout_batches, rng.spawn(3)
    )
    pop_risk = _mean_infonce(
        result, heldout.anchors, heldout.positives, heldout.hard_negatives,
        tau, cfg.eval_batch_n, rng.spawn(4)
    )
    return BoundReport(
        empirical_pop_risk=pop_risk,
        bound=bound,
        holds=pop_risk <= bound,
        i_p=i_p,
        eps_p=eps_p,
        kl=kl,
        train_risk=train_risk,
        h_y=h_y,
        lg_per_seq=lg_per_seq,
        n_samples=cfg.n_samples,
        eval_batch_n=cfg.eval_batch_n,
        delta=cfg.delta,
    )
