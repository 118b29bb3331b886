import math
from typing import Callable, List

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .corpus import QAExample
from .embed import ProjectionHead
from .lmscore import LmScore
from .logger import logger
from .models import CONSTS, GradcheckConfig, LossName, TrainingConfig
from .retrieval import CandidateSet, Combination
from .seeding import derive_rng
from .train import TrainingExample, batch_loss, loss_and_grad


class GradientReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    loss_name: LossName
    loss: float
    analytic: np.ndarray
    numeric: np.ndarray
    max_abs_diff: float
    max_rel_diff: float
    worst_index: int
    threshold: float

    @model_validator(mode="after")
    def same_length(self):
        if self.analytic.shape != self.numeric.shape:
            raise ValueError("analytic and numeric gradients differ in length")
        return self

    @property
    def passed(self) -> bool:
        return self.max_rel_diff < self.threshold

    def summary(self) -> dict:
        return {
            "loss": self.loss_name,
            "value": self.loss,
            "max_abs_diff": self.max_abs_diff,
            "max_rel_diff": self.max_rel_diff,
            "worst_index": self.worst_index,
            "analytic_at_worst": float(self.analytic[self.worst_index]),
            "numeric_at_worst": float(self.numeric[self.worst_index]),
            "passed": self.passed,
        }


def central_difference(func: Callable[[np.ndarray], float], x0: np.ndarray, step: float) -> np.ndarray:
    """Centered-difference gradient of `func` at `x0`, one coordinate at a time."""
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        x = np.copy(x0)
        x[j] = x0[j] + step
        f_plus = func(x)
        x[j] = x0[j] - step
        f_minus = func(x)
        grad[j] = (f_plus - f_minus) / (2 * step)
    return grad


def _pool_shape(pool_size: int) -> tuple[int, int]:
    """(k, singles) so that singles + pairs = pool_size with pairs ≤ k²."""
    k = math.ceil((-1 + math.sqrt(1 + 4 * pool_size)) / 2)
    return k, min(k, pool_size)


def random_batch(
    rng: np.random.Generator,
    dim: int,
    pool_size: int,
    batch_size: int,
) -> List[TrainingExample]:
    """Random base embeddings and LM log-likelihoods shaped like real training pools."""
    k, n_singles = _pool_shape(pool_size)
    batch = []
    for b in range(batch_size):
        ids = [f"q{b}-p{i}" for i in range(k)]
        singles = [
            Combination(passages=(ids[i],), score=0.0, stage="single") for i in range(n_singles)]
        pairs = [
            Combination(passages=(ids[i], ids[j]), score=0.0, stage="pair")
            for i in range(k) for j in range(k)
        ][:pool_size - n_singles]
        pool = CandidateSet(
            question=f"question {b}", k=k, singles=singles, pairs=pairs, allows_self_pairs=True)
        lm_scores = [
            LmScore(log_likelihood=float(ll), token_count=3)
            for ll in rng.uniform(-6.0, -0.1, size=len(pool))
        ]
        batch.append(TrainingExample(
            example=QAExample(question=f"question {b}", answers=[f"answer {b}"]),
            question_idx=b,
            pool=pool,
            lm_scores=lm_scores,
            query_vectors=rng.normal(size=(len(pool), dim)),
            passage_vectors=rng.normal(size=(len(pool), dim)),
        ))
    return batch


def random_head(rng: np.random.Generator, dim: int) -> ProjectionHead:
    return ProjectionHead(
        W_q=np.eye(dim) + 0.3 * rng.normal(size=(dim, dim)) / np.sqrt(dim),
        W_d=np.eye(dim) + 0.3 * rng.normal(size=(dim, dim)) / np.sqrt(dim),
    )


def check_gradient(
    batch: List[TrainingExample],
    training: TrainingConfig,
    head: ProjectionHead,
    step: float = CONSTS.gradcheck.step,
    threshold: float = CONSTS.gradcheck.threshold,
    rel_floor: float = CONSTS.gradcheck.rel_floor,
    corruption: float = 0.0,
) -> GradientReport:
    """
    Compare the analytic head gradient with central differences over every entry.

    Relative error per coordinate is |a − n| / max(|a|, |n|, rel_floor).
    `corruption` is added to the first analytic coordinate as a negative control.
    """
    loss, grad = loss_and_grad(batch, training, head)
    analytic = grad.flatten()
    if corruption:
        analytic = analytic.copy()
        analytic[0] += corruption
    numeric = central_difference(
        lambda flat: batch_loss(batch, training, ProjectionHead.from_flat(flat, head.dim)),
        head.flatten(),
        step,
    )
    abs_diff = np.abs(analytic - numeric)
    rel_diff = abs_diff / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), rel_floor)
    worst = int(np.argmax(rel_diff))
    return GradientReport(
        loss_name=training.loss,
        loss=loss,
        analytic=analytic,
        numeric=numeric,
        max_abs_diff=float(np.max(abs_diff)),
        max_rel_diff=float(rel_diff[worst]),
        worst_index=worst,
        threshold=threshold,
    )


def run_gradcheck(
    config: GradcheckConfig = CONSTS.gradcheck,
    losses: tuple[LossName, ...] = ("rag", "kl", "ce"),
    corruption: float = 0.0,
) -> List[GradientReport]:
    """One report per loss on a seeded random batch; every loss sees the same batch and head."""
    rng = derive_rng(config.seed, "gradcheck")
    batch = random_batch(rng, config.dim, config.pool_size, config.batch_size)
    head = random_head(rng, config.dim)
    reports = []
    for name in losses:
        training = TrainingConfig(
            loss=name,
            gamma=config.gamma,
            beta=config.beta,
            top_k_marginal=min(CONSTS.training.top_k_marginal, config.pool_size),
        )
        report = check_gradient(
            batch, training, head, config.step, config.threshold, config.rel_floor, corruption)
        log = logger.info if report.passed else logger.error
        log(f"Gradient check for {name} loss.", extra={"fields": report.summary()})
        reports.append(report)
    return reports
