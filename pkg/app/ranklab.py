"""Rank of stacked linear maps and injectivity of decoder upsamplers.

A multi-branch upsampler is the stack K = (K_1, ..., K_r) of its branch maps.
The row space of K is the sum of the branch row spaces, so rank(K) equals the
dimension of that sum and never drops below any single branch rank. Both sides
are computed independently here and compared.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import linalg

from .archs import ModelGraph, RunContext
from .errors import LinearizationError, NonFiniteError, ShapeError
from .tensorcore import Tensor

log = structlog.get_logger(__name__)

RANK_TOLERANCE = 1e-10
RESIDUAL_TOLERANCE = 1e-8


@dataclass(frozen=True)
class LinearMapSet:
    maps: Tuple[np.ndarray, ...]
    stacked: np.ndarray

    @property
    def n(self) -> int:
        return int(self.stacked.shape[1])

    @property
    def m(self) -> int:
        return int(self.stacked.shape[0])


def stack_linear_maps(maps: Sequence[np.ndarray]) -> LinearMapSet:
    if not maps:
        raise ShapeError("no linear maps to stack")
    arrays = tuple(np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in maps)
    widths = {a.shape[1] for a in arrays}
    if len(widths) != 1:
        raise ShapeError(f"linear maps disagree on input dimension: {sorted(widths)}")
    return LinearMapSet(maps=arrays, stacked=np.vstack(arrays))


def _numerical_rank(a: np.ndarray, tol: float) -> int:
    if a.size == 0:
        return 0
    s = linalg.svd(a, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _rowspace_union_dim(maps: Sequence[np.ndarray], tol: float) -> int:
    n = maps[0].shape[1]
    bases = [linalg.orth(a.T, rcond=tol) for a in maps if np.any(a)]
    if not bases:
        return 0
    joined = np.hstack(bases)
    _, r, _ = linalg.qr(joined, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    return int(min(n, np.sum(diag > max(tol, 1e-8) * diag[0])))


@dataclass
class RankReport:
    level: int
    n: int
    m: int
    rank: int
    rowspace_dim: int
    injective: bool
    residual: Optional[float]
    monotone: bool
    branch_nondecreasing: bool

    @property
    def verdict(self) -> str:
        return "injective" if self.injective else "rank-deficient"

    @property
    def consistent(self) -> bool:
        return self.rank == self.rowspace_dim


def rank_and_rowspace_dim(s: LinearMapSet, tol: float = RANK_TOLERANCE, level: int = -1) -> RankReport:
    """SVD rank of the stack against the dimension of the summed branch row spaces."""
    if not np.all(np.isfinite(s.stacked)):
        raise NonFiniteError("linear map set has non-finite entries")
    rank = _numerical_rank(s.stacked, tol)
    union = _rowspace_union_dim(s.maps, tol)
    branch_ranks = [_numerical_rank(a, tol) for a in s.maps]
    prefix = [_numerical_rank(np.vstack(s.maps[: i + 1]), tol) for i in range(len(s.maps))]
    injective, residual = left_inverse_check(s, tol)
    if rank != union:
        log.warning("ranklab.rowspace_mismatch", level=level, rank=rank, rowspace_dim=union)
    return RankReport(
        level=level,
        n=s.n,
        m=s.m,
        rank=rank,
        rowspace_dim=union,
        injective=injective,
        residual=residual,
        monotone=rank >= max(branch_ranks),
        branch_nondecreasing=all(a <= b for a, b in zip(prefix, prefix[1:])),
    )


def left_inverse_check(s: LinearMapSet, tol: float = RANK_TOLERANCE) -> Tuple[bool, Optional[float]]:
    """(injective, ||K+ K - I||_F); the residual is None when K has no left inverse."""
    a = s.stacked
    if _numerical_rank(a, tol) < s.n:
        return False, None
    pinv, *_ = linalg.lstsq(a, np.eye(a.shape[0]), lapack_driver="gelsd")
    residual = float(np.linalg.norm(pinv @ a - np.eye(s.n)))
    return residual < RESIDUAL_TOLERANCE, residual


# ---------------------------------------------------------------------------
# linearization


Block = Callable[..., Tensor]


def _linear_context() -> RunContext:
    return RunContext(mode="eval", linear=True, condition=False)


def _probe(fn: Callable[[Tensor, RunContext], Tensor], input_shape: Tuple[int, int]) -> np.ndarray:
    channels, length = input_shape
    n = channels * length
    ctx = _linear_context()
    offset = fn(Tensor(np.zeros((1, channels, length))), ctx).data.reshape(1, -1)
    basis = np.eye(n).reshape(n, channels, length)
    columns = fn(Tensor(basis), ctx).data.reshape(n, -1) - offset
    jac = columns.T
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    direct = fn(Tensor(v.reshape(1, channels, length)), ctx).data.reshape(-1) - offset[0]
    scale = max(1.0, float(np.linalg.norm(direct)))
    if np.linalg.norm(direct - jac @ v) > 1e-8 * scale:
        raise LinearizationError("block is not linear in the identity-activation, eval-normalization regime", shape=list(input_shape))
    return jac


def linearize_upsampler(block: Block, input_shape: Tuple[int, int]) -> np.ndarray:
    """Jacobian (output size x input size) from one batched pass over all unit inputs."""
    return _probe(lambda x, ctx: block(x, ctx), input_shape)


def linearize_branches(block: Block, input_shape: Tuple[int, int]) -> List[np.ndarray]:
    """One Jacobian per branch for multi-branch blocks; the whole block otherwise."""
    branches = getattr(block, "branches", None)
    if branches is None:
        return [linearize_upsampler(block, input_shape)]
    count = len(branches(Tensor(np.zeros((1,) + tuple(input_shape))), _linear_context()))
    return [_probe(lambda x, ctx, i=i: branches(x, ctx)[i], input_shape) for i in range(count)]


def _upsampler_inputs(model: ModelGraph) -> List[Tuple[int, object, Tuple[int, int]]]:
    cfg = model.config
    length = cfg.internal_length
    out = []
    for level, block in model.decoder_upsamplers():
        k = 2 * cfg.depth - level
        cin = block.in_channels if hasattr(block, "in_channels") else block.weight.shape[0]
        out.append((level, block, (int(cin), length // 2 ** (k + 1))))
    return out


def injectivity_report(model: ModelGraph, tol: float = RANK_TOLERANCE) -> List[RankReport]:
    reports = []
    for level, block, shape in _upsampler_inputs(model):
        maps = stack_linear_maps(linearize_branches(block, shape))
        report = rank_and_rowspace_dim(maps, tol, level=level)
        log.info("ranklab.level", level=level, n=report.n, m=report.m, rank=report.rank, verdict=report.verdict)
        reports.append(report)
    return reports


def all_injective(reports: Sequence[RankReport]) -> bool:
    return all(r.injective for r in reports)


def format_rank_reports(reports: Sequence[RankReport]) -> str:
    lines = []
    for r in reports:
        residual = "nan" if r.residual is None else f"{r.residual:.3e}"
        lines.append(
            f"level={r.level} n={r.n} m={r.m} rank={r.rank} rowspace_dim={r.rowspace_dim} "
            f"residual={residual} monotone={str(r.monotone).lower()} verdict={r.verdict}"
        )
    summary = "pass" if all_injective(reports) else "fail"
    lines.append(f"summary={summary} levels={len(reports)}")
    return "\n".join(lines) + "\n"
