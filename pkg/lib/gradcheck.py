"""
Finite-difference verification of the autodiff backward rules.

Each check reduces an op's output to a scalar with a fixed random projection,
then compares backward() against central differences. The error of one
entry is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); a check
reports the worst entry.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib import autodiff as ad
from lib.alignment import Triplet, TripletBatch, combined_loss
from lib.autodiff import Tensor
from lib.config import EncoderConfig, GroupingConfig, LossConfig
from lib.encoder import encode_prepared, init_weights, prepare_cloud
from lib.gaussians import GaussianCloud

logger = logging.getLogger(__name__)

STEP = 1e-5
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
ERROR_FLOOR = 1e-8

Builder = Callable[[List[Tensor]], Tensor]


@dataclass
class GradCheckResult:
    name: str
    max_relative_error: float
    tolerance: float
    checked_entries: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


def _entries(size: int, rng: np.random.Generator, max_entries: Optional[int]) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def check_function(name: str, build: Builder, inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   tolerance: float = OP_TOLERANCE, max_entries: Optional[int] = None) -> GradCheckResult:
    """Compare backward() with central differences for every (or a sample of every) input entry."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    params = [ad.parameter(x, name=f"{name}[{i}]") for i, x in enumerate(inputs)]
    out = build(params)
    projection = rng.normal(size=out.shape)
    flat = ad.reshape(out, (1, out.data.size))
    loss = ad.sum_all(ad.matmul(flat, ad.constant(projection.reshape(-1, 1))))
    grads = ad.backward(loss)

    def objective(arrays):
        return float((build([ad.constant(a) for a in arrays]).data * projection).sum())

    worst, count = 0.0, 0
    for i, (param, x) in enumerate(zip(params, inputs)):
        analytic = grads.get(param, np.zeros(x.shape))
        for index in _entries(x.size, rng, max_entries):
            shifted = []
            for sign in (1.0, -1.0):
                moved = x.copy()
                moved.flat[index] += sign * STEP
                arrays = list(inputs)
                arrays[i] = moved
                shifted.append(objective(arrays))
            numeric = (shifted[0] - shifted[1]) / (2 * STEP)
            worst = max(worst, relative_error(float(analytic.flat[index]), numeric))
            count += 1
    return GradCheckResult(name=name, max_relative_error=worst, tolerance=tolerance, checked_entries=count)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _dims(rng, count, low=1, high=5):
    return tuple(int(d) for d in rng.integers(low, high + 1, size=count))


def _loss_case(rng):
    n, e = int(rng.integers(2, 6)), int(rng.integers(3, 9))
    pool = ["a red chair", "a blue lamp", "a green table"]
    captions = [pool[i] for i in rng.integers(0, len(pool), size=n)]
    batch = TripletBatch([Triplet(cloud_id=str(i), caption=captions[i], text_embedding=_unit(rng.normal(size=e)),
                                  image_embedding=_unit(rng.normal(size=e))) for i in range(n)])
    cfg = LossConfig()
    return (lambda t: combined_loss(batch, ad.l2_normalize(t[0]), cfg)), [rng.normal(size=(n, e))]


def _logsumexp_case(rng):
    n = int(rng.integers(2, 6))
    mask = rng.random((n, n)) > 0.4
    np.fill_diagonal(mask, True)
    return (lambda t: ad.logsumexp(t[0], mask)), [rng.normal(size=(n, n))]


def _mul_scalar_case(rng):
    c = float(rng.normal())
    return (lambda t: ad.mul_scalar(t[0], c)), [rng.normal(size=_dims(rng, 2))]


def _binary_case(op):
    def case(rng):
        shape = _dims(rng, 2)
        return (lambda t: op(t[0], t[1])), [rng.normal(size=shape), rng.normal(size=shape)]
    return case


def _unary_case(op, rank=2, low=1):
    def case(rng):
        return (lambda t: op(t[0])), [rng.normal(size=_dims(rng, rank, low=low))]
    return case


def _add_bias_case(rng):
    b, n, d = _dims(rng, 3)
    return (lambda t: ad.add(t[0], t[1])), [rng.normal(size=(b, n, d)), rng.normal(size=d)]


def _matmul_case(rng):
    b, n, k, m = _dims(rng, 4)
    return (lambda t: ad.matmul(t[0], t[1])), [rng.normal(size=(b, n, k)), rng.normal(size=(b, k, m))]


def _linear_case(rng):
    b, n, k, m = _dims(rng, 4)
    return ((lambda t: ad.linear(t[0], t[1], t[2])),
            [rng.normal(size=(b, n, k)), rng.normal(size=(k, m)), rng.normal(size=m)])


def _concat_case(rng):
    n, a, b = _dims(rng, 3)
    return (lambda t: ad.concat([t[0], t[1]])), [rng.normal(size=(n, a)), rng.normal(size=(n, b))]


def _reshape_case(rng):
    a, b, c = _dims(rng, 3)
    return (lambda t: ad.reshape(t[0], (a * b, c))), [rng.normal(size=(a, b * c))]


def _diagonal_case(rng):
    n = int(rng.integers(1, 6))
    return (lambda t: ad.diagonal(t[0])), [rng.normal(size=(n, n))]


def _layer_norm_case(rng):
    b, n = _dims(rng, 2)
    d = int(rng.integers(3, 7))
    return ((lambda t: ad.layer_norm(t[0], t[1], t[2])),
            [rng.normal(size=(b, n, d)), rng.normal(size=d), rng.normal(size=d)])


def _attention_case(rng):
    b, n, m, k, v = _dims(rng, 5)
    return ((lambda t: ad.scaled_dot_attention(t[0], t[1], t[2])),
            [rng.normal(size=(b, n, k)), rng.normal(size=(b, m, k)), rng.normal(size=(b, m, v))])


# name -> rng -> (builder, inputs); shapes as well as values come from the rng
OP_CASES: Dict[str, Callable[[np.random.Generator], Tuple[Builder, List[np.ndarray]]]] = {
    "add": _binary_case(ad.add),
    "add_bias": _add_bias_case,
    "sub": _binary_case(ad.sub),
    "mul_scalar": _mul_scalar_case,
    "matmul": _matmul_case,
    "linear": _linear_case,
    "concat": _concat_case,
    "transpose": _unary_case(ad.transpose, rank=3),
    "reshape": _reshape_case,
    "permute": _unary_case(lambda x: ad.permute(x, (2, 0, 1)), rank=3),
    "diagonal": _diagonal_case,
    "sum_all": _unary_case(ad.sum_all),
    "mean_all": _unary_case(ad.mean_all),
    "mean_pool": _unary_case(lambda x: ad.mean_pool(x, axis=1), rank=3),
    "max_pool": _unary_case(lambda x: ad.max_pool(x, axis=1), rank=3),
    "softmax": _unary_case(ad.softmax, low=2),
    "logsumexp": _logsumexp_case,
    "tanh": _unary_case(ad.tanh),
    "gelu": _unary_case(ad.gelu),
    "layer_norm": _layer_norm_case,
    "l2_normalize": _unary_case(ad.l2_normalize, low=2),
    "scaled_dot_attention": _attention_case,
    "combined_loss": _loss_case,
}



def check_op(name: str, seed: int = 0, trials: int = 10) -> GradCheckResult:
    """Worst result of an op over several seeded inputs."""
    results = []
    for trial in range(trials):
        rng = np.random.default_rng(seed + trial)
        build, inputs = OP_CASES[name](rng)
        results.append(check_function(name, build, inputs, rng))
    worst = max(results, key=lambda r: r.max_relative_error)
    return GradCheckResult(name=name, max_relative_error=worst.max_relative_error, tolerance=OP_TOLERANCE,
                           checked_entries=sum(r.checked_entries for r in results))


def _random_cloud(rng: np.random.Generator, n: int, id: str) -> GaussianCloud:
    return GaussianCloud(means=rng.normal(size=(n, 3)), colors=rng.uniform(0.05, 0.95, size=(n, 3)),
                         opacities=rng.uniform(0.1, 0.9, size=n), scales=rng.uniform(0.01, 0.1, size=(n, 3)),
                         rotations=_unit(rng.normal(size=(n, 4))), id=id)


def check_end_to_end(seed: int = 0, max_entries: int = 5, batch_size: int = 3) -> GradCheckResult:
    """d(combined loss)/d(weights) through the full encoder on a D=8, G=2, K=4 model."""
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(token_dim=8, depth=1, heads=2, embed_dim=8, preset=None,
                        grouping=GroupingConfig(num_groups=2, group_size=4, max_gaussians=64))
    weights = init_weights(cfg, seed=seed)
    prepared = [prepare_cloud(_random_cloud(rng, 12, str(i)), cfg.grouping) for i in range(batch_size)]
    batch = TripletBatch([Triplet(cloud_id=str(i), caption=f"object {i}",
                                  text_embedding=_unit(rng.normal(size=cfg.embed_dim)),
                                  image_embedding=_unit(rng.normal(size=cfg.embed_dim)))
                          for i in range(batch_size)])
    names = weights.names()

    def build(tensors: List[Tensor]) -> Tensor:
        gs = encode_prepared(prepared, dict(zip(names, tensors)), cfg)
        return combined_loss(batch, gs, LossConfig())

    result = check_function("encode+combined_loss", build, [weights[n] for n in names], rng,
                            tolerance=END_TO_END_TOLERANCE, max_entries=max_entries)
    return result


def run_suite(seed: int = 0, trials: int = 10, end_to_end: bool = True) -> List[GradCheckResult]:
    results = [check_op(name, seed=seed, trials=trials) for name in OP_CASES]
    if end_to_end:
        results.append(check_end_to_end(seed=seed))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"Gradient check failed for: {', '.join(failed)}")
    else:
        logger.info(f"All {len(results)} gradient checks passed")
    return results


def format_gradcheck_text(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    output = ["GRADIENT CHECK", "=" * 50]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        output.append(f"{r.name:<{width}}  {r.max_relative_error:>10.2e}  (tol {r.tolerance:.0e})  {status}")
    passed = sum(r.passed for r in results)
    output.append("")
    output.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(output)
