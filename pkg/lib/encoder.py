"""
Dual-branch Gaussian encoder.

A cloud is split into groups (farthest-point centers plus K nearest
neighbours), each group is lifted to a token by a shared per-point MLP with
max pooling, and two transformer branches run side by side:

- the fundamental branch sees position and color,
- the advanced branch sees position, opacity, scale and rotation, and is
  guided block by block by the fundamental branch through cross-attention.

Both branches are mean-pooled, concatenated and mapped by an MLP head to a
unit-length embedding. Internally every tensor carries a leading batch axis.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from lib import autodiff as ad
from lib.autodiff import Tensor
from lib.config import Branch, CrossAttentionDirection, EncoderConfig, GroupingConfig
from lib.errors import ConfigError, InputError, NumericError, ShapeError
from lib.gaussians import GaussianCloud, normalize_cloud

logger = logging.getLogger(__name__)

# Per-point raw feature layout produced by group_divide.
FEATURE_NAMES = ("dx", "dy", "dz", "r", "g", "b", "opacity",
                 "scale_0", "scale_1", "scale_2", "rot_w", "rot_x", "rot_y", "rot_z")
FEATURE_WIDTH = len(FEATURE_NAMES)
BRANCH_COLUMNS = {
    Branch.FUNDAMENTAL: (0, 1, 2, 3, 4, 5),
    Branch.ADVANCED: (0, 1, 2, 6, 7, 8, 9, 10, 11, 12, 13),
}
LN_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class TokenStream:
    """Tokens (B, G, D) and their group centers (B, G, 3)."""
    tokens: Tensor
    centers: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]


# --- grouping -----------------------------------------------------------------

def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """
    Indices of n farthest-point samples. The first pick is the point farthest
    from the centroid; ties go to the lowest index. Once every point has been
    picked the sequence repeats index 0.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise InputError("Cannot sample from an empty point set")
    centroid = points.mean(axis=0)
    chosen = [int(np.argmax(np.linalg.norm(points - centroid, axis=1)))]
    min_dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for _ in range(1, n):
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen, dtype=np.int64)


def knn_indices(points: np.ndarray, center: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours of center (ties by lowest index); cycles when fewer than k points exist."""
    dist = np.linalg.norm(np.asarray(points, dtype=np.float64) - center, axis=1)
    order = np.argsort(dist, kind="stable")
    if len(order) >= k:
        return order[:k]
    return order[np.arange(k) % len(order)]


def point_features(cloud: GaussianCloud) -> np.ndarray:
    """(N, 14) raw attribute rows in FEATURE_NAMES order, positions absolute."""
    return np.concatenate([cloud.means, cloud.colors, cloud.opacities[:, None],
                           cloud.scales, cloud.rotations], axis=1)


def group_divide(cloud: GaussianCloud, cfg: GroupingConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split a (normalized) cloud into cfg.num_groups groups of cfg.group_size points.

    Returns centers (G, 3) and groups (G, K, 14) whose positions are relative
    to their group center.
    """
    if len(cloud) == 0:
        raise InputError(f"Cannot group empty cloud '{cloud.id}'")
    center_idx = farthest_point_sample(cloud.means, cfg.num_groups)
    centers = cloud.means[center_idx]
    features = point_features(cloud)
    groups = np.empty((cfg.num_groups, cfg.group_size, FEATURE_WIDTH))
    for g, center in enumerate(centers):
        rows = features[knn_indices(cloud.means, center, cfg.group_size)]
        rows[:, :3] -= center
        groups[g] = rows
    return centers, groups


def prepare_cloud(cloud: GaussianCloud, cfg: GroupingConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Canonicalize then group a cloud."""
    normalized, _, _ = normalize_cloud(cloud)
    return group_divide(normalized, cfg)


# --- weights ------------------------------------------------------------------

def _linear_shapes(prefix: str, n_in: int, n_out: int, bias: bool = True):
    shapes = {f"{prefix}.weight": (n_in, n_out)}
    if bias:
        shapes[f"{prefix}.bias"] = (n_out,)
    return shapes


def _norm_shapes(prefix: str, d: int):
    return {f"{prefix}.weight": (d,), f"{prefix}.bias": (d,)}


def _attention_shapes(prefix: str, d: int):
    shapes = {}
    for proj in ("q", "k", "v", "o"):
        shapes.update(_linear_shapes(f"{prefix}.{proj}", d, d, bias=False))
    return shapes


def branch_parameter_shapes(cfg: EncoderConfig, branch: Branch) -> Dict[str, tuple]:
    d = cfg.token_dim
    b = branch.value
    shapes = {}
    shapes.update(_linear_shapes(f"{b}.lift.fc1", len(BRANCH_COLUMNS[branch]), d))
    shapes.update(_linear_shapes(f"{b}.lift.fc2", d, d))
    shapes.update(_linear_shapes(f"{b}.pos.fc1", 3, d))
    shapes.update(_linear_shapes(f"{b}.pos.fc2", d, d))
    for i in range(cfg.depth):
        block = f"{b}.blocks.{i}"
        shapes.update(_norm_shapes(f"{block}.norm1", d))
        shapes.update(_attention_shapes(f"{block}.attn", d))
        if branch is Branch.ADVANCED and cfg.use_cross_attention:
            shapes.update(_norm_shapes(f"{block}.cross.norm_q", d))
            shapes.update(_norm_shapes(f"{block}.cross.norm_kv", d))
            shapes.update(_attention_shapes(f"{block}.cross", d))
        shapes.update(_norm_shapes(f"{block}.norm2", d))
        shapes.update(_linear_shapes(f"{block}.mlp.fc1", d, d * cfg.mlp_ratio))
        shapes.update(_linear_shapes(f"{block}.mlp.fc2", d * cfg.mlp_ratio, d))
    shapes.update(_norm_shapes(f"{b}.norm", d))
    return shapes


def parameter_shapes(cfg: EncoderConfig) -> Dict[str, tuple]:
    """Every named parameter of the encoder in canonical (checkpoint) order."""
    shapes = branch_parameter_shapes(cfg, Branch.FUNDAMENTAL)
    head_in = cfg.token_dim
    if cfg.use_advanced_branch:
        shapes.update(branch_parameter_shapes(cfg, Branch.ADVANCED))
        head_in = 2 * cfg.token_dim
    shapes.update(_linear_shapes("head.fc1", head_in, cfg.token_dim))
    shapes.update(_linear_shapes("head.fc2", cfg.token_dim, cfg.embed_dim))
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(cfg).values()))


class EncoderWeights:
    """Named float64 parameter arrays. Arrays are read-only; updates swap in new arrays."""

    def __init__(self, params: Dict[str, np.ndarray]):
        self.params: Dict[str, np.ndarray] = {}
        for name, value in params.items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"Non-finite values in parameter '{name}'")
        arr.setflags(write=False)
        self.params[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.params)

    def check(self, cfg: EncoderConfig) -> None:
        """Every parameter the config needs is present with the right shape."""
        for name, shape in parameter_shapes(cfg).items():
            if name not in self.params:
                raise ConfigError(f"Missing encoder parameter '{name}'")
            if self.params[name].shape != tuple(shape):
                raise ShapeError(f"Parameter '{name}' has the wrong shape", self.params[name].shape, shape)

    def tensors(self, trainable: Iterable[str] = ()) -> Dict[str, Tensor]:
        trainable = set(trainable)
        return {name: Tensor(value, requires_grad=name in trainable, name=name)
                for name, value in self.params.items()}

    def branch(self, branch: Branch) -> Dict[str, np.ndarray]:
        prefix = f"{branch.value}."
        return {name: value for name, value in self.params.items() if name.startswith(prefix)}


def init_weights(cfg: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """Xavier-uniform linear weights, zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        elif ".norm" in name and name.endswith(".weight"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return EncoderWeights(params)


def trainable_parameter_names(cfg: EncoderConfig) -> List[str]:
    names = list(parameter_shapes(cfg))
    if cfg.freeze_fundamental:
        names = [n for n in names if not n.startswith(f"{Branch.FUNDAMENTAL.value}.")]
    return names


# --- building blocks ----------------------------------------------------------

def _batched(array: np.ndarray, ndim: int) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    return array[None] if array.ndim == ndim - 1 else array


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.permute(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dk = x.shape
    return ad.reshape(ad.permute(x, (0, 2, 1, 3)), (b, n, h * dk))


def multi_head_attention(p: Dict[str, Tensor], prefix: str, query_src: Tensor, kv_src: Tensor,
                         heads: int) -> Tensor:
    q = ad.linear(query_src, p[f"{prefix}.q.weight"])
    k = ad.linear(kv_src, p[f"{prefix}.k.weight"])
    v = ad.linear(kv_src, p[f"{prefix}.v.weight"])
    out = ad.scaled_dot_attention(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads))
    return ad.linear(_merge_heads(out), p[f"{prefix}.o.weight"])


def _norm(p: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], eps=LN_EPS)


def _mlp(p: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    hidden = ad.gelu(ad.linear(x, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"]))
    return ad.linear(hidden, p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])


def _self_attention_sublayers(p, block: str, x: Tensor, heads: int) -> Tensor:
    h = _norm(p, f"{block}.norm1", x)
    return ad.add(x, multi_head_attention(p, f"{block}.attn", h, h, heads))


def _mlp_sublayer(p, block: str, x: Tensor) -> Tensor:
    return ad.add(x, _mlp(p, f"{block}.mlp", _norm(p, f"{block}.norm2", x)))


# --- operations ---------------------------------------------------------------

def lift_features(groups: np.ndarray, branch: Branch, weights: Dict[str, Tensor],
                  centers: np.ndarray) -> TokenStream:
    """
    Shared per-point MLP with max pooling over each group, plus a learned
    encoding of the group center.

    groups is (G, K, F) or (B, G, K, F) where F is either the full raw width
    or the branch's own width.
    """
    branch = Branch(branch)
    groups = _batched(groups, 4)
    centers = _batched(centers, 3)
    columns = BRANCH_COLUMNS[branch]
    width = groups.shape[-1]
    if width == FEATURE_WIDTH:
        groups = groups[..., list(columns)]
    elif width != len(columns):
        raise ShapeError(f"{branch.value} lift expects {len(columns)} or {FEATURE_WIDTH} raw features",
                         groups.shape, (len(columns),))
    if centers.shape != groups.shape[:2] + (3,):
        raise ShapeError("centers do not match groups", centers.shape, groups.shape)

    b = branch.value
    raw = ad.tanh(ad.constant(groups))
    per_point = _mlp(weights, f"{b}.lift", raw)
    tokens = ad.max_pool(per_point, axis=2)
    position = _mlp(weights, f"{b}.pos", ad.constant(centers))
    return TokenStream(tokens=ad.add(tokens, position), centers=centers)


def fundamental_forward(stream: TokenStream, weights: Dict[str, Tensor],
                        cfg: EncoderConfig) -> Tuple[TokenStream, List[TokenStream]]:
    """Pre-norm self-attention blocks; returns final tokens and every block's output."""
    x = stream.tokens
    states = []
    for i in range(cfg.depth):
        block = f"{Branch.FUNDAMENTAL.value}.blocks.{i}"
        x = _self_attention_sublayers(weights, block, x, cfg.heads)
        x = _mlp_sublayer(weights, block, x)
        states.append(TokenStream(tokens=x, centers=stream.centers))
    return TokenStream(tokens=x, centers=stream.centers), states


def advanced_forward(stream: TokenStream, guidance: Sequence[TokenStream], weights: Dict[str, Tensor],
                     cfg: EncoderConfig) -> TokenStream:
    """
    Self-attention blocks on advanced tokens, each followed by a cross-attention
    sub-layer guided by the paired fundamental block state.
    """
    if cfg.use_cross_attention and len(guidance) != cfg.depth:
        raise ConfigError(f"Guidance has {len(guidance)} block states but the advanced branch has depth {cfg.depth}")
    if cfg.use_cross_attention:
        for i, state in enumerate(guidance):
            if state.num_tokens != stream.num_tokens:
                raise ShapeError(f"Guidance state {i} has {state.num_tokens} tokens, "
                                 f"advanced stream has {stream.num_tokens}")
    x = stream.tokens
    for i in range(cfg.depth):
        block = f"{Branch.ADVANCED.value}.blocks.{i}"
        x = _self_attention_sublayers(weights, block, x, cfg.heads)
        if cfg.use_cross_attention:
            fun = guidance[i].tokens
            if cfg.cross_attention_direction is CrossAttentionDirection.FUN_QUERIES:
                query_src, kv_src = fun, x
            else:
                query_src, kv_src = x, fun
            q = _norm(weights, f"{block}.cross.norm_q", query_src)
            kv = _norm(weights, f"{block}.cross.norm_kv", kv_src)
            x = ad.add(x, multi_head_attention(weights, f"{block}.cross", q, kv, cfg.heads))
        x = _mlp_sublayer(weights, block, x)
    return TokenStream(tokens=x, centers=stream.centers)


def _pool(weights: Dict[str, Tensor], branch: Branch, stream: TokenStream) -> Tensor:
    return ad.mean_pool(_norm(weights, f"{branch.value}.norm", stream.tokens), axis=1)


def encode_groups(centers: np.ndarray, groups: np.ndarray, weights: Dict[str, Tensor],
                  cfg: EncoderConfig) -> Tensor:
    """Batched forward pass from grouped features to unit embeddings (B, E)."""
    fun_stream = lift_features(groups, Branch.FUNDAMENTAL, weights, centers)
    fun_out, states = fundamental_forward(fun_stream, weights, cfg)
    pooled = _pool(weights, Branch.FUNDAMENTAL, fun_out)
    if cfg.use_advanced_branch:
        adv_stream = lift_features(groups, Branch.ADVANCED, weights, centers)
        adv_out = advanced_forward(adv_stream, states, weights, cfg)
        pooled = ad.concat([pooled, _pool(weights, Branch.ADVANCED, adv_out)])
    head = ad.gelu(ad.linear(pooled, weights["head.fc1.weight"], weights["head.fc1.bias"]))
    head = ad.linear(head, weights["head.fc2.weight"], weights["head.fc2.bias"])
    return ad.l2_normalize(head)


def encode_prepared(prepared: Sequence[Tuple[np.ndarray, np.ndarray]], weights: Dict[str, Tensor],
                    cfg: EncoderConfig) -> Tensor:
    centers = np.stack([c for c, _ in prepared])
    groups = np.stack([g for _, g in prepared])
    return encode_groups(centers, groups, weights, cfg)


def encode(cloud: GaussianCloud, weights: EncoderWeights, cfg: EncoderConfig,
           tensors: Optional[Dict[str, Tensor]] = None) -> np.ndarray:
    """Unit-length embedding of one cloud."""
    if tensors is None:
        tensors = weights.tensors()
    centers, groups = prepare_cloud(cloud, cfg.grouping)
    return encode_groups(centers, groups, tensors, cfg).data[0].copy()
