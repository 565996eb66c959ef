"""Graph-attention + fully-connected actor-critic on the autodiff engine.

Graph branch: two multi-head GAT layers over the circuit graph (self-loops
always on), then a mean pool over nodes. Observation branch: two ReLU
layers over [normalized goal, normalized per-corner specs]. The two
embeddings are concatenated and passed through a ReLU layer and a linear
head that emits M x 3 logits (actor) or a scalar (critic). Actor and critic
have identical trunks with separate weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, log_softmax, softmax
from .circuits import FEATURE_DIM, CircuitGraph, GoalRange, clamp_to_grid
from .errors import CheckpointError, ConfigError, InvariantError

FORMAT_VERSION = 1
DECREASE, KEEP, INCREASE = 0, 1, 2
OBS_CLIP = 5.0


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols]).reshape(shape)


# --------------------------------------------------------------------------
# layers

class Linear:
    def __init__(self, n_in: int, n_out: int, rng, gain: float = 1.0):
        self.W = Tensor(orthogonal((n_in, n_out), gain, rng), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def named_params(self, prefix: str):
        return [(prefix + ".W", self.W), (prefix + ".b", self.b)]


@dataclass
class GatLayer:
    """Multi-head graph attention with concatenated heads.

    W projects node features to heads * head_dim; ``a_self`` and ``a_nbr``
    are the two halves of each head's attention vector, so the logit for
    node u attending to v is leaky_relu(a_self . W h_u + a_nbr . W h_v).
    """

    W: Tensor
    a_self: Tensor
    a_nbr: Tensor
    bias: Tensor
    heads: int
    head_dim: int
    activation: str = "elu"
    slope: float = 0.2

    @classmethod
    def init(cls, n_in: int, heads: int, head_dim: int, rng, activation: str = "elu") -> "GatLayer":
        return cls(
            W=Tensor(orthogonal((n_in, heads * head_dim), 1.0, rng), requires_grad=True),
            a_self=Tensor(orthogonal((heads, head_dim), 1.0, rng), requires_grad=True),
            a_nbr=Tensor(orthogonal((heads, head_dim), 1.0, rng), requires_grad=True),
            bias=Tensor(np.zeros(heads * head_dim), requires_grad=True),
            heads=heads, head_dim=head_dim, activation=activation,
        )

    @property
    def out_dim(self) -> int:
        return self.heads * self.head_dim

    def named_params(self, prefix: str):
        return [(prefix + ".W", self.W), (prefix + ".a_self", self.a_self),
                (prefix + ".a_nbr", self.a_nbr), (prefix + ".bias", self.bias)]


def adjacency_mask(n: int, edges) -> np.ndarray:
    """Boolean (n, n) neighbourhood mask with self-loops from an edge list."""
    if n < 1:
        raise InvariantError("graph has no nodes")
    A = np.eye(n, dtype=bool)
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise InvariantError(f"edge ({u}, {v}) out of range for {n} nodes")
        A[u, v] = A[v, u] = True
    return A


def gat_forward(layer: GatLayer, features, edges=None, mask: np.ndarray | None = None) -> Tensor:
    """features: (n, d) or (B, n, d). Give either ``edges`` or a ready ``mask``.

    All per-node reductions are order-invariant, so permuting the nodes
    permutes the output rows bit-for-bit.
    """
    h = Tensor._wrap(features)
    single = h.ndim == 2
    if single:
        h = h.reshape(1, *h.shape)
    B, n, _ = h.shape
    if n == 0:
        raise InvariantError("graph has no nodes")
    if mask is None:
        mask = adjacency_mask(n, edges if edges is not None else [])
    H, D = layer.heads, layer.head_dim
    # elementwise product + sum over the input axis keeps every row's
    # arithmetic independent of its position (unlike a blocked matmul)
    wh = (h.reshape(B, n, -1, 1) * layer.W).sum(axis=2)
    wh = wh.reshape(B, n, H, D).transpose(0, 2, 1, 3)                 # B H n D
    s_self = (wh * layer.a_self.reshape(1, H, 1, D)).sum(axis=-1)     # B H n
    s_nbr = (wh * layer.a_nbr.reshape(1, H, 1, D)).sum(axis=-1)
    e = (s_self.reshape(B, H, n, 1) + s_nbr.reshape(B, H, 1, n)).leaky_relu(layer.slope)
    att = softmax(e, axis=-1, mask=mask, order_invariant=True)        # B H n n
    msg = att.reshape(B, H, n, n, 1) * wh.reshape(B, H, 1, n, D)
    out = msg.sorted_sum(axis=3).transpose(0, 2, 1, 3).reshape(B, n, H * D) + layer.bias
    if layer.activation == "elu":
        out = out.elu()
    elif layer.activation == "relu":
        out = out.relu()
    return out.reshape(n, H * D) if single else out


# --------------------------------------------------------------------------
# actor-critic

@dataclass(frozen=True)
class Arch:
    n_nodes: int
    node_dim: int
    obs_dim: int
    n_params: int
    gat_layers: int = 2
    heads: int = 4
    head_dim: int = 8
    obs_hidden: int = 64
    trunk_hidden: int = 64

    def as_dict(self):
        return dict(self.__dict__)


class Trunk:
    """GAT graph branch + FC obs branch + final layers."""

    def __init__(self, arch: Arch, n_out: int, head_gain: float, rng):
        self.gat = []
        d = arch.node_dim
        for _ in range(arch.gat_layers):
            layer = GatLayer.init(d, arch.heads, arch.head_dim, rng)
            self.gat.append(layer)
            d = layer.out_dim
        self.obs1 = Linear(arch.obs_dim, arch.obs_hidden, rng)
        self.obs2 = Linear(arch.obs_hidden, arch.obs_hidden, rng)
        self.fc = Linear(d + arch.obs_hidden, arch.trunk_hidden, rng)
        self.head = Linear(arch.trunk_hidden, n_out, rng, gain=head_gain)

    def named_params(self, prefix: str):
        out = []
        for i, g in enumerate(self.gat):
            out += g.named_params(f"{prefix}.gat{i}")
        for name in ("obs1", "obs2", "fc", "head"):
            out += getattr(self, name).named_params(f"{prefix}.{name}")
        return out

    def __call__(self, feats: Tensor, mask: np.ndarray, obs: Tensor):
        h = feats
        for g in self.gat:
            h = gat_forward(g, h, mask=mask)
        n = h.shape[1]
        graph_emb = h.sorted_sum(axis=1) * (1.0 / n)
        o = self.obs2(self.obs1(obs).relu()).relu()
        z = self.fc(concat([graph_emb, o], axis=-1)).relu()
        return self.head(z), z


class PolicyParams:
    def __init__(self, arch: Arch, rng: np.random.Generator):
        self.arch = arch
        self.actor = Trunk(arch, arch.n_params * 3, 0.01, rng)
        self.critic = Trunk(arch, 1, 1.0, rng)

    def named_params(self):
        return self.actor.named_params("actor") + self.critic.named_params("critic")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def copy_from(self, other: "PolicyParams"):
        for (_, a), (_, b) in zip(self.named_params(), other.named_params()):
            a.data = b.data.copy()

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def restore(self, snap):
        for t, v in zip(self.parameters(), snap):
            t.data = v.copy()


def _check_inputs(params: PolicyParams, feats, obs):
    a = params.arch
    f = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    o = obs.data if isinstance(obs, Tensor) else np.asarray(obs)
    if f.shape[-2:] != (a.n_nodes, a.node_dim):
        raise ConfigError(f"node features {f.shape} do not match ({a.n_nodes}, {a.node_dim})")
    if o.shape[-1] != a.obs_dim:
        raise ConfigError(f"observation width {o.shape[-1]} does not match {a.obs_dim}")


def policy_forward(params: PolicyParams, feats, mask, obs):
    """Actor logits (B, M, 3) and the trunk embedding (B, trunk_hidden)."""
    _check_inputs(params, feats, obs)
    out, emb = params.actor(Tensor._wrap(feats), mask, Tensor._wrap(obs))
    return out.reshape(out.shape[0], params.arch.n_params, 3), emb


def critic_forward(params: PolicyParams, feats, mask, obs) -> Tensor:
    _check_inputs(params, feats, obs)
    out, _ = params.critic(Tensor._wrap(feats), mask, Tensor._wrap(obs))
    return out.reshape(out.shape[0])


def action_log_probs(logits: Tensor, actions: np.ndarray) -> tuple[Tensor, Tensor]:
    """Joint log-prob (B,) of ``actions`` (B, M) and the summed entropy (B,)."""
    lp = log_softmax(logits, axis=-1)
    onehot = np.eye(3)[actions]
    logp = (lp * onehot).sum(axis=-1).sum(axis=-1)
    ent = -(lp.exp() * lp).sum(axis=-1).sum(axis=-1)
    return logp, ent


def sample_action(logits, rng: np.random.Generator | None = None, greedy: bool = False):
    """Per-row categorical draw over {decrease, keep, increase}.

    ``logits`` is (M, 3) or (B, M, 3). Returns (actions, joint log-prob,
    entropy). Greedy mode takes the argmax, preferring keep on ties.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[None]
    lp = z - z.max(-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(-1, keepdims=True))
    p = np.exp(lp)
    if greedy:
        a = np.argmax(z, axis=-1)
        a = np.where(z[..., KEEP] >= z.max(-1), KEEP, a)
    else:
        if rng is None:
            raise InvariantError("stochastic sampling needs an rng")
        u = rng.random(z.shape[:-1])
        c = np.cumsum(p, -1)
        a = np.minimum((u[..., None] >= c).sum(-1), 2)
    logp = np.take_along_axis(lp, a[..., None], -1)[..., 0].sum(-1)
    ent = -(p * lp).sum(-1).sum(-1)
    if single:
        return a[0], float(logp[0]), float(ent[0])
    return a, logp, ent


def apply_action(x, actions, graph: CircuitGraph) -> np.ndarray:
    """x + (a - 1) * step per slot, kept within bounds and on the grid."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(actions)
    new = np.clip(x + (a - 1) * graph.step(), graph.lower(), graph.upper())
    return clamp_to_grid(new, graph.slots)


# --------------------------------------------------------------------------
# observation

class ObsNormalizer:
    """Maps goals and per-corner specs to roughly [-1, 1].

    Each spec uses its goal-sampling range; decade-spanning quantities
    (bandwidth, current) are log10-transformed first. Out-of-range values
    are clipped at +-OBS_CLIP.
    """

    def __init__(self, ranges: dict[str, tuple[float, float, bool]]):
        self.ranges = dict(ranges)
        self.specs = tuple(self.ranges)

    @classmethod
    def from_goal_space(cls, space: list[GoalRange]) -> "ObsNormalizer":
        return cls({g.spec: (g.low, g.high, g.spec in ("bandwidth", "current", "power")) for g in space})

    def _scale(self, values: np.ndarray, axis: int) -> np.ndarray:
        v = np.moveaxis(np.asarray(values, dtype=float), axis, 0).copy()
        for i, s in enumerate(self.specs):
            lo, hi, lg = self.ranges[s]
            if lg:
                v[i], lo, hi = np.log10(np.maximum(v[i], 1e-30)), math.log10(lo), math.log10(hi)
            v[i] = 2.0 * (v[i] - lo) / (hi - lo) - 1.0
        return np.clip(np.moveaxis(v, 0, axis), -OBS_CLIP, OBS_CLIP)

    def goal(self, goal_values) -> np.ndarray:
        """(..., N) goal values -> normalized."""
        return self._scale(goal_values, -1)

    def specs_matrix(self, spec_values) -> np.ndarray:
        """(..., N, C) spec values in goal order -> same shape, normalized."""
        return self._scale(spec_values, -2)

    def observation(self, goal_values, spec_values) -> np.ndarray:
        """[goal (N) || specs (N * C) row-major], batched over leading axes."""
        g = self.goal(goal_values)
        s = self.specs_matrix(spec_values)
        lead = s.shape[:-2]
        g = np.broadcast_to(g, lead + g.shape[-1:])
        return np.concatenate([g, s.reshape(lead + (-1,))], axis=-1)

    def as_dict(self):
        return {k: list(v) for k, v in self.ranges.items()}


# --------------------------------------------------------------------------
# optimisation helpers

class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


# --------------------------------------------------------------------------
# checkpoints

def _fmt_values(a: np.ndarray) -> str:
    return "[" + ", ".join(format(float(v), ".17g") for v in a.reshape(-1)) + "]"


def save_checkpoint(params: PolicyParams, metadata: dict, path=None) -> str:
    """Serialize to JSON text (17 significant digits); also write ``path`` if given."""
    meta = dict(metadata)
    meta["arch"] = params.arch.as_dict()
    lines = ["{", f'  "format_version": {FORMAT_VERSION},',
             '  "metadata": ' + json.dumps(meta, sort_keys=True) + ",", '  "layers": [']
    named = params.named_params()
    for i, (name, t) in enumerate(named):
        sep = "," if i < len(named) - 1 else ""
        lines.append(f'    {{"name": {json.dumps(name)}, "shape": {json.dumps(list(t.shape))}, '
                     f'"values": {_fmt_values(t.data)}}}{sep}')
    lines += ["  ]", "}"]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def load_checkpoint(source, expected_benchmark: str | None = None) -> tuple[PolicyParams, dict]:
    """Read a checkpoint from a path or JSON text."""
    text = source
    if not str(source).lstrip().startswith("{"):
        try:
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {source}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    meta = doc["metadata"]
    if expected_benchmark is not None and meta.get("benchmark") != expected_benchmark:
        raise CheckpointError(f"checkpoint is for {meta.get('benchmark')!r}, not {expected_benchmark!r}")
    try:
        arch = Arch(**meta["arch"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"bad architecture block: {e}") from e
    params = PolicyParams(arch, np.random.default_rng(0))
    named = params.named_params()
    layers = doc["layers"]
    if len(layers) != len(named):
        raise CheckpointError(f"expected {len(named)} layers, found {len(layers)}")
    for (name, t), rec in zip(named, layers):
        if rec["name"] != name or tuple(rec["shape"]) != t.shape:
            raise CheckpointError(f"layer {rec['name']} {rec['shape']} does not match {name} {list(t.shape)}")
        t.data = np.asarray(rec["values"], dtype=float).reshape(t.shape)
    return params, meta


def build_policy(graph: CircuitGraph, n_specs: int, n_corners: int, rng, **arch_kw) -> PolicyParams:
    arch = Arch(n_nodes=len(graph.nodes), node_dim=FEATURE_DIM, obs_dim=n_specs * (1 + n_corners),
                n_params=graph.n_params, **arch_kw)
    return PolicyParams(arch, rng)
