"""Feed-forward networks with dense and low-rank factored layers.

A layer with weight ``w`` (out_dim x in_dim) maps a batch ``x`` (b x in_dim)
to ``x @ w.T + bias``. Low-rank layers never materialize ``w``: forward runs
as ``((x @ v) @ s.T) @ u.T`` at cost O(b (m+n) r), and backward returns
contracted gradients instead of the full m x n matrix.

train_step advances every low-rank layer by one step of the chosen splitting
integrator while dense layers and biases take a plain gradient-descent step.
All layers move through the integrator phases together, so each gradient
evaluation sees a consistent network.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .integrators import INTEGRATOR_NAMES, StepConfig
from .linalg import (
    DimensionError,
    Matrix,
    NumericError,
    as_matrix,
    householder_qr,
    ortho_augment,
)
from .lowrank import LowRankState, truncate_state

__all__ = [
    "LayerSpec",
    "DenseLayer",
    "LowRankLayer",
    "Network",
    "BatchGrad",
    "build_network",
    "mlp_specs",
    "forward",
    "softmax_cross_entropy",
    "backward",
    "train_step",
    "evaluate",
]

_ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer, consumed by build_network."""

    kind: str  # "dense" | "lowrank"
    in_dim: int
    out_dim: int
    activation: str = "relu"
    initial_rank: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("dense", "lowrank"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "lowrank":
            if self.initial_rank is None:
                raise ValueError("lowrank layer needs initial_rank")
            if not 1 <= self.initial_rank <= min(self.in_dim, self.out_dim):
                raise ValueError("initial_rank must be in [1, min(dims)]")
        elif self.initial_rank is not None:
            raise ValueError("dense layer takes no initial_rank")


@dataclass
class DenseLayer:
    w: Matrix  # out_dim x in_dim
    bias: np.ndarray
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def densify(self) -> Matrix:
        return self.w.copy()


@dataclass
class LowRankLayer:
    state: LowRankState  # u: out_dim x r, v: in_dim x r
    bias: np.ndarray
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.state.v.shape[0]

    @property
    def out_dim(self) -> int:
        return self.state.u.shape[0]

    @property
    def rank(self) -> int:
        return self.state.rank

    def densify(self) -> Matrix:
        return self.state.densify()


@dataclass
class Network:
    layers: list

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"layer widths do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def ranks(self) -> list:
        return [l.rank for l in self.layers if isinstance(l, LowRankLayer)]


class DenseGrad(NamedTuple):
    g: Matrix  # full out_dim x in_dim gradient


class LowRankGrad(NamedTuple):
    g_v: Matrix  # gradient contracted on the right basis, out_dim x r
    g_u: Matrix  # gradient contracted on the left basis, in_dim x r


@dataclass
class BatchGrad:
    """Per-layer loss gradients for one mini-batch, contracted where low-rank."""

    weights: list  # DenseGrad | LowRankGrad per layer
    biases: list


def mlp_specs(widths: Sequence[int], initial_rank: Optional[int] = None) -> list:
    """Layer specs for an MLP: relu hidden layers, identity output.

    With initial_rank given, every layer is low-rank (rank capped at the
    layer's smaller dimension); otherwise all layers are dense.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    specs = []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        act = "identity" if i == len(widths) - 2 else "relu"
        if initial_rank is None:
            specs.append(LayerSpec("dense", n_in, n_out, act))
        else:
            r = min(initial_rank, n_in, n_out)
            specs.append(LayerSpec("lowrank", n_in, n_out, act, initial_rank=r))
    return specs


def build_network(specs: Sequence[LayerSpec], seed: int) -> Network:
    """Seeded network init.

    Dense weights draw from the standard fan-in-scaled Gaussian. A low-rank
    layer keeps the dominant rank-r part of the same dense draw, so its
    factors start orthonormal and the layer's output scale tracks the dense
    baseline instead of collapsing when the net is deep.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        std = np.sqrt(2.0 / spec.in_dim)
        w = std * rng.standard_normal((spec.out_dim, spec.in_dim))
        bias = np.zeros(spec.out_dim)
        if spec.kind == "dense":
            layers.append(DenseLayer(w, bias, spec.activation))
        else:
            r = spec.initial_rank
            left, sig, right_t = np.linalg.svd(w, full_matrices=False)
            state = LowRankState(
                np.ascontiguousarray(left[:, :r]),
                np.diag(sig[:r]),
                np.ascontiguousarray(right_t[:r].T),
            )
            layers.append(LowRankLayer(state, bias, spec.activation))
    return Network(layers)


# -- forward / backward tape ------------------------------------------------
#
# Internally every layer is viewed as w = a @ b.T (dense layers set b = I
# implicitly). The tape keeps each layer's input and pre-activation so that
# backward can contract gradients against whatever factor the active
# integrator phase needs, without ever forming delta.T @ x in full.


class _Repr(NamedTuple):
    a: Optional[Matrix]  # left factor, out_dim x r (None for dense)
    b: Optional[Matrix]  # right factor, in_dim x r (None for dense)
    w: Optional[Matrix]  # dense weight (None for factored)
    bias: np.ndarray
    activation: str


class _Tape(NamedTuple):
    x: Matrix  # layer input, batch x in_dim
    delta: Optional[Matrix]  # grad wrt pre-activation, batch x out_dim


def _base_repr(layer) -> _Repr:
    if isinstance(layer, DenseLayer):
        return _Repr(None, None, layer.w, layer.bias, layer.activation)
    st = layer.state
    return _Repr(st.u @ st.s, st.v, None, layer.bias, layer.activation)


def _run_forward(reprs, x):
    caches = []
    cur = x
    for rep in reprs:
        if rep.w is not None:
            z = cur @ rep.w.T + rep.bias
        else:
            z = (cur @ rep.b) @ rep.a.T + rep.bias
        caches.append((cur, z))
        cur = np.maximum(z, 0.0) if rep.activation == "relu" else z
    if not np.isfinite(cur).all():
        raise NumericError("non-finite activation in forward pass")
    return cur, caches


def _run_backward(reprs, caches, dlogits):
    tapes = [None] * len(reprs)
    d = dlogits
    for idx in range(len(reprs) - 1, -1, -1):
        rep = reprs[idx]
        x_in, z = caches[idx]
        dz = d * (z > 0.0) if rep.activation == "relu" else d
        tapes[idx] = _Tape(x_in, dz)
        if idx > 0:
            if rep.w is not None:
                d = dz @ rep.w
            else:
                d = (dz @ rep.a) @ rep.b.T
    return tapes


def _g_right(tape: _Tape, basis: Matrix) -> Matrix:
    # (delta.T @ x) @ basis without forming the full gradient
    return tape.delta.T @ (tape.x @ basis)


def _g_left(tape: _Tape, basis: Matrix) -> Matrix:
    return tape.x.T @ (tape.delta @ basis)


def _g_bias(tape: _Tape) -> np.ndarray:
    return tape.delta.sum(axis=0)


class _Cache(NamedTuple):
    net: "Network"
    reprs: list
    layer_caches: list


def forward(net: Network, x_batch) -> tuple:
    """Batch forward pass. Returns (logits, cache) with cache for backward."""
    x = as_matrix(x_batch, "x_batch")
    if x.shape[1] != net.in_dim:
        raise DimensionError(
            f"input width {x.shape[1]} does not match layer 0 ({net.in_dim})"
        )
    reprs = [_base_repr(layer) for layer in net.layers]
    logits, caches = _run_forward(reprs, x)
    return logits, _Cache(net, reprs, caches)


def softmax_cross_entropy(logits, labels) -> tuple:
    """Mean softmax cross-entropy and its gradient wrt the logits.

    Stabilized by max subtraction; dlogits = (softmax - onehot) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, classes = logits.shape
    if labels.shape != (b,):
        raise DimensionError("labels must be one integer per row of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_z
    rows = np.arange(b)
    loss = float(-log_prob[rows, labels].mean())
    dlogits = np.exp(log_prob)
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def backward(net: Network, cache: _Cache, dlogits) -> BatchGrad:
    """Exact batch-loss gradients; low-rank layers come back contracted.

    For a low-rank layer the pair is (G @ v, G.T @ u) against the layer's
    current factors, computed as delta.T @ (x @ v) and x.T @ (delta @ u).
    """
    if cache.net is not net:
        raise ValueError("stale cache: forward ran on a different network")
    dlogits = as_matrix(dlogits, "dlogits")
    tapes = _run_backward(cache.reprs, cache.layer_caches, dlogits)
    weights = []
    biases = []
    for layer, tape in zip(net.layers, tapes):
        if isinstance(layer, DenseLayer):
            entry = DenseGrad(tape.delta.T @ tape.x)
            finite = np.isfinite(entry.g).all()
        else:
            st = layer.state
            entry = LowRankGrad(_g_right(tape, st.v), _g_left(tape, st.u))
            finite = np.isfinite(entry.g_v).all() and np.isfinite(entry.g_u).all()
        if not finite:
            raise NumericError("non-finite gradient")
        weights.append(entry)
        biases.append(_g_bias(tape))
    return BatchGrad(weights, biases)


# -- training ----------------------------------------------------------------


def _qr_cols(a):
    q, r = householder_qr(a)
    return q, r


def train_step(net: Network, batch, integrator: str, cfg: StepConfig) -> tuple:
    """One mini-batch update. Returns (new_net, pre-step batch loss).

    Low-rank layers advance by one step of the named integrator; dense
    layers and all biases take a plain gradient step of the same size. The
    first gradient evaluation is shared by every integrator (they all start
    from the current weights), so the cheapest path (abc-psi with one inner
    step) costs a single forward/backward pass per batch.
    """
    if integrator not in INTEGRATOR_NAMES:
        raise ValueError(f"unknown integrator {integrator!r}")
    x, labels = batch
    x = as_matrix(x, "x")
    h = cfg.h
    lowrank_idx = [
        i for i, layer in enumerate(net.layers) if isinstance(layer, LowRankLayer)
    ]
    if integrator == "full" and lowrank_idx:
        raise ValueError("full integrator requires an all-dense network")
    if integrator == "abc-psi" and cfg.policy is None:
        raise ValueError("abc-psi needs cfg.policy for truncation")

    base_reprs = [_base_repr(layer) for layer in net.layers]
    logits, caches = _run_forward(base_reprs, x)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    base_tapes = _run_backward(base_reprs, caches, dlogits)

    def repass(phase_ab):
        # phase_ab: {layer index: (a, b)} for lowrank layers, this phase
        reprs = []
        for i, layer in enumerate(net.layers):
            if i in phase_ab:
                a, b = phase_ab[i]
                reprs.append(_Repr(a, b, None, layer.bias, layer.activation))
            else:
                reprs.append(base_reprs[i])
        out, ch = _run_forward(reprs, x)
        _, dl = softmax_cross_entropy(out, labels)
        return _run_backward(reprs, ch, dl)

    # dense weights and biases always update from the starting point
    new_weights = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, DenseLayer):
            g_full = base_tapes[i].delta.T @ base_tapes[i].x
            new_weights[i] = layer.w - h * g_full
    new_biases = [
        layer.bias - h * _g_bias(base_tapes[i]) for i, layer in enumerate(net.layers)
    ]

    if lowrank_idx:
        states = {i: net.layers[i].state for i in lowrank_idx}
        k0 = {i: st.u @ st.s for i, st in states.items()}
        v0 = {i: st.v for i, st in states.items()}

        # K sweep: shared start for every integrator
        k = dict(k0)
        tapes = base_tapes
        for inner in range(cfg.substeps):
            if inner > 0:
                tapes = repass({i: (k[i], v0[i]) for i in lowrank_idx})
            for i in lowrank_idx:
                k[i] = k[i] - h * _g_right(tapes[i], v0[i])

        if integrator in ("psi", "bc-psi"):
            u1, s_mid = {}, {}
            for i in lowrank_idx:
                u1[i], s_mid[i] = _qr_cols(k[i])
            if integrator == "psi":
                # single corrective step on the core, along the raw gradient
                s_tapes = repass({i: (u1[i] @ s_mid[i], v0[i]) for i in lowrank_idx})
                for i in lowrank_idx:
                    s_mid[i] = s_mid[i] + h * (u1[i].T @ _g_right(s_tapes[i], v0[i]))
            else:
                for i in lowrank_idx:
                    s_mid[i] = u1[i].T @ k0[i]
            ell = {i: v0[i] @ s_mid[i].T for i in lowrank_idx}
            for _ in range(cfg.substeps):
                l_tapes = repass({i: (u1[i], ell[i]) for i in lowrank_idx})
                for i in lowrank_idx:
                    ell[i] = ell[i] - h * _g_left(l_tapes[i], u1[i])
            for i in lowrank_idx:
                v1, r_l = _qr_cols(ell[i])
                new_weights[i] = LowRankState(u1[i], r_l.T, v1)

        elif integrator == "bug":
            # L sweep also leaves from the starting point
            ell = {i: v0[i] @ states[i].s.T for i in lowrank_idx}
            tapes = base_tapes
            for inner in range(cfg.substeps):
                if inner > 0:
                    tapes = repass({i: (states[i].u, ell[i]) for i in lowrank_idx})
                for i in lowrank_idx:
                    ell[i] = ell[i] - h * _g_left(tapes[i], states[i].u)
            u1 = {i: _qr_cols(k[i])[0] for i in lowrank_idx}
            v1 = {i: _qr_cols(ell[i])[0] for i in lowrank_idx}
            s_init = {
                i: (u1[i].T @ states[i].u) @ states[i].s @ (v0[i].T @ v1[i])
                for i in lowrank_idx
            }
            s_tapes = repass({i: (u1[i] @ s_init[i], v1[i]) for i in lowrank_idx})
            for i in lowrank_idx:
                s_new = s_init[i] - h * (u1[i].T @ _g_right(s_tapes[i], v1[i]))
                new_weights[i] = LowRankState(u1[i], s_new, v1[i])

        else:  # abc-psi
            u_hat = {i: ortho_augment(k0[i], k[i]) for i in lowrank_idx}
            ell = {i: v0[i] @ (k0[i].T @ u_hat[i]) for i in lowrank_idx}
            # the augmented start reproduces the base weights exactly, so the
            # first inner step reuses the base tape
            tapes = base_tapes
            for inner in range(cfg.substeps):
                if inner > 0:
                    tapes = repass({i: (u_hat[i], ell[i]) for i in lowrank_idx})
                for i in lowrank_idx:
                    ell[i] = ell[i] - h * _g_left(tapes[i], u_hat[i])
            for i in lowrank_idx:
                k_star, v_star = truncate_state(u_hat[i], ell[i], cfg.policy)
                w_small, s_new = _qr_cols(u_hat[i].T @ k_star)
                new_weights[i] = LowRankState(u_hat[i] @ w_small, s_new, v_star)

    new_layers = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, DenseLayer):
            new_layers.append(DenseLayer(new_weights[i], new_biases[i], layer.activation))
        else:
            new_layers.append(LowRankLayer(new_weights[i], new_biases[i], layer.activation))
    return Network(new_layers), loss


def evaluate(net: Network, dataset, chunk: int = 512) -> float:
    """Argmax accuracy over a dataset; ties resolve to the lowest class."""
    if hasattr(dataset, "images"):
        images, labels = dataset.images, dataset.labels
    else:
        images, labels = dataset
    labels = np.asarray(labels)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    hits = 0
    for start in range(0, n, chunk):
        logits, _ = forward(net, images[start : start + chunk])
        hits += int((np.argmax(logits, axis=1) == labels[start : start + chunk]).sum())
    return hits / n
