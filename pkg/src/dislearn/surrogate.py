"""Latent feedforward networks, Sobolev training, and full-space prediction.

The surrogate is decode_output . network . encode_input + mean: a linear
encoder to r latent coordinates, an r -> r feedforward network with a
smooth ReLU-like activation (softplus, SiLU, or GeLU), a linear decoder,
and the empirical output mean carried by the output basis.  The training
loss matches both encoded outputs and reduced Jacobians, each term scaled
by per-sample or uniform normalization weights; gradients are exact
(closed-form layer recursions, including the second-derivative flow
through the network Jacobian) and are checked against finite differences
in the test suite before any training result is trusted.

Training uses Adam with a piecewise-constant learning rate halved at the
scheduled epochs, per-epoch shuffling from a named counter-based stream,
and is bitwise deterministic for a fixed (seed, backend, platform).
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels, reduction, rng
from .kernels_py import ACT_IDS

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

PAPER_EPOCHS = 3000
PAPER_HALVINGS = (2250, 2400, 2550, 2700, 2850)
DESK_EPOCHS = 600
DESK_HALVINGS = (450, 480, 510, 540, 570)


class DivergenceError(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class LatentNetwork:
    """r -> r feedforward net; depth counts weight matrices (>= 2)."""

    r: int
    depth: int
    width: int
    activation: str
    weights: list
    biases: list

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.activation not in ACT_IDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        shapes = self.shapes(self.r, self.depth, self.width)
        got = [w.shape for w in self.weights] + [b.shape for b in self.biases]
        want = [s for s, _ in shapes] + [s for _, s in shapes]
        if got != want:
            raise ValueError(f"parameter shapes {got} do not match {want}")

    @staticmethod
    def shapes(r, depth, width):
        """[(W_l shape, b_l shape)] for l = 1..depth."""
        out = [((width, r), (width,))]
        out += [((width, width), (width,))] * (depth - 2)
        out.append(((r, width), (r,)))
        return out

    @property
    def act_id(self):
        return ACT_IDS[self.activation]

    @classmethod
    def zeros(cls, r, depth, width, activation):
        shapes = cls.shapes(r, depth, width)
        return cls(r=r, depth=depth, width=width, activation=activation,
                   weights=[np.zeros(s) for s, _ in shapes],
                   biases=[np.zeros(s) for _, s in shapes])

    @classmethod
    def initialized(cls, r, depth, width, activation, seed):
        """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
        net = cls.zeros(r, depth, width, activation)
        for l, w in enumerate(net.weights):
            gen = rng.stream(seed, rng.LANE_INIT, l)
            fan_out, fan_in = w.shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            net.weights[l] = gen.uniform(-lim, lim, size=w.shape)
        return net

    def copy(self):
        return LatentNetwork(r=self.r, depth=self.depth, width=self.width,
                             activation=self.activation,
                             weights=[w.copy() for w in self.weights],
                             biases=[b.copy() for b in self.biases])

    def get_flat(self):
        return np.concatenate([w.ravel() for w in self.weights]
                              + [b.ravel() for b in self.biases])

    def set_flat(self, flat):
        pos = 0
        for w in self.weights:
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = flat[pos:pos + b.size].reshape(b.shape)
            pos += b.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has wrong length")


def forward(net, s):
    """Network output; s is (r,) or a batch (B, r)."""
    s2 = np.atleast_2d(np.asarray(s, dtype=float))
    out = kernels.forward(net.weights, net.biases, net.act_id, s2)
    return out[0] if np.ndim(s) == 1 else out


def net_jacobian(net, s):
    """Exact network Jacobian(s) by forward accumulation."""
    s2 = np.atleast_2d(np.asarray(s, dtype=float))
    J = kernels.jacobian(net.weights, net.biases, net.act_id, s2)
    return J[0] if np.ndim(s) == 1 else J


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class EncodedData:
    """Latent training tuples (s_k, q_k, G_k) plus normalization weights."""

    S: np.ndarray   # (N, r)
    Q: np.ndarray   # (N, r) encoded, mean-shifted outputs
    G: np.ndarray   # (N, r, r) reduced Jacobians
    a0: np.ndarray  # (N,)
    a1: np.ndarray  # (N,)

    @property
    def N(self):
        return self.S.shape[0]


def normalization_weights(Q, G, mode="per_sample", tau_rel=1e-8):
    """(a0, a1) loss weights.

    per_sample: a0_k = ||q_k||^2 + tau0, a1_k = ||G_k||_F^2 + tau1 with
    tau = tau_rel times the dataset mean of the corresponding squared norm.
    uniform: both weights equal the dataset totals.
    """
    q2 = np.einsum("bi,bi->b", Q, Q)
    g2 = np.einsum("bij,bij->b", G, G)
    if mode == "per_sample":
        return q2 + tau_rel * q2.mean(), g2 + tau_rel * g2.mean()
    if mode == "uniform":
        N = Q.shape[0]
        return np.full(N, q2.sum()), np.full(N, g2.sum())
    raise ValueError(f"unknown normalization {mode!r}")


def _check_weights(a0, a1):
    if np.any(a0 <= 0) or np.any(a1 <= 0):
        raise ValueError("normalization weights must be positive")


def sobolev_loss(net, S, Q, G, a0, a1):
    """Mean over the batch of the weighted output + derivative misfits."""
    _check_weights(a0, a1)
    loss, _, _ = kernels.loss_and_grad(net.weights, net.biases, net.act_id,
                                       S, Q, G, 1.0 / a0, 1.0 / a1)
    return loss


def loss_gradient(net, S, Q, G, a0, a1):
    """(loss, grad) with grad matching net parameter shapes exactly."""
    _check_weights(a0, a1)
    return kernels.loss_and_grad(net.weights, net.biases, net.act_id,
                                 S, Q, G, 1.0 / a0, 1.0 / a1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingSchedule:
    epochs: int
    batch_size: int = 25
    lr0: float = 1e-3
    lr_halvings: tuple = ()
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    normalization: str = "per_sample"
    tau_rel: float = 1e-8
    seed: int = 0

    def validate(self, N):
        if self.batch_size > N:
            raise ValueError("batch size exceeds the dataset size")
        hs = list(self.lr_halvings)
        if hs != sorted(set(hs)) or (hs and hs[-1] >= self.epochs):
            raise ValueError("halving epochs must be strictly increasing and < epochs")

    def digest_dict(self):
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr0": self.lr0, "lr_halvings": list(self.lr_halvings),
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "normalization": self.normalization, "tau_rel": self.tau_rel,
                "seed": self.seed}


def desk_schedule(lr0, seed, epochs=DESK_EPOCHS, halvings=DESK_HALVINGS, **kw):
    return TrainingSchedule(epochs=epochs, lr_halvings=tuple(halvings),
                            lr0=lr0, seed=seed, **kw)


def paper_schedule(lr0, seed, **kw):
    return TrainingSchedule(epochs=PAPER_EPOCHS, lr_halvings=PAPER_HALVINGS,
                            lr0=lr0, seed=seed, **kw)


def train(net, data, schedule):
    """Adam on the Sobolev loss; returns (trained copy, per-epoch losses).

    Parameters live in one flat vector (layer arrays are views into it), so
    the Adam update is a handful of vectorized operations per batch.
    """
    schedule.validate(data.N)
    _check_weights(data.a0, data.a1)
    flat = net.get_flat()
    shapes = net.shapes(net.r, net.depth, net.width)
    weights, biases = [], []
    pos = 0
    for ws, _ in shapes:
        weights.append(flat[pos:pos + ws[0] * ws[1]].reshape(ws))
        pos += ws[0] * ws[1]
    for _, bs in shapes:
        biases.append(flat[pos:pos + bs[0]])
        pos += bs[0]
    slices = []
    pos = 0
    for arr in weights + biases:
        slices.append(slice(pos, pos + arr.size))
        pos += arr.size

    inv_a0 = 1.0 / data.a0
    inv_a1 = 1.0 / data.a1
    g_flat = np.empty_like(flat)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    t = 0
    history = np.empty(schedule.epochs)
    halvings = np.asarray(schedule.lr_halvings, dtype=int)
    bs = schedule.batch_size
    for epoch in range(schedule.epochs):
        lr = schedule.lr0 * 0.5 ** int(np.sum(halvings <= epoch))
        perm = rng.stream(schedule.seed, rng.LANE_SHUFFLE, epoch).permutation(data.N)
        S_ep, Q_ep, G_ep = data.S[perm], data.Q[perm], data.G[perm]
        a0_ep, a1_ep = inv_a0[perm], inv_a1[perm]
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, data.N, bs):
            hi = lo + bs
            loss, gW, gb = kernels.loss_and_grad(
                weights, biases, net.act_id,
                S_ep[lo:hi], Q_ep[lo:hi], G_ep[lo:hi], a0_ep[lo:hi], a1_ep[lo:hi])
            epoch_loss += loss
            n_batches += 1
            for sl, g in zip(slices, gW + gb):
                g_flat[sl] = g.ravel()
            t += 1
            m += (1.0 - schedule.beta1) * (g_flat - m)
            v += (1.0 - schedule.beta2) * (g_flat * g_flat - v)
            flat -= lr * (m / (1.0 - schedule.beta1**t)) \
                / (np.sqrt(v / (1.0 - schedule.beta2**t)) + schedule.eps)
        history[epoch] = epoch_loss / n_batches
        if not np.isfinite(history[epoch]):
            raise DivergenceError(epoch)
    out = net.copy()
    out.set_flat(flat)
    return out, history


# ---------------------------------------------------------------------------
# full-space surrogate
# ---------------------------------------------------------------------------

@dataclass
class Surrogate:
    """Input basis + latent network + output basis (+ mean shift)."""

    in_basis: object
    out_basis: object
    net: LatentNetwork
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.in_basis.is_input() or self.out_basis.is_input():
            raise ValueError("bases are on the wrong sides")
        if self.in_basis.r != self.net.r or self.out_basis.r != self.net.r:
            raise ValueError("basis ranks do not match the network rank")


def predict(surr, x):
    """Surrogate output(s) in nodal coordinates; x is (d,) or (N, d)."""
    s = reduction.encode_input(surr.in_basis, x)
    y = reduction.decode_output(surr.out_basis, forward(surr.net, s))
    return y + surr.out_basis.mean


def predict_jacobian(surr, x):
    """Full d x d surrogate Jacobian at one x (nodal coordinates)."""
    if "enc" not in surr._cache:
        cov = surr.in_basis.cov
        W = surr.in_basis.whitened_cols()
        surr._cache["enc"] = (W.T / np.sqrt(cov.mu)) @ (cov.Phi.T @ cov.mesh.M)
    s = reduction.encode_input(surr.in_basis, x)
    return surr.out_basis.cols @ net_jacobian(surr.net, s) @ surr._cache["enc"]


def whitened_jacobian(surr, x):
    """Surrogate Jacobian in the (E, Y) frame: U . Dphi . W^T, nodal rows."""
    s = reduction.encode_input(surr.in_basis, x)
    Jl = net_jacobian(surr.net, s)
    W = surr.in_basis.whitened_cols()
    if np.ndim(x) == 1:
        return surr.out_basis.cols @ Jl @ W.T
    return np.einsum("ij,bjk,lk->bil", surr.out_basis.cols, Jl, W)


def identity_layer(h, t0, activation="softplus"):
    """Single-layer smooth identity approximation Id_h built from psi.

    Id_h(t) = (psi(t0 + h t) - psi(t0 - h t)) / (2 h psi'(t0)); requires
    psi'(t0) != 0.  Returned as a callable on scalars or arrays.
    """
    from .kernels_py import act_eval

    if not 0.0 < h <= 1.0:
        raise ValueError("h must lie in (0, 1]")
    act_id = ACT_IDS[activation]
    dpsi0 = act_eval(act_id, np.asarray(t0, dtype=float))[1]
    if dpsi0 == 0.0:
        raise ValueError("psi'(t0) vanishes; pick a different t0")

    def id_h(t):
        t = np.asarray(t, dtype=float)
        up = act_eval(act_id, t0 + h * t)[0]
        dn = act_eval(act_id, t0 - h * t)[0]
        return (up - dn) / (2.0 * h * dpsi0)

    return id_h


# ---------------------------------------------------------------------------
# dataset encoding
# ---------------------------------------------------------------------------

def encode_dataset(samples, in_basis, out_basis, normalization="per_sample",
                   tau_rel=1e-8, chunk=256):
    """Latent training tuples for a basis pair, streaming over Jacobians."""
    S = reduction.encode_input(in_basis, samples.X)
    Q = reduction.encode_output(out_basis, samples.Y - out_basis.mean)
    J = samples.require_jacobians()
    UtM = out_basis.cols.T @ out_basis.mesh.M
    V = in_basis.cols
    G = np.empty((samples.N, out_basis.r, in_basis.r))
    for lo in range(0, samples.N, chunk):
        G[lo:lo + chunk] = UtM @ np.asarray(J[lo:lo + chunk]) @ V
    a0, a1 = normalization_weights(Q, G, normalization, tau_rel)
    return EncodedData(S=S, Q=Q, G=G, a0=a0, a1=a1)
