"""Multi-layer LSTM with an affine output head, forward and backward passes.

Inputs arrive at the video frame rate; each vector is repeated ``k`` times
before layer ``replicate_before`` so later layers (and the output) run at the
envelope rate. Gate order inside every weight matrix is input, forget,
output, candidate.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"VIS1"
_HEADER = struct.Struct("<4s8I")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmLayer:
    W: np.ndarray  # (4H, D_in + H) acting on [x_t; h_{t-1}]
    b: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden

    def forward(self, X: np.ndarray):
        """Run over ``X`` of shape (B, T, D_in) from zero state; returns (H_seq, cache)."""
        B, T, D = X.shape
        H = self.hidden
        Wx, Wh = self.W[:, :D], self.W[:, D:]
        zx = X @ Wx.T + self.b
        hs = np.zeros((T + 1, B, H))
        cs = np.zeros((T + 1, B, H))
        gates = np.zeros((T, B, 4 * H))
        tcs = np.zeros((T, B, H))
        for t in range(T):
            z = zx[:, t] + hs[t] @ Wh.T
            a = np.empty_like(z)
            a[:, :3 * H] = sigmoid(z[:, :3 * H])
            a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            cs[t + 1] = f * cs[t] + i * g
            tcs[t] = np.tanh(cs[t + 1])
            hs[t + 1] = o * tcs[t]
            gates[t] = a
        out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))
        return out, (X, hs, cs, gates, tcs)

    def backward(self, dH: np.ndarray, cache):
        """Backpropagate ``dL/dH_seq``; returns (dX, dW, db)."""
        X, hs, cs, gates, tcs = cache
        B, T, D = X.shape
        H = self.hidden
        Wh = self.W[:, D:]
        dz_all = np.zeros((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = dH[:, t] + dh_next
            tc = tcs[t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = dz @ Wh
        dz_bt = dz_all.transpose(1, 0, 2)  # (B, T, 4H)
        dX = dz_bt @ self.W[:, :D]
        dWx = np.einsum("btk,btd->kd", dz_bt, X)
        dWh = np.einsum("tbk,tbh->kh", dz_all, hs[:-1])
        return dX, np.concatenate([dWx, dWh], axis=1), dz_all.sum(axis=(0, 1))


@dataclass
class LstmNetwork:
    """Stacked LSTM layers plus the affine head ``s_t = W h_t + b``.

    ``lag`` makes output ``t`` stand for the target at time ``t - lag``.
    """

    layers: list
    head_W: np.ndarray  # (K, H)
    head_b: np.ndarray  # (K,)
    k_replicate: int = 3
    replicate_before: int = 0
    lag: int = 0

    @classmethod
    def initialize(cls, input_dim: int, hidden: int, n_layers: int, n_out: int,
                   k_replicate: int = 3, replicate_at: str = "last", lag: int = 0,
                   init_scale: float = 0.08, rng=None) -> "LstmNetwork":
        """Uniform(-init_scale, init_scale) weights, forget-gate biases at +1."""
        if n_layers < 1 or hidden < 1 or k_replicate < 1 or lag < 0:
            raise ValueError("invalid network dimensions")
        rng = np.random.default_rng(rng)
        layers = []
        for li in range(n_layers):
            d_in = input_dim if li == 0 else hidden
            W = rng.uniform(-init_scale, init_scale, size=(4 * hidden, d_in + hidden))
            b = np.zeros(4 * hidden)
            b[hidden:2 * hidden] = 1.0
            layers.append(LstmLayer(W, b))
        head_W = rng.uniform(-init_scale, init_scale, size=(n_out, hidden))
        return cls(layers, head_W, np.zeros(n_out), k_replicate,
                   replicate_index(replicate_at, n_layers), lag)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    @property
    def n_out(self) -> int:
        return self.head_b.shape[0]

    # parameters are exposed as one flat vector for the optimiser and grad checks
    def param_arrays(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out + [self.head_W, self.head_b]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for p in self.param_arrays():
            p[...] = theta[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != theta.size:
            raise ValueError("parameter vector has the wrong length")

    def forward(self, X: np.ndarray):
        """Raw outputs for inputs ``X`` of shape (B, N, D); returns ((B, k*N, K), cache)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise ValueError(f"expected input of shape (B, N, {self.input_dim}), got {X.shape}")
        caches = []
        h = X
        for li, layer in enumerate(self.layers):
            if li == self.replicate_before:
                h = np.repeat(h, self.k_replicate, axis=1)
            h, cache = layer.forward(h)
            caches.append(cache)
        Y = h @ self.head_W.T + self.head_b
        return Y, (caches, h)

    def backward(self, dY: np.ndarray, cache) -> list:
        """Gradients for :meth:`param_arrays`, in the same order."""
        caches, h_top = cache
        grads_head_W = np.einsum("btk,bth->kh", dY, h_top)
        grads_head_b = dY.sum(axis=(0, 1))
        dh = dY @ self.head_W
        grads = []
        for li in range(len(self.layers) - 1, -1, -1):
            dh, dW, db = self.layers[li].backward(dh, caches[li])
            grads = [dW, db] + grads
            if li == self.replicate_before:
                B, T, D = dh.shape
                dh = dh.reshape(B, T // self.k_replicate, self.k_replicate, D).sum(axis=2)
        return grads + [grads_head_W, grads_head_b]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Outputs re-indexed by target time: row ``t`` predicts target ``t``.

        With a lag the input is extended by repeating its last frame so
        every one of the ``k*N`` targets gets a prediction.
        """
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 2
        if squeeze:
            X = X[None]
        B, N, _ = X.shape
        T = N * self.k_replicate
        extra = -(-self.lag // self.k_replicate)
        if extra:
            X = np.concatenate([X, np.repeat(X[:, -1:], extra, axis=1)], axis=1)
        Y, _ = self.forward(X)
        Y = Y[:, self.lag:self.lag + T]
        return Y[0] if squeeze else Y

    # ------------------------------------------------------------ checkpoint
    def header_fields(self, n_channels: int) -> tuple:
        return (len(self.layers), self.input_dim, self.hidden, self.n_out, n_channels,
                self.k_replicate, self.lag, self.replicate_before)


def replicate_index(replicate_at: str, n_layers: int) -> int:
    if replicate_at == "last":
        return n_layers - 1
    if replicate_at == "input":
        return 0
    raise ValueError("replicate_at must be 'last' or 'input'")


def save_checkpoint(path, net: LstmNetwork, pca) -> None:
    """Binary checkpoint: magic ``VIS1``, eight u32 dimensions, then f64 blocks.

    Header: n_layers, input_dim, hidden, n_components, n_channels, k_replicate,
    lag, replicate_before. Blocks, little-endian, row-major: each layer's W
    and b, head W and b, PCA mean, basis (C x K) and explained variance.
    """
    header = _HEADER.pack(CHECKPOINT_MAGIC, *net.header_fields(pca.dim))
    blocks = [p.astype("<f8").tobytes() for p in net.param_arrays()]
    blocks += [np.asarray(a, dtype="<f8").tobytes()
               for a in (pca.mean, pca.basis, pca.explained_variance)]
    Path(path).write_bytes(header + b"".join(blocks))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, pca)``."""
    from ..cochlea import PcaTransform
    from ..signal_io import FormatError

    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint shorter than its header")
    magic, n_layers, d_in, hidden, K, C, k, lag, rep = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    shapes = []
    for li in range(n_layers):
        shapes += [(4 * hidden, (d_in if li == 0 else hidden) + hidden), (4 * hidden,)]
    shapes += [(K, hidden), (K,), (C,), (C, K), (K,)]
    expected = 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) - _HEADER.size != expected:
        raise FormatError("checkpoint payload does not match its header")
    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(values[pos:pos + size].reshape(s).copy())
        pos += size
    layers = [LstmLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_layers)]
    base = 2 * n_layers
    net = LstmNetwork(layers, arrays[base], arrays[base + 1], k, rep, lag)
    pca = PcaTransform(arrays[base + 2], arrays[base + 3], arrays[base + 4])
    return net, pca
