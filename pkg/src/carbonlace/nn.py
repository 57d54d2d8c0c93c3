"""Masked feed-forward emission model with exact input Jacobians.

The network maps a load vector to per-location emission factors. Training
needs gradients of losses that depend on the input Jacobian, so the forward
pass carries the tangent ``T_l = dz_l/dx`` alongside the activations and the
reverse pass differentiates both chains. Everything is batched over the
leading axis.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ClusterPartition:
    count: int
    assignment: tuple[int, ...]

    def __post_init__(self):
        a = tuple(int(x) for x in self.assignment)
        object.__setattr__(self, "assignment", a)
        if sorted(set(a)) != list(range(self.count)):
            raise ValueError("partition must use every cluster index 0..count-1")

    @classmethod
    def single(cls, n: int) -> "ClusterPartition":
        return cls(1, (0,) * n)

    @property
    def off_block(self) -> np.ndarray:
        a = np.asarray(self.assignment)
        return (a[:, None] != a[None, :]).astype(float)

    def members(self, c: int) -> list[int]:
        return [i for i, k in enumerate(self.assignment) if k == c]


@dataclass
class LossBreakdown:
    balance: float
    sensitivity: float
    primary: float
    block_diag: float
    diag_dom: float
    total: float
    gamma1: float
    gamma2: float
    eps: float

    def as_row(self) -> list[float]:
        return [self.balance, self.sensitivity, self.primary, self.block_diag, self.diag_dom, self.total]


@dataclass
class Prediction:
    lambda_hat: np.ndarray
    lambda_tilde: np.ndarray
    mu_hat: np.ndarray
    jacobian: np.ndarray


def _vecmat(v, A):
    """Batched ``v_b' A_b``."""
    return np.matmul(v[:, None, :], A)[:, 0, :]


def _matvec(A, v):
    """Batched ``A_b v_b``."""
    return np.matmul(A, v[:, :, None])[:, :, 0]


def _contract(X, Y):
    """``sum_b X_b Y_b'`` for stacks of matrices."""
    B, i, k = X.shape
    return X.transpose(1, 0, 2).reshape(i, B * k) @ Y.transpose(1, 0, 2).reshape(Y.shape[1], B * k).T


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class NetworkModel:
    """ReLU hidden layers and a scaled sigmoid output.

    ``weights[l]`` has shape ``(n_{l+1}, n_l)``. ``masks`` maps a layer index
    to a 0/1 array of the same shape; masked weights stay exactly zero.
    """

    def __init__(
        self,
        layer_sizes,
        output_scale: float = 1.0,
        input_scale=None,
        masks: dict | None = None,
        dropout_rate: float = 0.1,
        output_activation: str = "sigmoid",
        seed: int = 0,
    ):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if output_scale <= 0:
            raise ValueError("output_scale must be positive")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        D = self.layer_sizes[0]
        self.output_scale = float(output_scale)
        self.input_scale = np.ones(D) if input_scale is None else np.asarray(input_scale, dtype=float).copy()
        if self.input_scale.shape != (D,) or np.any(self.input_scale <= 0):
            raise ValueError("input_scale must be a positive vector of input size")
        self.dropout_rate = float(dropout_rate)
        self.output_activation = output_activation
        self.masks: dict[int, np.ndarray] = {}
        for k, m in (masks or {}).items():
            m = np.asarray(m, dtype=float)
            if m.shape != (self.layer_sizes[k + 1], self.layer_sizes[k]):
                raise ValueError(f"mask for layer {k} has shape {m.shape}")
            self.masks[int(k)] = m
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for k in range(self.n_layers):
            fan_in, fan_out = self.layer_sizes[k], self.layer_sizes[k + 1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.apply_masks()
        self.metadata: dict = {}

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def apply_masks(self) -> None:
        for k, m in self.masks.items():
            self.weights[k] *= m

    def n_parameters(self) -> int:
        """Trainable entries: unmasked weights plus biases."""
        n = 0
        for k, W in enumerate(self.weights):
            n += int(self.masks[k].sum()) if k in self.masks else W.size
            n += self.biases[k].size
        return n

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "NetworkModel":
        m = NetworkModel.__new__(NetworkModel)
        m.__dict__.update(self.__dict__)
        m.weights = [W.copy() for W in self.weights]
        m.biases = [b.copy() for b in self.biases]
        m.masks = {k: v.copy() for k, v in self.masks.items()}
        m.input_scale = self.input_scale.copy()
        m.metadata = json.loads(json.dumps(self.metadata))
        return m

    # -- evaluation -----------------------------------------------------
    def dropout_masks(self, batch: int, rng: np.random.Generator) -> list[np.ndarray | None]:
        """Inverted-dropout masks for hidden layers 2..L-1 (none on the first)."""
        out: list[np.ndarray | None] = [None] * (self.n_layers - 1)
        if self.dropout_rate == 0.0:
            return out
        keep = 1.0 - self.dropout_rate
        for k in range(1, self.n_layers - 1):
            out[k] = (rng.random((batch, self.layer_sizes[k + 1])) < keep) / keep
        return out

    def _run(self, d: np.ndarray, drop=None, tangent: bool = True) -> dict:
        X = d / self.input_scale
        zs, Ts, Ds = [X], [None], []
        inv_s = 1.0 / self.input_scale
        z = X
        T = None
        for k in range(self.n_layers - 1):
            W = self.weights[k]
            a = z @ W.T + self.biases[k]
            Dk = (a > 0).astype(float)
            if drop is not None and drop[k] is not None:
                Dk = Dk * drop[k]
            z = a * Dk
            if tangent:
                U = W * inv_s if k == 0 else np.matmul(W, T)
                T = Dk[:, :, None] * U
            zs.append(z)
            Ts.append(T)
            Ds.append(Dk)
        W = self.weights[-1]
        aL = z @ W.T + self.biases[-1]
        out = {"zs": zs, "Ts": Ts, "Ds": Ds, "aL": aL}
        if self.output_activation == "sigmoid":
            sig = _sigmoid(aL)
            out["lam"] = self.output_scale * sig
            out["s1"] = self.output_scale * sig * (1.0 - sig)
            out["s2"] = out["s1"] * (1.0 - 2.0 * sig)
        else:
            out["lam"] = aL
            out["s1"] = np.ones_like(aL)
            out["s2"] = np.zeros_like(aL)
        if tangent:
            UL = W * inv_s if self.n_layers == 1 else np.matmul(W, T)
            out["UL"] = np.broadcast_to(UL, (d.shape[0],) + UL.shape[-2:]) if UL.ndim == 2 else UL
            out["J"] = out["s1"][:, :, None] * out["UL"]
        return out

    def _batch(self, d) -> tuple[np.ndarray, bool]:
        d = np.asarray(d, dtype=float)
        single = d.ndim == 1
        d2 = d[None, :] if single else d
        if d2.shape[1] != self.n_inputs:
            raise ValueError(f"expected {self.n_inputs} inputs, got {d2.shape[1]}")
        return d2, single

    def forward(self, d, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        d2, single = self._batch(d)
        drop = None
        if train:
            drop = self.dropout_masks(d2.shape[0], rng or np.random.default_rng())
        lam = self._run(d2, drop, tangent=False)["lam"]
        return lam[0] if single else lam

    def input_jacobian(self, d) -> np.ndarray:
        d2, single = self._batch(d)
        J = self._run(d2)["J"]
        return J[0] if single else J

    # -- checkpoints ----------------------------------------------------
    def state(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_sizes": self.layer_sizes,
            "output_scale": self.output_scale,
            "dropout_rate": self.dropout_rate,
            "output_activation": self.output_activation,
            "metadata": self.metadata,
        }

    def save(self, path) -> None:
        arrays = {"input_scale": self.input_scale}
        for k in range(self.n_layers):
            arrays[f"W{k}"] = self.weights[k]
            arrays[f"b{k}"] = self.biases[k]
        for k, m in self.masks.items():
            arrays[f"mask{k}"] = m
        arrays["state"] = np.frombuffer(json.dumps(self.state(), sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "NetworkModel":
        with np.load(path) as z:
            state = json.loads(bytes(z["state"]).decode())
            if state.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {state.get('version')}")
            sizes = state["layer_sizes"]
            masks = {int(k[4:]): z[k] for k in z.files if k.startswith("mask")}
            m = cls(
                sizes,
                output_scale=state["output_scale"],
                input_scale=z["input_scale"],
                masks=masks,
                dropout_rate=state["dropout_rate"],
                output_activation=state["output_activation"],
            )
            m.weights = [z[f"W{k}"].copy() for k in range(len(sizes) - 1)]
            m.biases = [z[f"b{k}"].copy() for k in range(len(sizes) - 1)]
            m.metadata = state["metadata"]
        return m


# -- elementary pieces ------------------------------------------------------
def project_balance(lam_hat, d, E) -> np.ndarray:
    """Closest point to ``lam_hat`` on the hyperplane ``d' lam = E``."""
    d = np.asarray(d, dtype=float)
    nn = float(d @ d)
    if nn == 0.0:
        raise ValueError("projection needs a nonzero load vector")
    return lam_hat - ((d @ lam_hat - E) / nn) * d


def balance_loss(lam_hat, d, E) -> float:
    d = np.asarray(d, dtype=float)
    nn = float(d @ d)
    if nn == 0.0:
        raise ValueError("balance loss needs a nonzero load vector")
    return float((d @ lam_hat - E) ** 2 / nn)


def sensitivity_estimate(lam_hat, J, d) -> np.ndarray:
    """Gradient of ``d' lam_hat(d)``: ``lam_hat + J' d``."""
    J = np.asarray(J)
    if J.shape[0] != J.shape[1]:
        raise ValueError("nodal sensitivity needs a square Jacobian; use the zonal path")
    return lam_hat + J.T @ d


def sensitivity_loss(mu_hat, mu) -> float:
    r = np.asarray(mu_hat) - np.asarray(mu)
    return float(r @ r)


def regularizer_bd(J, partition: ClusterPartition) -> float:
    return float(np.abs(J * partition.off_block).sum())


def regularizer_dd(J, eps: float) -> float:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    A = np.abs(J)
    np.fill_diagonal(A, 0.0)
    return float(np.maximum(A - eps, 0.0).sum())


# -- losses and gradients -----------------------------------------------------
@dataclass
class LossSpec:
    """Which terms enter the objective.

    ``zone`` is the K x D indicator for zonal models (None means nodal).
    ``bd_mask`` marks the Jacobian entries penalised by the block term;
    ``gamma_bd`` weighs it (gamma1 nodal, gamma3 zonal). ``gamma_dd`` and
    ``eps`` drive the off-diagonal penalty on square Jacobians. ``mode`` is
    ``"full"`` or ``"ace"`` (fit every output to the system average).
    """

    zone: np.ndarray | None = None
    bd_mask: np.ndarray | None = None
    gamma_bd: float = 0.0
    gamma_dd: float = 0.0
    eps: float = 0.0
    mode: str = "full"

    @classmethod
    def nodal(cls, partition: ClusterPartition | None = None, gamma1=0.0, gamma2=0.0, eps=0.0, mode="full"):
        bd = None if partition is None else partition.off_block
        return cls(None, bd, gamma1, gamma2, eps, mode)

    @classmethod
    def zonal(cls, zone: np.ndarray, gamma3=0.0, mode="full"):
        zone = np.asarray(zone, dtype=float)
        return cls(zone, 1.0 - zone, gamma3, 0.0, 0.0, mode)


@dataclass
class _Batch:
    d: np.ndarray
    E: np.ndarray
    mu: np.ndarray


def _aggregation(zone: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Per-sample B x K x D load weights inside each zone."""
    w = zone[None, :, :] * d[:, None, :]
    tot = w.sum(axis=2, keepdims=True)
    if np.any(tot <= 0):
        raise ValueError("empty zone (zero zonal load)")
    return w / tot


def _evaluate_terms(model: NetworkModel, b: _Batch, spec: LossSpec, drop=None, need_grad=True):
    """Per-sample loss terms and, optionally, summed parameter gradients."""
    run = model._run(b.d, drop, tangent=(spec.mode == "full"))
    lam = run["lam"]
    B = b.d.shape[0]
    terms = {k: np.zeros(B) for k in ("bal", "sen", "bd", "dd")}
    G_lam = np.zeros_like(lam)
    G_J = None
    if spec.mode == "ace":
        eta = b.E / b.d.sum(axis=1)
        r = lam - eta[:, None]
        terms["bal"] = (r * r).sum(axis=1)  # anchoring loss stored in the balance slot
        G_lam = 2.0 * r
    else:
        J = run["J"]
        if spec.zone is None:
            dz = b.d
            nu = lam + _vecmat(dz, J)
            res = nu - b.mu
            terms["sen"] = (res * res).sum(axis=1)
            g_nu = 2.0 * res
            G_lam = g_nu.copy()
        else:
            Mz = spec.zone
            dz = b.d @ Mz.T
            Wagg = _aggregation(Mz, b.d)
            nu = lam @ Mz + _vecmat(dz, J)
            res = _matvec(Wagg, nu - b.mu)
            terms["sen"] = (res * res).sum(axis=1)
            g_nu = 2.0 * _vecmat(res, Wagg)
            G_lam = g_nu @ Mz.T
        G_J = dz[:, :, None] * g_nu[:, None, :]
        nn = (dz * dz).sum(axis=1)
        r = (dz * lam).sum(axis=1) - b.E
        terms["bal"] = r * r / nn
        G_lam += (2.0 * r / nn)[:, None] * dz
        sJ = np.sign(J)
        if spec.bd_mask is not None:
            terms["bd"] = np.abs(J * spec.bd_mask).sum(axis=(1, 2))
            if spec.gamma_bd:
                G_J = G_J + spec.gamma_bd * sJ * spec.bd_mask
        if J.shape[1] == J.shape[2]:
            off = 1.0 - np.eye(J.shape[1])
            excess = (np.abs(J) - spec.eps) * off
            terms["dd"] = np.maximum(excess, 0.0).sum(axis=(1, 2))
            if spec.gamma_dd:
                G_J = G_J + spec.gamma_dd * sJ * (excess > 0)
    if not need_grad:
        return terms, run, None
    grads = _backward(model, run, G_lam, G_J)
    return terms, run, grads


def _backward(model: NetworkModel, run: dict, G_lam: np.ndarray, G_J: np.ndarray | None):
    L = model.n_layers
    zs, Ts, Ds = run["zs"], run["Ts"], run["Ds"]
    inv_s = 1.0 / model.input_scale
    gW = [None] * L
    gb = [None] * L
    G_a = G_lam * run["s1"]
    G_U = None
    if G_J is not None:
        UL = run["UL"]
        G_S = (G_J * UL).sum(axis=2)
        G_a = G_a + G_S * run["s2"]
        G_U = run["s1"][:, :, None] * G_J
    for k in range(L - 1, -1, -1):
        W = model.weights[k]
        gW[k] = G_a.T @ zs[k]
        gb[k] = G_a.sum(axis=0)
        if G_U is not None:
            if k == 0:
                gW[k] = gW[k] + G_U.sum(axis=0) * inv_s
            else:
                gW[k] = gW[k] + _contract(G_U, Ts[k])
        if k == 0:
            break
        G_z = G_a @ W
        G_a = G_z * Ds[k - 1]
        if G_U is not None:
            G_T = np.matmul(W.T, G_U)
            G_U = Ds[k - 1][:, :, None] * G_T
    for k, m in model.masks.items():
        gW[k] = gW[k] * m
    return gW, gb


def _combine(terms: dict, spec: LossSpec) -> dict:
    prim = terms["bal"] + terms["sen"]
    tot = prim + spec.gamma_bd * terms["bd"] + spec.gamma_dd * terms["dd"]
    return {**terms, "primary": prim, "total": tot}


def _breakdown(terms: dict, spec: LossSpec) -> LossBreakdown:
    c = _combine(terms, spec)
    mean = {k: float(np.mean(v)) for k, v in c.items()}
    return LossBreakdown(
        balance=mean["bal"],
        sensitivity=mean["sen"],
        primary=mean["primary"],
        block_diag=mean["bd"],
        diag_dom=mean["dd"],
        total=mean["primary"] + spec.gamma_bd * mean["bd"] + spec.gamma_dd * mean["dd"],
        gamma1=spec.gamma_bd,
        gamma2=spec.gamma_dd,
        eps=spec.eps,
    )


def _as_batch(d, E, mu) -> _Batch:
    d = np.atleast_2d(np.asarray(d, dtype=float))
    E = np.atleast_1d(np.asarray(E, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    return _Batch(d, E, mu)


def batch_loss(model: NetworkModel, d, E, mu, spec: LossSpec, drop=None) -> LossBreakdown:
    """Mean loss over a batch of scenarios."""
    terms, _, _ = _evaluate_terms(model, _as_batch(d, E, mu), spec, drop, need_grad=False)
    return _breakdown(terms, spec)


def batch_gradients(model: NetworkModel, d, E, mu, spec: LossSpec, drop=None):
    """Mean loss and its exact gradients w.r.t. all weights and biases."""
    b = _as_batch(d, E, mu)
    terms, _, (gW, gb) = _evaluate_terms(model, b, spec, drop)
    n = b.d.shape[0]
    return _breakdown(terms, spec), [g / n for g in gW], [g / n for g in gb]


def total_loss(model, d, E, mu, gamma1=0.0, gamma2=0.0, eps=0.0, partition=None) -> LossBreakdown:
    return batch_loss(model, d, E, mu, LossSpec.nodal(partition, gamma1, gamma2, eps))


def parameter_gradients(model, d, E, mu, gamma1=0.0, gamma2=0.0, eps=0.0, partition=None):
    """Returns ``(weight_grads, bias_grads)`` of the total loss."""
    _, gW, gb = batch_gradients(model, d, E, mu, LossSpec.nodal(partition, gamma1, gamma2, eps))
    return gW, gb


def predict(model: NetworkModel, d, E) -> Prediction:
    """Nodal prediction with projection and sensitivity estimate."""
    d = np.asarray(d, dtype=float)
    if model.n_outputs != model.n_inputs:
        raise ValueError("nodal prediction needs a square model; use zonal_forward_and_losses")
    lam = model.forward(d)
    J = model.input_jacobian(d)
    return Prediction(lam, project_balance(lam, d, E), sensitivity_estimate(lam, J, d), J)


def zmce(zone: np.ndarray, d, mu) -> np.ndarray:
    """Load-weighted zonal averages of nodal LMCE."""
    d = np.atleast_2d(np.asarray(d, dtype=float))
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    out = _matvec(_aggregation(np.asarray(zone, float), d), mu)
    return out[0] if out.shape[0] == 1 else out


def zonal_forward_and_losses(model: NetworkModel, d, zone: np.ndarray, E, mu, gamma3: float = 0.0):
    """Zonal prediction ``(lam_hat, lam_tilde, mu_hat, J, losses)`` for one scenario."""
    zone = np.asarray(zone, dtype=float)
    if model.n_outputs != zone.shape[0]:
        raise ValueError("model output size must equal the number of zones")
    d = np.asarray(d, dtype=float)
    lam = model.forward(d)
    J = model.input_jacobian(d)
    dz = zone @ d
    lam_t = project_balance(lam, dz, E)
    nu = zone.T @ lam + J.T @ dz
    mu_hat = _aggregation(zone, d[None, :])[0] @ nu
    losses = batch_loss(model, d, E, mu, LossSpec.zonal(zone, gamma3))
    return lam, lam_t, mu_hat, J, losses


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
