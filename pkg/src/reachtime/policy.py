"""Neural feedback policies built from hand-rolled MLPs.

Two network roles share one implementation: a control net mapping state to a
torque correction, and a scalar time net predicting the remaining time to the
target.  Training is plain reverse-mode differentiation of the dense layers
plus Adam; no external autodiff is involved, so every gradient path here is
checked against finite differences in the test suite.

The structured policy adds the control net on top of the time-indexed LQR
feedback, subtracts the net's own value at the target state, and squashes the
sum through the smooth saturation.  Because the reference value is recomputed
after every parameter update, the policy returns exactly u_f at x_f for any
parameter values, which is the point of the construction.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .lqr import BlendSchedule, RiccatiTable, Saturation, lqr_control

__all__ = [
    "AdamState",
    "CONTROL_ACTIVATIONS",
    "EnsemblePolicy",
    "HIDDEN_SIZES",
    "MlpParams",
    "MlpPolicy",
    "QrnetPolicy",
    "ReplayPolicy",
    "TIME_ACTIVATIONS",
    "TrainConfig",
    "TrainResult",
    "adam_init",
    "adam_step",
    "init_mlp",
    "load_checkpoint",
    "mlp_forward",
    "mlp_gradient",
    "save_checkpoint",
    "set_standardization",
    "train_control_net",
    "train_time_net",
]

HIDDEN_SIZES = (32, 64, 64, 32)
CONTROL_ACTIVATIONS = ("tanh", "tanh", "elu", "elu", "linear")
TIME_ACTIVATIONS = ("elu", "elu", "elu", "elu", "softplus")

_ACTIVATIONS = ("tanh", "elu", "linear", "softplus")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(z))
    if name == "softplus":
        return np.logaddexp(0.0, z)
    return z


def _act_deriv(name, z):
    if name == "tanh":
        y = np.tanh(z)
        return 1.0 - y * y
    if name == "elu":
        return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
    if name == "softplus":
        return expit(z)
    return np.ones_like(z)


@dataclass
class MlpParams:
    """Dense network parameters with per-layer activation tags.

    weights[l] has shape (fan_out, fan_in); inputs are standardized with the
    stored mean/std before the first layer.
    """

    weights: list
    biases: list
    activations: tuple
    input_mean: np.ndarray
    input_std: np.ndarray

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=self.activations,
            input_mean=self.input_mean.copy(),
            input_std=self.input_std.copy(),
        )

    def to_dict(self):
        return {
            "sizes": [self.n_inputs] + [w.shape[0] for w in self.weights],
            "activations": list(self.activations),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        sizes = d["sizes"]
        weights = [
            np.asarray(flat, dtype=float).reshape(sizes[i + 1], sizes[i])
            for i, flat in enumerate(d["weights"])
        ]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return cls(
            weights=weights,
            biases=biases,
            activations=tuple(d["activations"]),
            input_mean=np.asarray(d["input_mean"], dtype=float),
            input_std=np.asarray(d["input_std"], dtype=float),
        )


def init_mlp(n_in, n_out, activations, rng, hidden=HIDDEN_SIZES) -> MlpParams:
    """Glorot-uniform weights, zero biases, identity standardization."""
    for a in activations:
        if a not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")
    sizes = [n_in] + list(hidden) + [n_out]
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(
        weights=weights,
        biases=biases,
        activations=tuple(activations),
        input_mean=np.zeros(n_in),
        input_std=np.ones(n_in),
    )


def set_standardization(params: MlpParams, X):
    """Pin input standardization to the mean/std of a training matrix."""
    X = np.asarray(X, dtype=float)
    params.input_mean = X.mean(axis=0)
    std = X.std(axis=0)
    params.input_std = np.where(std > 1e-8, std, 1.0)


def standardize(params: MlpParams, X):
    return (X - params.input_mean) / params.input_std


def destandardize(params: MlpParams, Z):
    return Z * params.input_std + params.input_mean


def _forward_cached(params: MlpParams, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = standardize(params, X)
    caches = [y]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = y @ w.T + b
        caches.append(z)
        y = _act(act, z)
        caches.append(y)
    return y, caches


def mlp_forward(params: MlpParams, X):
    """Network output for a batch (B, n_in) -> (B, n_out)."""
    return _forward_cached(params, X)[0]


def mlp_gradient(params: MlpParams, X, upstream):
    """Parameter gradients of sum_b <upstream_b, f(x_b)>.

    Returns (weight_grads, bias_grads) matching the parameter shapes.
    """
    _, caches = _forward_cached(params, X)
    upstream = np.atleast_2d(np.asarray(upstream, dtype=float))
    n_layers = len(params.weights)
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    delta = upstream
    for layer in range(n_layers - 1, -1, -1):
        z = caches[1 + 2 * layer]
        y_in = caches[2 * layer]
        delta = delta * _act_deriv(params.activations[layer], z)
        d_w[layer] = delta.T @ y_in
        d_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ params.weights[layer]
    return d_w, d_b


# -- Adam ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1024
    epochs: int = 200
    val_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("bad training configuration")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        if self.val_every < 1:
            raise ValueError("val_every must be positive")


@dataclass
class AdamState:
    step: int
    m: list
    v: list


def adam_init(arrays) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
    )


def adam_step(arrays, grads, state: AdamState, config: TrainConfig):
    """One Adam update, in place on the parameter arrays."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


# -- policies ------------------------------------------------------------------


@dataclass
class MlpPolicy:
    """Bare network feedback: u = f(x), no structure around it."""

    net: MlpParams

    def control(self, X, t=None):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return mlp_forward(self.net, X[None, :])[0]
        return mlp_forward(self.net, X)

    def to_dict(self):
        return {"kind": "mlp", "control_net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(net=MlpParams.from_dict(d["control_net"]))


@dataclass
class QrnetPolicy:
    """LQR-anchored network policy with exact behaviour at the target."""

    control_net: MlpParams
    time_net: MlpParams | None
    table: RiccatiTable
    blend: BlendSchedule
    sat: Saturation
    nn_at_xf: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.nn_at_xf is None:
            self.refresh_reference()

    def refresh_reference(self):
        """Re-evaluate the control net at the target state.

        Must be called after every update of control_net parameters; the
        cached value is what cancels the net's contribution at x_f.
        """
        self.nn_at_xf = mlp_forward(self.control_net, self.table.x_f[None, :])[0]

    def predict_time(self, X):
        if self.time_net is None:
            raise ValueError("policy has no time net")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return mlp_forward(self.time_net, X)[:, 0]

    def control(self, X, t=None, tf_override=None):
        """Saturated structured feedback.

        tf_override substitutes known remaining-time values (used when
        training on labelled data); deployment predicts them with the
        time net.  The simulation time t is accepted and ignored.
        """
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        Xb = X[None, :] if single else X
        if tf_override is not None:
            tf_hat = np.broadcast_to(
                np.asarray(tf_override, dtype=float), (Xb.shape[0],)
            )
        else:
            tf_hat = self.predict_time(Xb)
        u_lin = lqr_control(self.table, self.blend, Xb, tf_hat)
        correction = mlp_forward(self.control_net, Xb) - self.nn_at_xf
        u = self.sat(u_lin + correction)
        return u[0] if single else u

    def to_dict(self):
        d = {
            "kind": "qrnet",
            "control_net": self.control_net.to_dict(),
            "table": self.table.to_dict(),
            "blend": self.blend.to_dict(),
            "sat": self.sat.to_dict(),
        }
        if self.time_net is not None:
            d["time_net"] = self.time_net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            control_net=MlpParams.from_dict(d["control_net"]),
            time_net=(MlpParams.from_dict(d["time_net"])
                      if "time_net" in d else None),
            table=RiccatiTable.from_dict(d["table"]),
            blend=BlendSchedule.from_dict(d["blend"]),
            sat=Saturation.from_dict(d["sat"]),
        )


@dataclass
class EnsemblePolicy:
    """Arithmetic mean of member controls; members keep their own time nets."""

    members: list

    def control(self, X, t=None):
        total = self.members[0].control(X, t)
        for member in self.members[1:]:
            total = total + member.control(X, t)
        return total / len(self.members)


@dataclass
class ReplayPolicy:
    """Time-indexed playback of an open-loop control sequence.

    Controls are held constant over their knot cell [t_k, t_{k+1}), the same
    zero-order hold the trajectory solver integrates with, so replaying a
    solution reproduces its trajectory up to integrator accuracy.  Past the
    end of the last cell the policy holds the equilibrium torque, so a replay
    that reaches the target stays there.
    """

    times: np.ndarray      # (N,) control knot times, uniformly spaced
    controls: np.ndarray   # (N, m)
    u_hold: np.ndarray     # (m,)
    t_end: float = None    # end of the last cell; default knot spacing past times[-1]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        self.u_hold = np.asarray(self.u_hold, dtype=float)
        if self.t_end is None:
            spacing = self.times[1] - self.times[0] if self.times.size > 1 else 0.0
            self.t_end = float(self.times[-1] + spacing)

    def control(self, X, t=0.0):
        if t >= self.t_end:
            u = self.u_hold
        else:
            idx = np.searchsorted(self.times, t, side="right") - 1
            u = self.controls[max(int(idx), 0)]
        X = np.asarray(X)
        if X.ndim == 1:
            return u.copy()
        return np.broadcast_to(u, (X.shape[0], u.shape[0])).copy()


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    params: MlpParams
    best_val: float
    history: list          # rows (epoch, train_loss, val_loss or None)


def _flat_params(params: MlpParams):
    return params.weights + params.biases


def _control_loss_and_delta(params, X, U, policy_parts, tf_labels, nn_ref):
    """Mean-squared control error and the upstream for the network output."""
    n = X.shape[0]
    pred_net = mlp_forward(params, X)
    if policy_parts is None:
        residual = pred_net - U
        loss = float(np.mean(np.sum(residual * residual, axis=1)))
        return loss, (2.0 / n) * residual
    table, blend, sat = policy_parts
    u_lin = lqr_control(table, blend, X, tf_labels)
    v = u_lin + pred_net - nn_ref
    residual = sat(v) - U
    loss = float(np.mean(np.sum(residual * residual, axis=1)))
    delta = (2.0 / n) * residual * sat.jacobian_diag(v)
    return loss, delta


def train_control_net(train_data, val_data, config: TrainConfig,
                      policy_parts=None, n_in=None, n_out=None) -> TrainResult:
    """Fit a control net to (X, U, remaining-time) arrays.

    train_data / val_data are (X, U, tf) triples.  With policy_parts=None the
    net is trained bare (plain-MLP variant); otherwise policy_parts is a
    (table, blend, sat) triple and the loss is taken through the structured
    policy with the remaining-time labels standing in for the time net.  The
    LQR branch carries no parameters; the only gradient paths are the net at
    the sample states and, negated, the net at the target state.
    """
    X, U, tf_labels = (np.asarray(a, dtype=float) for a in train_data)
    Xv, Uv, tfv = (np.asarray(a, dtype=float) for a in val_data)
    rng = np.random.default_rng(config.seed)
    params = init_mlp(X.shape[1], U.shape[1], CONTROL_ACTIVATIONS, rng)
    set_standardization(params, X)
    arrays = _flat_params(params)
    state = adam_init(arrays)
    x_f_row = None if policy_parts is None else policy_parts[0].x_f[None, :]

    def net_ref():
        if x_f_row is None:
            return None
        return mlp_forward(params, x_f_row)[0]

    def evaluate(Xe, Ue, te):
        loss, _ = _control_loss_and_delta(
            params, Xe, Ue, policy_parts, te, net_ref())
        return loss

    best_val = evaluate(Xv, Uv, tfv)
    best_params = params.copy()
    history = [(0, evaluate(X, U, tf_labels), best_val)]
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, delta = _control_loss_and_delta(
                params, X[idx], U[idx], policy_parts, tf_labels[idx], net_ref())
            d_w, d_b = mlp_gradient(params, X[idx], delta)
            if x_f_row is not None:
                ref_w, ref_b = mlp_gradient(params, x_f_row,
                                            -delta.sum(axis=0)[None, :])
                d_w = [a + b for a, b in zip(d_w, ref_w)]
                d_b = [a + b for a, b in zip(d_b, ref_b)]
            adam_step(arrays, d_w + d_b, state, config)
            epoch_loss += loss * len(idx)
        if epoch % config.val_every == 0 or epoch == config.epochs:
            val_loss = evaluate(Xv, Uv, tfv)
            history.append((epoch, epoch_loss / n, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
        else:
            history.append((epoch, epoch_loss / n, None))
    return TrainResult(params=best_params, best_val=best_val, history=history)


def train_time_net(train_data, val_data, config: TrainConfig) -> TrainResult:
    """Fit the scalar remaining-time net to (X, tf) arrays."""
    X, tf_labels = (np.asarray(a, dtype=float) for a in train_data)
    Xv, tfv = (np.asarray(a, dtype=float) for a in val_data)
    rng = np.random.default_rng(config.seed)
    params = init_mlp(X.shape[1], 1, TIME_ACTIVATIONS, rng)
    set_standardization(params, X)
    arrays = _flat_params(params)
    state = adam_init(arrays)

    def evaluate(Xe, te):
        pred = mlp_forward(params, Xe)[:, 0]
        return float(np.mean((pred - te) ** 2))

    best_val = evaluate(Xv, tfv)
    best_params = params.copy()
    history = [(0, evaluate(X, tf_labels), best_val)]
    n = X.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = mlp_forward(params, X[idx])[:, 0]
            err = pred - tf_labels[idx]
            epoch_loss += float(np.mean(err * err)) * len(idx)
            delta = (2.0 / len(idx)) * err[:, None]
            d_w, d_b = mlp_gradient(params, X[idx], delta)
            adam_step(arrays, d_w + d_b, state, config)
        if epoch % config.val_every == 0 or epoch == config.epochs:
            val_loss = evaluate(Xv, tfv)
            history.append((epoch, epoch_loss / n, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
        else:
            history.append((epoch, epoch_loss / n, None))
    return TrainResult(params=best_params, best_val=best_val, history=history)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(policy, path, meta=None):
    """Write a policy to JSON; floats use repr so they round-trip bitwise."""
    d = policy.to_dict()
    if meta:
        d["meta"] = meta
    with open(path, "w") as fh:
        json.dump(d, fh)


def load_checkpoint(path):
    with open(path) as fh:
        d = json.load(fh)
    if d["kind"] == "qrnet":
        return QrnetPolicy.from_dict(d)
    if d["kind"] == "mlp":
        return MlpPolicy.from_dict(d)
    raise ValueError(f"unknown checkpoint kind {d['kind']!r}")
