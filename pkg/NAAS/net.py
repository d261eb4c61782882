"""
Control networks ``(t, x) -> R^d`` implemented directly in NumPy.

The network is a multilayer perceptron on the concatenation of a sinusoidal time embedding and
the state. All parameters live in one flat vector ``theta``; the per-layer weight matrices are
views into it, so an optimiser update of ``theta`` is immediately visible to the layers.
Gradients of the regression loss are computed by explicit backpropagation.

Checkpoint format
-----------------
A checkpoint is an ASCII header of ``key = value`` lines, starting with the magic line
``NAAS-CHECKPOINT v1`` and terminated by an empty line, followed by ``n_params`` parameters as
little-endian IEEE-754 64-bit floats (``<f8``), in the order of ``ControlNet.theta``: for each
layer, the weight matrix in row-major ``(fan_in, fan_out)`` order and then the bias.
"""

import hashlib
from pathlib import Path

import numpy as np
from scipy.special import expit

from NAAS.exceptions import InputError, TrainingError

CHECKPOINT_MAGIC = "NAAS-CHECKPOINT v1"


def default_hidden(dim: int) -> tuple:
    """Three hidden layers; wider for high-dimensional targets."""
    width = 256 if dim >= 50 else 128
    return (width, width, width)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


class ControlNet:
    """Multilayer perceptron control field with a sinusoidal time embedding."""

    def __init__(
        self,
        dim: int,
        hidden: tuple = None,
        time_embedding: int = 64,
        rng: np.random.Generator = None,
        zero_last: bool = True,
        max_frequency: float = 100.0,
    ):
        """
        Parameters
        ----------
        dim : int
            State dimension; also the output dimension.
        hidden : tuple of int, optional
            Hidden layer widths. Defaults to ``default_hidden(dim)``. May be empty.
        time_embedding : int
            Size of the sinusoidal time embedding (even).
        rng : np.random.Generator, optional
            Source for the initial weights. Without one, every layer starts at zero.
        zero_last : bool
            Zero the output layer so the initial control is identically zero.
        max_frequency : float
            Largest embedding frequency; frequencies are geometrically spaced from 1.
        """
        if dim < 1:
            raise InputError(f"dimension must be positive, got {dim}")
        if time_embedding < 2 or time_embedding % 2:
            raise InputError(f"time embedding size must be even and positive, got {time_embedding}")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in (default_hidden(dim) if hidden is None else hidden))
        if any(h < 1 for h in self.hidden):
            raise InputError(f"hidden widths must be positive, got {self.hidden}")
        self.time_embedding = int(time_embedding)
        self.frequencies = np.geomspace(1.0, max_frequency, self.time_embedding // 2)

        sizes = [self.time_embedding + self.dim, *self.hidden, self.dim]
        self.shapes = list(zip(sizes[:-1], sizes[1:]))
        n_params = sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.shapes)
        self.theta = np.zeros(n_params)
        self._bind_layers()

        if rng is not None:
            n_layers = len(self.layers)
            for index, (weight, _) in enumerate(self.layers):
                if zero_last and index == n_layers - 1:
                    continue
                fan_in, fan_out = weight.shape
                weight[...] = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=weight.shape)

    def _bind_layers(self):
        self.layers = []
        offset = 0
        for fan_in, fan_out in self.shapes:
            weight = self.theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            bias = self.theta[offset : offset + fan_out]
            offset += fan_out
            self.layers.append((weight, bias))

    @property
    def n_params(self) -> int:
        return self.theta.size

    def embed(self, t: np.ndarray) -> np.ndarray:
        """Sinusoidal features ``[sin(f t), cos(f t)]``, shape ``(n, time_embedding)``."""
        phases = np.asarray(t, dtype=np.float64).reshape(-1, 1) * self.frequencies[None, :]
        return np.hstack([np.sin(phases), np.cos(phases)])

    def _inputs(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise InputError(f"expected states of dimension {self.dim}, got shape {x.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        return np.hstack([self.embed(t), x]), single

    def _forward(self, inputs):
        activations = [inputs]
        pre_activations = []
        h = inputs
        for index, (weight, bias) in enumerate(self.layers):
            z = h @ weight + bias
            if index < len(self.layers) - 1:
                pre_activations.append(z)
                h = _silu(z)
            else:
                h = z
            activations.append(h)
        return h, activations, pre_activations

    def forward(self, t, x) -> np.ndarray:
        """
        Evaluate the control.

        Parameters
        ----------
        t : float or np.ndarray
            A time shared by all rows, or one time per row.
        x : np.ndarray
            States ``(d,)`` or ``(n, d)``.

        Returns
        -------
        np.ndarray
            Control values with the shape of ``x``.
        """
        inputs, single = self._inputs(t, x)
        output, _, _ = self._forward(inputs)
        return output[0] if single else output

    __call__ = forward

    def loss_and_grad(self, t, x, target) -> tuple[float, np.ndarray]:
        """
        Mean squared error ``mean_i |f(t_i, x_i) - target_i|^2`` and its gradient in ``theta``.
        """
        inputs, _ = self._inputs(t, x)
        target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        output, activations, pre_activations = self._forward(inputs)
        residual = output - target
        n = residual.shape[0]
        loss = float(np.sum(residual**2) / n)

        grads = []
        delta = 2.0 * residual / n
        for index in range(len(self.layers) - 1, -1, -1):
            weight, _ = self.layers[index]
            grads.append((activations[index].T @ delta, delta.sum(axis=0)))
            if index > 0:
                delta = (delta @ weight.T) * _silu_grad(pre_activations[index - 1])
        grads.reverse()
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return loss, flat

    def copy(self) -> "ControlNet":
        """An independent snapshot with the same architecture and parameters."""
        clone = ControlNet.__new__(ControlNet)
        clone.__dict__.update(self.__dict__)
        clone.theta = self.theta.copy()
        clone._bind_layers()
        return clone

    def param_hash(self) -> str:
        return hashlib.sha256(self.theta.astype("<f8").tobytes()).hexdigest()

    def architecture(self) -> dict:
        return {
            "dim": self.dim,
            "hidden": ",".join(str(h) for h in self.hidden),
            "time_embedding": self.time_embedding,
            "max_frequency": float(self.frequencies[-1]),
            "activation": "silu",
        }


class AdamState:
    """
    Adam optimiser state for one flat parameter vector, with global gradient-norm clipping.
    """

    def __init__(
        self,
        n_params: int,
        lr: float,
        beta1: float = 0.0,
        beta2: float = 0.9,
        eps: float = 1e-8,
        grad_clip: float = 1.0,
    ):
        """
        Parameters
        ----------
        n_params : int
            Size of the parameter vector.
        lr : float
            Learning rate.
        beta1, beta2 : float
            Moment decay rates.
        eps : float
            Added to the root of the second moment.
        grad_clip : float, optional
            Global gradient-norm bound; ``None`` disables clipping.
        """
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        """Apply one update to ``theta`` in place."""
        if self.grad_clip is not None:
            norm = np.linalg.norm(grad)
            if norm > self.grad_clip:
                grad = grad * (self.grad_clip / norm)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.step_count)
        v_hat = self.v / (1.0 - self.beta2**self.step_count)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _batch_stats(t, x, target) -> dict:
    return {
        "size": int(np.shape(x)[0]),
        "max_abs_t": float(np.max(np.abs(t))),
        "mean_abs_x": float(np.mean(np.abs(x))),
        "max_abs_x": float(np.max(np.abs(x))),
        "mean_abs_target": float(np.mean(np.abs(target))),
        "max_abs_target": float(np.max(np.abs(target))),
    }


def regression_step(net: ControlNet, opt: AdamState, batch) -> float:
    """
    One Adam step on ``mean |net(t, x) - target|^2`` over a batch.

    The batch is a ``(t, x, target)`` triple of arrays or any object with those attributes.
    Targets are plain arrays, so the gradient flows through the network only.

    Returns
    -------
    float
        The loss before the update.

    Raises
    ------
    TrainingError
        If the loss is not finite; ``payload`` holds batch statistics.
    """
    if hasattr(batch, "target"):
        t, x, target = batch.t, batch.x, batch.target
    else:
        t, x, target = batch
    if np.shape(x)[0] == 0:
        raise InputError("regression batch is empty")
    loss, grad = net.loss_and_grad(t, x, target)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite regression loss", payload=_batch_stats(t, x, target))
    opt.step(net.theta, grad)
    return loss


def save_checkpoint(net: ControlNet, path, step: int = 0, role: str = "") -> None:
    """Write ``net`` in the portable header-plus-float64 format."""
    header = {"role": role, **net.architecture(), "step": step, "n_params": net.n_params}
    lines = [CHECKPOINT_MAGIC] + [f"{key} = {value}" for key, value in header.items()]
    lines += ["byte_order = little", "dtype = float64"]
    payload = ("\n".join(lines) + "\n\n").encode("ascii") + net.theta.astype("<f8").tobytes()
    Path(path).write_bytes(payload)


def load_checkpoint(path) -> tuple[ControlNet, dict]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Returns
    -------
    tuple
        The network and the parsed header.
    """
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n\n")
    lines = head.decode("ascii").splitlines()
    if not sep or not lines or lines[0] != CHECKPOINT_MAGIC:
        raise InputError(f"{path} is not a NAAS checkpoint")
    header = dict(line.split(" = ", 1) for line in lines[1:])
    hidden = tuple(int(h) for h in header["hidden"].split(",") if h)
    net = ControlNet(
        int(header["dim"]),
        hidden=hidden,
        time_embedding=int(header["time_embedding"]),
        max_frequency=float(header["max_frequency"]),
    )
    theta = np.frombuffer(body, dtype="<f8")
    if theta.size != net.n_params or int(header["n_params"]) != net.n_params:
        raise InputError(f"{path}: expected {net.n_params} parameters, found {theta.size}")
    net.theta[:] = theta
    header["step"] = int(header["step"])
    return net, header
