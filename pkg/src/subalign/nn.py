"""Dense feed-forward networks with hand-written backpropagation.

Everything downstream computes on 64-bit numpy arrays. Networks are small
stacks of fully connected layers; gradients are derived by hand and verified
against central finite differences by grad_check.
"""

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid")


def make_rng(seed):
    """Seeded generator; the same seed yields the same draw sequence."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a, name="array"):
    """Validate a 2-D float64 matrix with finite entries."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError("%s must be 2-D, got shape %s" % (name, (out.shape,)))
    if out.size and not np.all(np.isfinite(out)):
        raise ValueError("%s contains non-finite entries" % name)
    return out


def _apply_activation(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "sigmoid":
        return _sigmoid(a)
    if kind == "identity":
        return a
    raise ValueError("unknown activation %r" % kind)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _activation_grad(a, kind):
    """Derivative of the activation w.r.t. its pre-activation a."""
    if kind == "relu":
        return (a > 0).astype(np.float64)
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if kind == "sigmoid":
        s = _sigmoid(a)
        return s * (1.0 - s)
    if kind == "identity":
        return np.ones_like(a)
    raise ValueError("unknown activation %r" % kind)


class MlpParams:
    """A stack of dense layers; each maps h to activation(h @ W + b).

    layers is a list of (weight, bias, activation) with weight shaped
    (fan_in, fan_out) and bias shaped (fan_out,). Consecutive layer
    dimensions must chain.
    """

    def __init__(self, layers):
        if not layers:
            raise ValueError("network needs at least one layer")
        checked = []
        prev = None
        for li, (w, b, act) in enumerate(layers):
            w = as_matrix(w, "layer %d weight" % li)
            b = np.asarray(b, dtype=np.float64)
            if b.ndim != 1 or b.size != w.shape[1]:
                raise ValueError(
                    "layer %d bias shape %s does not match weight cols %d"
                    % (li, b.shape, w.shape[1])
                )
            if not np.all(np.isfinite(b)):
                raise ValueError("layer %d bias contains non-finite entries" % li)
            if act not in ACTIVATIONS:
                raise ValueError("layer %d has unknown activation %r" % (li, act))
            if prev is not None and w.shape[0] != prev:
                raise ValueError(
                    "layer %d expects %d inputs but previous layer emits %d"
                    % (li, w.shape[0], prev)
                )
            prev = w.shape[1]
            checked.append([w, b, act])
        self.layers = checked

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b, _ in self.layers)

    def copy(self):
        return MlpParams([(w.copy(), b.copy(), act) for w, b, act in self.layers])

    def arrays(self):
        """Flat list of the parameter arrays, weights then bias per layer."""
        out = []
        for w, b, _ in self.layers:
            out.append(w)
            out.append(b)
        return out


def init_mlp(dims, rng, hidden_activation="relu", output_activation="identity"):
    """Xavier-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = int(dims[i]), int(dims[i + 1])
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        act = hidden_activation if i < len(dims) - 2 else output_activation
        layers.append((w, b, act))
    return MlpParams(layers)


def mlp_forward(params, x):
    """Forward pass. Returns (output, cache); the cache feeds mlp_backward."""
    x = as_matrix(x, "input")
    if x.shape[1] != params.input_dim:
        raise ValueError(
            "input has %d columns, network expects %d" % (x.shape[1], params.input_dim)
        )
    h = x
    records = []
    for w, b, act in params.layers:
        a = h @ w + b
        records.append((h, a))
        h = _apply_activation(a, act)
    if h.size and not np.all(np.isfinite(h)):
        raise ValueError("forward pass produced non-finite output")
    return h, {"params": params, "records": records, "rows": x.shape[0]}


def mlp_backward(params, cache, d_y):
    """Backpropagate d_y = dLoss/d_output. Returns (grads, dLoss/d_input).

    grads is a list of (dW, db) aligned with params.layers.
    """
    if cache.get("params") is not params or len(cache["records"]) != len(params.layers):
        raise ValueError("cache does not belong to these parameters")
    d_y = as_matrix(d_y, "output cotangent")
    if d_y.shape != (cache["rows"], params.output_dim):
        raise ValueError(
            "cotangent shape %s does not match output (%d, %d)"
            % (d_y.shape, cache["rows"], params.output_dim)
        )
    grads = []
    d_h = d_y
    for (w, _b, act), (h_in, a) in zip(reversed(params.layers), reversed(cache["records"])):
        d_a = d_h * _activation_grad(a, act)
        grads.append((h_in.T @ d_a, d_a.sum(axis=0)))
        d_h = d_a @ w.T
    grads.reverse()
    return grads, d_h


def flatten_params(params):
    """Concatenate all parameter arrays into one vector (row-major)."""
    return np.concatenate([a.ravel() for a in params.arrays()]) if params.n_params else np.zeros(0)


def assign_flat(params, vec):
    """Write a flat vector back into the parameter arrays, in place."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != params.n_params:
        raise ValueError("vector has %d entries, network has %d" % (vec.size, params.n_params))
    at = 0
    for a in params.arrays():
        a[...] = vec[at : at + a.size].reshape(a.shape)
        at += a.size
    return params


def flatten_grads(grads):
    out = []
    for dw, db in grads:
        out.append(np.asarray(dw).ravel())
        out.append(np.asarray(db).ravel())
    return np.concatenate(out)


def grad_check(loss_fn, params, h=1e-5):
    """Max relative disagreement between loss_fn's gradient and central differences.

    loss_fn maps the parameter object to (loss, flat gradient). params may be
    an MlpParams (perturbed through its flat view, restored afterwards) or a
    1-D vector. The returned error is
    max_i |analytic_i - fd_i| / max(1, |fd_i|) with fd the central difference
    at step h.
    """
    if isinstance(params, MlpParams):
        theta0 = flatten_params(params)

        def eval_at(vec):
            assign_flat(params, vec)
            return loss_fn(params)

    else:
        theta0 = np.array(params, dtype=np.float64).ravel()

        def eval_at(vec):
            return loss_fn(vec)

    try:
        loss0, grad = eval_at(theta0)
        if not np.isfinite(loss0):
            raise ValueError("non-finite loss at the unperturbed parameters")
        grad = np.asarray(grad, dtype=np.float64).ravel()
        if grad.size != theta0.size:
            raise ValueError(
                "gradient has %d entries, parameters have %d" % (grad.size, theta0.size)
            )
        worst = 0.0
        for i in range(theta0.size):
            up = theta0.copy()
            up[i] += h
            dn = theta0.copy()
            dn[i] -= h
            lu = eval_at(up)[0]
            ld = eval_at(dn)[0]
            if not (np.isfinite(lu) and np.isfinite(ld)):
                raise ValueError("non-finite loss while perturbing parameter %d" % i)
            fd = (lu - ld) / (2.0 * h)
            err = abs(grad[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    finally:
        if isinstance(params, MlpParams):
            assign_flat(params, theta0)
    return worst
