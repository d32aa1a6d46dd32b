"""Small numpy networks with hand-written backprop.

Two heads sit on top of a tanh MLP:

* :class:`Classifier` - softmax over a fixed class list, with absent classes
  masked out of the softmax entirely;
* :class:`MixtureModel` - a diagonal Gaussian mixture density over a
  continuous target.

Parameters live in one flat float64 vector so an optimizer (and a finite
difference checker) can treat every model the same way.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class Diverged(RuntimeError):
    pass


class DimensionMismatch(ValueError):
    pass


# ---------------------------------------------------------------- MLP core


def layer_shapes(sizes):
    return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]


def n_params(sizes) -> int:
    return sum(o * i + o for o, i in layer_shapes(sizes))


def init_params(sizes, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    for o, i in layer_shapes(sizes):
        chunks.append(rng.normal(0.0, 1.0 / math.sqrt(i), size=(o, i)).ravel())
        chunks.append(np.zeros(o))
    return np.concatenate(chunks)


def unpack(theta: np.ndarray, sizes):
    layers, k = [], 0
    for o, i in layer_shapes(sizes):
        W = theta[k:k + o * i].reshape(o, i)
        k += o * i
        b = theta[k:k + o]
        k += o
        layers.append((W, b))
    return layers


def mlp_forward(theta, sizes, X):
    """Returns (output, cache); hidden layers use tanh, the last layer is linear."""
    layers = unpack(theta, sizes)
    acts = [X]
    h = X
    for j, (W, b) in enumerate(layers):
        z = h @ W.T + b
        h = np.tanh(z) if j < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(theta, sizes, acts, dout):
    layers = unpack(theta, sizes)
    grads = []
    g = dout
    for j in range(len(layers) - 1, -1, -1):
        W, _ = layers[j]
        h_in = acts[j]
        grads.append((g.sum(axis=0), (g.T @ h_in).ravel()))
        if j > 0:
            g = (g @ W) * (1.0 - acts[j] ** 2)
    flat = []
    for db, dW in reversed(grads):
        flat.append(dW)
        flat.append(db)
    return np.concatenate(flat)


# ---------------------------------------------------------------- heads


def log_softmax(z):
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(z - m), axis=axis))


def masked_xent(logits, y, w, mask):
    """Weighted mean cross-entropy; returns (loss, dlogits)."""
    z = np.where(mask, logits, -np.inf)
    lp = log_softmax(z)
    n = len(y)
    wsum = w.sum()
    loss = -np.sum(w * lp[np.arange(n), y]) / wsum
    d = np.exp(lp)
    d[np.arange(n), y] -= 1.0
    d *= (w / wsum)[:, None]
    return loss, np.where(mask, d, 0.0)


def mdn_split(out, k, d):
    logits = out[:, :k]
    mu = out[:, k:k + k * d].reshape(-1, k, d)
    s_raw = out[:, k + k * d:].reshape(-1, k, d)
    return logits, mu, s_raw


def _sigma(s_raw, floor):
    e = np.exp(np.minimum(s_raw, 30.0))
    return floor + e, np.where(s_raw < 30.0, e, 0.0)


def mdn_nll(out, x, w, k, d, floor):
    """Weighted mean negative log-likelihood of ``x`` (N, d); returns (loss, dout)."""
    logits, mu, s_raw = mdn_split(out, k, d)
    sigma, dsig_draw = _sigma(s_raw, floor)
    lw = log_softmax(logits)
    r = (x[:, None, :] - mu) / sigma
    comp = -0.5 * np.sum(r * r, axis=2) - np.sum(np.log(sigma), axis=2) - 0.5 * d * LOG_2PI
    joint = lw + comp
    ll = logsumexp(joint, axis=1)
    wn = w / w.sum()
    loss = -np.sum(wn * ll)
    gamma = np.exp(joint - ll[:, None])  # responsibilities
    dlogits = (np.exp(lw) - gamma) * wn[:, None]
    g = (gamma * wn[:, None])[:, :, None]
    dmu = -g * r / sigma
    dsigma = -g * (r * r - 1.0) / sigma
    ds_raw = dsigma * dsig_draw
    return loss, np.concatenate([dlogits, dmu.reshape(len(x), -1), ds_raw.reshape(len(x), -1)], axis=1)


def mdn_log_density(out, x, k, d, floor):
    logits, mu, s_raw = mdn_split(out, k, d)
    sigma, _ = _sigma(s_raw, floor)
    lw = log_softmax(logits)
    r = (x[:, None, :] - mu) / sigma
    comp = -0.5 * np.sum(r * r, axis=2) - np.sum(np.log(sigma), axis=2) - 0.5 * d * LOG_2PI
    return logsumexp(lw + comp, axis=1)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    lr: float = 3e-3
    lr_final: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int | None = None
    val_fraction: float = 0.0
    min_steps: int = 0  # extra epochs are added until this many Adam steps are taken

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("epochs, batch_size and learning rates must be positive")
        if self.min_steps < 0:
            raise ValueError("min_steps must be >= 0")

    def epochs_for(self, n: int) -> int:
        """Epoch count for ``n`` samples: ``epochs``, raised to reach ``min_steps``."""
        per_epoch = max(1, math.ceil(n / self.batch_size))
        return max(self.epochs, math.ceil(self.min_steps / per_epoch))


@dataclass
class TrainResult:
    theta: np.ndarray
    curve: list = field(default_factory=list)  # training loss after each epoch
    val_curve: list = field(default_factory=list)
    epochs_run: int = 0


def adam_fit(loss_grad, theta0, n, cfg: TrainConfig, full_loss=None, val_loss=None) -> TrainResult:
    """Mini-batch Adam over ``n`` samples.

    ``loss_grad(theta, idx)`` returns the mean loss and gradient on the batch
    ``idx``; ``full_loss(theta)`` and ``val_loss(theta)`` (optional) are
    evaluated after every epoch.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed % (1 << 64), 0xADA])))
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    t = 0
    res = TrainResult(theta)
    epochs = cfg.epochs_for(n)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(epochs - 1, 1))
    best, best_theta, bad = math.inf, theta.copy(), 0
    for epoch in range(epochs):
        lr = cfg.lr * decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_grad(theta, idx)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise Diverged(f"non-finite loss at epoch {epoch}")
            t += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mh = m / (1 - cfg.beta1 ** t)
            vh = v / (1 - cfg.beta2 ** t)
            theta -= lr * mh / (np.sqrt(vh) + cfg.eps)
        res.epochs_run = epoch + 1
        if full_loss is not None:
            fl = full_loss(theta)
            if not np.isfinite(fl):
                raise Diverged(f"non-finite loss after epoch {epoch}")
            res.curve.append(float(fl))
        if val_loss is not None:
            vl = float(val_loss(theta))
            res.val_curve.append(vl)
            if vl < best:
                best, best_theta, bad = vl, theta.copy(), 0
            else:
                bad += 1
                if cfg.patience is not None and bad >= cfg.patience:
                    log.info("early stop at epoch %d", epoch)
                    theta = best_theta
                    break
    res.theta = theta
    return res


# ---------------------------------------------------------------- models


def fit_normalizer(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std)
    return mean, std


@dataclass
class Classifier:
    sizes: list
    theta: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray
    class_mask: np.ndarray  # bool (C,)

    @classmethod
    def create(cls, in_dim, n_classes, hidden=(64, 64), rng=None, X=None, class_mask=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [in_dim, *hidden, n_classes]
        mean, std = fit_normalizer(X) if X is not None else (np.zeros(in_dim), np.ones(in_dim))
        mask = np.ones(n_classes, bool) if class_mask is None else np.asarray(class_mask, bool)
        return cls(sizes, init_params(sizes, rng), mean, std, mask)

    @property
    def in_dim(self):
        return self.sizes[0]

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} input features, got {X.shape[1]}")
        return X

    def logits(self, X, theta=None):
        X = self._check(X)
        out, _ = mlp_forward(self.theta if theta is None else theta, self.sizes, (X - self.in_mean) / self.in_std)
        return np.where(self.class_mask, out, -np.inf)

    def log_probs(self, X, theta=None):
        return log_softmax(self.logits(X, theta))

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)

    def loss_grad(self, theta, X, y, w):
        Xn = (X - self.in_mean) / self.in_std
        out, acts = mlp_forward(theta, self.sizes, Xn)
        loss, dout = masked_xent(out, y, w, self.class_mask)
        return loss, mlp_backward(theta, self.sizes, acts, dout)

    def loss(self, X, y, w, theta=None):
        """Forward pass only; what finite-difference checks perturb."""
        theta = self.theta if theta is None else theta
        out, _ = mlp_forward(theta, self.sizes, (X - self.in_mean) / self.in_std)
        return masked_xent(out, y, w, self.class_mask)[0]


@dataclass
class MixtureModel:
    sizes: list
    theta: np.ndarray
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    n_components: int
    out_dim: int
    sigma_min: float = 1e-3

    @classmethod
    def create(cls, in_dim, out_dim, n_components=5, hidden=(64, 64), rng=None, X=None, Y=None,
               sigma_min=1e-3):
        rng = rng if rng is not None else np.random.default_rng(0)
        k, d = n_components, out_dim
        sizes = [in_dim, *hidden, k + 2 * k * d]
        theta = init_params(sizes, rng)
        # spread initial component means so they do not collapse onto one mode
        W, b = unpack(theta, sizes)[-1]
        b[k:k + k * d] = rng.normal(0.0, 0.5, size=k * d)
        b[k + k * d:] = math.log(0.5)
        mean, std = fit_normalizer(X) if X is not None else (np.zeros(in_dim), np.ones(in_dim))
        omean, ostd = fit_normalizer(Y) if Y is not None else (np.zeros(out_dim), np.ones(out_dim))
        return cls(sizes, theta, mean, std, omean, ostd, k, d, sigma_min)

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def floor(self):
        return self.sigma_min / self.out_std

    def _check(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.in_dim:
            raise DimensionMismatch(f"expected {self.in_dim} input features, got {X.shape[1]}")
        return X

    def _raw(self, X, theta=None):
        out, _ = mlp_forward(self.theta if theta is None else theta, self.sizes,
                             (self._check(X) - self.in_mean) / self.in_std)
        return out

    def mixture(self, X, theta=None):
        """Return (log_weights (N,K), means (N,K,D), stds (N,K,D)) in target units."""
        k, d = self.n_components, self.out_dim
        logits, mu, s_raw = mdn_split(self._raw(X, theta), k, d)
        sigma, _ = _sigma(s_raw, self.floor)
        return log_softmax(logits), self.out_mean + self.out_std * mu, self.out_std * sigma

    def log_density(self, X, Y, theta=None):
        z = (np.atleast_2d(Y) - self.out_mean) / self.out_std
        ll = mdn_log_density(self._raw(X, theta), z, self.n_components, self.out_dim, self.floor)
        return ll - np.sum(np.log(self.out_std))

    def mode(self, X):
        """Mean of the component with the highest weight x own-peak density, and its log density."""
        lw, mu, sd = self.mixture(X)
        score = lw - np.sum(np.log(sd), axis=2)
        best = np.argmax(score, axis=1)
        xstar = mu[np.arange(len(best)), best]
        return xstar, self.log_density(X, xstar)

    def sample(self, X, rng):
        lw, mu, sd = self.mixture(X)
        out = np.empty((len(lw), self.out_dim))
        for i in range(len(lw)):
            c = rng.choice(self.n_components, p=np.exp(lw[i]) / np.exp(lw[i]).sum())
            out[i] = rng.normal(mu[i, c], sd[i, c])
        return out

    def loss_grad(self, theta, X, Y, w):
        Xn = (X - self.in_mean) / self.in_std
        out, acts = mlp_forward(theta, self.sizes, Xn)
        z = (Y - self.out_mean) / self.out_std
        loss, dout = mdn_nll(out, z, w, self.n_components, self.out_dim, self.floor)
        # report NLL in target units
        return loss + float(np.sum(np.log(self.out_std))), mlp_backward(theta, self.sizes, acts, dout)

    def loss(self, X, Y, w, theta=None):
        """Forward pass only; what finite-difference checks perturb."""
        theta = self.theta if theta is None else theta
        out, _ = mlp_forward(theta, self.sizes, (X - self.in_mean) / self.in_std)
        z = (Y - self.out_mean) / self.out_std
        ll = mdn_log_density(out, z, self.n_components, self.out_dim, self.floor)
        return -float(np.sum(w * ll) / w.sum()) + float(np.sum(np.log(self.out_std)))


def fit_model(model, X, T, w, cfg: TrainConfig, X_val=None, T_val=None, w_val=None) -> TrainResult:
    """Train ``model`` (a Classifier or MixtureModel) in place on targets ``T``."""
    X = np.asarray(X, float)
    if len(X) == 0:
        raise ValueError("cannot train on an empty set")
    model._check(X)

    def lg(theta, idx):
        return model.loss_grad(theta, X[idx], T[idx], w[idx])

    full = lambda th: model.loss(X, T, w, th)
    val = None
    if X_val is not None and len(X_val):
        val = lambda th: model.loss(X_val, T_val, w_val, th)
    res = adam_fit(lg, model.theta, len(X), cfg, full_loss=full, val_loss=val)
    model.theta = res.theta
    return res


def model_to_record(model) -> dict:
    from .records import encode_array

    if isinstance(model, Classifier):
        return {"type": "classifier", "sizes": list(model.sizes), "theta": encode_array(model.theta),
                "in_mean": encode_array(model.in_mean), "in_std": encode_array(model.in_std),
                "class_mask": [bool(b) for b in model.class_mask]}
    return {"type": "mixture", "sizes": list(model.sizes), "theta": encode_array(model.theta),
            "in_mean": encode_array(model.in_mean), "in_std": encode_array(model.in_std),
            "out_mean": encode_array(model.out_mean), "out_std": encode_array(model.out_std),
            "n_components": model.n_components, "out_dim": model.out_dim, "sigma_min": model.sigma_min}


def model_from_record(r: dict):
    from .records import decode_array

    if r["type"] == "classifier":
        return Classifier(list(r["sizes"]), decode_array(r["theta"]), decode_array(r["in_mean"]),
                          decode_array(r["in_std"]), np.array(r["class_mask"], bool))
    return MixtureModel(list(r["sizes"]), decode_array(r["theta"]), decode_array(r["in_mean"]),
                        decode_array(r["in_std"]), decode_array(r["out_mean"]), decode_array(r["out_std"]),
                        r["n_components"], r["out_dim"], r["sigma_min"])
