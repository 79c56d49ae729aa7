"""Projection heads over the top lattice layer, and the two training losses.

The contrastive head flattens the n = h*w top-layer vectors of a sample into
one (n*d)-vector and projects it to an f1-dimensional feature. The
classification head is a single affine map from those features to class
logits.

The contrastive loss operates on batches of 2B views arranged in adjacent
pairs: rows 2i and 2i+1 are the two augmented views of image i. For an
anchor a with partner b, the per-anchor term is

    -log( exp(sim(a,b)/tau) / (exp(sim(a,b)/tau)
          + sum_{k != a, label_k != label_a} exp(sim(a,k)/tau)) )

with sim the cosine similarity. Same-class views other than the partner are
excluded from the denominator entirely. The cross-entropy loss carries a
1/f2 prefactor (f2 = number of classes).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def init_contrastive_head(flat_dim: int, f1: int, gen: np.random.Generator,
                          dtype=np.float32, linear: bool = False) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def fc(name, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = Tensor(gen.uniform(-limit, limit, (fan_in, fan_out)).astype(dtype),
                                     requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True,
                                     name=f"{name}.b")

    if linear:
        fc("fc", flat_dim, f1)
        return params
    params["ln.gamma"] = Tensor(np.ones(flat_dim, dtype=dtype), requires_grad=True, name="ln.gamma")
    params["ln.beta"] = Tensor(np.zeros(flat_dim, dtype=dtype), requires_grad=True, name="ln.beta")
    fc("fc1", flat_dim, f1)
    fc("fc2", f1, f1)
    return params


def contrastive_head(top_layer: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(B, h, w, d) -> (B, f1) features. Not normalized; sim() does that."""
    b, h, w, d = top_layer.shape
    x = T.reshape(top_layer, (b, h * w * d))
    if "fc.w" in params:  # linear-head ablation
        return x @ params["fc.w"] + params["fc.b"]
    x = T.layer_norm(x, params["ln.gamma"], params["ln.beta"])
    x = x @ params["fc1.w"] + params["fc1.b"]
    x = T.gelu(x)
    return x @ params["fc2.w"] + params["fc2.b"]


def init_classification_head(f1: int, f2: int, gen: np.random.Generator,
                             dtype=np.float32) -> dict[str, Tensor]:
    limit = np.sqrt(6.0 / (f1 + f2))
    return {
        "w": Tensor(gen.uniform(-limit, limit, (f1, f2)).astype(dtype),
                    requires_grad=True, name="h2.w"),
        "b": Tensor(np.zeros(f2, dtype=dtype), requires_grad=True, name="h2.b"),
    }


def classification_head(features: Tensor, params: dict[str, Tensor]) -> Tensor:
    """(B, f1) -> (B, f2) logits, single affine map."""
    return features @ params["w"] + params["b"]


def partner_indices(num_views: int) -> np.ndarray:
    """Row 2i pairs with 2i+1 and vice versa."""
    return np.arange(num_views) ^ 1


def supervised_contrastive_loss(features: Tensor, labels: np.ndarray,
                                temperature: float = 1.0) -> Tensor:
    """Mean per-anchor contrastive loss over a batch of paired views.

    `features` is (2B, f1) with adjacent rows the two views of one image;
    `labels` gives the class of every view. Scale-invariant in the features
    (cosine similarity).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = features.shape[0]
    if n < 4:
        raise ValueError(f"contrastive batch needs at least 4 views (2 images), got {n}")
    if n % 2:
        raise ValueError(f"views must come in pairs, got odd count {n}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} views")

    partners = partner_indices(n)
    normed = T.l2_normalize(features, axis=-1)
    sims = T.matmul(normed, T.transpose(normed, (1, 0))) * (1.0 / float(temperature))

    # denominator membership: different-class views plus the positive partner
    diff_class = labels[None, :] != labels[:, None]
    np.fill_diagonal(diff_class, False)
    denom = diff_class.copy()
    denom[np.arange(n), partners] = True
    # mask non-members additively before exp so nothing overflows
    exclude = Tensor(np.where(denom, 0.0, -1e30).astype(features.dtype))

    shift = Tensor(np.where(denom, sims.value, -np.inf).max(axis=1, keepdims=True)
                   .astype(features.dtype))  # detached row max, exact shift
    z = sims + exclude - shift
    log_denom = T.log(T.tsum(T.exp(z), axis=1, keepdims=True))
    pos = T.take_along(sims - shift, partners[:, None], axis=1)
    per_anchor = log_denom - pos
    return T.mean(per_anchor)


def contrastive_loss_bruteforce(features: np.ndarray, labels: np.ndarray,
                                temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Independent O(n^2) enumeration of the same loss; returns (mean, per-anchor).

    Kept free of the vectorized code path on purpose: plain loops over
    anchors and candidate denominators.
    """
    n = len(features)
    normed = []
    for f in features:
        nrm = np.sqrt(float(sum(x * x for x in f)))
        normed.append(np.asarray(f, dtype=np.float64) / (nrm if nrm else 1.0))
    per = []
    for a in range(n):
        b = a ^ 1
        sim_ab = float(np.dot(normed[a], normed[b])) / temperature
        denom = np.exp(sim_ab)  # the positive competes exactly once
        for k in range(n):
            if k == a or k == b or labels[k] == labels[a]:
                continue
            denom += np.exp(float(np.dot(normed[a], normed[k])) / temperature)
        per.append(-np.log(np.exp(sim_ab) / denom))
    per = np.asarray(per)
    return float(per.mean()), per


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy with the 1/f2 prefactor, mean over the batch."""
    b, f2 = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= f2:
        bad = labels[(labels < 0) | (labels >= f2)][0]
        raise ValueError(f"label {bad} out of range for {f2} classes")
    shift = Tensor(logits.value.max(axis=1, keepdims=True))  # detached
    z = logits - shift
    lse = T.log(T.tsum(T.exp(z), axis=1, keepdims=True))
    picked = T.take_along(z, labels[:, None], axis=1)
    return T.mean(lse - picked) * (1.0 / float(f2))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())
