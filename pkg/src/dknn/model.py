"""Classifier with a label-distribution-learning objective.

Architecture: feature vector x -> h = tanh(x W1 + b1) -> p = softmax(h W2 + b2),
plus a trainable label-embedding matrix (one row per class) used to build
per-example soft targets and a margin contrastive loss:

* attention:    alpha = softmax(h . l_i over classes)
* scaled rows:  lprime_i = alpha_i * l_i
* similarity:   M = lprime lprime^T  (mirrored to be exactly symmetric)
* contrastive:  mean over ordered pairs i != j of max(0, rho - M_ii + M_ij)
* soft target:  q = softmax(row y of M), pulled toward p with KL(q || p)

total = ce + kl + cl. Gradients for every parameter are analytic (hand
backprop); finite differences are only used as a test oracle.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import CorruptArtifactError
from .mathcore import CE_EPS, KL_EPS, softmax, softmax_rows

CHECKPOINT_MAGIC = b"DKNM"
CHECKPOINT_VERSION = 1


@dataclass
class LLConfig:
    """Switches and weights for the label-distribution-learning losses.

    rho is the contrastive margin in [0, 1]. The loss weights default to 1.0
    (plain unweighted sum); cosine_m row-normalizes the scaled label matrix
    before the similarity product, making M a cosine-similarity matrix.
    """

    rho: float = 0.5
    enable_kl: bool = True
    enable_cl: bool = True
    cosine_m: bool = False
    w_ce: float = 1.0
    w_kl: float = 1.0
    w_cl: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if min(self.w_ce, self.w_kl, self.w_cl) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ModelParams:
    """All trainable tensors. Shapes: w1 (F,d), b1 (d,), w2 (d,c), b2 (c,),
    label_emb (c,d)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    label_emb: np.ndarray

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    def validate(self) -> None:
        f, d = self.w1.shape
        c = self.w2.shape[1]
        if self.b1.shape != (d,) or self.w2.shape != (d, c) or self.b2.shape != (c,):
            raise ValueError("inconsistent parameter shapes")
        if self.label_emb.shape != (c, d):
            raise ValueError(
                f"label_emb shape {self.label_emb.shape} != ({c}, {d})"
            )
        for name, arr in self.tensors().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "label_emb": self.label_emb,
        }

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.w1.copy(),
            self.b1.copy(),
            self.w2.copy(),
            self.b2.copy(),
            self.label_emb.copy(),
        )


@dataclass
class LossBreakdown:
    ce: float
    kl: float
    cl: float
    total: float


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    label_emb: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "label_emb": self.label_emb,
        }


# ---------------------------------------------------------------------------
# forward operations


def encode(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Text embedding h = tanh(x W1 + b1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.feature_dim,):
        raise ValueError(f"expected feature vector of length {params.feature_dim}")
    return np.tanh(x @ params.w1 + params.b1)


def classify(h: np.ndarray, params: ModelParams) -> np.ndarray:
    """Predicted class distribution p = softmax(h W2 + b2)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.embed_dim,):
        raise ValueError(f"expected embedding of length {params.embed_dim}")
    return softmax(h @ params.w2 + params.b2)


def label_attention(h: np.ndarray, label_emb: np.ndarray) -> np.ndarray:
    """Compatibility of h with every label embedding: softmax(h . l_i)."""
    h = np.asarray(h, dtype=np.float64)
    label_emb = np.asarray(label_emb, dtype=np.float64)
    if label_emb.ndim != 2 or h.shape != (label_emb.shape[1],):
        raise ValueError("label_emb must be (c, d) with d matching h")
    return softmax(h @ label_emb.T)


def scaled_label_matrix(alpha: np.ndarray, label_emb: np.ndarray) -> np.ndarray:
    """Row i of the result is alpha_i * l_i."""
    alpha = np.asarray(alpha, dtype=np.float64)
    label_emb = np.asarray(label_emb, dtype=np.float64)
    if alpha.shape != (label_emb.shape[0],):
        raise ValueError("alpha length must equal the number of label rows")
    return alpha[:, None] * label_emb


def _mirror(m: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one: exact symmetry."""
    return np.triu(m) + np.triu(m, 1).T


def label_similarity(lprime: np.ndarray) -> np.ndarray:
    """Gram matrix of the scaled label rows, mirrored to exact symmetry."""
    lp = np.asarray(lprime, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError("lprime must be a 2-D matrix")
    return _mirror(lp @ lp.T)


def contrastive_loss(m: np.ndarray, rho: float) -> float:
    """Mean hinge over ordered label pairs i != j: max(0, rho - M_ii + M_ij).

    Defined as 0 for a single-class problem (no pairs to contrast).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("m must be square")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    c = m.shape[0]
    if c < 2:
        return 0.0
    diag = np.diag(m)
    hinge = rho - diag[:, None] + m
    off = ~np.eye(c, dtype=bool)
    return float(np.sum(np.maximum(hinge, 0.0)[off]) / (c * (c - 1)))


def contrastive_grad_m(m: np.ndarray, rho: float) -> np.ndarray:
    """Subgradient of contrastive_loss w.r.t. every entry of M.

    Off-diagonal (i,j): 1/(c(c-1)) when the (i,j) hinge is active, else 0.
    Diagonal (i,i): -(active count in row i)/(c(c-1)).
    """
    m = np.asarray(m, dtype=np.float64)
    c = m.shape[0]
    if c < 2:
        return np.zeros_like(m)
    kappa = 1.0 / (c * (c - 1))
    diag = np.diag(m)
    active = ((rho - diag[:, None] + m) > 0.0) & ~np.eye(c, dtype=bool)
    grad = active * kappa
    grad[np.arange(c), np.arange(c)] = -kappa * active.sum(axis=1)
    return grad


def soft_target(m: np.ndarray, y: int) -> np.ndarray:
    """Soft label distribution q = softmax(row y of M)."""
    m = np.asarray(m, dtype=np.float64)
    y = int(y)
    if not 0 <= y < m.shape[0]:
        raise ValueError(f"class index {y} out of range")
    return softmax(m[y])


def forward_batch(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """(H, P) for a batch of feature rows."""
    x = np.asarray(x, dtype=np.float64)
    h = np.tanh(x @ params.w1 + params.b1)
    p = softmax_rows(h @ params.w2 + params.b2)
    return h, p


# ---------------------------------------------------------------------------
# loss + analytic gradients (batched core; single-example ops wrap it)


def _normalized_label_rows(label_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((label_emb * label_emb).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    return label_emb / safe[:, None], safe


def batch_loss_and_gradients(
    x: np.ndarray,
    y: np.ndarray,
    params: ModelParams,
    cfg: LLConfig,
    with_grads: bool = True,
) -> tuple[LossBreakdown, Gradients | None]:
    """Mean loss over a batch and (optionally) its analytic gradients.

    Per-example quantities (alpha, M, q) are computed for every row; the
    batch loss is the arithmetic mean of per-example losses and gradients
    are the matching means.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError("x must be (B, feature_dim)")
    if y.shape != (x.shape[0],):
        raise ValueError("y must have one label per row of x")
    c = params.n_classes
    if np.any((y < 0) | (y >= c)):
        raise ValueError("label out of range")

    batch = x.shape[0]
    rows = np.arange(batch)
    lbl = params.label_emb

    z1 = x @ params.w1 + params.b1
    h = np.tanh(z1)
    p = softmax_rows(h @ params.w2 + params.b2)
    py = p[rows, y]
    ce_vec = -np.log(np.maximum(py, CE_EPS))
    ce = cfg.w_ce * float(ce_vec.mean())

    kl_on = cfg.enable_kl and c >= 1
    cl_on = cfg.enable_cl and c >= 2
    ll_on = kl_on or cl_on

    alpha = None
    gram = None
    m_all = None
    if ll_on:
        if cfg.cosine_m:
            # alpha_i > 0, so normalizing alpha_i * l_i equals normalizing l_i:
            # M becomes the (example-independent) cosine similarity of label rows.
            unit, norms = _normalized_label_rows(lbl)
            m_shared = _mirror(unit @ unit.T)
            m_all = np.broadcast_to(m_shared, (batch, c, c))
        else:
            alpha = softmax_rows(h @ lbl.T)
            gram = _mirror(lbl @ lbl.T)
            m_all = alpha[:, :, None] * alpha[:, None, :] * gram

    kl = 0.0
    q = qn = pn = sq = sp = kl_vec = None
    if kl_on:
        mrow = m_all[rows, y, :]
        q = softmax_rows(mrow)
        qs = q + KL_EPS
        sq = qs.sum(axis=1, keepdims=True)
        qn = qs / sq
        ps = p + KL_EPS
        sp = ps.sum(axis=1, keepdims=True)
        pn = ps / sp
        kl_vec = (qn * (np.log(qn) - np.log(pn))).sum(axis=1)
        kl = cfg.w_kl * float(kl_vec.mean())

    cl = 0.0
    active = None
    kappa = 0.0
    if cl_on:
        kappa = 1.0 / (c * (c - 1))
        diag = m_all[:, np.arange(c), np.arange(c)]
        hinge = cfg.rho - diag[:, :, None] + m_all
        off = ~np.eye(c, dtype=bool)
        active = (hinge > 0.0) & off
        cl_vec = np.where(active, hinge, 0.0).sum(axis=(1, 2)) * kappa
        cl = cfg.w_cl * float(cl_vec.mean())

    breakdown = LossBreakdown(ce=ce, kl=kl, cl=cl, total=ce + kl + cl)
    if not with_grads:
        return breakdown, None

    # ----- backward -----
    onehot = np.zeros((batch, c))
    onehot[rows, y] = 1.0
    ce_scale = cfg.w_ce / batch
    ce_live = (py >= CE_EPS)[:, None]  # clamped rows contribute no CE gradient
    dz2 = np.where(ce_live, (p - onehot) * ce_scale, 0.0)

    dmrow = None
    if kl_on:
        kl_scale = cfg.w_kl / batch
        g_p = (1.0 - qn / pn) / sp * kl_scale
        dz2 += p * (g_p - (g_p * p).sum(axis=1, keepdims=True))
        g_q = (np.log(qn) - np.log(pn) - kl_vec[:, None]) / sq * kl_scale
        dmrow = q * (g_q - (g_q * q).sum(axis=1, keepdims=True))

    d_label = np.zeros_like(lbl)
    dh_att = 0.0
    if ll_on:
        dm = np.zeros((batch, c, c))
        if cl_on:
            cl_scale = cfg.w_cl * kappa / batch
            dm += active * cl_scale
            dm[:, np.arange(c), np.arange(c)] -= cl_scale * active.sum(axis=2)
        if kl_on:
            dm[rows, y, :] += dmrow
        sym = dm + dm.transpose(0, 2, 1)
        if cfg.cosine_m:
            # M does not depend on alpha; chain through unit rows u_i = l_i/|l_i|.
            sym_total = sym.sum(axis=0)
            row_dot = (sym_total * m_shared).sum(axis=1)
            d_label += (sym_total @ unit - row_dot[:, None] * unit) / norms[:, None]
        else:
            dalpha = np.einsum("bij,ij,bj->bi", sym, gram, alpha)
            weights = alpha[:, :, None] * sym * alpha[:, None, :]
            d_label += np.einsum("bij,jd->id", weights, lbl)
            dt = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
            dh_att = dt @ lbl
            d_label += dt.T @ h

    dh = dz2 @ params.w2.T + dh_att
    dz1 = dh * (1.0 - h * h)
    grads = Gradients(
        w1=x.T @ dz1,
        b1=dz1.sum(axis=0),
        w2=h.T @ dz2,
        b2=dz2.sum(axis=0),
        label_emb=d_label,
    )
    return breakdown, grads


def total_loss(x: np.ndarray, y: int, params: ModelParams, cfg: LLConfig) -> LossBreakdown:
    """Loss components for one example; total is their exact fp sum."""
    x = np.asarray(x, dtype=np.float64)
    breakdown, _ = batch_loss_and_gradients(
        x[None, :], np.array([int(y)]), params, cfg, with_grads=False
    )
    return breakdown


def gradients(x: np.ndarray, y: int, params: ModelParams, cfg: LLConfig) -> Gradients:
    """Analytic gradients of total_loss w.r.t. every parameter tensor."""
    x = np.asarray(x, dtype=np.float64)
    _, grads = batch_loss_and_gradients(
        x[None, :], np.array([int(y)]), params, cfg, with_grads=True
    )
    assert grads is not None
    return grads


# ---------------------------------------------------------------------------
# checkpoint serialization

_HEADER = struct.Struct("<4sHIII")


def checkpoint_bytes(params: ModelParams) -> bytes:
    """Serialize params: magic, u16 version, u32 F/d/c, then f32 LE blocks
    w1, b1, w2, b2, label_emb in row-major order."""
    params.validate()
    parts = [
        _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            params.feature_dim,
            params.embed_dim,
            params.n_classes,
        )
    ]
    for arr in (params.w1, params.b1, params.w2, params.b2, params.label_emb):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def model_fingerprint(params: ModelParams) -> int:
    """64-bit fingerprint of the serialized checkpoint (blake2b-8 digest)."""
    digest = hashlib.blake2b(checkpoint_bytes(params), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    return params_from_bytes(blob, source=str(path))


def params_from_bytes(blob: bytes, source: str = "<bytes>") -> ModelParams:
    if len(blob) < _HEADER.size:
        raise CorruptArtifactError(f"{source}: truncated checkpoint header")
    magic, version, f, d, c = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptArtifactError(f"{source}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptArtifactError(f"{source}: unsupported version {version}")
    counts = [f * d, d, d * c, c, c * d]
    expected = _HEADER.size + 4 * sum(counts)
    if len(blob) != expected:
        raise CorruptArtifactError(
            f"{source}: size {len(blob)} != expected {expected} bytes"
        )
    offset = _HEADER.size
    arrays = []
    for count in counts:
        arrays.append(
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(
                np.float64
            )
        )
        offset += 4 * count
    return ModelParams(
        w1=arrays[0].reshape(f, d),
        b1=arrays[1],
        w2=arrays[2].reshape(d, c),
        b2=arrays[3],
        label_emb=arrays[4].reshape(c, d),
    )
