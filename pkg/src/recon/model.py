"""Two-branch embedding model with a bilinear similarity head.

Visual and text item features are linearly projected into a shared space
and L2-normalized per item; a pair is summarized by its renormalized mean
item. Similarity between summaries is the bilinear form v' W t, with W
kept at spectral norm <= 1 so scores stay in [-1, 1] (W = I recovers plain
cosine similarity).

All parameters live in float64 torch tensors; checkpoints serialize to a
compact float32 binary container (magic ``RCMD``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, InvalidConfig, InvalidInput, NormalizationError

__all__ = [
    "SimilarityModel",
    "EmbeddedPair",
    "encode",
    "encode_batch",
    "batch_similarity",
    "batch_similarity_from_embedded",
    "item_cross_similarity",
    "parameter_vector",
    "set_parameter_vector",
    "value_and_grad_closure",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"RCMD"
CHECKPOINT_VERSION = 1
_ZERO_NORM = 1e-12


@dataclass
class SimilarityModel:
    visual_proj: torch.Tensor  # (d_v, d_e)
    visual_bias: torch.Tensor  # (d_e,)
    text_proj: torch.Tensor  # (d_l, d_e)
    text_bias: torch.Tensor  # (d_e,)
    similarity_params: torch.Tensor  # (d_e, d_e), spectral norm <= 1
    train_similarity: bool = False

    def __post_init__(self):
        if self.visual_proj.ndim != 2 or self.text_proj.ndim != 2:
            raise InvalidConfig("projection matrices must be 2-D")
        d_e = self.visual_proj.shape[1]
        if d_e < 2:
            raise InvalidConfig(f"embedding dimension must be >= 2, got {d_e}")
        if self.text_proj.shape[1] != d_e or self.similarity_params.shape != (d_e, d_e):
            raise InvalidConfig("parameter shapes disagree on embedding dimension")
        if self.visual_bias.shape != (d_e,) or self.text_bias.shape != (d_e,):
            raise InvalidConfig("bias shapes disagree with embedding dimension")
        for name in ("visual_proj", "visual_bias", "text_proj", "text_bias", "similarity_params"):
            t = getattr(self, name)
            if t.dtype != torch.float64:
                setattr(self, name, t.to(torch.float64))
            if not torch.isfinite(getattr(self, name)).all():
                raise InvalidConfig(f"non-finite values in {name}")

    @property
    def d_v(self) -> int:
        return self.visual_proj.shape[0]

    @property
    def d_l(self) -> int:
        return self.text_proj.shape[0]

    @property
    def d_e(self) -> int:
        return self.visual_proj.shape[1]

    @classmethod
    def random_init(cls, d_v: int, d_l: int, d_e: int, seed: int, train_similarity: bool = False) -> "SimilarityModel":
        gen = torch.Generator().manual_seed(seed)

        def xavier(rows, cols):
            bound = (6.0 / (rows + cols)) ** 0.5
            w = torch.empty(rows, cols, dtype=torch.float64)
            w.uniform_(-bound, bound, generator=gen)
            return w

        return cls(
            visual_proj=xavier(d_v, d_e),
            visual_bias=torch.zeros(d_e, dtype=torch.float64),
            text_proj=xavier(d_l, d_e),
            text_bias=torch.zeros(d_e, dtype=torch.float64),
            similarity_params=torch.eye(d_e, dtype=torch.float64),
            train_similarity=train_similarity,
        )

    @classmethod
    def identity(cls, dim: int) -> "SimilarityModel":
        """Pass-through model: square identity projections and cosine head.

        Handy in tests where embeddings should equal the raw features.
        """
        eye = torch.eye(dim, dtype=torch.float64)
        return cls(
            visual_proj=eye.clone(),
            visual_bias=torch.zeros(dim, dtype=torch.float64),
            text_proj=eye.clone(),
            text_bias=torch.zeros(dim, dtype=torch.float64),
            similarity_params=eye.clone(),
        )

    def parameter_names(self) -> tuple[str, ...]:
        names = ["visual_proj", "visual_bias", "text_proj", "text_bias"]
        if self.train_similarity:
            names.append("similarity_params")
        return tuple(names)

    def parameters(self) -> list[torch.Tensor]:
        return [getattr(self, name) for name in self.parameter_names()]

    def clone(self) -> "SimilarityModel":
        """Detached snapshot of the current parameter values."""
        return SimilarityModel(
            visual_proj=self.visual_proj.detach().clone(),
            visual_bias=self.visual_bias.detach().clone(),
            text_proj=self.text_proj.detach().clone(),
            text_bias=self.text_bias.detach().clone(),
            similarity_params=self.similarity_params.detach().clone(),
            train_similarity=self.train_similarity,
        )

    def requires_grad_(self, flag: bool = True) -> "SimilarityModel":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clip_similarity_norm(self) -> None:
        """Rescale W in place if its spectral norm exceeds 1."""
        with torch.no_grad():
            top = torch.linalg.matrix_norm(self.similarity_params, ord=2)
            if top > 1.0:
                self.similarity_params /= top


@dataclass
class EmbeddedPair:
    """Per-item unit embeddings plus the renormalized mean summary of each side."""

    visual_items: torch.Tensor  # (N_V, d_e), unit rows
    text_items: torch.Tensor  # (N_L, d_e), unit rows
    pooled_visual: torch.Tensor  # (d_e,), unit
    pooled_text: torch.Tensor  # (d_e,), unit


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if (norms < _ZERO_NORM).any():
        raise NormalizationError(f"zero-norm {what} cannot be normalized")
    return x / norms


def _pool(items: torch.Tensor, what: str) -> torch.Tensor:
    return _normalize_rows(items.mean(dim=0, keepdim=True), f"pooled {what}")[0]


def encode(pair, model: SimilarityModel) -> EmbeddedPair:
    """Project one feature pair into the shared space (see module docstring)."""
    vis = torch.as_tensor(np.asarray(pair.visual_features), dtype=torch.float64)
    txt = torch.as_tensor(np.asarray(pair.text_features), dtype=torch.float64)
    if vis.shape[1] != model.d_v:
        raise InvalidInput(f"visual feature dim {vis.shape[1]} != model d_v {model.d_v}")
    if txt.shape[1] != model.d_l:
        raise InvalidInput(f"text feature dim {txt.shape[1]} != model d_l {model.d_l}")
    v_items = _normalize_rows(vis @ model.visual_proj + model.visual_bias, "visual item")
    t_items = _normalize_rows(txt @ model.text_proj + model.text_bias, "text item")
    return EmbeddedPair(v_items, t_items, _pool(v_items, "visual summary"), _pool(t_items, "text summary"))


def encode_batch(pairs, model: SimilarityModel) -> list[EmbeddedPair]:
    """Encode many pairs with two concatenated mat-muls instead of 2*len(pairs)."""
    pairs = list(pairs)
    if not pairs:
        return []
    vis_all = np.concatenate([np.asarray(p.visual_features) for p in pairs], axis=0)
    txt_all = np.concatenate([np.asarray(p.text_features) for p in pairs], axis=0)
    if vis_all.shape[1] != model.d_v or txt_all.shape[1] != model.d_l:
        raise InvalidInput("feature dims do not match model dims")
    v_proj = _normalize_rows(
        torch.as_tensor(vis_all, dtype=torch.float64) @ model.visual_proj + model.visual_bias, "visual item"
    )
    t_proj = _normalize_rows(
        torch.as_tensor(txt_all, dtype=torch.float64) @ model.text_proj + model.text_bias, "text item"
    )
    out = []
    v_off = t_off = 0
    for p in pairs:
        v_items = v_proj[v_off : v_off + p.visual_features.shape[0]]
        t_items = t_proj[t_off : t_off + p.text_features.shape[0]]
        v_off += p.visual_features.shape[0]
        t_off += p.text_features.shape[0]
        out.append(EmbeddedPair(v_items, t_items, _pool(v_items, "visual summary"), _pool(t_items, "text summary")))
    return out


def batch_similarity_from_embedded(embedded: list[EmbeddedPair], model: SimilarityModel) -> torch.Tensor:
    """All-pairs score matrix S[i, j] = pooled_v_i' W pooled_t_j."""
    if not embedded:
        raise InvalidInput("empty batch")
    pv = torch.stack([e.pooled_visual for e in embedded])
    pt = torch.stack([e.pooled_text for e in embedded])
    return pv @ model.similarity_params @ pt.T


def batch_similarity(pairs, model: SimilarityModel) -> torch.Tensor:
    return batch_similarity_from_embedded(encode_batch(pairs, model), model)


def item_cross_similarity(embedded: EmbeddedPair, model: SimilarityModel) -> torch.Tensor:
    """(N_V, N_L) item-level score table for one pair, same bilinear head."""
    return embedded.visual_items @ model.similarity_params @ embedded.text_items.T


def parameter_vector(model: SimilarityModel) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([p.reshape(-1) for p in model.parameters()]).clone()


def set_parameter_vector(model: SimilarityModel, vec) -> None:
    vec = torch.as_tensor(np.asarray(vec), dtype=torch.float64).reshape(-1)
    expected = sum(p.numel() for p in model.parameters())
    if vec.numel() != expected:
        raise InvalidInput(f"parameter vector has {vec.numel()} entries, model needs {expected}")
    off = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(vec[off : off + p.numel()].reshape(p.shape))
            off += p.numel()


def value_and_grad_closure(model: SimilarityModel, loss_fn):
    """Package ``loss_fn(model)`` as functions of the flat parameter vector.

    Returns ``(value_and_grad, value_only)`` suitable for numeric gradient
    checking: both set the model parameters from the vector; the first also
    backpropagates (missing dependence on a parameter yields zeros).
    """

    def value_and_grad(vec):
        set_parameter_vector(model, vec)
        params = model.parameters()
        for p in params:
            p.requires_grad_(True)
        loss = loss_fn(model)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        flat = torch.cat(
            [(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)]
        )
        for p in params:
            p.requires_grad_(False)
        return float(loss.detach()), flat.detach().numpy()

    def value_only(vec):
        set_parameter_vector(model, vec)
        with torch.no_grad():
            return float(loss_fn(model))

    return value_and_grad, value_only


def save_checkpoint(model: SimilarityModel, path) -> None:
    path = Path(path)
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<IIII", CHECKPOINT_VERSION, model.d_v, model.d_l, model.d_e)
    for t in (model.visual_proj, model.text_proj, model.similarity_params, model.visual_bias, model.text_bias):
        blob += np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint(path) -> SimilarityModel:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 20:
        raise FormatError("truncated file: missing header", offset=0)
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version, d_v, d_l, d_e = struct.unpack("<IIII", blob[4:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    shapes = [(d_v, d_e), (d_l, d_e), (d_e, d_e), (d_e,), (d_e,)]
    expected = 20 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise FormatError(f"file is {len(blob)} bytes, expected {expected}", offset=min(len(blob), expected))
    off = 20
    arrays = []
    for shape in shapes:
        size = 4 * int(np.prod(shape))
        arr = np.frombuffer(blob[off : off + size], dtype="<f4").reshape(shape).astype(np.float64)
        if not np.isfinite(arr).all():
            raise FormatError("non-finite parameter values", offset=off)
        arrays.append(torch.from_numpy(arr))
        off += size
    vp, tp, sim, vb, tb = arrays
    return SimilarityModel(visual_proj=vp, visual_bias=vb, text_proj=tp, text_bias=tb, similarity_params=sim)
