"""Per-domain sequence expert.

A branch bundles everything one expert needs inside a domain: item and
position embeddings, the causal self-attention encoder stack, and the
prediction head. The local branch is fully trainable; a global branch
carries a frozen encoder synchronized from another domain while its
embeddings, positions and head stay local and trainable.

Token inputs mix the raw item embedding with a graph-propagated view of
the embedding table (row-normalized next-item transitions), then add a
position encoding indexed by the item's offset inside the sequence.
Architecture defaults: pre-normalization blocks, GELU activation.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    width: int = 64          # representation dimension
    blocks: int = 2          # self-attention blocks
    heads: int = 1
    ff_mult: int = 4         # feed-forward width multiplier
    gnn_depth: int = 2       # graph propagation steps
    t_max: int = 16          # sequence window
    dropout: float = 0.3     # attention weights and feed-forward activations
    temperature: float = 1.0  # contrastive similarity scale


@dataclasses.dataclass
class EncoderBlock:
    norm1_gain: Parameter
    norm1_bias: Parameter
    attn_q: Parameter
    attn_k: Parameter
    attn_v: Parameter
    attn_out: Parameter
    norm2_gain: Parameter
    norm2_bias: Parameter
    ff_in: Parameter
    ff_in_bias: Parameter
    ff_out: Parameter
    ff_out_bias: Parameter

    def parameters(self):
        return [self.norm1_gain, self.norm1_bias, self.attn_q, self.attn_k,
                self.attn_v, self.attn_out, self.norm2_gain, self.norm2_bias,
                self.ff_in, self.ff_in_bias, self.ff_out, self.ff_out_bias]


@dataclasses.dataclass
class ExpertEncoderParams:
    """Exactly the parameter set exchanged through the server cache."""

    blocks: list[EncoderBlock]
    heads: int
    width: int

    def parameters(self) -> list[Parameter]:
        return [p for b in self.blocks for p in b.parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


@dataclasses.dataclass
class BranchParams:
    item_embeddings: Parameter      # (num_items + 1, d), row 0 pinned at zero
    position_embeddings: Parameter  # (t_max, d)
    encoder: ExpertEncoderParams
    head_hidden: Parameter          # (d, d)
    head_hidden_bias: Parameter
    head_out: Parameter             # (d, num_items)
    head_out_bias: Parameter
    cfg: ModelConfig

    def parameters(self) -> list[Parameter]:
        return ([self.item_embeddings, self.position_embeddings]
                + self.encoder.parameters()
                + [self.head_hidden, self.head_hidden_bias,
                   self.head_out, self.head_out_bias])

    def adapter_parameters(self) -> list[Parameter]:
        """Everything except the encoder: the domain-side isolation set."""
        return [p for p in self.parameters() if p not in self.encoder.parameters()]


@dataclasses.dataclass
class EncodedSequence:
    z: Tensor  # final-position representation, shape (d,)
    o: Tensor  # next-item logits, shape (num_items,)


def init_encoder(rng: np.random.Generator, cfg: ModelConfig) -> ExpertEncoderParams:
    d, f = cfg.width, cfg.width * cfg.ff_mult
    if d % cfg.heads:
        raise ValueError(f"width {d} not divisible by {cfg.heads} heads")

    def w(name, shape):
        return Parameter(rng.normal(0.0, INIT_STD, shape), name)

    blocks = []
    for i in range(cfg.blocks):
        n = f"block{i}."
        blocks.append(EncoderBlock(
            norm1_gain=Parameter(np.ones(d), n + "norm1_gain"),
            norm1_bias=Parameter(np.zeros(d), n + "norm1_bias"),
            attn_q=w(n + "attn_q", (d, d)),
            attn_k=w(n + "attn_k", (d, d)),
            attn_v=w(n + "attn_v", (d, d)),
            attn_out=w(n + "attn_out", (d, d)),
            norm2_gain=Parameter(np.ones(d), n + "norm2_gain"),
            norm2_bias=Parameter(np.zeros(d), n + "norm2_bias"),
            ff_in=w(n + "ff_in", (d, f)),
            ff_in_bias=Parameter(np.zeros(f), n + "ff_in_bias"),
            ff_out=w(n + "ff_out", (f, d)),
            ff_out_bias=Parameter(np.zeros(d), n + "ff_out_bias"),
        ))
    return ExpertEncoderParams(blocks, cfg.heads, d)


def init_branch(rng: np.random.Generator, num_items: int, cfg: ModelConfig) -> BranchParams:
    d = cfg.width
    emb = rng.normal(0.0, INIT_STD, (num_items + 1, d))
    emb[0] = 0.0
    return BranchParams(
        item_embeddings=Parameter(emb, "item_embeddings"),
        position_embeddings=Parameter(rng.normal(0.0, INIT_STD, (cfg.t_max, d)),
                                      "position_embeddings"),
        encoder=init_encoder(rng, cfg),
        head_hidden=Parameter(rng.normal(0.0, INIT_STD, (d, d)), "head.hidden"),
        head_hidden_bias=Parameter(np.zeros(d), "head.hidden_bias"),
        head_out=Parameter(rng.normal(0.0, INIT_STD, (d, num_items)), "head.out"),
        head_out_bias=Parameter(np.zeros(num_items), "head.out_bias"),
        cfg=cfg,
    )


def gnn_propagate(norm_adjacency, item_embeddings, depth: int) -> Tensor:
    """depth applications of the normalized transition matrix."""
    if depth < 0:
        raise ValueError("gnn depth must be >= 0")
    s = ad.as_tensor(item_embeddings)
    for _ in range(depth):
        s = ad.sparse_matmul(norm_adjacency, s)
    return s


def lookup_table(branch: BranchParams, norm_adjacency) -> Tensor:
    """Item representation table: raw embeddings plus their propagated view."""
    emb = branch.item_embeddings.tensor
    return ad.add(emb, gnn_propagate(norm_adjacency, emb, branch.cfg.gnn_depth))


def _attention_bias(prefixes: np.ndarray, dtype) -> np.ndarray:
    """(batch, 1, T, T) additive mask: forbids future positions and padding keys."""
    b, t = prefixes.shape
    causal = np.tril(np.ones((t, t), dtype=bool))
    key_ok = (prefixes != 0)[:, None, :]            # (b, 1, t)
    allowed = causal[None, :, :] & key_ok           # (b, t, t)
    bias = np.where(allowed, 0.0, -1e9).astype(dtype)
    return bias[:, None, :, :]


def _forward_states(branch: BranchParams, norm_adjacency, prefixes: np.ndarray,
                    train: bool = False, rng: np.random.Generator | None = None,
                    table: Tensor | None = None) -> Tensor:
    """Per-position encoder states (batch, t_max, width)."""
    cfg = branch.cfg
    b, t = prefixes.shape
    if (prefixes.sum(axis=1) == 0).any():
        raise ValueError("encode: a prefix contains no items")
    if train and cfg.dropout > 0.0 and rng is None:
        raise ValueError("train-mode encode needs an rng for dropout")
    if table is None:
        table = lookup_table(branch, norm_adjacency)

    mask = (prefixes != 0)
    pos_idx = np.maximum(np.cumsum(mask, axis=1) - 1, 0)
    tok = ad.gather_rows(table, prefixes)
    tok = ad.add(tok, ad.gather_rows(branch.position_embeddings.tensor, pos_idx))
    tok = ad.mul(tok, Tensor(mask[:, :, None].astype(tok.data.dtype)))

    heads = cfg.heads
    dh = cfg.width // heads
    bias = Tensor(_attention_bias(prefixes, tok.data.dtype))
    x = tok
    for block in branch.encoder.blocks:
        h = ad.layer_norm(x, block.norm1_gain.tensor, block.norm1_bias.tensor)
        q = _split_heads(ad.matmul(h, block.attn_q.tensor), heads, dh)
        k = _split_heads(ad.matmul(h, block.attn_k.tensor), heads, dh)
        v = _split_heads(ad.matmul(h, block.attn_v.tensor), heads, dh)
        scores = ad.add(ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), dh ** -0.5), bias)
        attn = ad.softmax(scores, axis=-1)
        if train and cfg.dropout > 0.0:
            attn = ad.dropout(attn, cfg.dropout, rng)
        ctx = _merge_heads(ad.matmul(attn, v), b, t, cfg.width)
        x = ad.add(x, ad.matmul(ctx, block.attn_out.tensor))

        h2 = ad.layer_norm(x, block.norm2_gain.tensor, block.norm2_bias.tensor)
        f = ad.gelu(ad.add(ad.matmul(h2, block.ff_in.tensor), block.ff_in_bias.tensor))
        if train and cfg.dropout > 0.0:
            f = ad.dropout(f, cfg.dropout, rng)
        x = ad.add(x, ad.add(ad.matmul(f, block.ff_out.tensor), block.ff_out_bias.tensor))
    # padding positions carry no signal; blank them so states are well defined
    return ad.mul(x, Tensor(mask[:, :, None].astype(x.data.dtype)))


def encode_batch(branch: BranchParams, norm_adjacency, prefixes: np.ndarray,
                 train: bool = False, rng: np.random.Generator | None = None,
                 table: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run a left-padded (batch, t_max) prefix matrix through the branch.

    Returns (z, logits) with z the representation at the last position
    and logits over the domain catalog (index i is item i + 1).
    """
    states = _forward_states(branch, norm_adjacency, prefixes, train, rng, table)
    z = ad.select(states, axis=1, index=prefixes.shape[1] - 1)
    hidden = ad.gelu(ad.add(ad.matmul(z, branch.head_hidden.tensor),
                            branch.head_hidden_bias.tensor))
    logits = ad.add(ad.matmul(hidden, branch.head_out.tensor), branch.head_out_bias.tensor)
    return z, logits


def _split_heads(x: Tensor, heads: int, dh: int) -> Tensor:
    b, t, _ = x.data.shape
    return ad.swapaxes(ad.reshape(x, (b, t, heads, dh)), 1, 2)


def _merge_heads(x: Tensor, b: int, t: int, d: int) -> Tensor:
    return ad.reshape(ad.swapaxes(x, 1, 2), (b, t, d))


def encode_pair(branch: BranchParams, norm_adjacency, prefixes: np.ndarray,
                aug_prefixes: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                table: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Original and augmented views in one stacked pass.

    Returns (z, z_aug, logits); the head runs on the original half only.
    """
    b = prefixes.shape[0]
    stacked = np.concatenate([prefixes, aug_prefixes], axis=0)
    states = _forward_states(branch, norm_adjacency, stacked, train, rng, table)
    z_all = ad.select(states, axis=1, index=stacked.shape[1] - 1)
    z = ad.slice_rows(z_all, 0, b)
    z_aug = ad.slice_rows(z_all, b, 2 * b)
    hidden = ad.gelu(ad.add(ad.matmul(z, branch.head_hidden.tensor),
                            branch.head_hidden_bias.tensor))
    logits = ad.add(ad.matmul(hidden, branch.head_out.tensor), branch.head_out_bias.tensor)
    return z, z_aug, logits


def encode(prefix: np.ndarray, branch: BranchParams, norm_adjacency,
           train: bool = False, rng: np.random.Generator | None = None) -> EncodedSequence:
    """Single-sample convenience wrapper around encode_batch."""
    prefix = np.asarray(prefix, dtype=np.int64)
    z, logits = encode_batch(branch, norm_adjacency, prefix[None, :], train=train, rng=rng)
    z = ad.reshape(z, (branch.cfg.width,))
    logits = ad.reshape(logits, (logits.data.shape[-1],))
    if not (np.isfinite(z.data).all() and np.isfinite(logits.data).all()):
        raise FloatingPointError("encode produced non-finite values")
    return EncodedSequence(z=z, o=logits)


def rec_loss(logits: Tensor, target_items) -> Tensor:
    """Next-item cross entropy; targets are item ids (1-based)."""
    targets = np.asarray(target_items, dtype=np.int64) - 1
    return ad.cross_entropy(logits, targets if targets.ndim else int(targets))


def contrastive_loss(z: Tensor, z_aug: Tensor, temperature: float = 1.0) -> Tensor:
    """Symmetric in-batch InfoNCE between original and augmented views.

    Similarities are dot products over the batch; each sample's positive
    is its own augmented view, every other pair is a negative. A batch
    of one has no negatives and contributes zero.
    """
    b = z.data.shape[0]
    if b < 2:
        logger.warning("contrastive loss skipped: batch of %d has no negatives", b)
        return Tensor(np.zeros(()))
    sim = ad.scale(ad.matmul(z, ad.swapaxes(z_aug, 0, 1)), 1.0 / temperature)
    labels = np.arange(b)
    forward = ad.cross_entropy(sim, labels)
    reverse = ad.cross_entropy(ad.swapaxes(sim, 0, 1), labels)
    return ad.scale(ad.add(forward, reverse), 0.5)
