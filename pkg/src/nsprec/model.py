"""Session-wise autoregressive network.

Tokens are embedded as the sum of id, action, side and scenario rows, passed
through kind-specific projections (TSN), and then through pre-norm attention
blocks under the session mask with rotary angles taken from the session index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .data import CONTEXT, FEATURES, ITEM, NUM_TIME_BUCKETS, TokenSequence, Vocab

# embedding tables that take Adagrad updates; everything else is dense
SPARSE_TABLES = ("item_table", "action_table", "cat1_table", "cat2_table",
                 "seller_table", "price_table", "hour_table", "scenario_table")
NUM_ACTIONS = 3
LN_EPS = 1e-6


class NumericsError(FloatingPointError):
    pass


@dataclass
class TokenBatch:
    """Right-padded batch of token sequences; ``valid`` marks real tokens."""

    features: dict[str, torch.Tensor]
    valid: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.valid.shape)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.features[name]


def collate(seqs: list[TokenSequence]) -> TokenBatch:
    length = max(len(s) for s in seqs)
    out = {}
    for name in FEATURES:
        arr = np.zeros((len(seqs), length), dtype=np.int64)
        for b, s in enumerate(seqs):
            arr[b, : len(s)] = getattr(s, name)
        out[name] = torch.from_numpy(arr)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for b, s in enumerate(seqs):
        valid[b, : len(s)] = True
    return TokenBatch(out, torch.from_numpy(valid))


# ---------------------------------------------------------------------------
# masks and rotary angles


def build_session_mask(seq: TokenSequence) -> np.ndarray:
    """``allowed[q, k]``: causal, minus distinct item tokens of the same session."""
    n = len(seq)
    q = np.arange(n)[:, None]
    k = np.arange(n)[None, :]
    items = seq.kind == ITEM
    same = (seq.session[:, None] == seq.session[None, :]) & items[:, None] & items[None, :]
    return (k <= q) & ~(same & (q != k))


def session_mask(tokens: TokenBatch) -> torch.Tensor:
    """Batched session mask, (B, L, L); padded queries only see themselves."""
    kind, session, valid = tokens["kind"], tokens["session"], tokens.valid
    length = kind.shape[1]
    idx = torch.arange(length)
    causal = idx[None, :] <= idx[:, None]
    diag = torch.eye(length, dtype=torch.bool)
    items = kind == ITEM
    same = (session[:, :, None] == session[:, None, :]) & items[:, :, None] & items[:, None, :]
    allowed = causal[None] & ~(same & ~diag[None]) & valid[:, None, :]
    return torch.where(valid[:, :, None], allowed, diag[None])


def rope_frequencies(head_dim: int, base: float = 10000.0, dtype=torch.float64) -> torch.Tensor:
    if head_dim % 2:
        raise ValueError(f"rotary head dim must be even, got {head_dim}")
    return base ** (-torch.arange(0, head_dim, 2, dtype=dtype) / head_dim)


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2j], x[2j+1])`` by the given angles."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def sw_rope_rotate(vec, session_index: int, config: ModelConfig):
    """Rotate one head vector by its session index; identity when sw_rope is off."""
    x = torch.as_tensor(vec, dtype=torch.float64)
    freqs = rope_frequencies(x.shape[-1], config.rope_base)
    if not config.sw_rope:
        return x.clone()
    angle = session_index * freqs
    return rotate_pairs(x, torch.cos(angle), torch.sin(angle))


# ---------------------------------------------------------------------------
# layers


class TokenProjection(nn.Module):
    """Affine map chosen by token kind; a single shared map when ``split`` is off."""

    def __init__(self, dim: int, split: bool):
        super().__init__()
        kinds = 2 if split else 1
        self.split = split
        self.weight = nn.Parameter(torch.eye(dim).repeat(kinds, 1, 1))
        self.bias = nn.Parameter(torch.zeros(kinds, dim))

    def forward(self, x: torch.Tensor, kind: torch.Tensor) -> torch.Tensor:
        shared = x @ self.weight[0] + self.bias[0]
        if not self.split:
            return shared
        item = x @ self.weight[1] + self.bias[1]
        return torch.where((kind == ITEM)[..., None], item, shared)


class Expert(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = nn.Parameter(torch.zeros(dim, hidden))
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = nn.Parameter(torch.zeros(hidden, dim))
        self.b2 = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class MoEFeedForward(nn.Module):
    """Shared experts plus top-k routed experts with sigmoid gates.

    ``balance_bias`` only shifts which experts are selected; gate values come
    from the unbiased sigmoid scores normalized over the selection.
    """

    def __init__(self, dim: int, hidden: int, num_routed: int, num_shared: int, top_k: int):
        super().__init__()
        self.num_routed, self.top_k = num_routed, top_k
        self.shared = nn.ModuleList(Expert(dim, hidden) for _ in range(num_shared))
        if num_routed:
            self.w1 = nn.Parameter(torch.zeros(num_routed, dim, hidden))
            self.b1 = nn.Parameter(torch.zeros(num_routed, hidden))
            self.w2 = nn.Parameter(torch.zeros(num_routed, hidden, dim))
            self.b2 = nn.Parameter(torch.zeros(num_routed, dim))
            self.router = nn.Parameter(torch.zeros(dim, num_routed))
        self.register_buffer("balance_bias", torch.zeros(num_routed))

    def route(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Selected expert ids and their gates, both (..., top_k)."""
        scores = torch.sigmoid(x @ self.router)
        with torch.no_grad():
            selected = torch.topk(scores + self.balance_bias, self.top_k, dim=-1).indices
        gates = scores.gather(-1, selected)
        return selected, gates / gates.sum(-1, keepdim=True)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None):
        out = None
        for expert in self.shared:
            y = expert(x)
            out = y if out is None else out + y
        loads = None
        if self.num_routed:
            selected, gates = self.route(x)
            flat = x.reshape(-1, x.shape[-1])
            sel = selected.reshape(-1, self.top_k)
            gate = gates.reshape(-1, self.top_k)
            routed = torch.zeros_like(flat)
            for e in range(self.num_routed):
                rows, slot = torch.nonzero(sel == e, as_tuple=True)
                if rows.numel() == 0:
                    continue
                h = F.gelu(flat[rows] @ self.w1[e] + self.b1[e])
                y = (h @ self.w2[e] + self.b2[e]) * gate[rows, slot][:, None]
                routed = routed.index_add(0, rows, y)
            routed = routed.view_as(x)
            out = routed if out is None else out + routed
            with torch.no_grad():
                picked = F.one_hot(selected, self.num_routed).sum(-2).to(x.dtype)
                if valid is not None:
                    picked = picked * valid[..., None].to(x.dtype)
                loads = picked.reshape(-1, self.num_routed).sum(0)
        return out, loads

    @torch.no_grad()
    def update_balance(self, loads: torch.Tensor, gamma: float) -> None:
        """Sign step: under-loaded experts gain ``gamma``, over-loaded lose it."""
        self.balance_bias += gamma * torch.sign(loads.mean() - loads)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.dim
        self.cfg = cfg
        self.ln1 = nn.Parameter(torch.ones(dim))
        self.wq = nn.Parameter(torch.zeros(dim, dim))
        self.wk = nn.Parameter(torch.zeros(dim, dim))
        self.wv = nn.Parameter(torch.zeros(dim, dim))
        self.wo = nn.Parameter(torch.zeros(dim, dim))
        self.ln2 = nn.Parameter(torch.ones(dim))
        hidden = cfg.ffn_mult * dim
        if cfg.moe:
            self.ffn = MoEFeedForward(dim, hidden, cfg.moe_routed, cfg.moe_shared, cfg.moe_top_k)
        else:
            self.ffn = Expert(dim, hidden)

    def attention(self, x, mask, cos, sin, return_weights=False):
        b, n, dim = x.shape
        heads = self.cfg.num_heads
        hd = dim // heads

        def split(t):
            return t.view(b, n, heads, hd).transpose(1, 2)

        q, k, v = split(x @ self.wq), split(x @ self.wk), split(x @ self.wv)
        if cos is not None:
            q, k = rotate_pairs(q, cos, sin), rotate_pairs(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, dim) @ self.wo
        return (out, weights) if return_weights else out

    def forward(self, x, mask, cos, sin, valid, entry=None, kind=None):
        h = F.layer_norm(x, (x.shape[-1],), self.ln1, None, LN_EPS)
        if entry is not None:
            h = entry(h, kind)
        x = x + self.attention(h, mask, cos, sin)
        h = F.layer_norm(x, (x.shape[-1],), self.ln2, None, LN_EPS)
        if isinstance(self.ffn, MoEFeedForward):
            y, loads = self.ffn(h, valid)
        else:
            y, loads = self.ffn(h), None
        return x + y, loads


@dataclass
class HiddenStates:
    final: torch.Tensor
    layers: list[torch.Tensor]
    expert_loads: list[torch.Tensor]
    tokens: TokenBatch

    def context_outputs(self, row: int = 0) -> dict[int, torch.Tensor]:
        """Session index -> output vector at that session's context token."""
        kind = self.tokens["kind"][row]
        valid = self.tokens.valid[row]
        pos = torch.nonzero((kind == CONTEXT) & valid).flatten()
        sessions = self.tokens["session"][row, pos]
        return {int(s): self.final[row, p] for s, p in zip(sessions, pos)}

    def last_context(self) -> torch.Tensor:
        """Output at the trailing context token of every row, (B, dim)."""
        lengths = self.tokens.valid.sum(1)
        return self.final[torch.arange(self.final.shape[0]), lengths - 1]


class NSPModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        if cfg.dim % (2 * cfg.num_heads):
            raise ValueError(f"dim={cfg.dim} not divisible by 2*num_heads={2 * cfg.num_heads}")
        self.cfg = cfg
        self.vocab = vocab
        dim = cfg.dim
        c1, c2, sel, pr = vocab.side_sizes
        self.item_table = nn.Parameter(torch.zeros(vocab.num_items + 1, dim))
        self.action_table = nn.Parameter(torch.zeros(NUM_ACTIONS, dim))
        self.cat1_table = nn.Parameter(torch.zeros(c1, dim))
        self.cat2_table = nn.Parameter(torch.zeros(c2, dim))
        self.seller_table = nn.Parameter(torch.zeros(sel, dim))
        self.price_table = nn.Parameter(torch.zeros(pr, dim))
        self.hour_table = nn.Parameter(torch.zeros(NUM_TIME_BUCKETS + 1, dim))
        self.scenario_table = nn.Parameter(torch.zeros(len(vocab.scenarios) + 1, dim))
        self.tsn_embed = TokenProjection(dim, cfg.tsn)
        self.tsn_entry = TokenProjection(dim, cfg.tsn)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_blocks))
        self.final_ln = nn.Parameter(torch.ones(dim))
        heads = cfg.msp_heads
        if heads:
            self.msp_weight = nn.Parameter(torch.eye(dim).repeat(heads, 1, 1))
            self.msp_bias = nn.Parameter(torch.zeros(heads, dim))
        self.register_buffer("item_side", torch.as_tensor(vocab.item_side, dtype=torch.long))
        # table name -> index tensors seen by lookups, while recording
        self.touched: dict[str, list[torch.Tensor]] | None = None

    # -- parameters ---------------------------------------------------------

    def init_parameters(self, seed: int) -> "NSPModel":
        g = torch.Generator().manual_seed(seed)
        std = self.cfg.init_std
        with torch.no_grad():
            for name in SPARSE_TABLES:
                table = getattr(self, name)
                table.copy_(torch.randn(table.shape, generator=g, dtype=torch.float64) * std)
            dim = self.cfg.dim
            for block in self.blocks:
                for w in (block.wq, block.wk, block.wv):
                    w.copy_(torch.randn(w.shape, generator=g, dtype=torch.float64) / math.sqrt(dim))
                block.wo.copy_(torch.randn(dim, dim, generator=g, dtype=torch.float64)
                               / math.sqrt(dim * 2 * max(1, self.cfg.num_blocks)))
                ffn = block.ffn
                experts = list(ffn.shared) if isinstance(ffn, MoEFeedForward) else [ffn]
                for e in experts:
                    e.w1.copy_(torch.randn(e.w1.shape, generator=g, dtype=torch.float64) / math.sqrt(dim))
                    e.w2.copy_(torch.randn(e.w2.shape, generator=g, dtype=torch.float64)
                               / math.sqrt(e.w2.shape[0] * 2 * max(1, self.cfg.num_blocks)))
                if isinstance(ffn, MoEFeedForward) and ffn.num_routed:
                    ffn.w1.copy_(torch.randn(ffn.w1.shape, generator=g, dtype=torch.float64) / math.sqrt(dim))
                    ffn.w2.copy_(torch.randn(ffn.w2.shape, generator=g, dtype=torch.float64)
                                 / math.sqrt(ffn.w2.shape[1] * 2 * max(1, self.cfg.num_blocks)))
                    ffn.router.copy_(torch.randn(ffn.router.shape, generator=g, dtype=torch.float64)
                                     / math.sqrt(dim))
        return self

    def dense_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n not in SPARSE_TABLES]

    def sparse_parameters(self):
        return [(n, getattr(self, n)) for n in SPARSE_TABLES]

    def moe_layers(self) -> list[MoEFeedForward]:
        return [b.ffn for b in self.blocks if isinstance(b.ffn, MoEFeedForward)]

    # -- embeddings ---------------------------------------------------------

    def _lookup(self, name: str, idx: torch.Tensor) -> torch.Tensor:
        table = getattr(self, name)
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.shape[0]):
            raise IndexError(f"index out of range for {name} (rows={table.shape[0]})")
        if self.touched is not None:
            self.touched.setdefault(name, []).append(idx.reshape(-1))
        return F.embedding(idx, table)

    def touched_rows(self) -> dict[str, torch.Tensor]:
        """Sorted unique rows looked up per table since recording started."""
        return {name: torch.unique(torch.cat(parts)) for name, parts in (self.touched or {}).items()}

    def item_side_embedding(self, items: torch.Tensor) -> torch.Tensor:
        side = self.item_side[items]
        return (self._lookup("cat1_table", side[..., 0]) + self._lookup("cat2_table", side[..., 1])
                + self._lookup("seller_table", side[..., 2]) + self._lookup("price_table", side[..., 3]))

    def item_embeddings(self, items: torch.Tensor) -> torch.Tensor:
        """Scoring-side item vectors: id row plus intrinsic side rows."""
        return self._lookup("item_table", items) + self.item_side_embedding(items)

    def raw_embedding(self, tokens: TokenBatch) -> torch.Tensor:
        """Sum of id, action, side (incl. time bucket) and scenario rows, before TSN."""
        e_id = self._lookup("item_table", tokens["item"])
        e_act = self._lookup("action_table", tokens["action"])
        e_side = (self._lookup("cat1_table", tokens["cat1"]) + self._lookup("cat2_table", tokens["cat2"])
                  + self._lookup("seller_table", tokens["seller"])
                  + self._lookup("price_table", tokens["price"])
                  + self._lookup("hour_table", tokens["hour"]))
        e_ctx = self._lookup("scenario_table", tokens["scenario"])
        return e_id + e_act + e_side + e_ctx

    def embed(self, tokens: TokenBatch) -> torch.Tensor:
        return self.tsn_embed(self.raw_embedding(tokens), tokens["kind"])

    # -- forward ------------------------------------------------------------

    def rope(self, tokens: TokenBatch):
        if not self.cfg.sw_rope:
            return None, None
        freqs = rope_frequencies(self.cfg.head_dim, self.cfg.rope_base, self.item_table.dtype)
        angle = tokens["session"].to(freqs.dtype)[..., None] * freqs
        # broadcast over heads: (B, 1, L, hd/2)
        return torch.cos(angle)[:, None], torch.sin(angle)[:, None]

    def forward(self, tokens: TokenBatch | TokenSequence | list) -> HiddenStates:
        if isinstance(tokens, TokenSequence):
            tokens = collate([tokens])
        elif isinstance(tokens, list):
            tokens = collate(tokens)
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} > max_seq_len {self.cfg.max_seq_len}")
        mask = session_mask(tokens)
        cos, sin = self.rope(tokens)
        x = self.embed(tokens)
        layers, loads = [x], []
        for i, block in enumerate(self.blocks):
            entry = self.tsn_entry if i == 0 else None
            x, block_loads = block(x, mask, cos, sin, tokens.valid, entry, tokens["kind"])
            if not torch.isfinite(x).all():
                raise NumericsError(f"non-finite activations in layer {i}")
            layers.append(x)
            if block_loads is not None:
                loads.append(block_loads)
        final = F.layer_norm(x, (x.shape[-1],), self.final_ln, None, LN_EPS)
        return HiddenStates(final, layers, loads, tokens)

    def msp_project(self, h: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """Apply head ``depth - 1`` to rows with depth >= 1; depth-0 rows pass through."""
        out = h
        for d in range(1, self.cfg.msp_heads + 1):
            projected = h @ self.msp_weight[d - 1] + self.msp_bias[d - 1]
            out = torch.where((depth == d)[:, None], projected, out)
        return out

    @torch.no_grad()
    def update_balance(self, loads: list[torch.Tensor]) -> None:
        for layer, layer_loads in zip(self.moe_layers(), loads):
            if layer.num_routed:
                layer.update_balance(layer_loads, self.cfg.moe_gamma)


def expert_size(dim: int, hidden: int) -> int:
    return 2 * dim * hidden + hidden + dim


def parameter_count(cfg: ModelConfig, vocab: Vocab) -> int:
    """Closed-form count of learnable scalars (balance biases are buffers)."""
    dim = cfg.dim
    rows = (vocab.num_items + 1 + NUM_ACTIONS + sum(vocab.side_sizes)
            + NUM_TIME_BUCKETS + 1 + len(vocab.scenarios) + 1)
    total = rows * dim
    total += tsn_parameter_count(cfg)
    hidden = cfg.ffn_mult * dim
    per_block = 2 * dim + 4 * dim * dim
    if cfg.moe:
        per_block += (cfg.moe_shared + cfg.moe_routed) * expert_size(dim, hidden)
        per_block += dim * cfg.moe_routed
    else:
        per_block += expert_size(dim, hidden)
    total += cfg.num_blocks * per_block
    total += dim
    total += cfg.msp_heads * (dim * dim + dim)
    return total


def tsn_parameter_count(cfg: ModelConfig) -> int:
    return 2 * (2 if cfg.tsn else 1) * (cfg.dim * cfg.dim + cfg.dim)


def component_delta(cfg: ModelConfig, component: str) -> int:
    """Parameters removed by switching ``component`` off in ``cfg``."""
    dim = cfg.dim
    if component == "tsn":
        return 2 * (dim * dim + dim) if cfg.tsn else 0
    if component == "msp":
        return cfg.msp_heads * (dim * dim + dim)
    if component == "moe":
        if not cfg.moe:
            return 0
        hidden = cfg.ffn_mult * dim
        extra = (cfg.moe_shared + cfg.moe_routed - 1) * expert_size(dim, hidden) + dim * cfg.moe_routed
        return cfg.num_blocks * extra
    if component == "sw_rope":
        return 0
    raise ValueError(f"unknown component {component!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(cfg: ModelConfig, vocab: Vocab, seed: int, dtype=torch.float64) -> NSPModel:
    model = NSPModel(cfg, vocab).to(dtype)
    model.init_parameters(seed)
    return model
