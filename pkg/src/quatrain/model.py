"""Attentive encoder-decoder with an incrementally built salient clue.

The decoder attends over the preceding line; after each generated line the
most salient source characters (by attention mass, optionally tf-idf
weighted) are selected and folded into a clue vector that conditions the
output layer for the rest of the poem. Two clue layouts are supported:

* ``sdu`` - a fixed-width vector merged with each new selection through a
  tanh layer;
* ``ssi`` - selected states are projected to a small width and appended
  into a zero-padded buffer with a fill cursor, keeping each selected
  state's identity separate.

An extension vector (keyword intent and/or style embedding) can be
concatenated to the clue. The maxout output layer always allocates slots
for both extensions; disabled extensions are fed zeros, which keeps
parameter shapes stable when a plain model is later fine-tuned with style.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import FORM_LENGTH

EXT_KINDS = ("none", "intent", "style", "intent+style")
CLUE_MODES = ("sdu", "ssi")
SALIENCY_KINDS = ("naive", "tfidf")

K_BY_FORM = {"wujue": 2, "qijue": 3}
CLUE_UPDATES_PER_POEM = 3  # lines 1..3 each contribute one selection


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 256
    dec_hidden: int = 512
    enc_hidden: int = 0          # per direction; 0 -> dec_hidden // 2
    attn_dim: int = 512
    maxout_pieces: int = 2
    maxout_dim: int = 512
    clue_mode: str = "sdu"
    clue_dim: int = 0            # sdu clue width; 0 -> dec_hidden
    ssi_proj_dim: int = 100
    intent_dim: int = 128
    style_dim: int = 64
    n_styles: int = 4
    ext_kinds: str = "none"
    saliency: str = "tfidf"
    forms: tuple = ("wujue", "qijue")
    detach_clue: bool = False
    init_scale: float = 0.08

    def __post_init__(self):
        if self.enc_hidden == 0:
            self.enc_hidden = self.dec_hidden // 2
        if self.clue_dim == 0:
            self.clue_dim = self.dec_hidden
        if self.clue_mode not in CLUE_MODES:
            raise ValueError(f"clue_mode must be one of {CLUE_MODES}")
        if self.ext_kinds not in EXT_KINDS:
            raise ValueError(f"ext_kinds must be one of {EXT_KINDS}")
        if self.saliency not in SALIENCY_KINDS:
            raise ValueError(f"saliency must be one of {SALIENCY_KINDS}")
        for form in self.forms:
            if form not in FORM_LENGTH:
                raise ValueError(f"unknown form {form!r}")

    @property
    def ctx_dim(self) -> int:
        return 2 * self.enc_hidden

    def ssi_capacity(self, form: str) -> int:
        return self.ssi_proj_dim * CLUE_UPDATES_PER_POEM * K_BY_FORM[form]

    @property
    def clue_slot(self) -> int:
        if self.clue_mode == "sdu":
            return self.clue_dim
        return max(self.ssi_capacity(form) for form in self.forms)

    @property
    def ext_slot(self) -> int:
        return self.intent_dim + self.style_dim

    @property
    def maxout_in(self) -> int:
        return (self.dec_hidden + self.emb_dim + self.ctx_dim
                + self.clue_slot + self.ext_slot)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["forms"] = list(self.forms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["forms"] = tuple(d["forms"])
        return cls(**d)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    he, hd = cfg.enc_hidden, cfg.dec_hidden
    c = cfg.ctx_dim
    return {
        "emb": (cfg.vocab_size, cfg.emb_dim),
        "enc_f_wx": (cfg.emb_dim, 4 * he),
        "enc_f_wh": (he, 4 * he),
        "enc_f_b": (4 * he,),
        "enc_b_wx": (cfg.emb_dim, 4 * he),
        "enc_b_wh": (he, 4 * he),
        "enc_b_b": (4 * he,),
        "dec_wx": (cfg.emb_dim + c, 4 * hd),
        "dec_wh": (hd, 4 * hd),
        "dec_b": (4 * hd,),
        "att_we": (c, cfg.attn_dim),
        "att_wd": (hd, cfg.attn_dim),
        "att_v": (cfg.attn_dim, 1),
        "mo_w": (cfg.maxout_in, cfg.maxout_pieces * cfg.maxout_dim),
        "mo_b": (cfg.maxout_pieces * cfg.maxout_dim,),
        "out_w": (cfg.maxout_dim, cfg.vocab_size),
        "out_b": (cfg.vocab_size,),
        "sdu_w": (cfg.clue_dim + c, cfg.clue_dim),
        "sdu_b": (cfg.clue_dim,),
        "ssi_w": (c, cfg.ssi_proj_dim),
        "ssi_b": (cfg.ssi_proj_dim,),
        "int_w": (c, cfg.intent_dim),
        "int_b": (cfg.intent_dim,),
        "style_emb": (cfg.n_styles, cfg.style_dim),
    }


class ModelParams:
    """Named parameter tensors in a fixed, checkpoint-stable order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        scale = cfg.init_scale
        tensors = {
            name: Tensor(rng.uniform(-scale, scale, size=shape))
            for name, shape in _param_shapes(cfg).items()
        }
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def as_list(self) -> list[Tensor]:
        return list(self.tensors.values())

    def validate(self, cfg: ModelConfig):
        for name, shape in _param_shapes(cfg).items():
            got = self.tensors[name].data.shape
            if got != shape:
                raise ad.ShapeError(f"param {name}: expected {shape}, got {got}")


@dataclass
class AttentionTrace:
    """Alignment matrix between a source line and a generated line.

    ``matrix`` is (B, T_out, T_in): row t is the attention distribution used
    when emitting output character t. ``enc_states`` are the source encoder
    states the rows point into.
    """

    matrix: Tensor
    enc_states: Tensor


@dataclass
class ClueState:
    """The clue vector threaded across a poem.

    sdu: ``v`` is (B, clue_dim) and keeps that width for the whole poem.
    ssi: ``v`` is (B, capacity) zero-padded, written left to right at
    ``cursor`` (one per batch element).
    """

    mode: str
    v: Tensor
    line_index: int = 0
    capacity: int | None = None
    cursor: np.ndarray | None = None


@dataclass
class ExtensionVector:
    """Intent and/or style conditioning, fixed for a whole poem."""

    kind: str
    vec: Tensor | None  # (B, dim); None for kind == "none"


@dataclass
class StepResult:
    logits: Tensor       # (B, V)
    probs: Tensor        # (B, V)
    alpha: Tensor        # (B, S) attention row
    context: Tensor      # (B, ctx_dim)


def _lstm_step(x, h, c, wx, wh, b, hidden,
               mask_col: np.ndarray | None = None):
    z = x @ wx + h @ wh + b
    i = ad.sigmoid(z[:, 0:hidden])
    f = ad.sigmoid(z[:, hidden:2 * hidden])
    g = ad.tanh(z[:, 2 * hidden:3 * hidden])
    o = ad.sigmoid(z[:, 3 * hidden:4 * hidden])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if mask_col is not None:
        # padded steps pass the previous state through untouched
        keep = 1.0 - mask_col
        h_new = h_new * mask_col + h * keep
        c_new = c_new * mask_col + c * keep
    return h_new, c_new


class Model:
    """Parameters plus every forward operation of the architecture."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        params.validate(cfg)
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(cfg, ModelParams.init(cfg, rng))

    # -- encoder ------------------------------------------------------------

    def encode(self, ids, mask: np.ndarray | None = None) -> Tensor:
        """Bidirectional LSTM over character ids (B, S) -> states (B, S, 2*He).

        Each state is the concatenation of the forward and backward hidden
        states at that position. `mask` (B, S of 0/1) freezes the recurrence
        on padded positions so padding cannot leak into real states.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] < 1:
            raise ad.ShapeError("encode: empty input line")
        b, s = ids.shape
        p = self.params
        x = ad.gather_rows(p["emb"], ids)  # (B, S, E)
        he = self.cfg.enc_hidden
        zero = Tensor(np.zeros((b, he)))

        def run(direction, wx, wh, bias):
            h, c = zero, zero
            states = [None] * s
            steps = range(s) if direction > 0 else range(s - 1, -1, -1)
            for t in steps:
                col = None if mask is None else mask[:, t:t + 1]
                h, c = _lstm_step(x[:, t, :], h, c, wx, wh, bias, he, col)
                states[t] = h
            return states

        fwd = run(+1, p["enc_f_wx"], p["enc_f_wh"], p["enc_f_b"])
        bwd = run(-1, p["enc_b_wx"], p["enc_b_wh"], p["enc_b_b"])
        return ad.stack([ad.concat([f, bb], axis=-1) for f, bb in zip(fwd, bwd)],
                        axis=1)

    # -- extensions ----------------------------------------------------------

    def make_intent_vector(self, keyword_states: Tensor,
                           mask: np.ndarray | None = None) -> ExtensionVector:
        """tanh projection of the mean keyword encoder state, dim intent_dim."""
        if keyword_states.data.shape[1] < 1:
            raise ad.ShapeError("intent vector needs a nonempty keyword")
        if mask is None:
            avg = ad.mean(keyword_states, axis=1)
        else:
            counts = mask.sum(axis=1, keepdims=True)
            avg = ad.sum_(keyword_states * mask[:, :, None], axis=1) \
                * (1.0 / counts)
        vec = ad.tanh(avg @ self.params["int_w"] + self.params["int_b"])
        return ExtensionVector("intent", vec)

    def make_style_vector(self, style_ids) -> ExtensionVector:
        """Style embedding lookup, dim style_dim; learned in fine-tuning."""
        ids = np.asarray(style_ids)
        if ids.min() < 0 or ids.max() >= self.cfg.n_styles:
            raise ValueError(f"style id out of range 0..{self.cfg.n_styles - 1}")
        return ExtensionVector("style", ad.gather_rows(self.params["style_emb"], ids))

    def extension_slot(self, ext: ExtensionVector | None, batch: int) -> Tensor:
        """Map an extension vector into the fixed [intent; style] layout,
        zero-filling whatever the configured kinds leave out."""
        cfg = self.cfg
        kind = "none" if ext is None else ext.kind
        if kind != cfg.ext_kinds:
            raise ad.ShapeError(
                f"extension {kind!r} does not match configured {cfg.ext_kinds!r}")
        if kind == "none":
            return Tensor(np.zeros((batch, cfg.ext_slot)))
        zeros_i = Tensor(np.zeros((batch, cfg.intent_dim)))
        zeros_s = Tensor(np.zeros((batch, cfg.style_dim)))
        if kind == "intent":
            return ad.concat([ext.vec, zeros_s], axis=-1)
        if kind == "style":
            return ad.concat([zeros_i, ext.vec], axis=-1)
        return ext.vec  # intent+style already spans the slot

    def combine_extensions(self, intent: ExtensionVector | None,
                           style: ExtensionVector | None) -> ExtensionVector | None:
        if intent is not None and style is not None:
            return ExtensionVector("intent+style",
                                   ad.concat([intent.vec, style.vec], axis=-1))
        return intent or style

    # -- clue ---------------------------------------------------------------

    def clue_init(self, batch: int, form: str) -> ClueState:
        cfg = self.cfg
        if cfg.clue_mode == "sdu":
            return ClueState("sdu", Tensor(np.zeros((batch, cfg.clue_dim))))
        cap = cfg.ssi_capacity(form)
        return ClueState("ssi", Tensor(np.zeros((batch, cap))), capacity=cap,
                         cursor=np.zeros(batch, dtype=int))

    def clue_feed(self, state: ClueState) -> Tensor:
        """The clue as seen by the output layer (ssi padded to its slot)."""
        v = state.v
        if self.cfg.detach_clue:
            v = ad.stop_gradient(v)
        pad = self.cfg.clue_slot - v.data.shape[1]
        if pad:
            v = ad.concat([v, Tensor(np.zeros((v.data.shape[0], pad)))], axis=-1)
        return v

    def update_clue_sdu(self, state: ClueState, selections, scores: Tensor,
                        enc_states: Tensor) -> ClueState:
        """Merge the score-weighted average of the selected encoder states
        into the clue through a tanh layer. Empty selections leave the
        corresponding row untouched."""
        if state.mode != "sdu":
            raise ValueError("update_clue_sdu on a non-sdu clue state")
        b, s, _ = enc_states.data.shape
        sel_mask = np.zeros((b, s))
        hit = np.zeros((b, 1))
        for i, sel in enumerate(selections):
            for j in sel:
                if not 0 <= j < s:
                    raise IndexError(f"selected index {j} outside source length {s}")
                sel_mask[i, j] = 1.0
            if sel:
                hit[i, 0] = 1.0
        wr = scores * sel_mask
        denom = ad.sum_(wr, axis=1, keepdims=True) + (1.0 - hit)
        merged = ad.weighted_sum(wr, enc_states) / denom
        upd = ad.tanh(ad.concat([state.v, merged], axis=-1)
                      @ self.params["sdu_w"] + self.params["sdu_b"])
        v = upd * hit + state.v * (1.0 - hit)
        return ClueState("sdu", v, line_index=state.line_index + 1)

    def update_clue_ssi(self, state: ClueState, selections,
                        enc_states: Tensor) -> ClueState:
        """Project each selected state to ssi_proj_dim and append it at the
        fill cursor; untouched capacity stays zero."""
        if state.mode != "ssi":
            raise ValueError("update_clue_ssi on a non-ssi clue state")
        cfg = self.cfg
        b, s, _ = enc_states.data.shape
        width = cfg.ssi_proj_dim
        cap = state.capacity
        rows = []
        cursor = state.cursor.copy()
        for i, sel in enumerate(selections):
            if not sel:
                rows.append(state.v[i, :])
                continue
            for j in sel:
                if not 0 <= j < s:
                    raise IndexError(f"selected index {j} outside source length {s}")
            n = len(sel)
            cur = int(cursor[i])
            if cur + width * n > cap:
                raise ad.ShapeError(
                    f"ssi clue overflow: cursor {cur} + {width * n} > capacity {cap}")
            picked = enc_states[i, np.asarray(sel), :]
            proj = ad.tanh(picked @ self.params["ssi_w"] + self.params["ssi_b"])
            flat = ad.reshape(proj, (width * n,))
            parts = [flat if cur == 0 else ad.concat([state.v[i, 0:cur], flat], axis=0)]
            tail = cap - cur - width * n
            if tail:
                parts.append(state.v[i, cap - tail:cap])
            rows.append(parts[0] if len(parts) == 1 else ad.concat(parts, axis=0))
            cursor[i] = cur + width * n
        return ClueState("ssi", ad.stack(rows, axis=0),
                         line_index=state.line_index + 1,
                         capacity=cap, cursor=cursor)

    def update_clue(self, state, selections, scores, enc_states) -> ClueState:
        if state.mode == "sdu":
            return self.update_clue_sdu(state, selections, scores, enc_states)
        return self.update_clue_ssi(state, selections, enc_states)

    # -- decoder ------------------------------------------------------------

    def decode_session(self, enc_states: Tensor, clue: ClueState,
                       ext: ExtensionVector | None,
                       src_mask: np.ndarray | None = None) -> "DecodeSession":
        return DecodeSession(self, enc_states, clue, ext, src_mask)


class DecodeSession:
    """One line's decode: holds decoder state, the clue/extension slots and
    the attention rows accumulated so far."""

    def __init__(self, model: Model, enc_states: Tensor, clue: ClueState,
                 ext: ExtensionVector | None, src_mask: np.ndarray | None):
        cfg = model.cfg
        b, s, c = enc_states.data.shape
        if c != cfg.ctx_dim:
            raise ad.ShapeError(
                f"encoder states last dim {c} != configured {cfg.ctx_dim}")
        self.model = model
        self.enc_states = enc_states
        self.keys = enc_states @ model.params["att_we"]  # (B, S, A)
        self.bias = None if src_mask is None else (src_mask - 1.0) * 1e9
        self.clue_vec = model.clue_feed(clue)
        self.ext_vec = model.extension_slot(ext, b)
        if self.clue_vec.data.shape != (b, cfg.clue_slot):
            raise ad.ShapeError(
                f"clue slot {self.clue_vec.data.shape} != {(b, cfg.clue_slot)}")
        self.h = Tensor(np.zeros((b, cfg.dec_hidden)))
        self.c = Tensor(np.zeros((b, cfg.dec_hidden)))
        self.rows: list[Tensor] = []

    def step(self, prev_ids) -> StepResult:
        """Advance one character: returns the attention row, the local
        context and the next-character distribution (rows sum to 1)."""
        m = self.model
        p = m.params
        cfg = m.cfg
        e_prev = ad.gather_rows(p["emb"], np.asarray(prev_ids))  # (B, E)
        q = self.h @ p["att_wd"]                                  # (B, A)
        scores = ad.reshape(
            ad.tanh(self.keys + ad.reshape(q, (q.data.shape[0], 1, -1)))
            @ p["att_v"],
            self.keys.data.shape[:2])                             # (B, S)
        if self.bias is not None:
            scores = scores + self.bias
        alpha = ad.softmax(scores, axis=-1)
        ctx = ad.weighted_sum(alpha, self.enc_states)             # (B, C)
        x = ad.concat([e_prev, ctx], axis=-1)
        self.h, self.c = _lstm_step(x, self.h, self.c, p["dec_wx"], p["dec_wh"],
                                    p["dec_b"], cfg.dec_hidden)
        z = ad.concat([self.h, e_prev, ctx, self.clue_vec, self.ext_vec], axis=-1)
        pieces = ad.reshape(z @ p["mo_w"] + p["mo_b"],
                            (z.data.shape[0], cfg.maxout_pieces, cfg.maxout_dim))
        mo = ad.max_over_pieces(pieces, axis=1)
        logits = mo @ p["out_w"] + p["out_b"]
        self.rows.append(alpha)
        return StepResult(logits=logits, probs=ad.softmax(logits, axis=-1),
                          alpha=alpha, context=ctx)

    def reorder(self, index: np.ndarray):
        """Reindex the session along the batch axis (beam search bookkeeping).
        Only valid when all per-batch conditioning is identical or gathered
        consistently; used outside any tape."""
        self.h = Tensor(self.h.data[index])
        self.c = Tensor(self.c.data[index])
        self.rows = [Tensor(r.data[index]) for r in self.rows]

    def trace(self) -> AttentionTrace:
        if not self.rows:
            raise ad.ShapeError("no decode steps recorded yet")
        return AttentionTrace(matrix=ad.stack(self.rows, axis=1),
                              enc_states=self.enc_states)


# ---------------------------------------------------------------------------
# saliency


def saliency_naive(trace: AttentionTrace) -> Tensor:
    """Column mass of the alignment matrix, normalized to sum to 1."""
    col = ad.sum_(trace.matrix, axis=1)                   # (B, S)
    total = ad.sum_(trace.matrix, axis=(1, 2), keepdims=False)
    return col / ad.reshape(total, (-1, 1))


def saliency_tfidf(trace: AttentionTrace, w_in, w_out) -> Tensor:
    """Row weights folded through the alignment matrix, then gated by the
    source weights: (w_out . A) * w_in, no renormalization."""
    a = trace.matrix
    b, t, s = a.data.shape
    w_in = np.asarray(w_in, dtype=float).reshape(b, -1)
    w_out = np.asarray(w_out, dtype=float).reshape(b, -1)
    if w_in.shape[1] != s:
        raise ad.ShapeError(f"w_in length {w_in.shape[1]} != source length {s}")
    if w_out.shape[1] != t:
        raise ad.ShapeError(f"w_out length {w_out.shape[1]} != output length {t}")
    folded = ad.reshape(ad.reshape(Tensor(w_out), (b, 1, t)) @ a, (b, s))
    return folded * w_in


def select_salient(r, k: int):
    """Thresholded selection of up to k salient positions.

    Sorts scores descending (ties by ascending index), starts the bar at
    mean + 0.5 * population std, multiplies it by 0.618 after each
    acceptance, and stops at the first rejected score. May select nothing.
    """
    r = np.asarray(r, dtype=float).reshape(-1)
    if r.size < 1 or k < 1:
        raise ValueError("select_salient needs a nonempty score vector and k >= 1")
    order = np.argsort(-r, kind="stable")
    val = r.mean() + 0.5 * r.std()
    picked: list[int] = []
    limit = min(k, r.size)
    while len(picked) < limit and r[order[len(picked)]] >= val:
        picked.append(int(order[len(picked)]))
        val *= 0.618
    return len(picked), picked


def select_salient_batch(scores: Tensor, k: int) -> list[list[int]]:
    return [select_salient(row, k)[1] for row in scores.data]
