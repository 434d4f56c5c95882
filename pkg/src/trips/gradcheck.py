"""Reverse-mode gradients through the selection pipeline, checked against finite differences.

The top-k choice is treated as fixed routing: gradients flow through the
attention weights and token values but not through which indices were
picked. A check is only meaningful when finite-difference steps cannot flip
the selection, so every report carries the tie margin of each selection
event and whether the kept sets stayed put during the numeric sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.special import erf

from .attention import CrossAttnLayer, FfnBlock, MhsaLayer, random_cross_attn
from .backbone import ModelConfig, SelectionConfig, ViTTrips, forward, fuse_toy
from .kernels import (
    LinearLayer,
    NonFiniteError,
    SeededRng,
    gelu,
    keep_count,
    layer_norm,
    seeded_init,
    softmax_rows,
    top_k_indices,
)
from .selection import CLS, GuidanceMode, GuidanceSource, TokenSequence

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(eq=False)
class Var:
    tape: "Tape"
    index: int
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    forward: Callable | None
    backward: Callable | None
    value: np.ndarray


class Tape:
    """Records primitive ops with their saved values for one reverse sweep.

    Every op is stored with the closure that produced it, so :meth:`replay`
    can re-run the recorded program from the leaf values.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value, name: str = "leaf") -> Var:
        value = np.array(value, dtype=np.float64)
        self.nodes.append(_Node(name, (), None, None, value))
        return Var(self, len(self.nodes) - 1, value)

    constant = leaf

    def _record(self, op: str, inputs: tuple[Var, ...], fwd, bwd) -> Var:
        value = fwd(*(v.value for v in inputs))
        self.nodes.append(_Node(op, tuple(v.index for v in inputs), fwd, bwd, value))
        return Var(self, len(self.nodes) - 1, value)

    # -- primitives --------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        return self._record("matmul", (a, b), lambda x, y: x @ y, lambda g, out, x, y: (g @ y.T, x.T @ g))

    def weighted_sum(self, weights: Var, rows: Var) -> Var:
        """``weights [1 x m] @ rows [m x d]``."""
        return self._record(
            "weighted_sum", (weights, rows), lambda w, r: w @ r, lambda g, out, w, r: (g @ r.T, w.T @ g)
        )

    def linear(self, x: Var, weight: Var, bias: Var) -> Var:
        return self._record(
            "linear",
            (x, weight, bias),
            lambda x, w, b: x @ w.T + b,
            lambda g, out, x, w, b: (g @ w, g.T @ x, g.sum(axis=0)),
        )

    def add(self, a: Var, b: Var) -> Var:
        return self._record(
            "add", (a, b), lambda x, y: x + y, lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))
        )

    def mul(self, a: Var, b: Var) -> Var:
        return self._record(
            "mul",
            (a, b),
            lambda x, y: x * y,
            lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    def div(self, a: Var, b: Var) -> Var:
        return self._record(
            "div",
            (a, b),
            lambda x, y: x / y,
            lambda g, out, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def scale(self, a: Var, c: float) -> Var:
        return self._record("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))

    def transpose(self, a: Var) -> Var:
        return self._record("transpose", (a,), lambda x: x.T, lambda g, out, x: (g.T,))

    def sum_all(self, a: Var) -> Var:
        return self._record(
            "sum", (a,), lambda x: np.sum(x).reshape(1, 1), lambda g, out, x: (np.full(x.shape, g.item()),)
        )

    def softmax_rows(self, a: Var) -> Var:
        def bwd(g, y, x):
            return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

        return self._record("softmax_rows", (a,), softmax_rows, bwd)

    def layer_norm(self, x: Var, gamma: Var, beta: Var, eps: float) -> Var:
        def bwd(g, out, x, gamma, beta):
            mean = np.mean(x, axis=-1, keepdims=True)
            centered = x - mean
            inv = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
            xhat = centered * inv
            dxhat = g * gamma
            n = x.shape[-1]
            dx = inv / n * (
                n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        return self._record(
            "layer_norm", (x, gamma, beta), lambda x, g_, b_: layer_norm(x, g_, b_, eps), bwd
        )

    def gelu(self, a: Var) -> Var:
        def bwd(g, out, x):
            cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
            return (g * (cdf + x * np.exp(-0.5 * x * x) / _SQRT_2PI),)

        return self._record("gelu", (a,), gelu, bwd)

    def gather_rows(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)

        def bwd(g, out, x):
            grad = np.zeros_like(x)
            np.add.at(grad, idx, g)
            return (grad,)

        return self._record("gather_rows", (a,), lambda x: x[idx], bwd)

    def gather_cols(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)

        def bwd(g, out, x):
            grad = np.zeros_like(x)
            np.add.at(grad.T, idx, g.T)
            return (grad,)

        return self._record("gather_cols", (a,), lambda x: x[:, idx], bwd)

    def concat_rows(self, parts: list[Var]) -> Var:
        sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
        return self._record(
            "concat_rows", tuple(parts), lambda *xs: np.concatenate(xs, axis=0), lambda g, out, *xs: tuple(np.split(g, sizes, axis=0))
        )

    def concat_cols(self, parts: list[Var]) -> Var:
        sizes = np.cumsum([p.shape[1] for p in parts])[:-1]
        return self._record(
            "concat_cols", tuple(parts), lambda *xs: np.concatenate(xs, axis=1), lambda g, out, *xs: tuple(np.split(g, sizes, axis=1))
        )

    # -- sweeps ------------------------------------------------------------

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves in recording order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.value)
            else:
                values.append(node.forward(*(values[i] for i in node.inputs)))
        return values

    def backward(self, output: Var, seed=None) -> dict[int, np.ndarray]:
        """Accumulate d(output)/d(node) for every node; keyed by node index."""
        if seed is None:
            seed = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {output.index: np.asarray(seed, dtype=np.float64)}
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            in_values = [self.nodes[j].value for j in node.inputs]
            for j, gj in zip(node.inputs, node.backward(g, node.value, *in_values)):
                grads[j] = grads[j] + gj if j in grads else gj
        return grads

    def grad(self, output: Var, wrt: list[Var], seed=None) -> list[np.ndarray]:
        grads = self.backward(output, seed)
        return [grads.get(v.index, np.zeros_like(v.value)) for v in wrt]


def backward(tape: Tape, output: Var, seed=None) -> dict[int, np.ndarray]:
    return tape.backward(output, seed)


def numeric_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("function value is not finite")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)`` in the 2-norm; 0 when both vanish."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


# -- tape mirror of the production forward ---------------------------------


class _Params:
    def __init__(self, tape: Tape):
        self.tape = tape

    def linear(self, layer: LinearLayer):
        return self.tape.leaf(layer.weight, "weight"), self.tape.leaf(layer.bias, "bias")

    def norm(self, norm):
        return self.tape.leaf(norm.gamma, "gamma"), self.tape.leaf(norm.beta, "beta"), norm.eps


def _t_linear(tape: Tape, x: Var, wb) -> Var:
    return tape.linear(x, *wb)


def _t_attend(tape: Tape, p: _Params, layer: MhsaLayer, xq: Var, xkv: Var, wq=None):
    wq = wq or p.linear(layer.wq)
    q = _t_linear(tape, xq, wq)
    k = _t_linear(tape, xkv, p.linear(layer.wk))
    v = _t_linear(tape, xkv, p.linear(layer.wv))
    hd = layer.head_dim
    heads_out, maps = [], []
    for h in range(layer.heads):
        cols = np.arange(h * hd, (h + 1) * hd)
        qh, kh, vh = (tape.gather_cols(t, cols) for t in (q, k, v))
        logits = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(hd))
        a = tape.softmax_rows(logits)
        maps.append(a)
        heads_out.append(tape.matmul(a, vh))
    y = _t_linear(tape, tape.concat_cols(heads_out), p.linear(layer.wo))
    return y, maps


def _t_norm(tape: Tape, p: _Params, norm, x: Var) -> Var:
    g, b, eps = p.norm(norm)
    return tape.layer_norm(x, g, b, eps)


def _t_sa_block(tape, p, layer: MhsaLayer, x: Var, norm_first: bool, wq=None):
    if norm_first:
        y, maps = _t_attend(tape, p, layer, *([_t_norm(tape, p, layer.norm, x)] * 2), wq=wq)
        return tape.add(y, x), maps
    y, maps = _t_attend(tape, p, layer, x, x, wq=wq)
    return _t_norm(tape, p, layer.norm, tape.add(y, x)), maps


def _t_ffn_block(tape, p, ffn: FfnBlock, x: Var, norm_first: bool) -> Var:
    inner = _t_norm(tape, p, ffn.norm, x) if norm_first else x
    h = _t_linear(tape, tape.gelu(_t_linear(tape, inner, p.linear(ffn.w1))), p.linear(ffn.w2))
    return tape.add(h, x) if norm_first else _t_norm(tape, p, ffn.norm, tape.add(h, x))


def _t_cross(tape, p, layer: CrossAttnLayer, xq: Var, xkv: Var) -> Var:
    y, _ = _t_attend(tape, p, layer.attn, xq, xkv)
    h = _t_norm(tape, p, layer.attn.norm, tape.add(y, xq))
    return _t_ffn_block(tape, p, layer.ffn, h, False)


def _t_scores(tape, p, mode: GuidanceMode, layer: MhsaLayer, v_post: Var, maps, guidance: Var | None, wq):
    n_total = v_post.shape[0]
    patches = np.arange(1, n_total)
    if mode.needs_guidance_vector:
        q_text = _t_linear(tape, guidance, wq)
        keys = tape.gather_rows(v_post, patches)
        if mode.key_projected:
            keys = _t_linear(tape, keys, p.linear(layer.wk))
        d = v_post.shape[1]
        logits = tape.scale(tape.matmul(q_text, tape.transpose(keys)), 1.0 / math.sqrt(d))
        return tape.softmax_rows(logits)
    rows = [tape.gather_cols(tape.gather_rows(a, [0]), patches) for a in maps]
    total = rows[0]
    for r in rows[1:]:
        total = tape.add(total, r)
    avg = tape.scale(total, 1.0 / len(rows))
    return tape.div(avg, tape.sum_all(avg))


@dataclass
class TapeRun:
    tape: Tape
    loss: Var
    inputs: Var
    guidance: Var | None
    wq: dict[int, Var]
    kept: dict[int, list[int]]
    scores: dict[int, np.ndarray]


def tape_pipeline(model: ViTTrips, tokens, guidance, text_tokens=None, fusion_layers=()) -> TapeRun:
    """Loss = sum of the final visual tokens (+ sum of the fused text when fusion layers are given)."""
    cfg = model.config
    tape = Tape()
    p = _Params(tape)
    x = inputs = tape.leaf(tokens, "inputs")
    g = tape.leaf(np.asarray(guidance).reshape(1, -1), "guidance") if guidance is not None else None
    wq_vars: dict[int, Var] = {}
    kept_sets: dict[int, list[int]] = {}
    score_vals: dict[int, np.ndarray] = {}
    for j, (mhsa, ffn) in enumerate(model.blocks, start=1):
        rate = cfg.selection.rate_at(j)
        if rate is None:
            v, _ = _t_sa_block(tape, p, mhsa, x, cfg.norm_first)
            x = _t_ffn_block(tape, p, ffn, v, cfg.norm_first)
            continue
        wq = p.linear(mhsa.wq)
        wq_vars[j] = wq[0]
        v, maps = _t_sa_block(tape, p, mhsa, x, cfg.norm_first, wq=wq)
        scores = _t_scores(tape, p, cfg.mode, mhsa, v, maps, g, wq)
        n = v.shape[0] - 1
        k = keep_count(n, rate, cfg.selection.rounding)
        kept = top_k_indices(scores.value[0], k)
        dropped = [i for i in range(n) if i not in set(kept)]
        kept_sets[j], score_vals[j] = kept, scores.value[0].copy()
        parts = [tape.gather_rows(v, [0]), tape.gather_rows(v, np.asarray(kept) + 1)]
        if not cfg.mode.disable_fusion:
            if dropped:
                w = tape.gather_cols(scores, dropped)
                parts.append(tape.weighted_sum(w, tape.gather_rows(v, np.asarray(dropped) + 1)))
            else:
                parts.append(tape.constant(np.zeros((1, v.shape[1])), "empty_fusion"))
        x = _t_ffn_block(tape, p, ffn, tape.concat_rows(parts), cfg.norm_first)
    loss = tape.sum_all(x)
    if fusion_layers:
        t = tape.leaf(text_tokens, "text")
        for layer in fusion_layers:
            t = _t_cross(tape, p, layer, t, x)
        loss = tape.add(loss, tape.sum_all(t))
    return TapeRun(tape, loss, inputs, g, wq_vars, kept_sets, score_vals)


# -- the check ---------------------------------------------------------------


@dataclass
class GradReport:
    errors: dict[str, float]
    eps: float
    tie_margin: float
    selection_stable: bool = True
    tolerance: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def valid(self) -> bool:
        """Selection sets were locally constant, so the comparison means something."""
        return self.tie_margin > 10 * self.eps and self.selection_stable

    @property
    def passed(self) -> bool:
        return self.valid and self.max_error <= self.tolerance

    def as_dict(self) -> dict:
        return {
            "errors": self.errors,
            "max_error": self.max_error,
            "eps": self.eps,
            "tie_margin": self.tie_margin,
            "selection_stable": self.selection_stable,
            "valid": self.valid,
            "passed": self.passed,
            "tolerance": self.tolerance,
        }


@dataclass
class GradInstance:
    model: ViTTrips
    tokens: np.ndarray
    guidance: np.ndarray | None
    text_tokens: np.ndarray | None = None
    fusion_layers: list[CrossAttnLayer] = field(default_factory=list)

    @property
    def grid(self) -> tuple[int, int]:
        return (1, self.tokens.shape[0] - 1)


def _replace_wq(model: ViTTrips, layer: int, weight: np.ndarray) -> ViTTrips:
    blocks = list(model.blocks)
    mhsa, ffn = blocks[layer - 1]
    blocks[layer - 1] = (replace(mhsa, wq=LinearLayer(weight, mhsa.wq.bias)), ffn)
    return replace(model, blocks=tuple(blocks))


def _split_model(model: ViTTrips, start: int) -> tuple[ViTTrips | None, ViTTrips]:
    """Layers ``1..start-1`` and ``start..L`` as two stand-alone models."""
    cfg, sel = model.config, model.config.selection
    pairs = list(zip(sel.locations, sel.rates))
    head_sel = [(loc, r) for loc, r in pairs if loc < start]
    tail_sel = [(loc - start + 1, r) for loc, r in pairs if loc >= start]

    def part(blocks, chosen):
        locs, rates = zip(*chosen) if chosen else ((), ())
        part_cfg = replace(cfg, layers=len(blocks), selection=replace(sel, locations=locs, rates=rates))
        return replace(model, config=part_cfg, blocks=tuple(blocks))

    head = part(model.blocks[: start - 1], head_sel) if start > 1 else None
    return head, part(model.blocks[start - 1 :], tail_sel)


def _production_loss(inst: GradInstance, model: ViTTrips, tokens, guidance, start: int = 1, prefix=None):
    """Summed output of the production forward.

    With ``start > 1`` only layers ``start..L`` are run, on ``prefix`` (the
    cached output and kept sets of the earlier, unperturbed layers).
    """
    if start == 1:
        seq = TokenSequence(tokens, np.concatenate([[CLS], np.arange(tokens.shape[0] - 1)]), inst.grid)
        kept = {}
    else:
        seq, kept = prefix
        kept = dict(kept)
    out, trace = forward(_split_model(model, start)[1], seq, guidance)
    loss = float(np.sum(out.tokens))
    if inst.fusion_layers:
        loss += float(np.sum(fuse_toy(inst.text_tokens, out, inst.fusion_layers)))
    kept.update({j + start - 1: o.kept_indices for j, o in trace.outcomes.items()})
    return loss, kept


def check_selection_pipeline(inst: GradInstance, eps: float = 1e-5, tolerance: float = 1e-6) -> GradReport:
    """Analytic (tape) vs numeric (production forward) gradients of the summed output.

    Gradients are taken w.r.t. the input tokens, the guidance vector (when the
    mode uses one) and the shared query weight of every selection layer.
    """
    run = tape_pipeline(inst.model, inst.tokens, inst.guidance, inst.text_tokens, inst.fusion_layers)
    margins = [_tie_margin(run.scores[j], len(run.kept[j])) for j in run.kept]
    tie_margin = min(margins, default=math.inf)
    report = GradReport({}, eps, tie_margin, tolerance=tolerance)
    if not tie_margin > 10 * eps:
        return report

    wanted = {"inputs": run.inputs}
    if run.guidance is not None and inst.model.config.mode.needs_guidance_vector:
        wanted["guidance"] = run.guidance
    for j, v in run.wq.items():
        wanted[f"wq@{j}"] = v
    analytic = dict(zip(wanted, run.tape.grad(run.loss, list(wanted.values()))))

    stable = True
    seq0 = TokenSequence(inst.tokens, np.concatenate([[CLS], np.arange(inst.tokens.shape[0] - 1)]), inst.grid)

    def evaluator(build, start=1):
        # layers before ``start`` do not depend on the perturbed quantity: run them once
        prefix = None
        if start > 1:
            head = _split_model(inst.model, start)[0]
            out, trace = forward(head, seq0, inst.guidance)
            prefix = (out, {j: o.kept_indices for j, o in trace.outcomes.items()})

        def f(x):
            nonlocal stable
            loss, kept = _production_loss(inst, *build(x), start=start, prefix=prefix)
            if kept != run.kept:
                stable = False
            return loss

        return f

    first = min(run.wq, default=1)
    numeric = {
        "inputs": numeric_grad(evaluator(lambda x: (inst.model, x, inst.guidance)), inst.tokens, eps),
    }
    if "guidance" in wanted:
        numeric["guidance"] = numeric_grad(
            evaluator(lambda g: (inst.model, inst.tokens, g), first), inst.guidance, eps
        ).reshape(1, -1)
    for j in run.wq:
        w0 = inst.model.blocks[j - 1][0].wq.weight
        numeric[f"wq@{j}"] = numeric_grad(
            evaluator(lambda w, j=j: (_replace_wq(inst.model, j, w), inst.tokens, inst.guidance), j), w0, eps
        )
    report.errors = {name: relative_error(analytic[name], numeric[name]) for name in wanted}
    report.selection_stable = stable
    return report


def _tie_margin(scores: np.ndarray, k: int) -> float:
    if k >= scores.shape[0]:
        return math.inf
    ordered = np.sort(scores)[::-1]
    return float(ordered[k - 1] - ordered[k])


def random_instance(
    seed: int,
    mode: GuidanceMode = GuidanceMode(),
    width: int = 16,
    heads: int = 2,
    max_patches: int = 20,
    rate: float = 0.6,
    with_fusion: bool = True,
) -> GradInstance:
    """Two-layer model (plain layer, then a selection layer) on random tokens.

    Layer norms carry random affine parameters so the summed output is not
    trivially flat.
    """
    rng = SeededRng(seed)
    n_patches = 4 + int(rng.next_uint64(1)[0] % np.uint64(max_patches - 3))
    cfg = ModelConfig(
        layers=2,
        width=width,
        heads=heads,
        patch_size=1,
        image_size=1,
        selection=SelectionConfig((2,), (rate,)),
        mode=mode,
        seed=int(rng.next_uint64(1)[0]),
    )
    model = ViTTrips.from_seed(cfg, norm_jitter=0.3)
    tokens = seeded_init((n_patches + 1, width), 1.0, rng)
    guidance = seeded_init(width, 1.0, rng) if mode.source is GuidanceSource.TEXT_CLS else None
    inst = GradInstance(model, tokens, guidance)
    if with_fusion:
        inst.text_tokens = seeded_init((3, width), 1.0, rng)
        inst.fusion_layers = [random_cross_attn(rng, width, heads, norm_jitter=0.3)]
    return inst


def valid_instance(seed: int, mode: GuidanceMode = GuidanceMode(), eps: float = 1e-5, **kwargs) -> GradInstance:
    """First instance at or after ``seed`` whose tie margin clears ``10 * eps``."""
    for attempt in range(1000):
        inst = random_instance(seed * 1000 + attempt, mode, **kwargs)
        run = tape_pipeline(inst.model, inst.tokens, inst.guidance)
        if all(_tie_margin(run.scores[j], len(run.kept[j])) > 10 * eps for j in run.kept):
            return inst
    raise RuntimeError("could not draw a well-separated instance")
