"""AdamW over named blocks, block selection expressions, and hybrid initialization."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, init_params

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)  # per block, so frozen blocks keep their count

    @property
    def t(self) -> int:
        return max(self.steps.values(), default=0)


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
    weight_decay: float = 0.0,
    frozen=frozenset(),
) -> tuple[dict, AdamWState]:
    """One decoupled-weight-decay Adam step. Returns new params; ``state`` is updated in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    frozen = set(frozen)
    unknown = frozen - set(params)
    if unknown:
        raise KeyError(f"frozen blocks not in params: {sorted(unknown)}")
    for name in params:
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in block {name!r}")

    new = {}
    for name, theta in params.items():
        if name in frozen:
            new[name] = theta
            continue
        g = grads[name]
        t = state.steps.get(name, 0) + 1
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new[name] = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
        state.m[name], state.v[name], state.steps[name] = m, v, t
    return new, state


# ------------------------------------------------------------- selections

SELECTORS = ("attention", "qk", "mlp", "norm", "encoder", "heads", "all", "none")


def _selector_members(sel: str, names) -> set[str]:
    if sel == "all":
        return set(names)
    if sel == "none":
        return set()
    pattern = {
        "attention": r"layer\d+\.W[QKVO]$",
        "qk": r"layer\d+\.W[QK]$",
        "mlp": r"layer\d+\.mlp\.",
        "norm": r"(layer\d+\.ln\d\.|final_norm\.)",
        "encoder": r"encoder\.",
        "heads": r"head\.",
    }[sel]
    return {n for n in names if re.match(pattern, n)}


_TOKEN = re.compile(r"\s*(\(|\)|\+|\||\\|~|[A-Za-z_][\w.]*)")


def _tokenize(expr: str) -> list[str]:
    pos, out = 0, []
    expr = expr.strip()
    while pos < len(expr):
        m = _TOKEN.match(expr, pos)
        if not m:
            raise ValueError(f"malformed selection expression at {expr[pos:]!r}")
        out.append(m.group(1))
        pos = m.end()
        while pos < len(expr) and expr[pos].isspace():
            pos += 1
    return out


def select_params(expr: str, registry) -> tuple[str, ...]:
    """Resolve a selection expression against block names.

    Grammar: ``term (('+' | '|' | '\\') term)*`` evaluated left to right, where
    ``+``/``|`` is union and ``\\`` is set difference; a term is a selector
    name, an exact block name, ``~term`` (complement) or a parenthesised
    expression. Example: ``all \\ qk`` or ``attention + norm + encoder``.
    """
    names = sorted(registry)
    universe = set(names)
    tokens = _tokenize(expr)
    if not tokens:
        raise ValueError("empty selection expression")
    pos = 0

    def term():
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError(f"selection expression ends early: {expr!r}")
        tok = tokens[pos]
        pos += 1
        if tok == "~":
            return universe - term()
        if tok == "(":
            val = expression()
            if pos >= len(tokens) or tokens[pos] != ")":
                raise ValueError(f"unbalanced parentheses in {expr!r}")
            pos += 1
            return val
        if tok in SELECTORS:
            return _selector_members(tok, names)
        if tok in universe:
            return {tok}
        raise ValueError(f"unknown selector or block {tok!r}")

    def expression():
        nonlocal pos
        val = term()
        while pos < len(tokens) and tokens[pos] in ("+", "|", "\\"):
            op = tokens[pos]
            pos += 1
            rhs = term()
            val = val - rhs if op == "\\" else val | rhs
        return val

    result = expression()
    if pos != len(tokens):
        raise ValueError(f"unexpected token {tokens[pos]!r} in {expr!r}")
    return tuple(sorted(result))


def hybrid_init(spt_ckpt, seed: int, selection, cfg: ModelConfig | None = None) -> dict:
    """Selected blocks copied from the checkpoint, the rest freshly initialised with ``seed``."""
    if cfg is not None and cfg != spt_ckpt.config:
        raise ValueError("checkpoint config does not match the target config")
    cfg = spt_ckpt.config
    fresh = init_params(cfg, seed)
    selection = set(selection)
    unknown = selection - set(fresh)
    if unknown:
        raise KeyError(f"selection names unknown blocks: {sorted(unknown)}")
    return {k: (spt_ckpt.params[k].copy() if k in selection else v) for k, v in fresh.items()}
