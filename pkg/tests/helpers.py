"""Shared test doubles."""
import math

from samcoevo.dispatch import OK, EvalResult


class FakeEvaluator:
    """Cheap deterministic stand-in for the physics: a smooth function of the weights."""

    def __init__(self):
        self.calls = []

    def __call__(self, pairs):
        pairs = list(pairs)
        self.calls.append(len(pairs))
        out = []
        for sam, con in pairs:
            ws = sum(c.weight for c in sam.connections if c.enabled)
            wc = sum(c.weight for c in con.connections if c.enabled)
            out.append(EvalResult(None, OK, 1 / (1 + math.exp(-(ws - abs(wc - 1)))), 0.0))
        return out
