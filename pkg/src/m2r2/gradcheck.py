"""Gradient verification: reverse-mode derivatives against central differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import Tensor, backward, zero_grads

__all__ = ["GradCheckResult", "AuditEntry", "grad_check", "run_gradient_audit"]

# relative error uses an absolute floor so near-zero gradients do not blow
# up the ratio; finite-difference noise sits around 1e-9 for these scales
REL_ERR_FLOOR = 1e-4


@dataclass
class GradCheckResult:
    max_rel_err: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar function to central differences.

    ``f`` must be deterministic and must not mutate ``params``; it is
    re-evaluated with each parameter coordinate displaced by ``±step``.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    y1 = f().item()
    y2 = f().item()
    if y1 != y2:
        raise RuntimeError(
            f"function is not deterministic: two evaluations gave {y1!r} and {y2!r}"
        )

    zero_grads(params.values())
    out = f()
    backward(out)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }

    per_param: dict[str, float] = {}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            y_plus = f().item()
            flat[i] = saved - step
            y_minus = f().item()
            flat[i] = saved
            numeric = (y_plus - y_minus) / (2.0 * step)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            if rel > err:
                err = rel
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckResult(max_rel_err=worst, per_param=per_param, tol=tol)


@dataclass
class AuditEntry:
    name: str
    max_rel_err: float
    tol: float
    passed: bool


@dataclass
class AuditReport:
    entries: list[AuditEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if e.passed else 'FAIL'}  {e.name:40s} "
            f"max_rel_err={e.max_rel_err:.3e}  tol={e.tol:.0e}"
            for e in self.entries
        ]


def _op_checks(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], dict]]:
    from . import engine as en

    def pvec(n=5):
        return Tensor(rng.normal(size=n), requires_grad=True)

    def mix(n=5):
        return Tensor(rng.normal(size=n))

    checks = []

    x = pvec()
    w = mix()
    for kind in ("sigmoid", "tanh", "relu", "leaky_relu", "neg", "square"):
        xx, ww = pvec(), mix()
        fn = en.ELEMENTWISE_KINDS[kind]
        checks.append(
            (f"op:{kind}", (lambda fn=fn, xx=xx, ww=ww: (fn(xx) * ww).sum()), {"x": xx})
        )
    for kind in ("add", "mul", "sub"):
        aa, bb, ww = pvec(), pvec(), mix()
        fn = en.ELEMENTWISE_KINDS[kind]
        checks.append(
            (
                f"op:{kind}",
                (lambda fn=fn, aa=aa, bb=bb, ww=ww: (fn(aa, bb) * ww).sum()),
                {"a": aa, "b": bb},
            )
        )

    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    B = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    W = Tensor(rng.normal(size=(3, 2)))
    checks.append(
        ("op:matmul", lambda: (en.matmul(A, B) * W).sum(), {"A": A, "B": B})
    )

    c1, c2, cw = pvec(3), pvec(4), mix(7)
    checks.append(
        ("op:concat", lambda: (en.concat([c1, c2]) * cw).sum(), {"a": c1, "b": c2})
    )

    sx, sw = pvec(6), mix(6)
    checks.append(("op:softmax", lambda: (en.softmax(sx) * sw).sum(), {"x": sx}))

    lx = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
    lw = mix()
    checks.append(("op:log", lambda: (en.log(lx) * lw).sum(), {"x": lx}))
    qx = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
    checks.append(("op:sqrt", lambda: (en.sqrt(qx) * lw).sum(), {"x": qx}))

    px = pvec(6)
    checks.append(("op:pick", lambda: en.pick(px, 2) * 3.0, {"x": px}))

    rx = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    rw = Tensor(rng.normal(size=(3, 2)))
    checks.append(
        ("op:reshape", lambda: (en.reshape(rx, (3, 2)) * rw).sum(), {"x": rx})
    )

    bx = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    bg = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    bb = Tensor(rng.normal(size=3), requires_grad=True)
    bw_mix = Tensor(rng.normal(size=(6, 3)))

    def bn_fn():
        rm = np.zeros(3)
        rv = np.ones(3)
        return (
            en.batch_norm(bx, bg, bb, rm, rv, training=True) * bw_mix
        ).sum()

    checks.append(("op:batch_norm", bn_fn, {"x": bx, "gamma": bg, "beta": bb}))
    return checks


def _gru_check(rng: np.random.Generator):
    from .panet import gru_cell, init_gru_weights

    weights = init_gru_weights(rng, input_dim=5, hidden_dim=4, prefix="g")
    x = Tensor(rng.normal(size=5), requires_grad=True)
    h = Tensor(rng.normal(size=4), requires_grad=True)
    w = Tensor(rng.normal(size=4))
    params = dict(weights)
    params["x"] = x
    params["h"] = h

    def fn():
        return (gru_cell(x, h, weights, "g") * w).sum()

    return fn, params


def _panet_check(rng: np.random.Generator, turns: int):
    from .data import SynthSpec, generate_synthetic
    from .panet import PANetConfig, erc_loss, forward_conversation, init_panet_params

    spec = SynthSpec(
        seed=int(rng.integers(1 << 31)),
        num_parties=2,
        num_classes=2,
        turn_range=(turns, turns),
        dims={"audio": 2, "text": 2, "visual": 2},
        noise_sigma=0.5,
        context_rho=0.5,
    )
    ds = generate_synthetic(spec, 1)
    conv = ds.conversations[0]
    cfg = PANetConfig(
        feature_dims=ds.dims,
        d_global=3,
        d_party=3,
        d_emotion=4,
        q_max=2,
        num_classes=2,
    )
    params = init_panet_params(cfg, seed=int(rng.integers(1 << 31)))

    def fn():
        trace = forward_conversation(conv, params, cfg)
        labels = [u.label for u in conv.utterances]
        return erc_loss(trace, labels, params, l2_weight=1e-3)

    return fn, params


def _crl_check(rng: np.random.Generator):
    from .crl import CrlConfig, composite_loss, init_crl_state
    from .data import SynthSpec, generate_synthetic, generate_mask, apply_mask

    spec = SynthSpec(
        seed=int(rng.integers(1 << 31)),
        num_parties=2,
        num_classes=2,
        turn_range=(4, 4),
        dims={"audio": 2, "text": 2, "visual": 2},
        noise_sigma=0.5,
        context_rho=0.0,
    )
    ds = generate_synthetic(spec, 1)
    masks = generate_mask(ds, 0.4, seed=int(rng.integers(1 << 31)))
    ds = apply_mask(ds, masks)
    cfg = CrlConfig(h_dim=3, hidden_widths=(4,), critic_widths=(4,))
    state = init_crl_state(
        ds, cfg, modality_dims=dict(ds.dims), seed=int(rng.integers(1 << 31))
    )
    state.refresh_centroids(ds)
    conv = ds.conversations[0]

    params: dict[str, Tensor] = {}
    for key, h in state.h_table.items():
        params[f"h:{key[0]}:{key[1]}"] = h
    for mod, gen in state.generators.items():
        for k, t in gen.parameters().items():
            params[f"gen:{mod}:{k}"] = t
    for mod, critic in state.critics.items():
        for k, t in critic.parameters().items():
            params[f"critic:{mod}:{k}"] = t

    def fn():
        return composite_loss(conv, state, cfg)

    return fn, params


def run_gradient_audit(seeds: int = 20, op_tol: float = 1e-4, composite_tol: float = 1e-3) -> AuditReport:
    """Finite-difference audit of every registered op plus the model composites.

    Per seed: all engine ops at ``op_tol``; a recurrent gate cell at
    ``op_tol``; a one-turn and a three-turn conversation loss and the full
    common-representation objective (with its finite-difference gradient
    penalty surrogate) at ``composite_tol``.
    """
    report = AuditReport()
    worst: dict[str, AuditEntry] = {}

    def run(name, fn, params, tol):
        res = grad_check(fn, params, tol=tol)
        prev = worst.get(name)
        if prev is None or res.max_rel_err > prev.max_rel_err:
            worst[name] = AuditEntry(
                name=name, max_rel_err=res.max_rel_err, tol=tol, passed=res.passed
            )

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, params in _op_checks(rng):
            run(name, fn, params, op_tol)
        fn, params = _gru_check(rng)
        run("gru_cell", fn, params, op_tol)
        fn, params = _panet_check(rng, turns=1)
        run("panet_single_turn_loss", fn, params, composite_tol)
        fn, params = _panet_check(rng, turns=3)
        run("panet_three_turn_loss", fn, params, composite_tol)
        fn, params = _crl_check(rng)
        run("crl_composite_loss", fn, params, composite_tol)

    report.entries = list(worst.values())
    return report
