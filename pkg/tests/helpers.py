"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np

from vqdisc.autodiff import Tape, Var


def numeric_grad(forward, x: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of a scalar-valued ``forward()`` w.r.t. the
    array ``x``, which forward must read in place."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(forward())
        flat[i] = orig - eps
        fm = float(forward())
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_gradients(build, inputs: dict, eps: float = 1e-5,
                       tol: float = 1e-6, seed: int = 0) -> dict:
    """Check analytic gradients of an op against finite differences.

    ``build(tape, vars)`` must return an output Var; the scalar loss is a
    fixed random projection of the output so every element matters.
    ``inputs`` maps name -> ndarray; every input is differentiated.
    Returns the per-input relative errors (all asserted < tol).
    """
    rng = np.random.default_rng(seed)
    vars_ = {k: Var(v) for k, v in inputs.items()}
    tape = Tape()
    out = build(tape, vars_)
    proj = rng.standard_normal(out.data.shape)

    # scalarize via the same projection for both analytic and numeric passes
    loss = Var(np.sum(out.data * proj))

    def proj_backward():
        out.accum(proj.astype(out.data.dtype) * loss.grad)

    tape.record(proj_backward)
    tape.backward(loss)

    errs = {}
    for name, v in vars_.items():
        def forward(v=v):
            t2 = Tape()
            o2 = build(t2, vars_)
            return np.sum(o2.data * proj)

        num = numeric_grad(forward, v.data, eps)
        ana = v.grad if v.grad is not None else np.zeros_like(v.data)
        errs[name] = rel_error(ana, num)
        assert errs[name] < tol, (
            f"gradient mismatch for {name}: rel err {errs[name]:.3e}")
    return errs
