"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Tape records eagerly executed primitives in topological order; backward
replays them in reverse, accumulating vector-Jacobian products. Tensors are
at most 2-D. Constants (tensors with no tape id) participate in forward
computation but receive no gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

__all__ = ["GradCheckReport", "Tape", "Tensor", "constant", "grad_check"]

# When enabled, every primitive asserts its output is finite.
debug_nan_checks = False


class Tensor:
    __slots__ = ("values", "tid")

    def __init__(self, values: np.ndarray, tid: int | None = None):
        self.values = values
        self.tid = tid

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = "const" if self.tid is None else f"t{self.tid}"
        return f"<Tensor {tag} {self.values.shape}>"


def constant(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _rows_scatter_sum(values: np.ndarray, index: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows of ``values`` into ``num_rows`` buckets given by ``index``."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=num_rows)
    out = np.empty((num_rows, values.shape[1]))
    for col in range(values.shape[1]):
        out[:, col] = np.bincount(index, weights=values[:, col], minlength=num_rows)
    return out


class Tape:
    """Records primitives; one tape per forward pass."""

    def __init__(self):
        self._records = []  # (output tid, parent tids, backward fn)
        self._next = 0

    def tensor(self, values) -> Tensor:
        """Tracked leaf (parameter or differentiable input)."""
        return Tensor(np.asarray(values, dtype=np.float64), self._new_id())

    def _new_id(self) -> int:
        tid = self._next
        self._next += 1
        return tid

    def _emit(self, values: np.ndarray, parents: tuple, backward) -> Tensor:
        if debug_nan_checks and not np.all(np.isfinite(values)):
            raise FloatingPointError("primitive produced non-finite values")
        out = Tensor(values, self._new_id())
        self._records.append((out.tid, tuple(p.tid for p in parents), backward))
        return out

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        values = a.values + b.values
        return self._emit(
            values,
            (a, b),
            lambda g: (_unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)),
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self.add(a, self.smul(b, -1.0))

    def multiply(self, a: Tensor, b: Tensor) -> Tensor:
        values = a.values * b.values
        return self._emit(
            values,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape),
            ),
        )

    def smul(self, a: Tensor, scalar: float) -> Tensor:
        scalar = float(scalar)
        return self._emit(a.values * scalar, (a,), lambda g: (g * scalar,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D tensors, got {a.values.shape} @ {b.values.shape}"
            )
        if a.values.shape[1] != b.values.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.values.shape} @ {b.values.shape}")
        values = a.values @ b.values
        return self._emit(
            values,
            (a, b),
            lambda g: (g @ b.values.T, a.values.T @ g),
        )

    def concat_cols(self, parts: list[Tensor]) -> Tensor:
        widths = [p.values.shape[1] for p in parts]
        values = np.concatenate([p.values for p in parts], axis=1)
        offsets = np.cumsum([0] + widths)

        def backward(g):
            return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(parts)))

        return self._emit(values, tuple(parts), backward)

    def concat_rows(self, parts: list[Tensor]) -> Tensor:
        heights = [p.values.shape[0] for p in parts]
        values = np.concatenate([p.values for p in parts], axis=0)
        offsets = np.cumsum([0] + heights)

        def backward(g):
            return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

        return self._emit(values, tuple(parts), backward)

    def gather_rows(self, a: Tensor, index: np.ndarray) -> Tensor:
        index = np.asarray(index, dtype=np.int64)
        rows = a.values.shape[0]

        def backward(g):
            return (_rows_scatter_sum(g, index, rows).reshape(a.values.shape),)

        return self._emit(a.values[index], (a,), backward)

    def scatter_add_rows(self, a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
        index = np.asarray(index, dtype=np.int64)
        values = _rows_scatter_sum(a.values, index, num_rows)
        return self._emit(values.reshape((num_rows,) + a.values.shape[1:]), (a,), lambda g: (g[index],))

    def scatter_weighted_rows(
        self,
        a: Tensor,
        weights: Tensor,
        src: np.ndarray,
        dst: np.ndarray,
        num_rows: int,
    ) -> Tensor:
        """Weighted row aggregation: out[i] = sum over edges e with dst[e] = i
        of weights[e] * a[src[e]].

        Equivalent to gather-multiply-scatter but executed as one sparse
        matrix product, which is the hot path of attention aggregation.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        w = weights.values.reshape(-1)
        if w.shape[0] != src.shape[0] or src.shape[0] != dst.shape[0]:
            raise ValueError(
                f"scatter_weighted_rows got {w.shape[0]} weights for "
                f"{src.shape[0]} sources and {dst.shape[0]} destinations"
            )
        mat = csr_matrix((w, (dst, src)), shape=(num_rows, a.values.shape[0]))
        values = mat @ a.values

        def backward(g):
            tmat = csr_matrix((w, (src, dst)), shape=(a.values.shape[0], num_rows))
            da = tmat @ g
            dw = np.einsum("ij,ij->i", g[dst], a.values[src])
            return (da, dw.reshape(weights.values.shape))

        return self._emit(values, (a, weights), backward)

    def segment_softmax(self, logits: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
        """Softmax over groups given by ``segments`` (one id per row).

        Stabilized by per-segment max subtraction. ``logits`` is a column
        vector (n, 1) or 1-D (n,).
        """
        segments = np.asarray(segments, dtype=np.int64)
        z = logits.values.reshape(-1)
        if z.shape[0] != segments.shape[0]:
            raise ValueError(
                f"segment_softmax got {z.shape[0]} logits for {segments.shape[0]} ids"
            )
        mx = np.full(num_segments, -np.inf)
        np.maximum.at(mx, segments, z)
        e = np.exp(z - mx[segments])
        total = np.zeros(num_segments)
        np.add.at(total, segments, e)
        out = (e / total[segments]).reshape(logits.values.shape)

        def backward(g):
            gflat = g.reshape(-1)
            oflat = out.reshape(-1)
            dot = np.zeros(num_segments)
            np.add.at(dot, segments, gflat * oflat)
            dz = oflat * (gflat - dot[segments])
            return (dz.reshape(logits.values.shape),)

        return self._emit(out, (logits,), backward)

    def leaky_relu(self, a: Tensor, negative_slope: float = 0.01) -> Tensor:
        slope = float(negative_slope)
        values = np.where(a.values >= 0, a.values, slope * a.values)
        return self._emit(
            values, (a,), lambda g: (np.where(a.values >= 0, g, slope * g),)
        )

    def exp(self, a: Tensor) -> Tensor:
        values = np.exp(a.values)
        return self._emit(values, (a,), lambda g: (g * values,))

    def sqrt(self, a: Tensor) -> Tensor:
        values = np.sqrt(a.values)
        return self._emit(values, (a,), lambda g: (g / (2.0 * values),))

    def square(self, a: Tensor) -> Tensor:
        return self._emit(a.values**2, (a,), lambda g: (2.0 * a.values * g,))

    def sum(self, a: Tensor) -> Tensor:
        return self._emit(
            np.asarray(a.values.sum()),
            (a,),
            lambda g: (np.broadcast_to(g, a.values.shape).copy(),),
        )

    def mean(self, a: Tensor) -> Tensor:
        size = a.values.size
        return self._emit(
            np.asarray(a.values.mean()),
            (a,),
            lambda g: (np.broadcast_to(g / size, a.values.shape).copy(),),
        )

    def l2_rowwise(self, a: Tensor) -> Tensor:
        """Euclidean norm of each row as an (n, 1) column.

        The subgradient at an all-zero row is taken to be zero.
        """
        norms = np.linalg.norm(a.values, axis=1, keepdims=True)

        def backward(g):
            safe = np.where(norms == 0.0, 1.0, norms)
            grad = g * a.values / safe
            grad[norms[:, 0] == 0.0] = 0.0
            return (grad,)

        return self._emit(norms, (a,), backward)

    # ------------------------------------------------------------------
    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar output w.r.t. every tracked tensor id."""
        if output.values.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {output.values.shape}")
        if output.tid is None:
            return {}
        grads: dict[int, np.ndarray] = {output.tid: np.ones_like(output.values)}
        for tid, parents, backward in reversed(self._records):
            g = grads.get(tid)
            if g is None:
                continue
            for pid, pg in zip(parents, backward(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads

    def gradient(self, output: Tensor, params: list[Tensor]) -> list[np.ndarray]:
        """Gradients aligned with ``params``; disconnected tensors get zeros."""
        table = self.backward(output)
        return [table.get(p.tid, np.zeros_like(p.values)) for p in params]


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    per_param: list[float]

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max relative error {self.max_rel_error:.3e}"


def _run(fn, params: list[np.ndarray]) -> float:
    tape = Tape()
    out = fn(tape, [tape.tensor(p) for p in params])
    return float(out.values)


def grad_check(fn, params: list[np.ndarray], tolerance: float = 1e-5, h: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn(tape, tensors) -> scalar Tensor`` must be deterministic. Relative
    error uses a 1e-6 floor so near-zero gradient entries do not dominate.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    tensors = [tape.tensor(p) for p in params]
    analytic = tape.gradient(fn(tape, tensors), tensors)

    per_param = []
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _run(fn, params)
            flat[i] = orig - h
            fm = _run(fn, params)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
        fd = fd.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic[k])), 1e-6)
        rel = np.abs(fd - analytic[k]) / denom
        per_param.append(float(rel.max()) if rel.size else 0.0)
    worst = max(per_param) if per_param else 0.0
    return GradCheckReport(max_rel_error=worst, passed=worst <= tolerance, per_param=per_param)
