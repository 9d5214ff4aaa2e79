"""Recursive right-looking H-LU factorization, inline or as nested tasks.

The factorization of a partitioned block runs the classic sequence per
diagonal step: factor the diagonal block, solve the row panel with the new
lower factor, solve the column panel with the new upper factor, then
multiply-accumulate into the trailing blocks, recursing on partitioned
operands.  Executed inline this is the sequential algorithm; emitted onto the
task runtime every recursion level becomes a parent task (weak accesses under
early release, strong otherwise) and every leaf-level kernel becomes a task
whose regions are exactly the skeleton intervals of its operands, so the
runtime rediscovers the dependency structure of the recursion.

Low-rank destinations accumulate through truncated addition; products
contributing to one destination are emitted in a fixed source order, so a
single-worker parallel run reproduces the sequential result bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .blocks import PARTITIONED
from .hmatrix import DENSE, HMatrix, LOWRANK, Skeleton, StructureError, build_skeleton
from .hmatrix import _matvec_into
from .lowrank import (
    LowRank,
    TruncationControl,
    add_truncated,
    compress_dense,
    gemm_update,
    lu_nopivot,
    recompress,
    trsm_lower_unit,
    trsm_upper_right,
)
from .runtime import Region, Runtime

SEQUENTIAL = "sequential"
PARALLEL = "parallel"


class FlopCounter:
    """Thread-safe accumulator for per-kernel analytic flop estimates."""

    def __init__(self):
        self._lock = threading.Lock()
        self.total = 0.0

    def add(self, n):
        with self._lock:
            self.total += n


@dataclass
class HluPlan:
    """Everything one factorization run needs, fixed up front."""

    matrix: HMatrix
    skeleton: Skeleton
    truncation: TruncationControl
    mode: str = SEQUENTIAL
    workers: int = 1
    wd_er: bool = True
    seed: int = 0
    flops: FlopCounter = field(default_factory=FlopCounter)


def make_plan(
    h: HMatrix,
    truncation: TruncationControl | None = None,
    mode: str = SEQUENTIAL,
    workers: int = 1,
    wd_er: bool = True,
    seed: int = 0,
) -> HluPlan:
    if mode not in (SEQUENTIAL, PARALLEL):
        raise ValueError(f"unknown mode {mode!r}")
    return HluPlan(
        matrix=h,
        skeleton=build_skeleton(h),
        truncation=truncation if truncation is not None else TruncationControl(),
        mode=mode,
        workers=workers,
        wd_er=wd_er,
        seed=seed,
    )


# -- operand views -------------------------------------------------------------


class _Window:
    """Rectangular window of a leaf block, in global index coordinates."""

    __slots__ = ("leaf", "r0", "r1", "c0", "c1")

    def __init__(self, leaf, r0, r1, c0, c1):
        self.leaf = leaf
        self.r0 = r0
        self.r1 = r1
        self.c0 = c0
        self.c1 = c1


def _rows(op):
    return (op.r0, op.r1) if isinstance(op, _Window) else op.row_range


def _cols(op):
    return (op.c0, op.c1) if isinstance(op, _Window) else op.col_range


def _is_part(op):
    return isinstance(op, HMatrix) and op.kind == PARTITIONED


def _is_lowrank(op):
    leaf = op.leaf if isinstance(op, _Window) else op
    return leaf.kind == LOWRANK


def _slice(op, rows, cols):
    if isinstance(op, _Window):
        leaf = op.leaf
    elif op.kind == PARTITIONED:
        raise StructureError("cannot window a partitioned block")
    else:
        leaf = op
    if rows == _rows(op) and cols == _cols(op) and isinstance(op, HMatrix):
        return op
    return _Window(leaf, rows[0], rows[1], cols[0], cols[1])


def _op_leaf(op):
    return op.leaf if isinstance(op, _Window) else op


def _factors(op):
    """Factor pair of a low-rank leaf or window (row/col windows applied)."""
    leaf = _op_leaf(op)
    lr = leaf.data
    r0, r1 = _rows(op)
    c0, c1 = _cols(op)
    br0, bc0 = leaf.row_range[0], leaf.col_range[0]
    return lr.a[r0 - br0 : r1 - br0], lr.b[c0 - bc0 : c1 - bc0]


def _dense_window(op):
    leaf = _op_leaf(op)
    r0, r1 = _rows(op)
    c0, c1 = _cols(op)
    br0, bc0 = leaf.row_range[0], leaf.col_range[0]
    return leaf.data[r0 - br0 : r1 - br0, c0 - bc0 : c1 - bc0]


def _op_matmat(op, x):
    """op @ x for an H-node or window, resolved at call time."""
    if isinstance(op, HMatrix) and op.kind == PARTITIONED:
        r0 = op.row_range[0]
        c0 = op.col_range[0]
        y = np.zeros((op.rows, x.shape[1]))
        for row in op.data:
            for child in row:
                i0, i1 = child.row_range
                j0, j1 = child.col_range
                y[i0 - r0 : i1 - r0] += _op_matmat(child, x[j0 - c0 : j1 - c0])
        return y
    if _is_lowrank(op):
        a, b = _factors(op)
        return a @ (b.T @ x)
    return _dense_window(op) @ x


def _op_t_matmat(op, x):
    """op.T @ x."""
    if isinstance(op, HMatrix) and op.kind == PARTITIONED:
        r0 = op.row_range[0]
        c0 = op.col_range[0]
        y = np.zeros((op.cols, x.shape[1]))
        for row in op.data:
            for child in row:
                i0, i1 = child.row_range
                j0, j1 = child.col_range
                y[j0 - c0 : j1 - c0] += _op_t_matmat(child, x[i0 - r0 : i1 - r0])
        return y
    if _is_lowrank(op):
        a, b = _factors(op)
        return b @ (a.T @ x)
    return _dense_window(op).T @ x


def _row_splits(op):
    return [child.row_range for child in (row[0] for row in op.data)]


def _col_splits(op):
    return [child.col_range for child in op.data[0]]


def _op_gemm_into(dst, op, x):
    """dst -= op @ x accumulated in place, recursing over partitions."""
    if isinstance(op, HMatrix) and op.kind == PARTITIONED:
        r0 = op.row_range[0]
        c0 = op.col_range[0]
        for row in op.data:
            for child in row:
                i0, i1 = child.row_range
                j0, j1 = child.col_range
                _op_gemm_into(dst[i0 - r0 : i1 - r0], child, x[j0 - c0 : j1 - c0])
        return
    if _is_lowrank(op):
        a, b = _factors(op)
        gemm_update(dst, a, b.T @ x)
        return
    gemm_update(dst, _dense_window(op), x)


def _op_t_gemm_into(dst, op, x):
    """dst -= op.T @ x accumulated in place."""
    if isinstance(op, HMatrix) and op.kind == PARTITIONED:
        r0 = op.row_range[0]
        c0 = op.col_range[0]
        for row in op.data:
            for child in row:
                i0, i1 = child.row_range
                j0, j1 = child.col_range
                _op_t_gemm_into(dst[j0 - c0 : j1 - c0], child, x[i0 - r0 : i1 - r0])
        return
    if _is_lowrank(op):
        a, b = _factors(op)
        gemm_update(dst, b, a.T @ x)
        return
    gemm_update(dst, _dense_window(op).T, x)


def _op_rgemm_into(dst, x, op):
    """dst -= x @ op accumulated in place."""
    if isinstance(op, HMatrix) and op.kind == PARTITIONED:
        r0 = op.row_range[0]
        c0 = op.col_range[0]
        for row in op.data:
            for child in row:
                i0, i1 = child.row_range
                j0, j1 = child.col_range
                _op_rgemm_into(dst[:, j0 - c0 : j1 - c0], x[:, i0 - r0 : i1 - r0], child)
        return
    if _is_lowrank(op):
        a, b = _factors(op)
        gemm_update(dst, x @ a, b.T)
        return
    gemm_update(dst, x, _dense_window(op))


# -- low-rank products ----------------------------------------------------------


def _multiply_lowrank(a, b, ctl: TruncationControl) -> LowRank:
    """Low-rank approximation of the product a @ b of two H-operands."""
    if not _is_part(a) and _is_lowrank(a):
        fa, fb = _factors(a)
        return LowRank(fa, _op_t_matmat(b, fb))
    if not _is_part(b) and _is_lowrank(b):
        fa, fb = _factors(b)
        return LowRank(_op_matmat(a, fa), fb)
    if not _is_part(a) and not _is_part(b):
        return compress_dense(_dense_window(a) @ _dense_window(b), ctl)

    rows = _row_splits(a) if _is_part(a) else [_rows(a)]
    cols = _col_splits(b) if _is_part(b) else [_cols(b)]
    mids = _col_splits(a) if _is_part(a) else _row_splits(b)
    if _is_part(a) and _is_part(b) and _col_splits(a) != _row_splits(b):
        raise StructureError("inner partitions of a product do not match")

    grid = []
    for i, rr in enumerate(rows):
        line = []
        for j, cc in enumerate(cols):
            acc = LowRank.zeros(rr[1] - rr[0], cc[1] - cc[0])
            for p, mm in enumerate(mids):
                ap = a.child(i, p) if _is_part(a) else _slice(a, rr, mm)
                bp = b.child(p, j) if _is_part(b) else _slice(b, mm, cc)
                acc = add_truncated(acc, _multiply_lowrank(ap, bp, ctl), ctl)
            line.append(acc)
        grid.append(line)
    if len(rows) == 1 and len(cols) == 1:
        return grid[0][0]
    return _merge_lowrank(grid, rows, cols, ctl)


def _merge_lowrank(grid, rows, cols, ctl):
    m = rows[-1][1] - rows[0][0]
    n = cols[-1][1] - cols[0][0]
    k_total = sum(p.k for line in grid for p in line)
    u = np.zeros((m, k_total))
    v = np.zeros((n, k_total))
    off = 0
    for i, rr in enumerate(rows):
        for j, cc in enumerate(cols):
            p = grid[i][j]
            if p.k == 0:
                continue
            u[rr[0] - rows[0][0] : rr[1] - rows[0][0], off : off + p.k] = p.a
            v[cc[0] - cols[0][0] : cc[1] - cols[0][0], off : off + p.k] = p.b
            off += p.k
    return recompress(LowRank(u, v), ctl)


# -- executors --------------------------------------------------------------------


class _Inline:
    """Runs leaf kernels immediately; recursion levels are plain calls."""

    def __init__(self, plan):
        self.plan = plan

    def leaf(self, label, specs, body):
        body()

    def parent(self, label, specs, spawn):
        spawn()


class _Emit:
    """Submits leaf kernels as strong tasks, recursion levels as parents."""

    def __init__(self, runtime, plan):
        self.rt = runtime
        self.plan = plan
        self.weak_parents = runtime.wd_er

    def _regions(self, specs, weak):
        ranges = self.plan.skeleton.ranges
        out = []
        for obj, mode in specs:
            block = obj.block if isinstance(obj, HMatrix) else obj
            lo, hi = ranges[block]
            out.append(Region(lo, hi, mode, weak=weak))
        return out

    def leaf(self, label, specs, body):
        self.rt.submit(self._regions(specs, weak=False), body, label=label)

    def parent(self, label, specs, spawn):
        self.rt.submit(
            self._regions(specs, weak=self.weak_parents),
            spawn,
            label=label,
            spawns=True,
        )


def _lbl(kind, rows, cols):
    return f"{kind}[{rows[0]}:{rows[1]})x[{cols[0]}:{cols[1]})"


# -- panels: windows of a leaf payload driven through a partitioned factor ---------


class _Panel:
    """Contiguous window of a leaf payload along the dimension being solved.

    ``part`` selects the payload ('dense' array, low-rank 'a' or 'b' factor),
    ``axis`` the sliced array axis, ``base`` maps global block coordinates to
    array offsets.
    """

    __slots__ = ("leaf", "part", "axis", "lo", "hi", "base")

    def __init__(self, leaf, part, axis, lo, hi, base):
        self.leaf = leaf
        self.part = part
        self.axis = axis
        self.lo = lo
        self.hi = hi
        self.base = base

    def sub(self, lo, hi):
        return _Panel(self.leaf, self.part, self.axis, lo, hi, self.base)

    def resolve(self):
        if self.part == "dense":
            arr = self.leaf.data
        elif self.part == "a":
            arr = self.leaf.data.a
        else:
            arr = self.leaf.data.b
        lo = self.lo - self.base
        hi = self.hi - self.base
        return arr[lo:hi] if self.axis == 0 else arr[:, lo:hi]


# -- triangular solves ---------------------------------------------------------------


def _solve_lower(ex, l, b, ctl, flops):
    """b := l^-1 b with l a factored (unit lower) diagonal block."""
    label = _lbl("lsolve", b.row_range, b.col_range)
    if l.kind == DENSE:
        if b.kind == DENSE:

            def body():
                trsm_lower_unit(l.data, b.data)
                flops.add(l.rows * l.rows * b.cols)

            ex.leaf(label, [(l, "r"), (b, "rw")], body)
        elif b.kind == LOWRANK:

            def body():
                lr = b.data
                a = scipy.linalg.solve_triangular(
                    l.data, lr.a, lower=True, unit_diagonal=True
                )
                b.data = LowRank(a, lr.b)
                flops.add(l.rows * l.rows * lr.k)

            ex.leaf(label, [(l, "r"), (b, "rw")], body)
        else:
            raise StructureError("dense factor against partitioned right-hand side")
        return
    if b.kind == PARTITIONED:
        def spawn():
            rs = len(l.data)
            cs = len(b.data[0])
            for i in range(rs):
                for p in range(i):
                    for j in range(cs):
                        _update(ex, b.child(i, j), l.child(i, p), b.child(p, j), ctl, flops)
                for j in range(cs):
                    _solve_lower(ex, l.child(i, i), b.child(i, j), ctl, flops)

        ex.parent(label, [(l, "r"), (b, "rw")], spawn)
        return
    # partitioned factor, leaf right-hand side: run over payload row panels
    part = "dense" if b.kind == DENSE else "a"
    panel = _Panel(b, part, 0, b.row_range[0], b.row_range[1], b.row_range[0])
    _solve_lower_panel(ex, l, panel, b, ctl, flops)


def _solve_lower_panel(ex, l, pan, bleaf, ctl, flops):
    cols = _cols(bleaf)
    if l.kind == DENSE:

        def body():
            arr = pan.resolve()
            trsm_lower_unit(l.data, arr)
            flops.add(l.rows * l.rows * arr.shape[1])

        ex.leaf(_lbl("lsolve", (pan.lo, pan.hi), cols), [(l, "r"), (bleaf, "rw")], body)
        return

    def spawn():
        splits = _row_splits(l)
        for i, ri in enumerate(splits):
            for p, rp in enumerate(splits[:i]):
                lip = l.child(i, p)

                def body(lip=lip, ri=ri, rp=rp):
                    dst = pan.sub(*ri).resolve()
                    src = pan.sub(*rp).resolve()
                    _op_gemm_into(dst, lip, src)
                    flops.add(2.0 * dst.shape[0] * dst.shape[1] * src.shape[0])

                ex.leaf(
                    _lbl("update", ri, cols) + _lbl("<-", lip.row_range, lip.col_range),
                    [(lip, "r"), (bleaf, "rw")],
                    body,
                )
            _solve_lower_panel(ex, l.child(i, i), pan.sub(*ri), bleaf, ctl, flops)

    ex.parent(
        _lbl("lsolve", (pan.lo, pan.hi), cols), [(l, "r"), (bleaf, "rw")], spawn
    )


def _solve_upper(ex, b, u, ctl, flops):
    """b := b u^-1 with u a factored (upper) diagonal block."""
    label = _lbl("rsolve", b.row_range, b.col_range)
    if u.kind == DENSE:
        if b.kind == DENSE:

            def body():
                trsm_upper_right(u.data, b.data)
                flops.add(u.rows * u.rows * b.rows)

            ex.leaf(label, [(u, "r"), (b, "rw")], body)
        elif b.kind == LOWRANK:

            def body():
                lr = b.data
                fb = scipy.linalg.solve_triangular(u.data, lr.b, lower=False, trans="T")
                b.data = LowRank(lr.a, fb)
                flops.add(u.rows * u.rows * lr.k)

            ex.leaf(label, [(u, "r"), (b, "rw")], body)
        else:
            raise StructureError("dense factor against partitioned right-hand side")
        return
    if b.kind == PARTITIONED:

        def spawn():
            cs = len(u.data[0])
            rs = len(b.data)
            for j in range(cs):
                for p in range(j):
                    for i in range(rs):
                        _update(ex, b.child(i, j), b.child(i, p), u.child(p, j), ctl, flops)
                for i in range(rs):
                    _solve_upper(ex, b.child(i, j), u.child(j, j), ctl, flops)

        ex.parent(label, [(b, "rw"), (u, "r")], spawn)
        return
    if b.kind == DENSE:
        panel = _Panel(b, "dense", 1, b.col_range[0], b.col_range[1], b.col_range[0])
    else:
        panel = _Panel(b, "b", 0, b.col_range[0], b.col_range[1], b.col_range[0])
    _solve_upper_panel(ex, panel, u, b, ctl, flops)


def _solve_upper_panel(ex, pan, u, bleaf, ctl, flops):
    rows = _rows(bleaf)
    if u.kind == DENSE:

        def body():
            arr = pan.resolve()
            if pan.part == "b":
                arr[:] = scipy.linalg.solve_triangular(u.data, arr, lower=False, trans="T")
                flops.add(u.rows * u.rows * arr.shape[1])
            else:
                trsm_upper_right(u.data, arr)
                flops.add(u.rows * u.rows * arr.shape[0])

        ex.leaf(_lbl("rsolve", rows, (pan.lo, pan.hi)), [(u, "r"), (bleaf, "rw")], body)
        return

    def spawn():
        splits = _col_splits(u)
        for j, cj in enumerate(splits):
            for p, cp in enumerate(splits[:j]):
                upj = u.child(p, j)

                def body(upj=upj, cj=cj, cp=cp):
                    dst = pan.sub(*cj).resolve()
                    src = pan.sub(*cp).resolve()
                    if pan.part == "b":
                        _op_t_gemm_into(dst, upj, src)
                    else:
                        _op_rgemm_into(dst, src, upj)
                    flops.add(2.0 * dst.shape[0] * dst.shape[1] * src.shape[1])

                ex.leaf(
                    _lbl("update", rows, cj) + _lbl("<-", upj.row_range, upj.col_range),
                    [(upj, "r"), (bleaf, "rw")],
                    body,
                )
            _solve_upper_panel(ex, pan.sub(*cj), u.child(j, j), bleaf, ctl, flops)

    ex.parent(_lbl("rsolve", rows, (pan.lo, pan.hi)), [(bleaf, "rw"), (u, "r")], spawn)


# -- multiply-accumulate ----------------------------------------------------------------


def _update(ex, c, a, b, ctl, flops):
    """c := c - a @ b in H-arithmetic; c may be a node or a dense window."""
    c_part = _is_part(c)
    a_part = _is_part(a)
    b_part = _is_part(b)
    label = _lbl("update", _rows(c), _cols(c)) + _lbl("<-", _rows(a), _cols(a))
    a_reg = a if a_part else _op_leaf(a)
    b_reg = b if b_part else _op_leaf(b)

    if isinstance(c, HMatrix) and c.kind == LOWRANK:
        # low-rank destination: one truncated accumulation task
        def body():
            p = _multiply_lowrank(a, b, ctl)
            m, n = p.shape
            c.data = add_truncated(c.data, p.neg(), ctl)
            flops.add(2.0 * (c.data.k + p.k + 1) * (m + n) * (p.k + 1))

        ex.leaf(label, [(c, "rw"), (a_reg, "r"), (b_reg, "r")], body)
        return

    if not (c_part or a_part or b_part):
        # dense destination, leaf operands: plain subtract of the product
        def body():
            dst = _dense_window(c)
            if not _is_lowrank(a) and not _is_lowrank(b):
                av = _dense_window(a)
                bv = _dense_window(b)
                gemm_update(dst, av, bv)
                flops.add(2.0 * dst.shape[0] * dst.shape[1] * av.shape[1])
            elif _is_lowrank(a):
                fa, fb = _factors(a)
                gemm_update(dst, fa, _op_t_matmat(b, fb).T)
                flops.add(2.0 * fa.shape[1] * (dst.shape[0] + dst.shape[1]) * dst.shape[1])
            else:
                fa, fb = _factors(b)
                gemm_update(dst, _op_matmat(a, fa), fb.T)
                flops.add(2.0 * fa.shape[1] * (dst.shape[0] + dst.shape[1]) * dst.shape[0])

        ex.leaf(label, [(_op_leaf(c), "rw"), (a_reg, "r"), (b_reg, "r")], body)
        return

    def spawn():
        rows = _row_splits(c) if c_part else (_row_splits(a) if a_part else [_rows(c)])
        cols = _col_splits(c) if c_part else (_col_splits(b) if b_part else [_cols(c)])
        if a_part and b_part and _col_splits(a) != _row_splits(b):
            raise StructureError("inner partitions of an update do not match")
        mids = _col_splits(a) if a_part else (_row_splits(b) if b_part else [_cols(a)])
        for i, rr in enumerate(rows):
            for j, cc in enumerate(cols):
                ci = c.child(i, j) if c_part else _slice(c, rr, cc)
                for p, mm in enumerate(mids):
                    ap = a.child(i, p) if a_part else _slice(a, rr, mm)
                    bp = b.child(p, j) if b_part else _slice(b, mm, cc)
                    _update(ex, ci, ap, bp, ctl, flops)

    ex.parent(label, [(c if c_part else _op_leaf(c), "rw"), (a_reg, "r"), (b_reg, "r")], spawn)


# -- factorization ----------------------------------------------------------------------


def _factor(ex, h, ctl, flops):
    label = _lbl("lu", h.row_range, h.col_range)
    if h.kind == DENSE:
        if h.rows != h.cols:
            raise StructureError(f"LU requires a square block, got {label}")

        def body():
            lu_nopivot(h.data, block_path=label)
            flops.add(2.0 / 3.0 * h.rows**3)

        ex.leaf(label, [(h, "rw")], body)
        return
    if h.kind == LOWRANK:
        raise StructureError(f"diagonal block {label} is low-rank; expected dense")

    def spawn():
        nb = len(h.data)
        if nb != len(h.data[0]):
            raise StructureError(f"LU requires a square grid at {label}")
        for k in range(nb):
            _factor(ex, h.child(k, k), ctl, flops)
            for j in range(k + 1, nb):
                _solve_lower(ex, h.child(k, k), h.child(k, j), ctl, flops)
            for i in range(k + 1, nb):
                _solve_upper(ex, h.child(i, k), h.child(k, k), ctl, flops)
            for i in range(k + 1, nb):
                for j in range(k + 1, nb):
                    _update(ex, h.child(i, j), h.child(i, k), h.child(k, j), ctl, flops)

    ex.parent(label, [(h, "rw")], spawn)


def hlu_factorize(plan: HluPlan):
    """Factorize the plan's matrix in place.

    Sequential mode uses no runtime at all and returns None; parallel mode
    runs the emitted task graph and returns its ExecutionTrace.
    """
    h = plan.matrix
    if h.rows != h.cols:
        raise StructureError("H-LU requires a square matrix")
    if plan.mode == SEQUENTIAL:
        _factor(_Inline(plan), h, plan.truncation, plan.flops)
        return None
    rt = Runtime(
        slots=plan.skeleton.size,
        workers=plan.workers,
        wd_er=plan.wd_er,
        seed=plan.seed,
    )
    _factor(_Emit(rt, plan), h, plan.truncation, plan.flops)
    return rt.run()


def emit_task_graph(plan: HluPlan):
    """Expand the full nested task graph without executing any kernel."""
    rt = Runtime(slots=plan.skeleton.size, wd_er=plan.wd_er, collect=True)
    _factor(_Emit(rt, plan), plan.matrix, plan.truncation, plan.flops)
    return rt.task_graph()


def _op_plan(root, ctl, runtime, skeleton):
    if runtime is not None and skeleton is None:
        raise ValueError("emitting tasks requires the skeleton of the enclosing matrix")
    return HluPlan(root, skeleton, ctl if ctl is not None else TruncationControl())


def solve_lower_hmatrix(l, b, ctl=None, runtime=None, skeleton=None):
    """b := l^-1 b; emits tasks when a runtime is given, else runs inline."""
    plan = _op_plan(b, ctl, runtime, skeleton)
    ex = _Inline(plan) if runtime is None else _Emit(runtime, plan)
    _solve_lower(ex, l, b, plan.truncation, plan.flops)


def solve_upper_hmatrix(b, u, ctl=None, runtime=None, skeleton=None):
    """b := b u^-1; emits tasks when a runtime is given, else runs inline."""
    plan = _op_plan(b, ctl, runtime, skeleton)
    ex = _Inline(plan) if runtime is None else _Emit(runtime, plan)
    _solve_upper(ex, b, u, plan.truncation, plan.flops)


def update_hmatrix(c, a, b, ctl=None, runtime=None, skeleton=None):
    """c := c - a @ b; emits tasks when a runtime is given, else runs inline."""
    plan = _op_plan(c, ctl, runtime, skeleton)
    ex = _Inline(plan) if runtime is None else _Emit(runtime, plan)
    _update(ex, c, a, b, plan.truncation, plan.flops)


# -- triangular matvec on the factored matrix ----------------------------------------


def lower_unit_matvec(h: HMatrix, x):
    """y = L @ x where L is the unit lower factor stored in a factored matrix."""
    x = np.asarray(x, dtype=float)
    y = np.zeros_like(x, dtype=float)
    _lower_into(h, x, y)
    return y


def _lower_into(h, x, y):
    if h.kind == DENSE:
        y += np.tril(h.data, -1) @ x + x
        return
    if h.kind != PARTITIONED:
        raise StructureError("factored matrix has a low-rank diagonal block")
    r0 = h.row_range[0]
    for i, row in enumerate(h.data):
        for j, child in enumerate(row):
            i0, i1 = child.row_range
            j0, j1 = child.col_range
            if j < i:
                _matvec_into(child, x[j0 - r0 : j1 - r0], y[i0 - r0 : i1 - r0])
            elif j == i:
                _lower_into(child, x[j0 - r0 : j1 - r0], y[i0 - r0 : i1 - r0])


def upper_matvec(h: HMatrix, x):
    """y = U @ x where U is the upper factor stored in a factored matrix."""
    x = np.asarray(x, dtype=float)
    y = np.zeros_like(x, dtype=float)
    _upper_into(h, x, y)
    return y


def _upper_into(h, x, y):
    if h.kind == DENSE:
        y += np.triu(h.data) @ x
        return
    if h.kind != PARTITIONED:
        raise StructureError("factored matrix has a low-rank diagonal block")
    r0 = h.row_range[0]
    for i, row in enumerate(h.data):
        for j, child in enumerate(row):
            i0, i1 = child.row_range
            j0, j1 = child.col_range
            if j > i:
                _matvec_into(child, x[j0 - r0 : j1 - r0], y[i0 - r0 : i1 - r0])
            elif j == i:
                _upper_into(child, x[j0 - r0 : j1 - r0], y[i0 - r0 : i1 - r0])
