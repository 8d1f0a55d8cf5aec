"""Text formats: tensor batches, fitted models and convergence traces.

Tensor batch::

    TME-TENSOR3 v1
    J K L N
    <J*K*L values of sample 1, canonical order>
    ...

Fitted model: header ``TME-FIT v1``, a line ``J K L P1 Q1 R1 P2 Q2 R2``,
then sections ``NAME rows cols`` followed by ``rows`` lines of values.
``F_HAT`` holds the mode-1 unfolding of the core.  Scalars are sections
of shape 1 x 1.  An optional ``TRACE`` section carries CSV lines.
"""

import io
import math

import numpy as np

from .normal import SpdMatrix
from .tensor import matricize, tensorize
from .tme import ConvergenceTrace, TmeDesign, TraceRecord

TENSOR_HEADER = "TME-TENSOR3 v1"
FIT_HEADER = "TME-FIT v1"
TRACE_COLUMNS = "loop,iter,idx_sigma,idx_psi,idx_omega,loglik,seconds"
COV_SECTIONS = (
    "SIGMA_I", "PSI_I", "OMEGA_I",
    "SIGMA_E", "PSI_E", "OMEGA_E",
    "SIGMA_R", "PSI_R", "OMEGA_R",
)
DESIGN_SECTIONS = ("A1", "A2", "A3", "B1", "B2", "B3")


class FormatError(ValueError):
    pass


def _num(x):
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Tensor batches
# ---------------------------------------------------------------------------


def write_tensors(path, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ValueError("expected a batch of third-order tensors")
    n, J, K, L = y.shape
    with open(path, "w") as fh:
        fh.write(f"{TENSOR_HEADER}\n{J} {K} {L} {n}\n")
        for t in y:
            fh.write(" ".join(_num(v) for v in t.ravel(order="F")))
            fh.write("\n")


def read_tensors(path):
    """Read a tensor batch; returns an array of shape (N, J, K, L)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TENSOR_HEADER:
            raise FormatError(f"{path}: bad header {header!r}")
        dims = fh.readline().split()
        rest = fh.read().split()
    try:
        J, K, L, n = (int(d) for d in dims)
    except ValueError:
        raise FormatError(f"{path}: dimension line must hold four integers") from None
    if len(dims) != 4 or min(J, K, L) < 1 or n < 0:
        raise FormatError(f"{path}: invalid dimensions {dims}")
    expected = n * J * K * L
    if len(rest) != expected:
        raise FormatError(f"{path}: expected {expected} values, found {len(rest)}")
    try:
        v = np.array(rest, dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{path}: non-finite values")
    return v.reshape(n, J * K * L).reshape(n, L, K, J).transpose(0, 3, 2, 1).copy()


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


def trace_rows(trace1, trace2):
    for loop, tr in ((1, trace1), (2, trace2)):
        for r in tr.records:
            yield (loop, r.iteration, r.index_sigma, r.index_psi, r.index_omega, r.loglik, r.seconds)


def format_trace(trace1, trace2, timing=True):
    lines = [TRACE_COLUMNS]
    for loop, it, *vals, secs in trace_rows(trace1, trace2):
        secs = _num(secs) if timing else "0"
        lines.append(",".join([str(loop), str(it)] + [_num(v) for v in vals] + [secs]))
    return "\n".join(lines) + "\n"


def parse_trace(text):
    """Records per loop as ``{1: [...], 2: [...]}`` of :class:`TraceRecord`."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != TRACE_COLUMNS:
        raise FormatError("trace must start with its column header")
    out = {1: [], 2: []}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise FormatError(f"bad trace line {ln!r}")
        try:
            loop, it = int(parts[0]), int(parts[1])
            vals = [float(p) for p in parts[2:]]
        except ValueError:
            raise FormatError(f"bad trace line {ln!r}") from None
        out.setdefault(loop, []).append(TraceRecord(it, *vals))
    return out


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------


def _section(buf, name, m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    buf.write(f"{name} {m.shape[0]} {m.shape[1]}\n")
    for row in m:
        buf.write(" ".join(_num(v) for v in row))
        buf.write("\n")


def format_fit(f_hat, design, total, residual, random, loglik=float("nan"), converged=True,
               traces=None, timing=True):
    buf = io.StringIO()
    buf.write(FIT_HEADER + "\n")
    buf.write(" ".join(str(d) for d in design.dims + design.ranks + design.random_ranks) + "\n")
    _section(buf, "F_HAT", matricize(np.asarray(f_hat), 1))
    for name, m in zip(COV_SECTIONS, tuple(total) + tuple(residual) + tuple(random)):
        _section(buf, name, np.asarray(m))
    for name, m in zip(DESIGN_SECTIONS, design.a + design.b):
        _section(buf, name, m)
    _section(buf, "LOGLIK", [[loglik]])
    _section(buf, "CONVERGED", [[1.0 if converged else 0.0]])
    if traces is not None:
        buf.write("TRACE\n")
        buf.write(format_trace(*traces, timing=timing))
    return buf.getvalue()


def write_fit(path, fit, timing=True):
    """Write a :class:`~tensormixed.tme.TmeFit`, including its traces."""
    text = format_fit(
        fit.f_hat, fit.design, fit.total, fit.residual, fit.random,
        fit.loglik, fit.converged, (fit.trace1, fit.trace2), timing,
    )
    with open(path, "w") as fh:
        fh.write(text)


def write_truth(path, truth):
    """Ground truth of a simulation, in the fitted-model format."""
    with open(path, "w") as fh:
        fh.write(format_fit(truth.f, truth.design, truth.total, truth.residual, truth.random))


class FitRecord(dict):
    """Parsed fitted-model file: matrices by section name plus convenience views."""

    @property
    def dims(self):
        return self["_dims"][:3]

    @property
    def f_hat(self):
        d = self["_dims"]
        return tensorize(self["F_HAT"], 1, d[3:6])

    def triple(self, suffix):
        names = [n for n in COV_SECTIONS if n.endswith("_" + suffix)]
        return tuple(SpdMatrix.from_array(self[n]) for n in names)

    @property
    def design(self):
        return TmeDesign(*(self[n] for n in DESIGN_SECTIONS))

    @property
    def loglik(self):
        return float(self["LOGLIK"][0, 0])

    @property
    def converged(self):
        return bool(self["CONVERGED"][0, 0])


def read_fit(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != FIT_HEADER:
        raise FormatError(f"{path}: bad header")
    try:
        dims = tuple(int(x) for x in lines[1].split())
    except (IndexError, ValueError):
        raise FormatError(f"{path}: bad dimension line") from None
    if len(dims) != 9:
        raise FormatError(f"{path}: dimension line needs nine integers")
    rec = FitRecord(_dims=dims)
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] == "TRACE":
            rec["TRACE"] = parse_trace("\n".join(lines[i + 1:]))
            break
        if len(head) != 3:
            raise FormatError(f"{path}: bad section header {lines[i]!r}")
        try:
            name, rows, cols = head[0], int(head[1]), int(head[2])
        except ValueError:
            raise FormatError(f"{path}: bad section header {lines[i]!r}") from None
        block = lines[i + 1: i + 1 + rows]
        if len(block) != rows:
            raise FormatError(f"{path}: section {name} is truncated")
        try:
            m = np.array([[float(v) for v in ln.split()] for ln in block])
        except ValueError:
            raise FormatError(f"{path}: non-numeric entry in section {name}") from None
        if m.shape != (rows, cols):
            raise FormatError(f"{path}: section {name} should be {rows}x{cols}")
        rec[name] = m
        i += 1 + rows
    missing = [n for n in ("F_HAT",) + COV_SECTIONS + DESIGN_SECTIONS if n not in rec]
    if missing:
        raise FormatError(f"{path}: missing sections {missing}")
    J, K, L, P1, Q1, R1, P2, Q2, R2 = dims
    expected = {
        "F_HAT": (P1, Q1 * R1),
        "SIGMA_I": (J, J), "PSI_I": (K, K), "OMEGA_I": (L, L),
        "SIGMA_E": (J, J), "PSI_E": (K, K), "OMEGA_E": (L, L),
        "SIGMA_R": (P2, P2), "PSI_R": (Q2, Q2), "OMEGA_R": (R2, R2),
        "A1": (J, P1), "A2": (K, Q1), "A3": (L, R1),
        "B1": (J, P2), "B2": (K, Q2), "B3": (L, R2),
    }
    for name, shape in expected.items():
        if rec[name].shape != shape:
            raise FormatError(f"{path}: section {name} has shape {rec[name].shape}, expected {shape}")
    rec.setdefault("LOGLIK", np.array([[math.nan]]))
    rec.setdefault("CONVERGED", np.array([[1.0]]))
    return rec


def fit_traces(rec):
    """Traces stored in a parsed fit file as two :class:`ConvergenceTrace` objects."""
    tr = rec.get("TRACE", {1: [], 2: []})
    return tuple(ConvergenceTrace(tuple(tr.get(k, []))) for k in (1, 2))
