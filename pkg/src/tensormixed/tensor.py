"""Dense third-order tensors and the multilinear primitives built on them.

A tensor is a plain ``numpy`` array of shape ``(J, K, L)``.  The canonical
element order is mode-1 fastest (Fortran order), so that

    vec(X x1 A x2 B x3 C) = (C kron B kron A) vec(X)

holds literally.  Every unfolding below is derived from that ordering.
Batches of tensors are arrays of shape ``(N, J, K, L)``.
"""

import numpy as np

MODES = (1, 2, 3)


def as_tensor3(t, name="tensor"):
    """Validate and return ``t`` as a finite float array of shape (J, K, L)."""
    arr = np.asarray(t, dtype=float)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be third-order, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty mode: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_batch(y, name="samples"):
    """Stack a tensor or a sequence of tensors into an (N, J, K, L) array."""
    if isinstance(y, np.ndarray) and y.ndim == 4:
        arr = np.asarray(y, dtype=float)
    elif isinstance(y, np.ndarray) and y.ndim == 3:
        arr = np.asarray(y, dtype=float)[None]
    else:
        arr = np.stack([as_tensor3(t, name) for t in y])
    if arr.shape[0] < 1 or min(arr.shape[1:]) < 1:
        raise ValueError(f"{name} is empty: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of 1, 2, 3; got {mode!r}")


def vec(t):
    """Vectorize with the mode-1 index varying fastest."""
    return np.asarray(t, dtype=float).ravel(order="F")


def unvec(v, dims):
    dims = tuple(int(d) for d in dims)
    v = np.asarray(v, dtype=float)
    if v.size != int(np.prod(dims)):
        raise ValueError(f"vector of length {v.size} cannot fill dims {dims}")
    return v.reshape(dims, order="F")


# Axis order placed in front of the Fortran reshape for each unfolding.
_PERM = {1: (0, 1, 2), 2: (1, 0, 2), 3: (2, 0, 1)}


def matricize(t, mode):
    """Mode-k unfolding.

    Mode 1 gives J x KL with column k + (l-1)K, mode 2 gives K x JL with
    column j + (l-1)J, mode 3 gives L x JK with column j + (k-1)J.
    """
    _check_mode(mode)
    t = np.asarray(t, dtype=float)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got shape {t.shape}")
    p = np.transpose(t, _PERM[mode])
    return p.reshape(p.shape[0], -1, order="F")


def tensorize(m, mode, dims):
    """Inverse of :func:`matricize`."""
    _check_mode(mode)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError("dims must be (J, K, L)")
    m = np.asarray(m, dtype=float)
    perm = _PERM[mode]
    pdims = tuple(dims[a] for a in perm)
    if m.shape != (pdims[0], pdims[1] * pdims[2]):
        raise ValueError(
            f"matrix shape {m.shape} does not match mode-{mode} unfolding of {dims}"
        )
    p = m.reshape(pdims, order="F")
    return np.transpose(p, np.argsort(perm))


def mode_product(t, mode, u):
    """k-mode product ``t x_k u``: contracts mode k of ``t`` with the columns of ``u``.

    Works on single tensors (ndim 3) and on batches (ndim 4, leading sample
    axis); the mode always refers to the tensor modes.
    """
    _check_mode(mode)
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim != 2:
        raise ValueError("mode_product needs a matrix")
    axis = t.ndim - 3 + mode - 1
    if t.ndim not in (3, 4):
        raise ValueError(f"expected tensor or batch, got shape {t.shape}")
    if u.shape[1] != t.shape[axis]:
        raise ValueError(
            f"matrix has {u.shape[1]} columns but mode {mode} has size {t.shape[axis]}"
        )
    out = np.tensordot(u, t, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def multi_mode_product(t, mats):
    """Apply ``t x1 mats[0] x2 mats[1] x3 mats[2]``, skipping ``None`` entries."""
    out = np.asarray(t, dtype=float)
    for mode, u in zip(MODES, mats):
        if u is not None:
            out = mode_product(out, mode, u)
    return out


def tucker_apply(core, a1, a2, a3):
    """Tucker reconstruction [[core; a1, a2, a3]]."""
    core = np.asarray(core, dtype=float)
    for mode, a in zip(MODES, (a1, a2, a3)):
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[1] != core.shape[core.ndim - 3 + mode - 1]:
            raise ValueError(f"factor {mode} shape {a.shape} does not match core {core.shape}")
    return multi_mode_product(core, (a1, a2, a3))


def kron(a, b):
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def kron3(c, b, a):
    """``c kron b kron a``, the order matching the canonical vec convention."""
    return np.kron(np.kron(c, b), a)


def frob_norm(t):
    return float(np.linalg.norm(np.asarray(t, dtype=float).ravel()))
