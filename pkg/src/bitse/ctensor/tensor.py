"""Complex tensors on a reverse-mode tape.

Gradient convention: the stored gradient of a complex value w is
dL/dRe(w) + j*dL/dIm(w) for a real-valued loss L.  With this packing a
plain real optimizer applied independently to the real and imaginary
parts is correct without any conversion.
"""

import numpy as np

COMPLEX32 = np.complex64
COMPLEX64 = np.complex128

def _resolve_dtype(dtype):
    if dtype in ("c64", np.complex64) or dtype == np.dtype(np.complex64):
        return np.complex64
    if dtype in ("c128", np.complex128) or dtype == np.dtype(np.complex128):
        return np.complex128
    raise ValueError("unsupported complex dtype: %r" % (dtype,))


class TensorError(ValueError):
    pass


class Tape:
    """Ordered record of op outputs; creation order is topological."""

    def __init__(self):
        self.nodes = []

    def record(self, node):
        node._tape_index = len(self.nodes)
        self.nodes.append(node)

    def reset(self):
        for n in self.nodes:
            n._tape_index = None
            n.grad = None
            n._parents = ()
            n._backward = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_ACTIVE_TAPE = Tape()


def active_tape():
    return _ACTIVE_TAPE


def set_tape(tape):
    global _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    return tape


class ComplexTensor:
    """N-d complex array, optionally participating in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_tape_index", "_needs_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        dt = _resolve_dtype(dtype) if dtype is not None else None
        arr = np.asarray(data)
        if dt is None:
            dt = np.complex64 if arr.dtype in (np.float32, np.complex64) \
                else np.complex128
        self.data = np.ascontiguousarray(arr, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape_index = None
        self._needs_grad = self.requires_grad

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return "ComplexTensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype.name, self.requires_grad)

    def detach(self):
        return ComplexTensor(self.data.copy(), dtype=self.data.dtype)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data.real)) or \
                not np.all(np.isfinite(self.data.imag)):
            raise TensorError("non-finite values in %s" % what)
        return self


def tensor(data, requires_grad=False, dtype=None):
    return ComplexTensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None):
    return ComplexTensor(data, requires_grad=True, dtype=dtype)


def record(data, parents, backward):
    """Create an op-output node and put it on the active tape.

    ``backward(g)`` must return one gradient array (or None) per parent,
    in the stored dL/dRe + j*dL/dIm convention.
    """
    out = ComplexTensor(data)
    out._needs_grad = any(p._needs_grad for p in parents)
    if out._needs_grad:
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPE.record(out)
    return out


def backward(loss, grad_seed=None):
    """Reverse pass from a real-valued scalar loss.

    Populates .grad on every requires_grad leaf reachable from ``loss``.
    Repeated calls without zero_grad accumulate leaf gradients.
    """
    if loss.size != 1:
        raise TensorError("loss must be scalar, got shape %s" % (loss.shape,))
    if abs(float(np.imag(loss.data.reshape(())))) > 1e-9:
        raise TensorError("loss has nonzero imaginary part")
    if loss._tape_index is None and not loss.requires_grad:
        return  # loss disconnected from any parameter
    tape = _ACTIVE_TAPE
    # intermediate grads are per-pass scratch; leaf grads persist
    for node in tape.nodes:
        node.grad = None
    seed = np.ones_like(loss.data) if grad_seed is None else grad_seed
    loss.grad = seed.astype(loss.data.dtype)
    start = loss._tape_index if loss._tape_index is not None else -1
    for node in reversed(tape.nodes[:start + 1]):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent._needs_grad:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=parent.data.dtype)
            else:
                parent.grad = parent.grad + np.asarray(g, dtype=parent.data.dtype)
        if node._tape_index is not None:
            node.grad = None  # free intermediate buffers


def zero_grad(params):
    for p in params:
        p.grad = None


def unbroadcast(g, shape):
    """Sum a gradient down to the shape the forward input had."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)
