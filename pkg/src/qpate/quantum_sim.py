"""Statevector simulator for the hybrid classifier's variational circuit.

Basis states are indexed little-endian: qubit 0 is the least significant
bit of the amplitude index. Internally every routine works on a batch of
states of shape ``(B, 2**q)`` so one circuit pass serves a whole minibatch;
the single-state :class:`Statevector` API wraps the same kernels.

Circuit layout of :class:`VqcBlock`::

    |0..0> -> Ry(arctan x_i) on every qubit -> Rz(arctan x_i^2) on every qubit
           -> [ Rot(phi, theta, omega) on every qubit -> CNOT ring ] x num_layers
           -> <Z> on qubits 0 and 1

with ``Rot(phi, theta, omega) = Rz(omega) Ry(theta) Rz(phi)``.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import UsageError

UNITARY_TOL = 1e-12
SHIFT = np.pi / 2
READOUT_QUBITS = (0, 1)

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)


# ---------------------------------------------------------------------------
# gate matrices
# ---------------------------------------------------------------------------

def ry(theta):
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(theta):
    return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]])


def rot(phi, theta, omega):
    """General single-qubit rotation ``Rz(omega) @ Ry(theta) @ Rz(phi)``."""
    return rz(omega) @ ry(theta) @ rz(phi)


def rot_batch(angles):
    """Vectorised :func:`rot` for ``angles`` of shape ``(..., 3)``; returns ``(..., 2, 2)``."""
    phi, theta, omega = angles[..., 0], angles[..., 1], angles[..., 2]
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    plus = np.exp(-0.5j * (phi + omega))
    minus = np.exp(0.5j * (phi - omega))
    out = np.empty(angles.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = plus * c
    out[..., 0, 1] = -minus * s
    out[..., 1, 0] = np.conj(minus) * s
    out[..., 1, 1] = np.conj(plus) * c
    return out


def check_unitary(matrix, tol=UNITARY_TOL):
    matrix = np.asarray(matrix, dtype=complex)
    if matrix.shape != (2, 2):
        raise UsageError(f"expected a 2x2 matrix, got shape {matrix.shape}")
    err = np.abs(matrix.conj().T @ matrix - np.eye(2)).max()
    if err > tol:
        raise UsageError(f"matrix is not unitary (deviation {err:.3g})")
    return matrix


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def _apply_1q(amps, qubit, mat):
    """Apply ``mat`` (2x2, or (B, 2, 2) per row) to ``qubit`` of every row of ``amps``."""
    b, dim = amps.shape
    lo = 1 << qubit
    v = amps.reshape(b, dim // (2 * lo), 2, lo)
    a0, a1 = v[:, :, 0, :], v[:, :, 1, :]
    if mat.ndim == 2:
        m00, m01, m10, m11 = mat[0, 0], mat[0, 1], mat[1, 0], mat[1, 1]
    else:
        m00, m01 = mat[:, 0, 0, None, None], mat[:, 0, 1, None, None]
        m10, m11 = mat[:, 1, 0, None, None], mat[:, 1, 1, None, None]
    out = np.empty_like(v)
    out[:, :, 0, :] = m00 * a0 + m01 * a1
    out[:, :, 1, :] = m10 * a0 + m11 * a1
    return out.reshape(b, dim)


@lru_cache(maxsize=None)
def _cnot_perm(num_qubits, control, target):
    idx = np.arange(1 << num_qubits)
    flip = (idx >> control) & 1
    return idx ^ (flip << target)


@lru_cache(maxsize=None)
def _z_signs(num_qubits, qubit):
    idx = np.arange(1 << num_qubits)
    return 1.0 - 2.0 * ((idx >> qubit) & 1)


def _apply_cnot(amps, num_qubits, control, target):
    # the permutation is an involution, so gather == scatter
    return amps[:, _cnot_perm(num_qubits, control, target)]


def _local_overlap(bra, ket, qubit):
    """``R[b, i, j] = sum_rest conj(bra[b, i, rest]) * ket[b, j, rest]`` for one qubit."""
    b, dim = bra.shape
    lo = 1 << qubit
    u = bra.reshape(b, dim // (2 * lo), 2, lo).conj()
    v = ket.reshape(b, dim // (2 * lo), 2, lo)
    return np.einsum("bhil,bhjl->bij", u, v)


def _expect_z(amps, num_qubits, qubits):
    probs = amps.real ** 2 + amps.imag ** 2
    return np.stack([probs @ _z_signs(num_qubits, q) for q in qubits], axis=1)


# ---------------------------------------------------------------------------
# single-state API
# ---------------------------------------------------------------------------

class Statevector:
    """Pure state of ``num_qubits`` qubits, initialised to ``|0...0>``."""

    def __init__(self, num_qubits, amplitudes=None):
        if num_qubits < 1:
            raise UsageError("need at least one qubit")
        self.num_qubits = num_qubits
        if amplitudes is None:
            amplitudes = np.zeros(1 << num_qubits, dtype=complex)
            amplitudes[0] = 1.0
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (1 << num_qubits,):
            raise UsageError(f"expected {1 << num_qubits} amplitudes, got {amplitudes.shape}")
        self.amplitudes = amplitudes

    def norm(self):
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def copy(self):
        return Statevector(self.num_qubits, self.amplitudes.copy())

    def _check_qubit(self, qubit):
        if not 0 <= qubit < self.num_qubits:
            raise UsageError(f"qubit {qubit} out of range for {self.num_qubits} qubits")


def apply_single_qubit_gate(state, qubit, matrix):
    """Apply a 2x2 unitary to ``qubit`` in place; returns ``state``."""
    state._check_qubit(qubit)
    matrix = check_unitary(matrix)
    state.amplitudes = _apply_1q(state.amplitudes[None, :], qubit, matrix)[0]
    return state


def cnot(state, control, target):
    """Flip ``target`` on every basis state whose ``control`` bit is 1 (in place)."""
    state._check_qubit(control)
    state._check_qubit(target)
    if control == target:
        raise UsageError("CNOT control and target must differ")
    state.amplitudes = _apply_cnot(state.amplitudes[None, :], state.num_qubits, control, target)[0]
    return state


def expectation_z(state, qubit):
    state._check_qubit(qubit)
    return float(_expect_z(state.amplitudes[None, :], state.num_qubits, (qubit,))[0, 0])


# ---------------------------------------------------------------------------
# angle encoding
# ---------------------------------------------------------------------------

def encoding_angles(x):
    """Per-qubit ``(arctan x, arctan x^2)`` for inputs of shape ``(..., q)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.arctan(x), np.arctan(x * x)


def _encode_batch(x):
    """Product state ``prod_i Rz(arctan x_i^2) Ry(arctan x_i) |0>`` for each row of ``x``."""
    a, b = encoding_angles(x)
    # single-qubit state (cos(a/2) e^{-ib/2}, sin(a/2) e^{ib/2})
    q0 = np.cos(a / 2) * np.exp(-0.5j * b)
    q1 = np.sin(a / 2) * np.exp(0.5j * b)
    n, q = x.shape
    amps = np.ones((n, 1), dtype=complex)
    for i in range(q):
        # qubit i becomes the next-more-significant bit
        amps = np.concatenate([amps * q0[:, i, None], amps * q1[:, i, None]], axis=1)
    return amps


def angle_encode(x):
    """Encode a real vector into a ``len(x)``-qubit :class:`Statevector`.

    Qubit ``i`` receives ``Ry(arctan x_i)`` followed by ``Rz(arctan x_i^2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise UsageError("angle_encode expects a nonempty 1-D input")
    if not np.all(np.isfinite(x)):
        raise UsageError("angle_encode input must be finite")
    return Statevector(x.size, _encode_batch(x[None, :])[0])


# ---------------------------------------------------------------------------
# variational block
# ---------------------------------------------------------------------------

def ring_entanglement(num_qubits):
    if num_qubits < 2:
        return []
    return [(i, (i + 1) % num_qubits) for i in range(num_qubits)]


@dataclass
class VqcBlock:
    """Trainable part of the circuit: ``params[layer, qubit] = (phi, theta, omega)``."""

    num_qubits: int = 10
    num_layers: int = 2
    params: np.ndarray = None
    entanglement: list = field(default=None)
    readout: tuple = READOUT_QUBITS

    def __post_init__(self):
        if self.params is None:
            self.params = np.zeros((self.num_layers, self.num_qubits, 3))
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.size != 3 * self.num_qubits * self.num_layers:
            raise UsageError(
                f"expected {3 * self.num_qubits * self.num_layers} angles, got {self.params.size}")
        self.params = self.params.reshape(self.num_layers, self.num_qubits, 3)
        if self.entanglement is None:
            self.entanglement = [ring_entanglement(self.num_qubits)] * self.num_layers
        if len(self.entanglement) != self.num_layers:
            raise UsageError("need one CNOT list per layer")
        for layer in self.entanglement:
            for c, t in layer:
                if c == t or not (0 <= c < self.num_qubits and 0 <= t < self.num_qubits):
                    raise UsageError(f"bad CNOT ({c}, {t})")
        if any(not 0 <= q < self.num_qubits for q in self.readout):
            raise UsageError("readout qubit out of range")

    @classmethod
    def random(cls, rng, num_qubits=10, num_layers=2, scale=0.01):
        return cls(num_qubits, num_layers, scale * rng.standard_normal((num_layers, num_qubits, 3)))

    @property
    def num_params(self):
        return self.params.size

    def _check_inputs(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.num_qubits:
            raise UsageError(f"expected inputs of shape (N, {self.num_qubits}), got {x.shape}")
        return x

    def _run(self, amps, params):
        """Trainable layers on ``amps``; ``params`` is ``(L, q, 3)`` or per-row ``(B, L, q, 3)``."""
        q = self.num_qubits
        mats = rot_batch(params)
        for layer in range(self.num_layers):
            for i in range(q):
                m = mats[layer, i] if mats.ndim == 4 else mats[:, layer, i]
                amps = _apply_1q(amps, i, m)
            for c, t in self.entanglement[layer]:
                amps = _apply_cnot(amps, q, c, t)
        return amps

    def final_states(self, x, params=None):
        x = self._check_inputs(x)
        return self._run(_encode_batch(x), self.params if params is None else params)

    def forward(self, x):
        """Readout ``<Z>`` values, shape ``(N, len(readout))``, for inputs of shape ``(N, q)``."""
        return _expect_z(self.final_states(x), self.num_qubits, self.readout)

    def backward(self, x, upstream):
        """Adjoint-mode gradients of ``sum(upstream * forward(x))``.

        Returns ``(grad_params, grad_x)`` with shapes ``params.shape`` and
        ``x.shape``. Each component equals the parameter-shift difference
        ``[f(p + pi/2) - f(p - pi/2)] / 2``; it is obtained from the
        back-propagated costate instead of 2 * num_params extra circuits.
        """
        x = self._check_inputs(x)
        upstream = np.asarray(upstream, dtype=np.float64)
        q = self.num_qubits
        psi0 = _encode_batch(x)
        psi = self._run(psi0, self.params)
        diag = sum(upstream[:, k, None] * _z_signs(q, r) for k, r in enumerate(self.readout))
        lam = diag * psi

        mats = rot_batch(self.params)
        grad = np.zeros_like(self.params)
        for layer in reversed(range(self.num_layers)):
            for c, t in reversed(self.entanglement[layer]):
                psi = _apply_cnot(psi, q, c, t)
                lam = _apply_cnot(lam, q, c, t)
            for i in reversed(range(q)):
                phi, theta, omega = self.params[layer, i]
                overlap = _local_overlap(lam, psi, i).sum(axis=0)
                # generators of each factor, conjugated to the gate's output side
                rz_w = rz(omega)
                rzy = rz_w @ ry(theta)
                gens = (rzy @ PAULI_Z @ rzy.conj().T,
                        rz_w @ PAULI_Y @ rz_w.conj().T,
                        PAULI_Z)
                for j, g in enumerate(gens):
                    grad[layer, i, j] = np.sum(g * overlap).imag
                inv = mats[layer, i].conj().T
                psi = _apply_1q(psi, i, inv)
                lam = _apply_1q(lam, i, inv)

        a, b = encoding_angles(x)
        grad_a = np.empty_like(x)
        grad_b = np.empty_like(x)
        for i in range(q):
            overlap = _local_overlap(lam, psi, i)
            rz_b = np.zeros((x.shape[0], 2, 2), dtype=complex)
            rz_b[:, 0, 0] = np.exp(-0.5j * b[:, i])
            rz_b[:, 1, 1] = np.exp(0.5j * b[:, i])
            gen_a = rz_b @ PAULI_Y @ rz_b.conj().transpose(0, 2, 1)
            grad_a[:, i] = np.einsum("bij,bij->b", gen_a, overlap).imag
            grad_b[:, i] = np.einsum("ij,bij->b", PAULI_Z, overlap).imag
        grad_x = grad_a / (1 + x * x) + grad_b * 2 * x / (1 + x ** 4)
        return grad, grad_x


def vqc_forward(block, x):
    """Two-qubit ``<Z>`` readout for a single input vector; used directly as logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (block.num_qubits,):
        raise UsageError(f"expected input of length {block.num_qubits}, got shape {x.shape}")
    return block.forward(x[None, :])[0]


def parameter_shift_grad(block, x, upstream):
    """Gradient of ``upstream . vqc_forward(block, x)`` w.r.t. every circuit angle.

    Evaluates ``[f(p + pi/2) - f(p - pi/2)] / 2`` for each of the
    ``num_params`` angles, i.e. ``2 * num_params`` shifted circuits, run as
    one batch. Returns an array shaped like ``block.params``.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    n = block.num_params
    shifts = np.concatenate([np.eye(n), -np.eye(n)]) * SHIFT
    params = block.params.reshape(1, -1) + shifts
    params = params.reshape((2 * n,) + block.params.shape)
    enc = np.repeat(_encode_batch(x[None, :]), 2 * n, axis=0)
    out = _expect_z(block._run(enc, params), block.num_qubits, block.readout) @ upstream
    return ((out[:n] - out[n:]) / 2).reshape(block.params.shape)


def vqc_backward_input(block, x, upstream):
    """Gradient of ``upstream . vqc_forward(block, x)`` w.r.t. the raw input ``x``.

    Each encoding angle gets the shift rule (its gate is Pauli/2-generated);
    the chain rule through ``arctan(x)`` and ``arctan(x^2)`` finishes the job.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    q = block.num_qubits
    a, b = encoding_angles(x)
    rows = []
    for which in range(2):
        for i in range(q):
            for sign in (1, -1):
                aa, bb = a.copy(), b.copy()
                (aa if which == 0 else bb)[i] += sign * SHIFT
                rows.append((aa, bb))
    aa = np.array([r[0] for r in rows])
    bb = np.array([r[1] for r in rows])
    q0 = np.cos(aa / 2) * np.exp(-0.5j * bb)
    q1 = np.sin(aa / 2) * np.exp(0.5j * bb)
    amps = np.ones((len(rows), 1), dtype=complex)
    for i in range(q):
        amps = np.concatenate([amps * q0[:, i, None], amps * q1[:, i, None]], axis=1)
    out = _expect_z(block._run(amps, block.params), q, block.readout) @ upstream
    diffs = (out[0::2] - out[1::2]) / 2
    grad_a, grad_b = diffs[:q], diffs[q:]
    return grad_a / (1 + x * x) + grad_b * 2 * x / (1 + x ** 4)
