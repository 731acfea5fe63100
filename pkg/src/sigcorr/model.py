"""Physical model: monitored channels, Lindblad generator, insertions and the
measurement-averaged propagator."""

import hashlib
import json
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .densemath import expm, left, right, sandwich, unvec, vec

__all__ = [
    "ModelError",
    "NonUniqueStationaryState",
    "MeasurementChannel",
    "SystemModel",
    "Propagator",
    "dissipator",
    "insertion",
    "innovation",
    "hamiltonian_part",
    "averaged_generator",
    "propagator",
    "stationary_state",
    "choi_matrix",
    "model_to_dict",
    "model_from_dict",
    "load_model",
    "dump_model",
    "model_hash",
]

HERMITIAN_TOL = 1e-12


class ModelError(ValueError):
    """Malformed model description."""


class NonUniqueStationaryState(ModelError):
    def __init__(self, null_dim, eigenvalues):
        self.null_dim = null_dim
        self.eigenvalues = eigenvalues
        super().__init__(
            f"stationary state is non-unique: generator null-space dimension "
            f"{null_dim} (smallest |eigenvalues| {np.sort(np.abs(eigenvalues))[:null_dim + 1]})"
        )


def _frozen(a):
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MeasurementChannel:
    """One detector: measured operator ``c`` and efficiency ``eta`` in (0, 1]."""

    label: str
    c: np.ndarray
    eta: float = 1.0

    def __post_init__(self):
        c = _frozen(self.c)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ModelError(f"channel {self.label!r}: operator must be square, got {c.shape}")
        if not (0.0 < self.eta <= 1.0):
            raise ModelError(f"channel {self.label!r}: efficiency {self.eta} not in (0, 1]")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "eta", float(self.eta))


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Hamiltonian, unmonitored decay operators and monitored channels.

    All operators share dimension ``dim``; the Hamiltonian may be ``None``
    (zero). Instances are immutable and hashable by identity only.
    """

    dim: int
    hamiltonian: np.ndarray = None
    decay: tuple = ()
    channels: tuple = ()
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        d = int(self.dim)
        if d < 1:
            raise ModelError("dimension must be positive")
        H = np.zeros((d, d), complex) if self.hamiltonian is None else _frozen(self.hamiltonian)
        if H.shape != (d, d):
            raise ModelError(f"hamiltonian has shape {H.shape}, expected {(d, d)}")
        if np.abs(H - H.conj().T).max(initial=0.0) > HERMITIAN_TOL:
            raise ModelError("hamiltonian is not Hermitian")
        decay = tuple(_frozen(L) for L in self.decay)
        for L in decay:
            if L.shape != (d, d):
                raise ModelError(f"decay operator has shape {L.shape}, expected {(d, d)}")
        channels = tuple(self.channels)
        labels = [ch.label for ch in channels]
        if len(set(labels)) != len(labels):
            raise ModelError(f"duplicate channel labels: {labels}")
        for ch in channels:
            if ch.c.shape != (d, d):
                raise ModelError(f"channel {ch.label!r} has shape {ch.c.shape}, expected {(d, d)}")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "hamiltonian", _frozen(H))
        object.__setattr__(self, "decay", decay)
        object.__setattr__(self, "channels", channels)

    @property
    def labels(self):
        return tuple(ch.label for ch in self.channels)

    @property
    def etas(self):
        return np.array([ch.eta for ch in self.channels])

    def channel_index(self, key):
        """Resolve a detector given by position or label."""
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < len(self.channels):
                raise IndexError(f"detector index {key} out of range")
            return int(key)
        try:
            return self.labels.index(key)
        except ValueError:
            raise KeyError(f"unknown detector {key!r}; known: {self.labels}") from None

    def with_efficiencies(self, etas):
        """Copy of the model with new efficiencies (dict by label or sequence)."""
        if isinstance(etas, dict):
            new = [replace(ch, eta=etas.get(ch.label, ch.eta)) for ch in self.channels]
        else:
            etas = list(etas)
            if len(etas) != len(self.channels):
                raise ModelError("one efficiency per channel required")
            new = [replace(ch, eta=e) for ch, e in zip(self.channels, etas)]
        return SystemModel(self.dim, self.hamiltonian, self.decay, tuple(new))

    def with_channel(self, channel):
        return SystemModel(self.dim, self.hamiltonian, self.decay, self.channels + (channel,))

    # memoized derived objects; the dict is private to this immutable instance
    def _memo(self, key, build):
        try:
            return self._cache[key]
        except KeyError:
            return self._cache.setdefault(key, build())


# --- superoperators ---------------------------------------------------------

def dissipator(c):
    """Vectorized ``D[c](rho) = c rho c^+ - {c^+ c, rho}/2``."""
    c = np.asarray(c, dtype=complex)
    cd = c.conj().T
    cdc = cd @ c
    return sandwich(c, cd) - 0.5 * (left(cdc) + right(cdc))


def insertion(c):
    """Vectorized ``c^+ . rho = c rho + rho c^+``."""
    c = np.asarray(c, dtype=complex)
    return left(c) + right(c.conj().T)


def innovation(c, rho):
    """Nonlinear conditioning term ``c rho + rho c^+ - tr[(c + c^+) rho] rho``."""
    c = np.asarray(c, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    if c.shape != rho.shape:
        raise ValueError(f"dimension mismatch: {c.shape} vs {rho.shape}")
    m = np.trace((c + c.conj().T) @ rho)
    return c @ rho + rho @ c.conj().T - m * rho


def hamiltonian_part(H):
    """Vectorized ``-i[H, rho]``."""
    H = np.asarray(H, dtype=complex)
    return -1j * (left(H) - right(H))


def averaged_generator(model):
    """Generator of the measurement-averaged dynamics.

    ``-i[H, .] + sum_j D[L_j] + sum_k D[c_k]``; efficiencies do not enter.
    """
    def build():
        G = hamiltonian_part(model.hamiltonian)
        for L in model.decay:
            G = G + dissipator(L)
        for ch in model.channels:
            G = G + dissipator(ch.c)
        G.setflags(write=False)
        return G
    return model._memo("generator", build)


class Propagator:
    """Memoized ``Phi_t = exp(t G)`` for a fixed generator ``G``.

    ``__call__`` uses the dense exponential and caches by ``t``. For batched
    evaluation at many times the generator's eigendecomposition is used when
    it is well conditioned (``spectral`` is then not ``None``).
    """

    COND_LIMIT = 1e8

    def __init__(self, generator):
        G = np.array(generator, dtype=complex)
        G.setflags(write=False)
        self.generator = G
        self._memo = {}
        self._lock = threading.Lock()
        self._spectral = None
        self._spectral_done = False

    def __call__(self, t):
        t = float(t)
        if t < 0:
            raise ValueError(f"propagator needs t >= 0, got {t}")
        try:
            return self._memo[t]
        except KeyError:
            pass
        P = expm(self.generator, t)
        P.setflags(write=False)
        with self._lock:
            return self._memo.setdefault(t, P)

    @property
    def spectral(self):
        """``(mu, V, Vinv)`` with ``G = V diag(mu) Vinv``, or ``None``."""
        if not self._spectral_done:
            with self._lock:
                if not self._spectral_done:
                    mu, V = np.linalg.eig(self.generator)
                    cond = np.linalg.cond(V)
                    if np.isfinite(cond) and cond < self.COND_LIMIT:
                        self._spectral = (mu, V, np.linalg.inv(V))
                    self._spectral_done = True
        return self._spectral


def propagator(model, t=None):
    """``Phi_t`` of the averaged dynamics, or the cached :class:`Propagator`
    itself when ``t`` is omitted."""
    prop = model._memo("propagator", lambda: Propagator(averaged_generator(model)))
    if t is None:
        return prop
    return prop(t)


NULL_TOL = 1e-9
GAP_TOL = 1e-6


def stationary_state(model):
    """Unique stationary density matrix of the averaged dynamics.

    Raises :class:`NonUniqueStationaryState` when the generator has more than
    one eigenvalue with modulus below ``GAP_TOL``.
    """
    def build():
        d = model.dim
        G = averaged_generator(model)
        ev = np.linalg.eigvals(G)
        mags = np.sort(np.abs(ev))
        if mags[0] > NULL_TOL * max(1.0, np.abs(G).max()):
            raise ModelError(f"generator has no zero eigenvalue (smallest |ev| = {mags[0]:.3g})")
        if d > 1 and mags[1] <= GAP_TOL:
            raise NonUniqueStationaryState(int(np.sum(mags <= GAP_TOL)), ev)
        # G rho = 0 with the trace row appended; least squares is exact here
        A = np.vstack([G, vec(np.eye(d))[None, :]])
        b = np.zeros(d * d + 1, complex)
        b[-1] = 1.0
        x = np.linalg.lstsq(A, b, rcond=None)[0]
        rho = unvec(x, d)
        rho = 0.5 * (rho + rho.conj().T)
        rho = rho / np.trace(rho).real
        residual = np.abs(G @ vec(rho)).max()
        if residual > 1e-10 * max(1.0, np.abs(G).max()):
            raise ModelError(f"stationary state residual {residual:.3g} too large")
        rho.setflags(write=False)
        return rho
    return model._memo("stationary", build)


def choi_matrix(superop, d):
    """Choi matrix ``sum_ij |i><j| (x) S(|i><j|)`` of a vectorized map."""
    S = np.asarray(superop)
    C = np.zeros((d * d, d * d), complex)
    for i in range(d):
        for j in range(d):
            E = np.zeros((d, d), complex)
            E[i, j] = 1.0
            C += np.kron(E, unvec(S @ vec(E), d))
    return C


# --- model files ------------------------------------------------------------

def _matrix_to_json(M):
    M = np.asarray(M, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in M]


def _matrix_from_json(rows, d, what):
    M = np.array([[complex(re, im) for re, im in row] for row in rows], dtype=complex)
    if M.shape != (d, d):
        raise ModelError(f"{what} has shape {M.shape}, expected {(d, d)}")
    return M


def model_to_dict(model):
    return {
        "dim": model.dim,
        "hamiltonian": _matrix_to_json(model.hamiltonian),
        "decay": [_matrix_to_json(L) for L in model.decay],
        "channels": [
            {"label": ch.label, "c": _matrix_to_json(ch.c), "eta": ch.eta}
            for ch in model.channels
        ],
    }


def model_from_dict(data):
    """Build a :class:`SystemModel` from its JSON document (validated)."""
    import jsonschema

    from .schemas import validate
    try:
        validate(data, "model")
    except jsonschema.ValidationError as exc:
        raise ModelError(f"invalid model file: {exc.message}") from None
    d = data["dim"]
    H = data.get("hamiltonian")
    return SystemModel(
        dim=d,
        hamiltonian=None if H is None else _matrix_from_json(H, d, "hamiltonian"),
        decay=tuple(_matrix_from_json(L, d, "decay operator") for L in data.get("decay", [])),
        channels=tuple(
            MeasurementChannel(ch["label"], _matrix_from_json(ch["c"], d, f"channel {ch['label']}"),
                               ch.get("eta", 1.0))
            for ch in data.get("channels", [])
        ),
    )


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def dump_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def model_hash(model):
    """Short content hash used in file headers."""
    blob = json.dumps(model_to_dict(model), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
