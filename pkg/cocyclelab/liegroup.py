"""
Lie-theoretic kernel for SL(n, R)

Cartan (KAK) decomposition, type A simple roots and fundamental weights,
the longest Weyl element, wedge volumes of frames and the Bruhat position
of a pair of full flags. The Cartan involution is transpose-inverse, so
K = SO(n) and KAK is the singular value decomposition with a sign fix.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from loguru import logger

from .configs import ANGLE_TOL, GROUP_DET_TOL, INPUT_DET_TOL
from .errors import InvalidInputError

ArrayLike = Union[np.ndarray, Sequence[Sequence[float]]]


@dataclass(frozen=True)
class GroupElement:
    """An n x n real matrix of determinant one"""
    matrix: np.ndarray

    def __post_init__(self):
        m = _checked_square(self.matrix)
        det = np.linalg.det(m)
        if abs(det - 1.0) > GROUP_DET_TOL:
            raise InvalidInputError(f"determinant {det!r} differs from 1 by more than {GROUP_DET_TOL}")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def inverse(self) -> "GroupElement":
        return GroupElement(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "GroupElement") -> "GroupElement":
        return GroupElement(self.matrix @ as_matrix(other))


@dataclass(frozen=True)
class CartanTriple:
    """g = k1 . exp(diag(a_log)) . k2 with k1, k2 in SO(n) and a_log non-increasing"""
    k1: np.ndarray
    a_log: np.ndarray
    k2: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.k1 * np.exp(self.a_log)) @ self.k2


@dataclass(frozen=True)
class ParabolicSpec:
    """A subset I of the simple roots {1, ..., n-1}; levels indexed by I are forgotten"""
    n: int
    roots: frozenset

    def __post_init__(self):
        roots = frozenset(int(k) for k in self.roots)
        bad = [k for k in roots if not 1 <= k <= self.n - 1]
        if bad:
            raise InvalidInputError(f"root indices {sorted(bad)} outside 1..{self.n - 1}")
        object.__setattr__(self, "roots", roots)

    def retained_levels(self) -> Tuple[int, ...]:
        return tuple(k for k in range(1, self.n) if k not in self.roots)

    def dual(self) -> "ParabolicSpec":
        """I' = {-w0 a w0^-1 : a in I}, i.e. k -> n - k for type A"""
        return ParabolicSpec(self.n, frozenset(root_involution(self.n, k) for k in self.roots))


@dataclass(frozen=True)
class WeylElement:
    """Signed permutation matrix of determinant +1"""
    matrix: np.ndarray
    permutation: Tuple[int, ...]

    @property
    def label(self) -> str:
        return permutation_label(self.permutation)


@dataclass(frozen=True)
class BruhatProfile:
    table: np.ndarray
    permutation: Optional[Tuple[int, ...]]
    label: str


def _checked_square(m: ArrayLike) -> np.ndarray:
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise InvalidInputError(f"expected a square matrix of size >= 2, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    return m


def as_matrix(g: Union[GroupElement, ArrayLike], det_tol: float = INPUT_DET_TOL) -> np.ndarray:
    """Validate g as an element of SL(n, R) and return its matrix"""
    if isinstance(g, GroupElement):
        return g.matrix
    m = _checked_square(g)
    det = np.linalg.det(m)
    if abs(det - 1.0) > det_tol:
        raise InvalidInputError(f"determinant {det!r} differs from 1 by more than {det_tol}")
    return m


def random_element(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """Gaussian matrix projected to determinant one"""
    m = rng.standard_normal((n, n)) * scale
    det = np.linalg.det(m)
    if det < 0:
        m[0] = -m[0]
        det = -det
    return m / det ** (1.0 / n)


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed element of SO(n)"""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


def kak(g: Union[GroupElement, ArrayLike]) -> CartanTriple:
    """
    Cartan decomposition g = k1 a k2.

    Singular values come out positive and sorted; a negative determinant
    in the orthogonal factors is pushed into the last column of k1 (and
    the matching row of k2).
    """
    m = as_matrix(g)
    u, s, vt = np.linalg.svd(m)
    if np.linalg.det(u) < 0:
        u[:, -1] = -u[:, -1]
        vt[-1, :] = -vt[-1, :]
    a_log = np.log(s)
    a_log = a_log - a_log.mean()
    return CartanTriple(k1=u, a_log=a_log, k2=vt)


def cartan_log(g: Union[GroupElement, ArrayLike]) -> np.ndarray:
    """a_log of g without the orthogonal factors"""
    s = np.linalg.svd(as_matrix(g), compute_uv=False)
    a_log = np.log(s)
    return a_log - a_log.mean()


def _check_root_index(n: int, k: int):
    if not 1 <= k <= n - 1:
        raise InvalidInputError(f"root index {k} outside 1..{n - 1}")


def _non_negative(value: float, a: np.ndarray, what: str) -> float:
    """Root and weight values of a Cartan projection are >= 0; allow rounding only"""
    if not np.isfinite(value) or value < -GROUP_DET_TOL * max(1.0, float(np.max(np.abs(a)))):
        raise InvalidInputError(f"{what} = {value:.3e} on Cartan projection {a.tolist()}")
    return value


def alpha_val(g: Union[GroupElement, ArrayLike], k: int) -> float:
    """Simple root alpha_k evaluated on the Cartan projection: a_k - a_{k+1}"""
    a = cartan_log(g)
    _check_root_index(a.size, k)
    return _non_negative(float(a[k - 1] - a[k]), a, f"alpha_{k}")


def omega_val(g: Union[GroupElement, ArrayLike], k: int) -> float:
    """Fundamental weight omega_k on the Cartan projection: log of the top-k singular value product"""
    a = cartan_log(g)
    _check_root_index(a.size, k)
    return _non_negative(float(np.sum(a[:k])), a, f"omega_{k}")


def roots_from_a_log(a_log: np.ndarray) -> np.ndarray:
    return a_log[:-1] - a_log[1:]


def weights_from_a_log(a_log: np.ndarray) -> np.ndarray:
    return np.cumsum(a_log)[:-1]


def cartan_pairing(n: int) -> np.ndarray:
    """<alpha_k, gamma> for type A_{n-1}: the Cartan matrix"""
    if n < 2:
        raise InvalidInputError(f"dimension must be >= 2, got {n}")
    m = n - 1
    pairing = 2 * np.eye(m, dtype=np.int64)
    idx = np.arange(m - 1)
    pairing[idx, idx + 1] = -1
    pairing[idx + 1, idx] = -1
    return pairing


def root_involution(n: int, k: int) -> int:
    """Index map alpha_k -> -w0 alpha_k w0^-1"""
    _check_root_index(n, k)
    return n - k


def longest_weyl(n: int) -> WeylElement:
    """
    Longest Weyl element as an antidiagonal signed permutation.

    Signs are chosen so that det = +1 and w0 . w0 = +-identity.
    """
    if n < 2:
        raise InvalidInputError(f"dimension must be >= 2, got {n}")
    signs = np.ones(n)
    reversal_sign = -1 if (n * (n - 1) // 2) % 2 else 1
    if reversal_sign < 0:
        if n % 2:
            signs[n // 2] = -1
        else:
            signs[n // 2:] = -1
    w = np.zeros((n, n))
    for i in range(n):
        w[i, n - 1 - i] = signs[i]
    permutation = tuple(n - i for i in range(n))
    return WeylElement(matrix=w, permutation=permutation)


def permutation_label(permutation: Sequence[int]) -> str:
    n = len(permutation)
    if tuple(permutation) == tuple(range(1, n + 1)):
        return "identity"
    if tuple(permutation) == tuple(range(n, 0, -1)):
        return "w0"
    return "w[" + ",".join(str(p) for p in permutation) + "]"


def _frame(frame: Union[np.ndarray, Sequence[Sequence[float]]]) -> np.ndarray:
    if isinstance(frame, np.ndarray) and frame.ndim == 2:
        f = frame.astype(float)
    else:
        f = np.column_stack([np.asarray(v, dtype=float) for v in frame])
    n, k = f.shape
    if not 1 <= k <= n:
        raise InvalidInputError(f"frame of {k} vectors in dimension {n}")
    return f


def log_wedge_volume(frame) -> float:
    """log of the k-volume spanned by the frame columns (-inf for a degenerate frame)"""
    r = np.linalg.qr(_frame(frame), mode="r")
    diag = np.abs(np.diag(r))
    if np.any(diag == 0):
        return float("-inf")
    return float(np.sum(np.log(diag)))


def wedge_volume(frame) -> float:
    """
    Norm of v_1 ^ ... ^ v_k, i.e. sqrt of the Gram determinant.

    This is the norm of the highest weight vector of the k-th fundamental
    representation evaluated on a decomposable vector.
    """
    r = np.linalg.qr(_frame(frame), mode="r")
    return float(np.abs(np.prod(np.diag(r))))


def log_singular_values(W: np.ndarray, row_log: Optional[np.ndarray] = None,
                        col_log: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Log singular values of diag(e^row_log) . W . diag(e^col_log), sorted non-increasing.

    Works through exterior powers: log ||wedge^k X|| is the top singular value
    of the k-th compound matrix, whose entries (k x k minors) are formed in
    log scale. Entries that underflow after shifting by the largest one are
    negligible against it, so nothing overflows however long the product is.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    row_log = np.zeros(n) if row_log is None else np.asarray(row_log, dtype=float)
    col_log = np.zeros(n) if col_log is None else np.asarray(col_log, dtype=float)
    omega = np.zeros(n + 1)
    for k in range(1, n + 1):
        subsets = list(combinations(range(n), k))
        idx = np.array(subsets)
        minors = W[idx[:, None, :, None], idx[None, :, None, :]]
        sign, logdet = np.linalg.slogdet(minors)
        logs = logdet + row_log[idx].sum(axis=1)[:, None] + col_log[idx].sum(axis=1)[None, :]
        finite = np.isfinite(logs)
        if not np.any(finite):
            omega[k:] = -np.inf
            break
        top = logs[finite].max()
        compound = np.where(finite, sign * np.exp(np.where(finite, logs - top, 0.0)), 0.0)
        omega[k] = top + np.log(np.linalg.norm(compound, 2))
    return np.diff(omega)


def bruhat_profile(F, F_prime, angle_tol: float = ANGLE_TOL) -> BruhatProfile:
    """
    Relative position of two full flags.

    table[i-1][j-1] is the numerical dimension of F_i meet F'_j, counted as
    principal angles below angle_tol. The Weyl position is read from the
    second differences of the table; a table that is not realizable by a
    permutation yields the label "ambiguous".
    """
    if angle_tol <= 0:
        raise InvalidInputError("angle_tol must be positive")
    A = np.asarray(getattr(F, "basis", F), dtype=float)
    B = np.asarray(getattr(F_prime, "basis", F_prime), dtype=float)
    if A.shape != B.shape:
        raise InvalidInputError(f"flag dimensions differ: {A.shape} vs {B.shape}")
    n = A.shape[0]
    table = np.zeros((n, n), dtype=np.int64)
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            angles = la.subspace_angles(A[:, :i], B[:, :j])
            table[i - 1, j - 1] = int(np.sum(angles < angle_tol))

    padded = np.zeros((n + 1, n + 1), dtype=np.int64)
    padded[1:, 1:] = table
    second = padded[1:, 1:] - padded[:-1, 1:] - padded[1:, :-1] + padded[:-1, :-1]
    is_permutation = (
        np.all((second == 0) | (second == 1))
        and np.all(second.sum(axis=0) == 1)
        and np.all(second.sum(axis=1) == 1)
    )
    if not is_permutation:
        logger.debug(f"Bruhat table not realizable by a permutation:\n{table}")
        return BruhatProfile(table=table, permutation=None, label="ambiguous")
    permutation = tuple(int(np.argmax(second[a])) + 1 for a in range(n))
    return BruhatProfile(table=table, permutation=permutation, label=permutation_label(permutation))
