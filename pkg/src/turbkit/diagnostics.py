"""Local structure functions, two-point budget terms and their balances.

Every localized two-point quantity used here is a sphere average of a
correlation

    C_ab(h) = int a(x) b(x + h) dx = (2pi)^3 sum_k conj(a_k) b_k exp(i k.h)

between products a, b of u, p, Z and the weight psi, contracted with a
polynomial in the direction n (h = l n).  Two averaging modes exist:

* exact (dirs=None): the sphere average of n_i...exp(i l k.n) is a
  combination of spherical Bessel functions of |k| l, so each term
  collapses to radial spectra indexed by |k|^2 and is evaluated at any l
  without direction error;
* quadrature (a DirectionSet): C_ab is evaluated at the points l n_d by a
  non-uniform FFT and averaged with the set's weights.

Products are formed on a 3/2-padded grid and cropped to the band where
both factors live, which keeps every retained coefficient alias free.
Integrals over tau in the integrated balances use composite
Gauss-Legendre rules on the length grid, shared by all terms.

Snapshot averages stand in for expectations; standard errors come from
the per-snapshot series with an integrated-autocorrelation correction.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np
from scipy import fft, special

from .ensemble import series_estimate
from .spectral import (
    ConfigurationError, SpectralField, WaveGrid, get_workers, leray_project,
    pressure_recover, spectral_shift,
)

FOUR_PI = 4.0 * np.pi


class MissingPressureError(RuntimeError):
    """Snapshots lack the pressure needed by a pressure term."""

    def __init__(self):
        super().__init__(
            "snapshots carry no pressure; recover it with pressure_recover(u) "
            "(CLI: --recover-pressure) before computing pressure terms")


# ---------------------------------------------------------------- directions

@dataclass(frozen=True)
class DirectionSet:
    """Unit vectors on the sphere with weights summing to 4 pi."""

    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if d.ndim != 2 or d.shape[1] != 3 or w.shape != (len(d),):
            raise ConfigurationError("directions must be (n, 3) with n weights")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    def second_moment(self):
        """(1/4pi) sum w n (x) n; the sphere gives I/3."""
        return np.einsum("d,di,dj->ij", self.weights, self.directions, self.directions) / FOUR_PI

    def first_moment(self):
        return self.weights @ self.directions / FOUR_PI


def build_direction_set(n_dirs=128):
    """Fibonacci-sphere points with equal weights 4 pi / n.

    The raw lattice has a centroid of order 1/n; three passes of
    recentering and renormalizing push it well below the second-moment
    error without disturbing the latter.
    """
    if n_dirs < 16:
        raise ConfigurationError(f"need at least 16 directions, got {n_dirs}")
    i = np.arange(n_dirs) + 0.5
    z = 1.0 - 2.0 * i / n_dirs
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    for _ in range(3):
        dirs = dirs - dirs.mean(axis=0)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return DirectionSet(dirs, np.full(n_dirs, FOUR_PI / n_dirs))


def custom_directions(vectors, weights=None):
    """DirectionSet from arbitrary vectors (normalized); equal weights by default."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    w = np.full(len(v), FOUR_PI / len(v)) if weights is None else np.asarray(weights, float)
    return DirectionSet(v, w)


# ---------------------------------------------------------------- lengths

@dataclass(frozen=True)
class LengthGrid:
    """Increment lengths l, strictly increasing and inside the shift margin."""

    ell: np.ndarray
    spacing: str = "log"
    margin: float = np.inf
    n_gauss: int = 8

    def __post_init__(self):
        ell = np.asarray(self.ell, dtype=float)
        if ell.ndim != 1 or len(ell) == 0:
            raise ConfigurationError("length grid must be a non-empty 1-D array")
        if ell[0] <= 0 or np.any(np.diff(ell) <= 0):
            raise ConfigurationError("lengths must be positive and strictly increasing")
        if ell[-1] > self.margin:
            raise ConfigurationError(
                f"largest length {ell[-1]:.4g} exceeds the shift margin {self.margin:.4g}")
        if self.n_gauss < 2:
            raise ConfigurationError("n_gauss must be at least 2")
        object.__setattr__(self, "ell", ell)

    def __len__(self):
        return len(self.ell)

    def tau_rule(self):
        """Nodes and weights of the composite Gauss rule on [0, l_0], [l_0, l_1], ...

        Returns arrays of shape (n_ell, n_gauss); the integral from 0 to
        l_i is the cumulative sum over the first i + 1 rows.
        """
        x, w = np.polynomial.legendre.leggauss(self.n_gauss)
        lo = np.concatenate([[0.0], self.ell[:-1]])
        half = 0.5 * (self.ell - lo)
        nodes = (lo + half)[:, None] + half[:, None] * x[None, :]
        return nodes, half[:, None] * w[None, :]


def build_length_grid(ell_min, ell_max, n=24, spacing="log", margin=np.inf, n_gauss=8):
    if not 0 < ell_min < ell_max:
        raise ConfigurationError("need 0 < ell_min < ell_max")
    if n < 2:
        raise ConfigurationError("need at least two lengths")
    if spacing == "log":
        ell = np.geomspace(ell_min, ell_max, n)
    elif spacing == "linear":
        ell = np.linspace(ell_min, ell_max, n)
    else:
        raise ConfigurationError(f"unknown spacing {spacing!r}")
    return LengthGrid(ell, spacing, margin, n_gauss)


# ---------------------------------------------------------------- kernels

def sphere_bessel_ratio(m, r):
    """g_m(r) = j_m(r) / r^m, with the series near 0 (g_m(0) = 1/(2m+1)!!)."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    small = r < 4.0
    rs = r[small]
    x = -0.5 * rs * rs
    term = np.full_like(rs, 1.0 / special.factorial2(2 * m + 1))
    total = term.copy()
    for s in range(1, 40):
        term = term * x / (s * (2 * m + 2 * s + 1))
        total += term
    out[small] = total
    rb = r[~small]
    out[~small] = special.spherical_jn(m, rb) / rb**m
    return out


# channels (m, p): contribution tau^p g_m(|k| tau) times the radial weight
_CHANNELS = ((0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 3))


# ---------------------------------------------------------------- term table
#
# A pair (coef, A, B, mono, deriv) contributes coef * C_{A,B}(h) with the
# B factor differentiated along axis `deriv` (if any) and multiplied by
# the direction monomial prod_{i in mono} n_i.

def _sym_terms(builder, order):
    """Expand sum over index tuples of a monomial builder."""
    out = []
    for idx in product(range(3), repeat=order):
        out.extend(builder(idx))
    return out


def _term_table():
    T = {}
    T["Gamma"] = [(1.0, f"psi_u{i}", f"u{i}", (), None) for i in range(3)]
    T["dGamma"] = [(1.0, f"psi_u{i}", f"u{i}", (m,), m) for i in range(3) for m in range(3)]
    T["Gamma_t"] = _sym_terms(lambda ijk: [(1.0, f"psi_u{ijk[0]}", f"u{ijk[1]}", ijk, ijk[2])], 3)
    T["Z"] = [(1.0, f"psi_u{i}", f"Z{i}", (), None) for i in range(3)] + \
             [(1.0, f"psi_Z{i}", f"u{i}", (), None) for i in range(3)]
    T["Z_t"] = _sym_terms(lambda ij: [(1.0, f"psi_Z{ij[1]}", f"u{ij[0]}", ij, None),
                                      (1.0, f"psi_u{ij[0]}", f"Z{ij[1]}", ij, None)], 2)
    T["R"] = [(1.0, f"psi_u{i}", f"R{i}", (), None) for i in range(3)] + \
             [(1.0, f"psi_R{i}", f"u{i}", (), None) for i in range(3)]
    T["R_t"] = _sym_terms(lambda ij: [(1.0, f"psi_R{ij[1]}", f"u{ij[0]}", ij, None),
                                      (1.0, f"psi_u{ij[0]}", f"R{ij[1]}", ij, None)], 2)
    T["dot"] = [(1.0, f"psi_u{i}", f"D{i}", (), None) for i in range(3)] + \
               [(1.0, f"psi_D{i}", f"u{i}", (), None) for i in range(3)]
    T["dot_t"] = _sym_terms(lambda ij: [(1.0, f"psi_D{ij[1]}", f"u{ij[0]}", ij, None),
                                        (1.0, f"psi_u{ij[0]}", f"D{ij[1]}", ij, None)], 2)

    # |du|^2 (du.n) with du = b - a, a = u(x), b = u(x + h)
    s0 = []
    for k in range(3):
        s0 += [(1.0, "psi", f"usqu{k}", (k,), None),
               (-1.0, f"psi_u{k}", "usq", (k,), None),
               (1.0, "psi_usq", f"u{k}", (k,), None),
               (-1.0, f"psi_usqu{k}", "one", (k,), None)]
        for i in range(3):
            s0 += [(-2.0, f"psi_u{i}", _pair_name(i, k), (k,), None),
                   (2.0, f"psi_{_pair_name(i, k)}", f"u{i}", (k,), None)]
    T["S0"] = s0
    T["Spar"] = _sym_terms(lambda ijk: [
        (1.0, "psi", _triple_name(*ijk), ijk, None),
        (-3.0, f"psi_u{ijk[0]}", _pair_name(ijk[1], ijk[2]), ijk, None),
        (3.0, f"psi_{_pair_name(ijk[0], ijk[1])}", f"u{ijk[2]}", ijk, None),
        (-1.0, f"psi_{_triple_name(*ijk)}", "one", ijk, None)], 3)

    T["F"] = [(1.0, f"g{m}", f"usqu{m}", (), None) for m in range(3)] + [(-1.0, "udg", "usq", (), None)]
    T["F_t"] = _sym_terms(lambda ij: [(1.0, f"g{m}", _triple_name(ij[0], ij[1], m), ij, None)
                                      for m in range(3)]
                          + [(-1.0, "udg", _pair_name(*ij), ij, None)], 2)
    T["G"] = [(1.0, f"lap_u{i}", f"u{i}", (), None) for i in range(3)]
    T["G_t"] = _sym_terms(lambda ij: [(1.0, f"lap_u{ij[0]}", f"u{ij[1]}", ij, None)], 2)
    T["Q"] = [(1.0, f"g{m}_u{i}", f"u{i}", (m,), None) for m in range(3) for i in range(3)]
    T["Q1_t"] = _sym_terms(lambda mij: [(1.0, f"g{mij[0]}_u{mij[1]}", f"u{mij[2]}", mij, None)], 3)
    T["Q2_t"] = [(1.0, "udg", f"u{j}", (j,), None) for j in range(3)]
    T["Q3_t"] = [(1.0, f"g{j}_u{i}", f"u{j}", (i,), None) for i in range(3) for j in range(3)]
    T["H"] = [(1.0, f"udg_u{i}", f"u{i}", (), None) for i in range(3)]
    T["H_t"] = _sym_terms(lambda ij: [(1.0, f"udg_u{ij[0]}", f"u{ij[1]}", ij, None)], 2)
    T["P1"] = [(1.0, f"p_g{m}", f"u{m}", (), None) for m in range(3)]
    T["P1_t"] = _sym_terms(lambda mi: [(1.0, f"p_g{mi[0]}", f"u{mi[1]}", mi, None)], 2)
    T["P2"] = [(1.0, f"psi_u{i}", "p", (), i) for i in range(3)]
    T["Pball"] = [(1.0, "udg", "p", (), None)]
    return T


def _pair_name(i, j):
    i, j = sorted((i, j))
    return f"uu{i}{j}"


def _triple_name(i, j, k):
    i, j, k = sorted((i, j, k))
    return f"uuu{i}{j}{k}"


TERM_TABLE = _term_table()
PRESSURE_TERMS = {"P1", "P1_t", "P2", "Pball"}
TENDENCY_TERMS = {"dot", "dot_t"}


# ---------------------------------------------------------------- snapshot fields

class _Fields:
    """Padded physical fields and cropped half-space spectra of one snapshot."""

    def __init__(self, snap, psi, nu, need_pressure, need_tendency):
        grid = snap.u.grid
        self.grid = grid
        self.K = grid.kcut
        self.M = 3 * grid.N // 2
        if self.M <= 4 * self.K:
            raise ConfigurationError("padded grid too small for alias-free products")
        self.uhat = snap.u.data
        self.psi = psi
        self.phys = {}
        self.spectra = {}
        self._set_field_spectra(snap, psi, nu, need_pressure, need_tendency)

    def _pad(self, full):
        """Zero-padded half spectrum on the M grid from full N-grid coefficients."""
        N, M, K = self.grid.N, self.M, self.K
        idx_n = np.r_[0:K + 1, N - K:N]
        idx_m = np.r_[0:K + 1, M - K:M]
        lead = full.shape[:-3]
        out = np.zeros(lead + (M, M, M // 2 + 1), dtype=complex)
        src = full[..., idx_n[:, None, None], idx_n[None, :, None], np.arange(K + 1)[None, None, :]]
        out[..., idx_m[:, None, None], idx_m[None, :, None], np.arange(K + 1)[None, None, :]] = src
        return out

    def _to_phys(self, half):
        M = self.M
        return fft.irfftn(half, s=(M, M, M), axes=(-3, -2, -1), norm="forward",
                          workers=get_workers())

    def _to_half(self, values):
        return fft.rfftn(values, axes=(-3, -2, -1), norm="forward", workers=get_workers())

    def _crop_m(self, half, band):
        """Crop an M-grid half spectrum to |k_i| <= band (FFT-ordered cube)."""
        M = self.M
        idx = np.r_[0:band + 1, M - band:M]
        return half[..., idx[:, None, None], idx[None, :, None], np.arange(band + 1)[None, None, :]]

    def _crop_n(self, full, band):
        N = self.grid.N
        idx = np.r_[0:band + 1, N - band:N]
        return full[..., idx[:, None, None], idx[None, :, None], np.arange(band + 1)[None, None, :]]

    def _set_field_spectra(self, snap, psi, nu, need_pressure, need_tendency):
        grid, K = self.grid, self.K
        u = self._to_phys(self._pad(self.uhat))
        self.phys["u"] = u
        for i in range(3):
            self.spectra[f"u{i}"] = self._crop_n(self.uhat[i], K)
        self.spectra["one"] = np.ones((1, 1, 1), dtype=complex)

        psi_hat = psi.psi.data
        grads = np.stack([g.data for g in psi.grad_psi])
        self.phys["psi"] = self._to_phys(self._pad(psi_hat))
        self.phys["g"] = self._to_phys(self._pad(grads))
        self.phys["lap"] = self._to_phys(self._pad(psi.lap_psi.data))
        self.spectra["psi"] = self._crop_n(psi_hat, K)
        for m in range(3):
            self.spectra[f"g{m}"] = self._crop_n(grads[m], K)

        Zhat = snap.Z.data
        self.phys["Z"] = self._to_phys(self._pad(Zhat))
        for i in range(3):
            self.spectra[f"Z{i}"] = self._crop_n(Zhat[i], K)

        # quadratic products, the Galerkin remainder and the tendency
        pairs = [(i, j) for i in range(3) for j in range(i, 3)]
        prod = np.stack([u[i] * u[j] for i, j in pairs])
        prod_hat = self._to_half(prod)
        self._prod_hat = dict(zip(pairs, prod_hat))
        for n, (i, j) in enumerate(pairs):
            self.spectra[f"uu{i}{j}"] = self._crop_m(prod_hat[n], 2 * K)
        self.spectra["usq"] = sum(self.spectra[f"uu{i}{i}"] for i in range(3))

        M = self.M
        kv = np.fft.fftfreq(M, 1.0 / M)
        kz = np.arange(M // 2 + 1)
        kk = (kv[:, None, None], kv[None, :, None], kz[None, None, :])
        flux = np.zeros((3, M, M, M // 2 + 1), dtype=complex)
        for i in range(3):
            for j in range(3):
                flux[i] += 1j * kk[j] * self._prod_hat[tuple(sorted((i, j)))]
        inside = (np.abs(kk[0]) <= K) & (np.abs(kk[1]) <= K) & (kz[None, None, :] <= K)
        remainder = np.where(inside, 0.0, flux)
        self.phys["R"] = self._to_phys(remainder)
        for i in range(3):
            self.spectra[f"R{i}"] = self._crop_m(remainder[i], 2 * K)

        if need_pressure:
            p = snap.p
            if p is None:
                raise MissingPressureError()
            self.phys["p"] = self._to_phys(self._pad(p.data))
            self.spectra["p"] = self._crop_n(p.data, K)

        if need_tendency:
            # Galerkin tendency -P_k B(u) - nu |k|^2 u + Z on the band
            fl = np.zeros_like(self.uhat)
            for i in range(3):
                fl[i] = self._unpad(flux[i])
            fl = leray_project(SpectralField(grid, fl * grid.dealias)).data
            D = -fl - nu * grid.k2 * self.uhat + Zhat
            self.phys["D"] = self._to_phys(self._pad(D))
            for i in range(3):
                self.spectra[f"D{i}"] = self._crop_n(D[i], K)

    def _unpad(self, half_m):
        """Full N-grid coefficients of an M-grid half spectrum restricted to the band."""
        grid = self.grid
        N, M, K = grid.N, self.M, self.K
        idx_n = np.r_[0:K + 1, N - K:N]
        idx_m = np.r_[0:K + 1, M - K:M]
        out = np.zeros(grid.shape, dtype=complex)
        out[idx_n[:, None, None], idx_n[None, :, None], np.arange(K + 1)[None, None, :]] = \
            half_m[idx_m[:, None, None], idx_m[None, :, None], np.arange(K + 1)[None, None, :]]
        # fill kz < 0 by symmetry
        neg = (-np.arange(N)) % N
        for kz in range(1, K + 1):
            out[:, :, N - kz] = np.conj(out[neg][:, neg][:, :, kz])
        return out

    def spectrum(self, name):
        """Cropped half-space spectrum of a named product, computed on demand.

        Each product is cropped to the band of the factor it is paired
        with (K for single fields, 2K for quadratic ones); products only
        ever integrated against a constant keep their mean alone.
        """
        if name in self.spectra:
            return self.spectra[name]
        K = self.K
        u, psi, g = self.phys["u"], self.phys["psi"], self.phys["g"]
        crop = K
        if name.startswith("uuu"):
            i, j, k = (int(c) for c in name[3:])
            values = u[i] * u[j] * u[k]
        elif name.startswith("usqu"):
            values = np.sum(u * u, axis=0) * u[int(name[4:])]
        elif name.startswith("psi_usqu") or name.startswith("psi_uuu"):
            if name.startswith("psi_usqu"):
                values = psi * np.sum(u * u, axis=0) * u[int(name[8:])]
            else:
                i, j, k = (int(c) for c in name[7:])
                values = psi * u[i] * u[j] * u[k]
            out = np.full((1, 1, 1), np.mean(values), dtype=complex)
            self.spectra[name] = out
            return out
        elif name == "psi_usq":
            values = psi * np.sum(u * u, axis=0)
        elif name.startswith("psi_uu"):
            values = psi * u[int(name[6])] * u[int(name[7])]
        elif name.startswith("psi_u"):
            values = psi * u[int(name[5:])]
            crop = 2 * K
        elif name.startswith("psi_Z"):
            values = psi * self.phys["Z"][int(name[5:])]
        elif name.startswith("psi_R"):
            values = psi * self.phys["R"][int(name[5:])]
        elif name.startswith("psi_D"):
            values = psi * self.phys["D"][int(name[5:])]
        elif name.startswith("udg_u"):
            values = np.sum(u * g, axis=0) * u[int(name[5:])]
        elif name == "udg":
            values = np.sum(u * g, axis=0)
            crop = 2 * K
        elif name.startswith("lap_u"):
            values = self.phys["lap"] * u[int(name[5:])]
        elif name.startswith("p_g"):
            values = self.phys["p"] * g[int(name[3:])]
        elif name.startswith("g") and "_u" in name:
            values = g[int(name[1])] * u[int(name[-1])]
        else:
            raise KeyError(name)
        out = self._crop_m(self._to_half(values), crop)
        self.spectra[name] = out
        return out


@lru_cache(maxsize=16)
def _crop_geometry(band):
    """Wavevectors, |k|^2 and half-space weights of the cropped cube."""
    kv = np.r_[0:band + 1, -band:0].astype(float)
    kz = np.arange(band + 1, dtype=float)
    k = np.broadcast_arrays(kv[:, None, None], kv[None, :, None], kz[None, None, :])
    k = np.stack([np.array(a) for a in k])
    q = np.rint(np.sum(k * k, axis=0)).astype(int)
    w = np.where(kz[None, None, :] > 0, 2.0, 1.0) * np.ones_like(q)
    return k, q, w


def _subcrop(arr, band):
    """Restrict an FFT-ordered half cube to a smaller band."""
    size = arr.shape[0]
    b0 = (size - 1) // 2
    if band == b0:
        return arr
    idx = np.r_[0:band + 1, size - band:size]
    return arr[idx[:, None, None], idx[None, :, None], np.arange(band + 1)[None, None, :]]


def _pair_spectrum(fields, A, B, deriv):
    """(2pi)^3 conj(A) B (i k_deriv) on the common band."""
    a = fields.spectrum(A)
    b = fields.spectrum(B)
    band = min((a.shape[0] - 1) // 2, (b.shape[0] - 1) // 2)
    x = np.conj(_subcrop(a, band)) * _subcrop(b, band) * (2 * np.pi) ** 3
    if deriv is not None:
        k, _, _ = _crop_geometry(band)
        x = x * (1j * k[deriv])
    return band, x


def _radial(fields, pairs, qmax):
    """Collapse a term to radial channel spectra a[(m, p)][q] (exact sphere average)."""
    chans = {c: np.zeros(qmax + 1) for c in _CHANNELS}
    for coef, A, B, mono, deriv in pairs:
        band, x = _pair_spectrum(fields, A, B, deriv)
        x = coef * x
        k, q, w = _crop_geometry(band)
        contrib = []
        if len(mono) == 0:
            contrib.append(((0, 0), x))
        elif len(mono) == 1:
            contrib.append(((1, 1), 1j * k[mono[0]] * x))
        elif len(mono) == 2:
            i, j = mono
            if i == j:
                contrib.append(((1, 0), x))
            contrib.append(((2, 2), -k[i] * k[j] * x))
        else:
            i, j, l = mono
            lin = (k[l] if i == j else 0) + (k[j] if i == l else 0) + (k[i] if j == l else 0)
            if np.any(lin):
                contrib.append(((2, 1), 1j * lin * x))
            contrib.append(((3, 3), -1j * k[i] * k[j] * k[l] * x))
        for ch, c in contrib:
            chans[ch] += np.bincount(q.ravel(), weights=(w * c.real).ravel(), minlength=qmax + 1)
    return chans


class _ExactEvaluator:
    """Evaluate radial channel spectra at arbitrary tau."""

    def __init__(self, qmax, taus):
        self.taus = np.asarray(taus, dtype=float)
        r = np.sqrt(np.arange(qmax + 1))[:, None] * self.taus[None, :]
        self.g = [sphere_bessel_ratio(m, r.ravel()).reshape(r.shape) for m in range(4)]

    def __call__(self, chans):
        out = np.zeros(len(self.taus))
        for (m, p), a in chans.items():
            if np.any(a):
                out += (a @ self.g[m]) * self.taus**p
        return out


def _full_cube(half):
    """Hermitian-complete an FFT-ordered half cube."""
    size = half.shape[0]
    band = (size - 1) // 2
    full = np.zeros((size, size, size), dtype=complex)
    full[:, :, :band + 1] = half
    neg = (-np.arange(size)) % size
    for j in range(1, band + 1):
        full[:, :, size - j] = np.conj(half[neg][:, neg][:, :, j])
    return full


class _QuadratureEvaluator:
    """Evaluate terms on tau * n_d points with a DirectionSet and a NUFFT."""

    def __init__(self, dirs, taus, eps=1e-13):
        self.dirs = dirs
        self.taus = np.asarray(taus, dtype=float)
        pts = self.taus[:, None, None] * dirs.directions[None, :, :]
        self.pts = pts.reshape(-1, 3)
        self.eps = eps

    def __call__(self, fields, pairs):
        import finufft

        groups = {}
        for coef, A, B, mono, deriv in pairs:
            band, x = _pair_spectrum(fields, A, B, deriv)
            key = (band, tuple(mono))
            groups[key] = groups.get(key, 0) + coef * x
        nd = len(self.dirs)
        out = np.zeros(len(self.taus))
        n = self.dirs.directions
        w = self.dirs.weights / FOUR_PI
        for (band, mono), x in groups.items():
            full = _full_cube(x) if band > 0 else x
            if band == 0:
                vals = np.full(len(self.pts), full.ravel()[0])
            else:
                vals = finufft.nufft3d2(self.pts[:, 0].copy(), self.pts[:, 1].copy(),
                                        self.pts[:, 2].copy(), full, isign=1,
                                        eps=self.eps, modeord=1)
            vals = vals.real.reshape(len(self.taus), nd)
            poly = np.ones(nd)
            for i in mono:
                poly = poly * n[:, i]
            out += vals @ (w * poly)
        return out


# ---------------------------------------------------------------- engine

def _check_snapshot(snap, psi, dimension=3):
    grid = snap.u.grid
    if snap.Z.grid != grid or psi.grid != grid:
        raise ConfigurationError("snapshot fields and cutoff live on different grids")
    if grid.dimension != dimension:
        raise ConfigurationError("two-point budgets need a three-dimensional grid")


def _check_lengths(psi, lgrid):
    if lgrid.ell[-1] > psi.shift_margin:
        raise ConfigurationError(
            f"largest length {lgrid.ell[-1]:.4g} exceeds the cutoff margin {psi.shift_margin:.4g}")


class _TermEngine:
    """Accumulates per-snapshot term values at tau = 0, the l grid and the Gauss nodes."""

    def __init__(self, psi, lgrid, names, dirs=None, nu=0.0, recover_pressure=False):
        _check_lengths(psi, lgrid)
        self.psi, self.lgrid, self.names = psi, lgrid, list(names)
        self.dirs, self.nu, self.recover_pressure = dirs, nu, recover_pressure
        nodes, _ = lgrid.tau_rule()
        self.taus = np.concatenate([[0.0], lgrid.ell, nodes.ravel()])
        self.qmax = 3 * (2 * psi.grid.kcut) ** 2
        self.need_p = bool(PRESSURE_TERMS & set(self.names))
        self.need_d = bool(TENDENCY_TERMS & set(self.names))
        if dirs is None:
            self.evaluator = _ExactEvaluator(self.qmax, self.taus)
        else:
            self.evaluator = _QuadratureEvaluator(dirs, self.taus)
        self.rows = {n: [] for n in self.names}

    def add(self, snap):
        _check_snapshot(snap, self.psi)
        if self.need_p and snap.p is None and self.recover_pressure:
            snap = _with_pressure(snap)
        fields = _Fields(snap, self.psi, self.nu, self.need_p, self.need_d)
        for name in self.names:
            pairs = TERM_TABLE[name]
            if self.dirs is None:
                row = self.evaluator(_radial(fields, pairs, self.qmax))
            else:
                row = self.evaluator(fields, pairs)
            self.rows[name].append(row)
        return snap

    @property
    def count(self):
        return len(self.rows[self.names[0]]) if self.names else 0

    def values(self):
        if self.count == 0:
            raise ConfigurationError("no snapshots given")
        return {n: np.asarray(r) for n, r in self.rows.items()}


def _evaluate_terms(snapshots, psi, lgrid, names, dirs=None, nu=0.0, recover_pressure=False):
    """values[name] of shape (n_snap, n_tau) for every requested term."""
    engine = _TermEngine(psi, lgrid, names, dirs, nu, recover_pressure)
    for snap in snapshots:
        engine.add(snap)
    return engine.values(), engine.taus


def _with_pressure(snap):
    from dataclasses import replace
    return replace(snap, p=pressure_recover(snap.u))


class _Profiles:
    """Split node values into (at 0, on the l grid, at Gauss nodes) and integrate."""

    def __init__(self, values, lgrid):
        self.values = values
        self.lgrid = lgrid
        self.n = len(lgrid)
        self.nodes, self.weights = lgrid.tau_rule()

    def at0(self, name):
        return self.values[name][:, 0]

    def on_grid(self, name):
        return self.values[name][:, 1:1 + self.n]

    def integral(self, name, power):
        """int_0^l tau^power f(tau) dtau for every l and snapshot."""
        v = self.values[name][:, 1 + self.n:].reshape(-1, self.n, self.lgrid.n_gauss)
        per = np.sum(v * (self.weights * self.nodes**power)[None], axis=2)
        return np.cumsum(per, axis=1)


def _estimate(x):
    """Mean and IACT-corrected stderr over axis 0 (NaN stderr if one sample)."""
    est = series_estimate(np.asarray(x, dtype=float), autocorrelated=True)
    return np.asarray(est.mean), np.asarray(est.stderr), bool(est.available)


# ---------------------------------------------------------------- profiles

@dataclass
class SFProfile:
    """Localized third-order structure functions S0(l), S_par(l)."""

    grid: LengthGrid
    S0: np.ndarray
    Spar: np.ndarray
    S0_stderr: np.ndarray
    Spar_stderr: np.ndarray
    count: int
    available: bool = True
    local_dissipation: float = None
    local_dissipation_stderr: float = None


@dataclass
class GammaProfiles:
    """Gamma-bar, its exact l-derivative, Gamma-tilde and Gamma-bar(0)."""

    grid: LengthGrid
    gamma: np.ndarray
    dgamma: np.ndarray
    gamma_t: np.ndarray
    gamma0: float
    stderr: dict = field(default_factory=dict)


def structure_functions(snapshots, psi, grid, dirs=None, nu=None):
    """S0 and S_par on the length grid, averaged over snapshots.

    With nu given, also the localized dissipation nu avg int psi |grad u|^2
    used by scaling_fit.
    """
    snaps = list(snapshots)
    if snaps and snaps[0].u.grid.dimension == 1:
        return _structure_functions_1d(snaps, grid, nu)
    values, _ = _evaluate_terms(snaps, psi, grid, ["S0", "Spar"], dirs)
    diss = None if nu is None else [nu * _local_enstrophy(s.u, psi) for s in snaps]
    return _sf_from(_Profiles(values, grid), grid, diss)


def _sf_from(prof, grid, diss=None):
    s0, se0, ok = _estimate(prof.on_grid("S0"))
    sp, sep, _ = _estimate(prof.on_grid("Spar"))
    out = SFProfile(grid, s0, sp, se0, sep, len(prof.on_grid("S0")), ok)
    if diss is not None:
        m, se, _ = _estimate(diss)
        out.local_dissipation, out.local_dissipation_stderr = float(m), float(se)
    return out


def _structure_functions_1d(snaps, grid, nu):
    """Circle version: S(l) = avg int (u(x + l) - u(x))^3 dx (both signs agree)."""
    vals = []
    for s in snaps:
        u = s.u.physical()[0]
        row = [np.sum((spectral_shift(s.u, [l]).physical()[0] - u) ** 3) * s.u.grid.cell_volume
               for l in grid.ell]
        vals.append(row)
    m, se, ok = _estimate(vals)
    out = SFProfile(grid, m, m.copy(), se, se.copy(), len(snaps), ok)
    if nu is not None:
        g = snaps[0].u.grid
        diss = [nu * g.volume * np.sum(g.k2 * np.abs(s.u.data) ** 2) for s in snaps]
        dm, dse, _ = _estimate(diss)
        out.local_dissipation, out.local_dissipation_stderr = float(dm), float(dse)
    return out


def _local_enstrophy(u, psi):
    """int psi |grad u|^2 = (1/2) int |u|^2 Lap psi - int psi u . Lap u (grid sums, padded)."""
    grid = u.grid
    M = 2 * grid.N
    up = _padded_physical(u.data, M)
    lap_u = _padded_physical(-grid.k2 * u.data, M)
    ps = _padded_physical(psi.psi.data[None], M)[0]
    lp = _padded_physical(psi.lap_psi.data[None], M)[0]
    dv = grid.volume / M**3
    return float(np.sum(0.5 * np.sum(up * up, axis=0) * lp - ps * np.sum(up * lap_u, axis=0)) * dv)


def _padded_physical(full, M):
    """Physical values of band-limited full coefficients on an M^d grid."""
    N = full.shape[-1]
    d = full.ndim - 1
    out = np.zeros(full.shape[:1] + (M,) * d, dtype=complex)
    idx_n = np.r_[0:N // 2, N - N // 2 + 1:N]
    idx_m = np.r_[0:N // 2, M - N // 2 + 1:M]
    out[(slice(None),) + np.ix_(*([idx_m] * d))] = full[(slice(None),) + np.ix_(*([idx_n] * d))]
    return fft.ifftn(out, axes=tuple(range(1, d + 1)), norm="forward", workers=get_workers()).real


def gamma_profiles(snapshots, psi, grid, dirs=None):
    values, _ = _evaluate_terms(snapshots, psi, grid, ["Gamma", "dGamma", "Gamma_t"], dirs)
    prof = _Profiles(values, grid)
    g, gse, _ = _estimate(prof.on_grid("Gamma"))
    dg, dgse, _ = _estimate(prof.on_grid("dGamma"))
    gt, gtse, _ = _estimate(prof.on_grid("Gamma_t"))
    g0, _, _ = _estimate(prof.at0("Gamma"))
    return GammaProfiles(grid, g, dg, gt, float(g0),
                         {"gamma": gse, "dgamma": dgse, "gamma_t": gtse})


# ---------------------------------------------------------------- budgets

BUDGET_43_TERMS = ("visc_gamma", "noise", "visc_G", "visc_Q", "press1", "press2", "flux_H", "flux_F")
BUDGET_45_TERMS = ("s0_int", "visc_gamma", "visc_Q1", "visc_Q23", "noise", "press1", "press2",
                   "visc_G", "flux_H", "flux_F", "press_ball")


@dataclass
class KHMBudget:
    """Per-l terms of an integrated balance with a closure residual.

    terms[name] are the right-hand-side contributions, lhs the structure
    function term; residual = lhs - sum(terms).  `galerkin` (truncation
    remainder) and `tendency` (-d/dt of the correlation, zero on average
    for stationary runs) are reported separately and are not part of the
    residual.  stderr[name] holds IACT-corrected standard errors.
    """

    law: str
    grid: LengthGrid
    lhs: np.ndarray
    terms: dict
    residual: np.ndarray
    galerkin: np.ndarray
    tendency: np.ndarray
    stderr: dict
    limits: dict
    count: int
    available: bool = True

    def max_term(self):
        """Largest magnitude among lhs and terms at each l."""
        stack = np.abs(np.stack([self.lhs] + list(self.terms.values())))
        return np.max(stack, axis=0)

    def relative_residual(self):
        return np.abs(self.residual) / self.max_term()

    def columns(self):
        """Ordered table columns for CSV output."""
        cols = {"ell": self.grid.ell, "lhs": self.lhs}
        cols.update(self.terms)
        cols.update({"galerkin": self.galerkin, "tendency": self.tendency,
                     "residual": self.residual, "stderr": self.stderr["residual"]})
        return cols


_NAMES_43 = ["S0", "dGamma", "Z", "G", "Q", "P1", "P2", "H", "F", "R", "dot"]
_NAMES_45 = ["Spar", "S0", "Gamma_t", "Q1_t", "Q2_t", "Q3_t", "Z_t", "P1_t", "P2", "G_t",
             "H_t", "F_t", "Pball", "R_t", "dot_t", "Z", "P1", "G", "H"]


def _columns_43(prof, ell, nu):
    l3 = ell**3
    cols = {
        "lhs": -prof.on_grid("S0") / ell,
        "visc_gamma": 4 * nu * prof.on_grid("dGamma") / ell,
        "noise": 2 * prof.integral("Z", 2) / l3,
        "visc_G": 2 * nu * prof.integral("G", 2) / l3,
        "visc_Q": 4 * nu * prof.on_grid("Q") / ell,
        "press1": 2 * prof.integral("P1", 2) / l3,
        "press2": -2 * prof.integral("P2", 2) / l3,
        "flux_H": 2 * prof.integral("H", 2) / l3,
        "flux_F": prof.integral("F", 2) / l3,
        "galerkin": 2 * prof.integral("R", 2) / l3,
        "tendency": -2 * prof.integral("dot", 2) / l3,
    }
    cols["residual"] = cols["lhs"] - sum(cols[t] for t in BUDGET_43_TERMS)
    return cols


def _columns_45(prof, ell, nu):
    l5 = ell**5
    cols = {
        "lhs": -prof.on_grid("Spar") / ell,
        # terms moved from the left side carry the opposite sign
        "s0_int": -2 * prof.integral("S0", 3) / l5,
        "visc_gamma": 4 * nu * prof.on_grid("Gamma_t") / ell,
        "visc_Q1": 4 * nu * prof.on_grid("Q1_t") / ell,
        "visc_Q23": -4 * nu * (prof.integral("Q2_t", 3) + prof.integral("Q3_t", 3)) / l5,
        "noise": 2 * prof.integral("Z_t", 4) / l5,
        "press1": 2 * prof.integral("P1_t", 4) / l5,
        "press2": -2 * prof.integral("P2", 4) / l5,
        "visc_G": 2 * nu * prof.integral("G_t", 4) / l5,
        "flux_H": 2 * prof.integral("H_t", 4) / l5,
        "flux_F": prof.integral("F_t", 4) / l5,
        # (4/l^5) int tau P2~(tau) with P2~(tau) = int_0^tau rho^2 c(rho)
        "press_ball": -(2 * prof.integral("Pball", 2) / ell**3 - 2 * prof.integral("Pball", 4) / l5),
        "galerkin": 2 * prof.integral("R_t", 4) / l5,
        "tendency": -2 * prof.integral("dot_t", 4) / l5,
    }
    cols["residual"] = cols["lhs"] - sum(cols[t] for t in BUDGET_45_TERMS)
    return cols


def _assemble(law, prof, lgrid, nu, n_snap):
    cols = (_columns_43 if law == "four_thirds" else _columns_45)(prof, lgrid.ell, nu)
    means, errs, ok = {}, {}, True
    for name, x in cols.items():
        m, se, ok = _estimate(x)
        means[name], errs[name] = m, se
    names = BUDGET_43_TERMS if law == "four_thirds" else BUDGET_45_TERMS
    limits = _limits(law, prof)
    return KHMBudget(law, lgrid, means["lhs"], {t: means[t] for t in names}, means["residual"],
                     means["galerkin"], means["tendency"], errs, limits, n_snap, ok)


def _limits(law, prof):
    """Values at l = 0 for the small-scale consistency relations."""
    out = {}
    if law == "four_thirds":
        for name in ("P1", "P2"):
            m, se, _ = _estimate(prof.at0(name))
            out[name] = (float(m), float(se))
        m, se, _ = _estimate(prof.at0("P1") + prof.at0("P2"))
        out["P1+P2"] = (float(m), float(se))
    else:
        for bar, til in (("Z", "Z_t"), ("P1", "P1_t"), ("G", "G_t"), ("H", "H_t")):
            b, bse, _ = _estimate(prof.at0(bar))
            t, tse, _ = _estimate(prof.at0(til))
            ratio = float(t / b) if b != 0 else float("nan")
            err = abs(ratio) * float(np.hypot(tse / t if t else 0.0, bse / b if b else 0.0)) \
                if b != 0 else float("nan")
            out[f"{til}/{bar}"] = (ratio, err)
    return out


def khm_budget_43(snapshots, psi, grid, dirs=None, nu=None, recover_pressure=False):
    """Integrated local 4/3 balance on the length grid."""
    _require_nu(nu)
    snaps = list(snapshots)
    values, _ = _evaluate_terms(snaps, psi, grid, _NAMES_43, dirs, nu, recover_pressure)
    return _assemble("four_thirds", _Profiles(values, grid), grid, nu, len(snaps))


def khm_budget_45(snapshots, psi, grid, dirs=None, nu=None, recover_pressure=False):
    """Integrated local 4/5 balance on the length grid."""
    _require_nu(nu)
    snaps = list(snapshots)
    values, _ = _evaluate_terms(snaps, psi, grid, _NAMES_45, dirs, nu, recover_pressure)
    return _assemble("four_fifths", _Profiles(values, grid), grid, nu, len(snaps))


def _require_nu(nu):
    if nu is None or not nu > 0:
        raise ConfigurationError("budgets need a positive viscosity nu")


# ---------------------------------------------------------------- LEE

@dataclass
class LEEReport:
    """Local energy equality: lhs = visc + transport + input (+ galerkin + tendency)."""

    lhs: float
    visc: float
    transport: float
    input: float
    galerkin: float
    tendency: float
    residual: float
    stderr: dict
    count: int

    def max_term(self):
        return max(abs(self.lhs), abs(self.visc), abs(self.transport), abs(self.input))


def _lee_row(snap, psi, nu):
    grid = snap.u.grid
    if snap.p is None:
        raise MissingPressureError()
    M = 2 * grid.N
    u = _padded_physical(snap.u.data, M)
    ps = _padded_physical(psi.psi.data[None], M)[0]
    lp = _padded_physical(psi.lap_psi.data[None], M)[0]
    g = _padded_physical(np.stack([x.data for x in psi.grad_psi]), M)
    p = _padded_physical(snap.p.data[None], M)[0]
    Z = _padded_physical(snap.Z.data, M)
    R, D = _remainder_and_tendency(snap, u, nu)
    dv = grid.volume / M**3
    usq = np.sum(u * u, axis=0)
    row = {
        "lhs": 2 * nu * _local_enstrophy(snap.u, psi),
        "visc": nu * np.sum(usq * lp) * dv,
        "transport": np.sum((usq + 2 * p) * np.sum(u * g, axis=0)) * dv,
        "input": 2 * np.sum(ps * np.sum(u * Z, axis=0)) * dv,
        "galerkin": 2 * np.sum(ps * np.sum(u * R, axis=0)) * dv,
        "tendency": -2 * np.sum(ps * np.sum(u * D, axis=0)) * dv,
    }
    row["residual"] = row["lhs"] - row["visc"] - row["transport"] - row["input"]
    return row


def _remainder_and_tendency(snap, u, nu):
    """Physical Galerkin remainder and velocity tendency on the padded grid of u."""
    grid = snap.u.grid
    M = u.shape[-1]
    big = WaveGrid(3, M)
    flux = np.zeros((3,) + big.shape, dtype=complex)
    for i in range(3):
        for j in range(3):
            flux[i] += 1j * big.k[j] * big.to_spectral(u[i] * u[j])
    K = grid.kcut
    inside = np.all(np.abs(big.k) <= K, axis=0)
    R = np.real(big.to_physical(np.where(inside, 0.0, flux)))
    idx_m = np.r_[0:K + 1, M - K:M]
    idx_n = np.r_[0:K + 1, grid.N - K:grid.N]
    band = np.zeros((3,) + grid.shape, dtype=complex)
    band[(slice(None),) + np.ix_(idx_n, idx_n, idx_n)] = flux[(slice(None),) + np.ix_(idx_m, idx_m, idx_m)]
    band = leray_project(SpectralField(grid, band)).data
    D = -band - nu * grid.k2 * snap.u.data + snap.Z.data
    return R, _padded_physical(D, M)


def _lee_from_rows(rows):
    if not rows:
        raise ConfigurationError("no snapshots given")
    means, errs = {}, {}
    for key in rows[0]:
        m, se, _ = _estimate([r[key] for r in rows])
        means[key], errs[key] = float(m), float(se)
    return LEEReport(means["lhs"], means["visc"], means["transport"], means["input"],
                     means["galerkin"], means["tendency"], means["residual"], errs, len(rows))


def lee_residual(snapshots, psi, nu, recover_pressure=False):
    """Local energy equality averaged over snapshots."""
    _require_nu(nu)
    rows = []
    for s in snapshots:
        _check_snapshot(s, psi)
        if s.p is None and recover_pressure:
            s = _with_pressure(s)
        rows.append(_lee_row(s, psi, nu))
    return _lee_from_rows(rows)


# ---------------------------------------------------------------- flux identity

def _shifted_padded(u, h, M):
    return _padded_physical(spectral_shift(u, h).data, M)


def flux_identity_check(u, psi, h, dh):
    """Residual of the increment flux identity at shift h.

    Both sides are 3x3 tensors; every h-derivative is a central
    difference with step dh.  Returns the largest component of
    LHS - RHS (O(dh^2)).
    """
    grid = u.grid
    M = 2 * grid.N
    h = np.asarray(h, dtype=float)
    dv = grid.volume / M**3
    a = _padded_physical(u.data, M)
    ps = _padded_physical(psi.psi.data[None], M)[0]
    g = _padded_physical(np.stack([x.data for x in psi.grad_psi]), M)

    def moments(shift):
        b = _shifted_padded(u, shift, M)
        d = b - a
        lhs = np.einsum("ixyz,jxyz,kxyz,xyz->kij", d, d, d, ps) * dv
        plus = (np.einsum("ixyz,jxyz,kxyz,xyz->kij", a, b, a, ps)
                + np.einsum("ixyz,jxyz,kxyz,xyz->kij", b, a, a, ps)) * dv
        minus = (np.einsum("ixyz,jxyz,kxyz,xyz->kij", a, b, b, ps)
                 + np.einsum("ixyz,jxyz,kxyz,xyz->kij", b, a, b, ps)) * dv
        return lhs, plus - minus

    lhs = np.zeros((3, 3))
    rhs = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = dh
        lp, rp = moments(h + e)
        lm, rm = moments(h - e)
        lhs += (lp[k] - lm[k]) / (2 * dh)
        rhs += (rp[k] - rm[k]) / (2 * dh)
    b = _shifted_padded(u, h, M)
    flux = np.einsum("ixyz,jxyz,xyz->ij", b, b, np.sum((b - a) * g, axis=0)) * dv
    rhs -= flux
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------- monitors and fits

def _wad_row(snap):
    grid = snap.u.grid
    amp2 = np.abs(snap.u.data) ** 2
    return (grid.volume * np.sum(amp2), grid.volume * np.sum(grid.k2 * amp2),
            grid.volume * np.real(np.vdot(snap.u.data, snap.Z.data)),
            grid.volume * np.sum(amp2 / np.sqrt(grid.k2_safe)), grid.volume, grid.dimension)


def _wad_from_rows(rows, nu):
    if len(rows) == 0:
        raise ConfigurationError("no snapshots given")
    rows = np.asarray(rows, dtype=float)
    volume, dim = rows[0, 4], rows[0, 5]
    (e, ens, inp, inv), (e_se, ens_se, inp_se, _), ok = _estimate(rows[:, :4])
    # integral scale L = (pi / 2u'^2) int E(k)/k dk, with d u'^2 the mean of |u|^2
    u2 = e / (dim * volume)
    length = np.pi * inv / (4 * u2 * volume) if u2 > 0 else 0.0
    out = {
        "nu_energy": nu * e, "nu_energy_stderr": nu * e_se,
        "dissipation": nu * ens, "dissipation_stderr": nu * ens_se,
        "input": inp, "input_stderr": inp_se,
        "taylor_microscale": np.sqrt(e / ens) if ens > 0 else 0.0,
        "ell_nu": np.sqrt(nu * e),
        "u_rms": np.sqrt(u2),
        "integral_scale": length,
        "large_eddy_time": length / np.sqrt(u2) if u2 > 0 else np.inf,
    }
    out = {k: float(v) for k, v in out.items()}
    out["count"] = len(rows)
    out["stderr_available"] = ok
    return out


def wad_monitor(snapshots, nu):
    """Global dissipation monitors with standard errors.

    Reports nu avg||u||^2, nu avg||grad u||^2 (dissipation), avg<u,Z>
    (input), the Taylor microscale sqrt(avg||u||^2 / avg||grad u||^2)
    and l_nu = sqrt(nu avg||u||^2).
    """
    return _wad_from_rows([_wad_row(s) for s in snapshots], nu)


@dataclass
class ScalingFit:
    eps0: float
    eps_par: float
    r2_0: float
    r2_par: float
    ratio0: float
    ratio_par: float
    n_points: int


def scaling_fit(profile, window):
    """Least-squares slopes of S0 = -(4/3) eps0 l and S_par = -(4/5) eps_par l.

    The lines pass through the origin.  Ratios are taken against the
    profile's localized dissipation when it is available.
    """
    lo, hi = window
    ell = profile.grid.ell
    sel = (ell >= lo) & (ell <= hi)
    if np.count_nonzero(sel) < 3:
        raise ConfigurationError("scaling window holds fewer than 3 lengths")
    x = ell[sel]

    def fit(y):
        slope = float(np.dot(x, y) / np.dot(x, x))
        ss = float(np.sum((y - slope * x) ** 2))
        tot = float(np.sum(y**2))
        return slope, (1.0 - ss / tot) if tot > 0 else 1.0

    s0, r0 = fit(np.asarray(profile.S0)[sel])
    sp, rp = fit(np.asarray(profile.Spar)[sel])
    eps0 = -0.75 * s0
    eps_par = -1.25 * sp
    diss = profile.local_dissipation
    ratio0 = eps0 / diss if diss else float("nan")
    ratio_par = eps_par / diss if diss else float("nan")
    return ScalingFit(eps0, eps_par, r0, rp, ratio0, ratio_par, int(np.count_nonzero(sel)))


def linear_scaling_range(ell, s, tol=0.25):
    """Widest contiguous window where s is negative and within tol of a line.

    The line c l passes through the origin and is fitted on the window
    itself; every point must satisfy |s / (c l) - 1| <= tol.  Returns a
    dict with lo, hi, decades (log10 hi/lo) and slope; decades is 0 when
    no window of at least two points qualifies.
    """
    ell = np.asarray(ell, dtype=float)
    s = np.asarray(s, dtype=float)
    best = {"lo": float("nan"), "hi": float("nan"), "decades": 0.0, "slope": float("nan")}
    n = len(ell)
    for i in range(n):
        for j in range(i + 1, n):
            x, y = ell[i:j + 1], s[i:j + 1]
            if np.any(y >= 0):
                break
            slope = float(np.dot(x, y) / np.dot(x, x))
            if np.all(np.abs(y / (slope * x) - 1) <= tol):
                width = float(np.log10(ell[j] / ell[i]))
                if width > best["decades"]:
                    best = {"lo": float(ell[i]), "hi": float(ell[j]), "decades": width, "slope": slope}
    return best


# ---------------------------------------------------------------- one pass

@dataclass
class Analysis:
    """Everything computed from one pass over a snapshot stream."""

    profile: SFProfile
    budgets: dict
    lee: LEEReport
    wad: dict
    count: int


LAWS = {"four_thirds": _NAMES_43, "four_fifths": _NAMES_45}


def analyze(snapshots, psi, grid, nu, dirs=None, laws=("four_thirds", "four_fifths"),
            recover_pressure=False):
    """Structure functions, budgets, LEE and monitors in a single pass.

    Snapshots are consumed one at a time, so a RunStream can be passed
    directly without holding the whole sample in memory.
    """
    _require_nu(nu)
    unknown = set(laws) - set(LAWS)
    if unknown:
        raise ConfigurationError(f"unknown law(s) {sorted(unknown)}")
    names = ["S0", "Spar"]
    for law in laws:
        names += [n for n in LAWS[law] if n not in names]
    engine = _TermEngine(psi, grid, names, dirs, nu, recover_pressure)
    lee_rows, wad_rows, diss = [], [], []
    for snap in snapshots:
        if snap.p is None:
            if not recover_pressure:
                raise MissingPressureError()
            snap = _with_pressure(snap)
        engine.add(snap)
        lee_rows.append(_lee_row(snap, psi, nu))
        wad_rows.append(_wad_row(snap))
        diss.append(nu * _local_enstrophy(snap.u, psi))
    prof = _Profiles(engine.values(), grid)
    budgets = {law: _assemble(law, prof, grid, nu, engine.count) for law in laws}
    return Analysis(_sf_from(prof, grid, diss), budgets, _lee_from_rows(lee_rows),
                    _wad_from_rows(wad_rows, nu), engine.count)
