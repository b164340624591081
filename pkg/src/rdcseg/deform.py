"""Deformable (DC), restricted deformable (RDC) and factorized RDC (FRDC) convolution.

All three variants share one engine: every kernel tap is turned into a field
of (fractional) sample positions over the input, values are read with a
zero-extended bilinear sampler, and the sampled columns are contracted with
the weights exactly like an ordinary convolution.

Conventions
-----------
* ``u`` is the horizontal (width) coordinate and ``v`` the vertical one.
* Offset channels are laid out per tap in kernel row-major order, vertical
  component first, then horizontal. RDC skips the center tap; FRDC stores a
  single along-axis component per outer tap.
* Out-of-range corners read zero. A tap whose four corners are all outside
  contributes nothing and receives no positional gradient.
* The bilinear cell is ``floor``-based, so at an integer position the
  positional gradient is the forward difference to the next pixel.
* One offset field is shared by all input and output channels. Stride is 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

DC, RDC, FRDC = "DC", "RDC", "FRDC"
VARIANTS = (DC, RDC, FRDC)


@dataclass(frozen=True)
class KernelGeometry:
    kh: int
    kw: int
    dilation: int = 1
    padding: Optional[Tuple[int, int]] = None  # None means size-preserving

    def __post_init__(self):
        if self.kh < 1 or self.kw < 1 or self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd and positive, got {self.kh}x{self.kw}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")

    @property
    def n_taps(self) -> int:
        return self.kh * self.kw

    @property
    def taps(self) -> List[Tuple[int, int]]:
        """Tap displacements ``(dv, du)`` from the center in row-major order."""
        d = self.dilation
        return [((i - self.kh // 2) * d, (j - self.kw // 2) * d)
                for i in range(self.kh) for j in range(self.kw)]

    @property
    def center_index(self) -> int:
        return (self.kh // 2) * self.kw + self.kw // 2

    @property
    def pad(self) -> Tuple[int, int]:
        if self.padding is None:
            return self.dilation * (self.kh // 2), self.dilation * (self.kw // 2)
        return tuple(int(p) for p in self.padding)

    @property
    def axis(self) -> Optional[str]:
        """'vertical' for k x 1, 'horizontal' for 1 x k, None for 2D (or 1x1) kernels."""
        if self.kw == 1 and self.kh > 1:
            return "vertical"
        if self.kh == 1 and self.kw > 1:
            return "horizontal"
        return None

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        ph, pw = self.pad
        return h + 2 * ph - self.dilation * (self.kh - 1), w + 2 * pw - self.dilation * (self.kw - 1)

    @classmethod
    def from_weights(cls, w: np.ndarray, dilation: int = 1, padding=None) -> "KernelGeometry":
        return cls(int(w.shape[2]), int(w.shape[3]), dilation, padding)


def offset_channels(variant: str, geometry: KernelGeometry) -> int:
    n = geometry.n_taps
    if variant == DC:
        return 2 * n
    if variant == RDC:
        return 2 * (n - 1)
    if variant == FRDC:
        if geometry.axis is None:
            raise ValueError(f"FRDC needs a 1D kernel (k x 1 or 1 x k), got {geometry.kh}x{geometry.kw}")
        return n - 1
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# bilinear sampler
# ---------------------------------------------------------------------------

class _Sampler:
    """Bilinear read of many positions from every channel of a batch.

    ``pv``/``pu`` have shape (K, N, oh, ow). ``lattice[k]`` marks taps read
    straight from the integer grid (positions there must be integers).
    Internally everything is flattened to one index per (batch, tap, pixel)
    into the (C, N*H*W) view of the input.
    """

    def __init__(self, x: np.ndarray, pv: np.ndarray, pu: np.ndarray, lattice: np.ndarray):
        self.shape = x.shape
        n, c, h, w = x.shape
        k = pv.shape[0]
        self.k, self.oh, self.ow = k, pv.shape[2], pv.shape[3]
        # clipping keeps indices bounded; anything clipped is fully outside anyway
        pv = np.clip(pv, -2.0, h + 1.0)
        pu = np.clip(pu, -2.0, w + 1.0)
        v0 = np.floor(pv)
        u0 = np.floor(pu)
        fv = pv - v0
        fu = pu - u0
        fv[lattice] = 0.0
        fu[lattice] = 0.0
        # (K, N, oh, ow) -> (N, K, oh, ow) flattened, matching the column layout
        self.fv = fv.transpose(1, 0, 2, 3).ravel()
        self.fu = fu.transpose(1, 0, 2, 3).ravel()
        v0 = v0.astype(np.intp).transpose(1, 0, 2, 3).ravel()
        u0 = u0.astype(np.intp).transpose(1, 0, 2, 3).ravel()
        lat = np.broadcast_to(lattice[None, :, None, None], (n, k, self.oh, self.ow)).ravel()
        self.lattice = lat
        batch_base = np.repeat(np.arange(n, dtype=np.intp) * (h * w), k * self.oh * self.ow)
        self.corners = []
        for dv, du in ((0, 0), (0, 1), (1, 0), (1, 1)):
            vv, uu = v0 + dv, u0 + du
            valid = (vv >= 0) & (vv < h) & (uu >= 0) & (uu < w)
            if dv or du:
                valid &= ~lat
            idx = np.where(valid, batch_base + vv * w + uu, 0)
            self.corners.append((idx, valid))
        self.values = None

    def corner_weights(self):
        fv, fu = self.fv, self.fu
        return ((1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu)

    def _corner_values(self, x):
        xt = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        return [np.take(xt, idx, axis=1) * valid for idx, valid in self.corners]

    def gather(self, x: np.ndarray) -> np.ndarray:
        """Sampled columns of shape (N, C, K, oh, ow)."""
        n, c = x.shape[:2]
        self.values = self._corner_values(x)
        out = 0.0
        for wgt, val in zip(self.corner_weights(), self.values):
            out = out + wgt * val
        return out.reshape(c, n, self.k, self.oh, self.ow).transpose(1, 0, 2, 3, 4)

    def backward(self, x: np.ndarray, dcols: np.ndarray):
        """Adjoint of :meth:`gather`; returns ``(dx, dpv, dpu)``.

        Positional adjoints have shape (K, N, oh, ow) and are zero on
        lattice taps. Accumulation is a sequential bincount, so repeated
        runs agree bitwise.
        """
        n, c, h, w = self.shape
        total = n * h * w
        d = dcols.transpose(1, 0, 2, 3, 4).reshape(c, -1)
        chan_base = (np.arange(c, dtype=np.intp) * total)[:, None]
        acc = np.zeros(c * total, dtype=np.result_type(dcols, x))
        for wgt, (idx, valid) in zip(self.corner_weights(), self.corners):
            acc += np.bincount((chan_base + idx).ravel(), weights=(d * (wgt * valid)).ravel(),
                               minlength=c * total)
        dx = acc.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        v00, v01, v10, v11 = self.values if self.values is not None else self._corner_values(x)
        fv, fu = self.fv, self.fu
        dpv = (d * ((1 - fu) * (v10 - v00) + fu * (v11 - v01))).sum(axis=0)
        dpu = (d * ((1 - fv) * (v01 - v00) + fv * (v11 - v10))).sum(axis=0)
        dpv[self.lattice] = 0.0
        dpu[self.lattice] = 0.0
        shape = (n, self.k, self.oh, self.ow)
        return dx, dpv.reshape(shape).transpose(1, 0, 2, 3), dpu.reshape(shape).transpose(1, 0, 2, 3)


def bilinear_sample(plane: np.ndarray, u: float, v: float) -> float:
    """Bilinear value of a 2D ``plane`` at horizontal ``u``, vertical ``v``."""
    plane = np.asarray(plane, dtype=np.float64)
    s = _Sampler(plane[None, None], np.full((1, 1, 1, 1), float(v)), np.full((1, 1, 1, 1), float(u)),
                 np.zeros(1, dtype=bool))
    return float(s.gather(plane[None, None]).reshape(()))


def bilinear_sample_backward(plane: np.ndarray, u: float, v: float, dout: float = 1.0):
    """Adjoints ``(dplane, du, dv)`` of :func:`bilinear_sample` for upstream ``dout``."""
    plane = np.asarray(plane, dtype=np.float64)
    s = _Sampler(plane[None, None], np.full((1, 1, 1, 1), float(v)), np.full((1, 1, 1, 1), float(u)),
                 np.zeros(1, dtype=bool))
    dx, dpv, dpu = s.backward(plane[None, None], np.full((1, 1, 1, 1, 1), float(dout)))
    return dx[0, 0], float(dpu.reshape(())), float(dpv.reshape(()))


# ---------------------------------------------------------------------------
# shared engine
# ---------------------------------------------------------------------------

@dataclass
class DeformCache:
    x: np.ndarray
    w: np.ndarray
    cols: np.ndarray
    sampler: _Sampler
    variant: str
    geometry: KernelGeometry
    offset_shape: Tuple[int, ...]


def _check_inputs(x, w, b, offsets, variant, geometry):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"input and weights must be rank 4, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"weights in-channel extent {w.shape[1]} != input channel extent {x.shape[1]}")
    if (w.shape[2], w.shape[3]) != (geometry.kh, geometry.kw):
        raise ValueError(f"weights kernel {w.shape[2]}x{w.shape[3]} != geometry {geometry.kh}x{geometry.kw}")
    if b is not None and np.shape(b) != (w.shape[0],):
        raise ValueError(f"bias extent {np.shape(b)} != out-channel extent ({w.shape[0]},)")
    n_taps = geometry.n_taps
    expected = offset_channels(variant, geometry)
    got = offsets.shape[1] if offsets.ndim == 4 else None
    if got != expected:
        if variant == RDC and got == 2 * n_taps:
            raise ValueError(f"variant mismatch: RDC expects 2(N-1)={expected} offset channels, "
                             f"got the DC layout 2N={got}")
        if variant == FRDC and got == 2 * (n_taps - 1):
            raise ValueError(f"variant mismatch: FRDC expects {expected} along-axis offset channels, "
                             f"got a 2D offset layout with {got}")
        what = {DC: "2N", RDC: "2(N-1)", FRDC: "N-1"}[variant]
        raise ValueError(f"{variant} expects {what}={expected} offset channels, got {got}")
    oh, ow = geometry.output_size(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ValueError("input too small for kernel")
    if offsets.shape != (x.shape[0], expected, oh, ow):
        raise ValueError(f"offset field shape {offsets.shape} != expected {(x.shape[0], expected, oh, ow)}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    return oh, ow


def _positions(variant, geometry, offsets, oh, ow):
    n = offsets.shape[0]
    ph, pw = geometry.pad
    cv = geometry.dilation * (geometry.kh // 2) - ph
    cu = geometry.dilation * (geometry.kw // 2) - pw
    base_v = (np.arange(oh) + cv).astype(np.float64)[None, :, None]
    base_u = (np.arange(ow) + cu).astype(np.float64)[None, None, :]
    k = geometry.n_taps
    pv = np.empty((k, n, oh, ow))
    pu = np.empty((k, n, oh, ow))
    lattice = np.zeros(k, dtype=bool)
    m = geometry.center_index
    axis = geometry.axis
    j = 0
    for t, (dv, du) in enumerate(geometry.taps):
        pv[t] = base_v + dv
        pu[t] = base_u + du
        if variant == DC:
            pv[t] += offsets[:, 2 * t]
            pu[t] += offsets[:, 2 * t + 1]
        elif t == m:
            lattice[t] = True
            continue
        elif variant == RDC:
            pv[t] += offsets[:, 2 * j]
            pu[t] += offsets[:, 2 * j + 1]
            j += 1
        else:
            if axis == "vertical":
                pv[t] += offsets[:, j]
            else:
                pu[t] += offsets[:, j]
            j += 1
    return pv, pu, lattice


def _offset_adjoint(variant, geometry, dpv, dpu):
    n, oh, ow = dpv.shape[1:]
    m = geometry.center_index
    if variant == DC:
        out = np.empty((n, 2 * geometry.n_taps, oh, ow))
        out[:, 0::2] = np.moveaxis(dpv, 0, 1)
        out[:, 1::2] = np.moveaxis(dpu, 0, 1)
        return out
    outer = [t for t in range(geometry.n_taps) if t != m]
    if variant == RDC:
        out = np.empty((n, 2 * len(outer), oh, ow))
        out[:, 0::2] = np.moveaxis(dpv[outer], 0, 1)
        out[:, 1::2] = np.moveaxis(dpu[outer], 0, 1)
        return out
    src = dpv if geometry.axis == "vertical" else dpu
    return np.moveaxis(src[outer], 0, 1).copy()


def deform_forward(x, w, b, offsets, geometry: KernelGeometry, variant: str):
    """Forward pass of any variant. Returns ``(y, cache)``."""
    x = np.asarray(x)
    offsets = np.asarray(offsets)
    oh, ow = _check_inputs(x, w, b, offsets, variant, geometry)
    pv, pu, lattice = _positions(variant, geometry, offsets, oh, ow)
    sampler = _Sampler(x, pv, pu, lattice)
    cols = sampler.gather(x)
    o, c = w.shape[:2]
    y = np.einsum("nckhw,ock->nohw", cols, w.reshape(o, c, -1), optimize=True)
    if b is not None:
        y = y + np.asarray(b)[None, :, None, None]
    return y, DeformCache(x, w, cols, sampler, variant, geometry, offsets.shape)


def deform_backward(dy, cache: DeformCache):
    """Returns ``(dx, dw, db, doffsets)``."""
    o, c = cache.w.shape[:2]
    wk = cache.w.reshape(o, c, -1)
    dw = np.einsum("nohw,nckhw->ock", dy, cache.cols, optimize=True).reshape(cache.w.shape)
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ock->nckhw", dy, wk, optimize=True)
    dx, dpv, dpu = cache.sampler.backward(cache.x, dcols)
    doff = _offset_adjoint(cache.variant, cache.geometry, dpv, dpu)
    return dx, dw, db, doff


# ---------------------------------------------------------------------------
# public per-variant entry points
# ---------------------------------------------------------------------------

def deformable_conv2d(x, w, b, offsets, geometry: KernelGeometry):
    """Every tap, center included, samples at base + tap + learned offset."""
    return deform_forward(x, w, b, offsets, geometry, DC)[0]


def deformable_conv2d_backward(dy, x, w, offsets, geometry: KernelGeometry):
    return deform_backward(dy, deform_forward(x, w, None, offsets, geometry, DC)[1])


def restricted_deformable_conv2d(x, w, b, offsets, geometry: KernelGeometry):
    """Center tap reads the lattice at the base position; the N-1 outer taps are displaced."""
    return deform_forward(x, w, b, offsets, geometry, RDC)[0]


def restricted_deformable_conv2d_backward(dy, x, w, offsets, geometry: KernelGeometry):
    return deform_backward(dy, deform_forward(x, w, None, offsets, geometry, RDC)[1])


def _frdc_geometry(w, axis, dilation, padding):
    geometry = KernelGeometry.from_weights(w, dilation, padding)
    if geometry.axis is None:
        raise ValueError(f"FRDC weights must be k x 1 or 1 x k, got {w.shape[2]}x{w.shape[3]}")
    if axis is not None and axis != geometry.axis:
        raise ValueError(f"axis {axis!r} does not match a {w.shape[2]}x{w.shape[3]} kernel")
    return geometry


def factorized_rdc_1d(x, w, b, axis_offsets, axis=None, dilation=1, padding=None):
    """1D RDC: each outer tap slides along the kernel's own axis only.

    ``w`` is (O, C, k, 1) for a vertical kernel or (O, C, 1, k) for a
    horizontal one; ``axis_offsets`` has k-1 channels.
    """
    geometry = _frdc_geometry(w, axis, dilation, padding)
    return deform_forward(x, w, b, axis_offsets, geometry, FRDC)[0]


def factorized_rdc_1d_backward(dy, x, w, axis_offsets, axis=None, dilation=1, padding=None):
    geometry = _frdc_geometry(w, axis, dilation, padding)
    return deform_backward(dy, deform_forward(x, w, None, axis_offsets, geometry, FRDC)[1])


@dataclass
class OffsetLayerSpec:
    """A regular convolution producing an offset field; zero-initialized."""

    in_channels: int
    out_channels: int
    kh: int
    kw: int
    dilation: int
    padding: Tuple[int, int]
    weight: np.ndarray
    bias: np.ndarray


def make_offset_layer(in_channels: int, geometry: KernelGeometry, variant: str) -> OffsetLayerSpec:
    out = offset_channels(variant, geometry)
    return OffsetLayerSpec(
        in_channels, out, geometry.kh, geometry.kw, geometry.dilation, geometry.pad,
        np.zeros((out, in_channels, geometry.kh, geometry.kw)), np.zeros(out),
    )
