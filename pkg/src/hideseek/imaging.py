"""2D raster primitives: thresholding, morphology, connected components, SSIM.

Images are ``float64`` arrays of shape ``(height, width)`` with values in
``[0, 1]``; masks are ``bool`` arrays; instance labelings are non-negative
integer arrays with 0 as background.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

OTSU_BINS = 256
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

_STRUCT = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}
_SQUARE3 = np.ones((3, 3), dtype=bool)


def as_image(img, name: str = "image") -> np.ndarray:
    """Validate and return ``img`` as a 2D float64 array in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def as_mask(mask, name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {m.shape}")
    return m.astype(bool, copy=False)


def check_same_shape(*arrays, names=None) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"dimension mismatch between {label}: {sorted(shapes)}")


def mean_threshold(img, roi) -> np.ndarray:
    """Pixels inside ``roi`` strictly brighter than the ROI mean."""
    img = np.asarray(img, dtype=np.float64)
    roi = as_mask(roi, "roi")
    check_same_shape(img, roi, names=("img", "roi"))
    if not roi.any():
        raise ValueError("empty ROI")
    vals = img[roi]
    # clamp: round-off can put the mean of a constant region just below its value
    mu = min(max(vals.mean(), vals.min()), vals.max())
    return roi & (img > mu)


def _histogram(img: np.ndarray, roi: np.ndarray) -> np.ndarray:
    bins = np.clip(np.floor(img[roi] * OTSU_BINS).astype(np.int64), 0, OTSU_BINS - 1)
    return np.bincount(bins, minlength=OTSU_BINS)


def otsu_thresholds(img, roi, levels: int = 1) -> list[float]:
    """Otsu thresholds over a 256-bin histogram of the ROI.

    A threshold ``t`` separates bins ``[0, k)`` from ``[k, 256)`` and is
    returned as the bin edge ``k / 256``, so ``value < t`` is the lower class.
    The criterion is evaluated in exact integer arithmetic on bin indices;
    ties go to the lowest cut.
    """
    img = as_image(img)
    roi = as_mask(roi, "roi")
    check_same_shape(img, roi, names=("img", "roi"))
    if levels not in (1, 2):
        raise ValueError(f"levels must be 1 or 2, got {levels}")
    if not roi.any():
        raise ValueError("empty ROI")
    hist = _histogram(img, roi)
    occupied = np.flatnonzero(hist)
    if occupied.size < 2:
        raise ValueError("degenerate histogram")

    # cumulative counts and first moments, as python ints (no overflow)
    n_cum = [0]
    s_cum = [0]
    for i, h in enumerate(hist.tolist()):
        n_cum.append(n_cum[-1] + h)
        s_cum.append(s_cum[-1] + i * h)

    def cls(lo: int, hi: int) -> tuple[int, int]:
        return n_cum[hi] - n_cum[lo], s_cum[hi] - s_cum[lo]

    # sum_k S_k^2 / N_k is maximal exactly where the between-class variance is
    lo_cut, hi_cut = int(occupied[0]) + 1, int(occupied[-1]) + 1
    best = None
    if levels == 1:
        for k in range(lo_cut, hi_cut):
            n0, s0 = cls(0, k)
            n1, s1 = cls(k, OTSU_BINS)
            num, den = s0 * s0 * n1 + s1 * s1 * n0, n0 * n1
            if best is None or num * best[1] > best[0] * den:
                best = (num, den, (k,))
    else:
        if occupied.size < 3:
            raise ValueError("degenerate histogram")
        for k1 in range(lo_cut, hi_cut):
            n0, s0 = cls(0, k1)
            if n0 == 0:
                continue
            a0 = s0 * s0
            for k2 in range(k1 + 1, hi_cut):
                n1, s1 = cls(k1, k2)
                if n1 == 0:
                    continue
                n2, s2 = cls(k2, OTSU_BINS)
                den = n0 * n1 * n2
                num = a0 * n1 * n2 + s1 * s1 * n0 * n2 + s2 * s2 * n0 * n1
                if best is None or num * best[1] > best[0] * den:
                    best = (num, den, (k1, k2))
    return [k / OTSU_BINS for k in best[2]]


def connected_components(mask, connectivity: int = 8) -> np.ndarray:
    """Label connected components, numbered 1..K in row-major first-encounter order."""
    mask = as_mask(mask)
    if connectivity not in _STRUCT:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    lab, k = ndimage.label(mask, structure=_STRUCT[connectivity])
    if k == 0:
        return lab.astype(np.int32)
    ids, first = np.unique(lab.ravel(), return_index=True)
    keep = ids != 0  # the mask may have no background at all
    ids, first = ids[keep], first[keep]
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[ids[np.argsort(first)]] = np.arange(1, k + 1, dtype=np.int32)
    return remap[lab]


def morphology(mask, op: str, iterations: int = 1) -> np.ndarray:
    """Binary erosion or dilation with a 3x3 square; outside the grid is unset."""
    mask = as_mask(mask)
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if iterations == 0:
        return mask.copy()
    if op == "erode":
        return ndimage.binary_erosion(mask, _SQUARE3, iterations=iterations, border_value=0)
    if op == "dilate":
        return ndimage.binary_dilation(mask, _SQUARE3, iterations=iterations, border_value=0)
    raise ValueError(f"unknown morphology op {op!r}")


def relabel_sequential(lab) -> np.ndarray:
    """Renumber labels to 1..K preserving the existing label order."""
    lab = np.asarray(lab)
    ids = np.unique(lab)
    ids = ids[ids != 0]
    remap = np.zeros(int(lab.max(initial=0)) + 1, dtype=np.int32)
    remap[ids] = np.arange(1, ids.size + 1, dtype=np.int32)
    return remap[lab]


def filter_small_components(lab, min_size: int) -> np.ndarray:
    """Zero out components smaller than ``min_size`` pixels and renumber the rest."""
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    lab = np.asarray(lab)
    sizes = np.bincount(lab.ravel(), minlength=1)
    small = sizes < min_size
    small[0] = False
    out = np.where(small[lab], 0, lab)
    return relabel_sequential(out)


def ssim(a, b) -> float:
    """Mean SSIM over all 8x8 windows (stride 1, uniform weights, range 1.0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b, names=("a", "b"))
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be 2D and at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW))
    ax = (-2, -1)
    mu_a = wa.mean(axis=ax)
    mu_b = wb.mean(axis=ax)
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=ax)
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=ax)
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=ax)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# --- portable graymap / pixmap I/O -------------------------------------------

def _write_pnm(path, magic: bytes, data: np.ndarray, maxval: int) -> None:
    h, w = data.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    Path(path).write_bytes(header + data.tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Write raw 16-bit values (big-endian P5, maxval 65535)."""
    v = np.asarray(values)
    if v.min(initial=0) < 0 or v.max(initial=0) > 65535:
        raise ValueError("PGM values must fit in 16 bits")
    _write_pnm(path, b"P5", v.astype(">u2"), 65535)


def write_image_pgm(path, img) -> None:
    img = as_image(img)
    write_pgm(path, np.rint(img * 65535.0).astype(np.uint16))


def write_mask_pgm(path, mask) -> None:
    write_pgm(path, as_mask(mask).astype(np.uint16) * 65535)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("rgb raster must have shape (h, w, 3)")
    _write_pnm(path, b"P6", rgb.astype(np.uint8), 255)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while buf[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1  # exactly one whitespace byte before the raster


def read_pnm(path) -> np.ndarray:
    """Read a binary P5 (8/16-bit) or P6 (8-bit) file into an integer array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    if magic == b"P5":
        shape = (h, w)
    elif magic == b"P6":
        shape = (h, w, 3)
    else:
        raise ValueError(f"unsupported PNM magic {magic!r}")
    n = int(np.prod(shape))
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=start).reshape(shape)
    return data.astype(np.int64)


def read_image_pgm(path) -> np.ndarray:
    return read_pnm(path).astype(np.float64) / 65535.0


def read_mask_pgm(path) -> np.ndarray:
    return read_pnm(path) > 0
