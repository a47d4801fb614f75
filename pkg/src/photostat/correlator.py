"""Coincidence histograms C2(tau) between the two detector channels.

tau is ``t_b - t_a`` (channel 1 minus channel 0). A pair falls in bin ``k`` when
``floor((tau - tau_min) / bin_width) == k`` with ``0 <= k < n_bins``; bins are
half-open ``[low, high)``. The bin index is computed in double precision, which
is exact enough for any ``|tau| < 2**53`` ps.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .core import AcquisitionMeta, PS_PER_S, load_json, write_json
from .errors import DivisionByZeroConfig, EmptyWindow, MalformedRecord, UnsortedInput

DEFAULT_BIN_PS = 106.9
DEFAULT_HALF_WINDOW_PS = 150_000.0


@dataclass
class CorrelationHistogram:
    bin_width: float  # ps
    tau_min: float  # ps
    tau_max: float  # ps
    counts: np.ndarray
    total_starts: int = 0
    total_stops: int = 0
    acquisition: AcquisitionMeta = field(default_factory=AcquisitionMeta)

    @property
    def n_bins(self):
        return len(self.counts)

    @property
    def edges(self):
        return self.tau_min + self.bin_width * np.arange(self.n_bins + 1)

    @property
    def centers(self):
        """Bin centres in ps."""
        return self.tau_min + self.bin_width * (np.arange(self.n_bins) + 0.5)

    def reversed(self):
        """Histogram of the swapped channels: tau -> -tau, bins become (-high, -low]."""
        return replace(
            self,
            tau_min=-self.tau_max,
            tau_max=-self.tau_min,
            counts=self.counts[::-1].copy(),
            total_starts=self.total_stops,
            total_stops=self.total_starts,
        )

    def __add__(self, other):
        if (other.bin_width, other.tau_min, other.n_bins) != (self.bin_width, self.tau_min, self.n_bins):
            raise ValueError("histograms have different binning")
        return replace(
            self,
            counts=self.counts + other.counts,
            total_starts=self.total_starts + other.total_starts,
            total_stops=self.total_stops + other.total_stops,
        )


def window_bins(tau_min, tau_max, bin_width):
    """Number of bins covering ``[tau_min, tau_max)``; the upper edge is rounded up."""
    if not bin_width > 0:
        raise EmptyWindow(f"bin_width must be positive, got {bin_width}")
    if not (math.isfinite(tau_min) and math.isfinite(tau_max)) or tau_max <= tau_min:
        raise EmptyWindow(f"empty or infinite window [{tau_min}, {tau_max})")
    span = (tau_max - tau_min) / bin_width
    n = math.ceil(span - 1e-9)
    return max(n, 1)


def symmetric_window(half_width, bin_width, centered=True):
    """A window of whole bins covering ``[-half_width, half_width]``.

    With ``centered`` one bin is centred on tau = 0, otherwise tau = 0 is a bin edge.
    Returns ``(tau_min, tau_max)``.
    """
    n = math.ceil(half_width / bin_width - 1e-9)
    if centered:
        return -(n + 0.5) * bin_width, (n + 0.5) * bin_width
    return -n * bin_width, n * bin_width


@numba.njit(cache=True, nogil=True)
def _sweep(a, b, tau_min, bin_width, n_bins, i_start, i_stop, counts):
    nb = b.shape[0]
    reach = (n_bins + 1) * bin_width
    j_lo = 0
    if i_start < i_stop:
        # position the lower pointer for the first start record
        ta0 = a[i_start]
        lo = 0
        hi = nb
        while lo < hi:
            mid = (lo + hi) // 2
            if float(b[mid] - ta0) < tau_min:
                lo = mid + 1
            else:
                hi = mid
        j_lo = lo
    for i in range(i_start, i_stop):
        ta = a[i]
        while j_lo < nb and float(b[j_lo] - ta) < tau_min:
            j_lo += 1
        j = j_lo
        while j < nb:
            x = float(b[j] - ta) - tau_min
            if x >= reach:
                break
            k = int(math.floor(x / bin_width))
            if k < n_bins:
                counts[k] += 1
            j += 1


def _check_sorted(x, name):
    if x.size > 1:
        down = np.flatnonzero(np.diff(x) < 0)
        if down.size:
            raise UnsortedInput(f"{name} is not sorted at index {int(down[0]) + 1}")


def cross_correlate(a, b, bin_width=DEFAULT_BIN_PS, window=None, n_partitions=1, meta=None):
    """Full cross-correlation histogram of start times ``a`` against stop times ``b``.

    Every in-window pair is counted (not start-stop). The sweep is a two-pointer
    pass, linear in the inputs plus the number of in-window pairs. ``window`` is
    ``(tau_min, tau_max)`` in ps; if its width is not a whole number of bins,
    ``tau_max`` is moved up to the next bin edge. ``n_partitions`` splits the
    start records across threads; the result does not depend on it.
    """
    a = np.ascontiguousarray(a, dtype=np.int64)
    b = np.ascontiguousarray(b, dtype=np.int64)
    _check_sorted(a, "start stream")
    _check_sorted(b, "stop stream")
    if window is None:
        window = symmetric_window(DEFAULT_HALF_WINDOW_PS, bin_width)
    tau_min, tau_max = float(window[0]), float(window[1])
    n_bins = window_bins(tau_min, tau_max, bin_width)
    tau_max = tau_min + n_bins * bin_width

    n_partitions = max(1, min(int(n_partitions), max(len(a), 1)))
    bounds = np.linspace(0, len(a), n_partitions + 1).astype(np.int64)
    parts = [np.zeros(n_bins, dtype=np.int64) for _ in range(n_partitions)]

    def run(p):
        _sweep(a, b, tau_min, float(bin_width), n_bins, bounds[p], bounds[p + 1], parts[p])

    if n_partitions == 1:
        run(0)
    else:
        with ThreadPoolExecutor(max_workers=n_partitions) as pool:
            list(pool.map(run, range(n_partitions)))
    counts = np.sum(parts, axis=0).astype(np.int64)
    return CorrelationHistogram(
        bin_width=float(bin_width),
        tau_min=tau_min,
        tau_max=tau_max,
        counts=counts,
        total_starts=len(a),
        total_stops=len(b),
        acquisition=meta if meta is not None else AcquisitionMeta(bin_width=float(bin_width)),
    )


def correlate_stream(stream, bin_width=DEFAULT_BIN_PS, window=None, n_partitions=1):
    meta = replace(stream.meta, bin_width=float(bin_width))
    return cross_correlate(
        stream.channel_times(0), stream.channel_times(1), bin_width, window, n_partitions, meta
    )


class StreamingCorrelator:
    """Accumulate C2(tau) over consecutive, time-ordered stream chunks.

    Only the tail of the previous chunk that can still pair with new clicks is
    kept, so arbitrarily long acquisitions run in bounded memory. The result is
    identical to correlating the concatenated stream in one call.
    """

    def __init__(self, bin_width=DEFAULT_BIN_PS, window=None, meta=None):
        if window is None:
            window = symmetric_window(DEFAULT_HALF_WINDOW_PS, bin_width)
        self.bin_width = float(bin_width)
        self.tau_min = float(window[0])
        self.n_bins = window_bins(self.tau_min, float(window[1]), self.bin_width)
        self.tau_max = self.tau_min + self.n_bins * self.bin_width
        self.span = max(abs(self.tau_min), abs(self.tau_max)) + self.bin_width
        self.counts = np.zeros(self.n_bins, dtype=np.int64)
        self.meta = meta
        self._tail_a = np.empty(0, np.int64)
        self._tail_b = np.empty(0, np.int64)
        self._last = None
        self.total_starts = 0
        self.total_stops = 0

    def _hist(self, a, b):
        return cross_correlate(a, b, self.bin_width, (self.tau_min, self.tau_max)).counts

    def add(self, a, b):
        a = np.ascontiguousarray(a, dtype=np.int64)
        b = np.ascontiguousarray(b, dtype=np.int64)
        first = min(a[0] if a.size else np.inf, b[0] if b.size else np.inf)
        if self._last is not None and first < self._last:
            raise UnsortedInput("chunk starts before the end of the previous chunk")
        self.counts += self._hist(a, np.concatenate([self._tail_b, b]))
        if self._tail_a.size and b.size:
            self.counts += self._hist(self._tail_a, b)
        all_a = np.concatenate([self._tail_a, a])
        all_b = np.concatenate([self._tail_b, b])
        last = max(all_a[-1] if all_a.size else -np.inf, all_b[-1] if all_b.size else -np.inf)
        if np.isfinite(last):
            self._last = last
            cut = last - self.span
            self._tail_a = all_a[all_a >= cut]
            self._tail_b = all_b[all_b >= cut]
        self.total_starts += a.size
        self.total_stops += b.size

    def add_stream(self, stream):
        self.add(stream.channel_times(0), stream.channel_times(1))

    def result(self):
        return CorrelationHistogram(
            bin_width=self.bin_width,
            tau_min=self.tau_min,
            tau_max=self.tau_max,
            counts=self.counts.copy(),
            total_starts=self.total_starts,
            total_stops=self.total_stops,
            acquisition=self.meta if self.meta is not None else AcquisitionMeta(bin_width=self.bin_width),
        )


def brute_force_histogram(a, b, bin_width, window):
    """All-pairs O(N_a * N_b) reference histogram (for testing)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    tau_min = float(window[0])
    n_bins = window_bins(tau_min, float(window[1]), bin_width)
    counts = np.zeros(n_bins, dtype=np.int64)
    for ta in a:
        d = (b - ta).astype(float)
        k = np.floor((d - tau_min) / bin_width)
        k = k[(k >= 0) & (k < n_bins)].astype(np.int64)
        counts += np.bincount(k, minlength=n_bins)
    return counts


def normalize_g2(hist, rate_a, rate_b, duration):
    """Counts divided by the uncorrelated expectation ``rate_a * rate_b * duration * bin_width``."""
    if not (rate_a > 0 and rate_b > 0 and duration > 0):
        raise DivisionByZeroConfig("rates and duration must be positive")
    expected = rate_a * rate_b * duration * (hist.bin_width / PS_PER_S)
    return hist.counts / expected


def write_histogram(hist, path):
    """Write ``tau_ps,counts`` CSV at bin centres plus a ``.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("tau_ps,counts\n")
        for t, c in zip(hist.centers, hist.counts):
            fh.write(f"{float(t)!r},{int(c)}\n")
    write_json(
        {
            "bin_width_ps": hist.bin_width,
            "tau_min_ps": hist.tau_min,
            "tau_max_ps": hist.tau_max,
            "n_bins": hist.n_bins,
            "total_starts": hist.total_starts,
            "total_stops": hist.total_stops,
            "acquisition": hist.acquisition.to_dict(),
        },
        sidecar_path(path),
    )


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_histogram(path):
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise MalformedRecord(f"{path}: expected two columns tau_ps,counts")
    centers, counts = data[:, 0], data[:, 1]
    side = sidecar_path(path)
    if side.exists():
        m = load_json(side)
        bw = float(m["bin_width_ps"])
        tau_min = float(m["tau_min_ps"])
        acq = AcquisitionMeta.from_dict(m.get("acquisition", {}))
        starts, stops = int(m.get("total_starts", 0)), int(m.get("total_stops", 0))
    else:
        if len(centers) < 2:
            raise MalformedRecord(f"{path}: need a sidecar or at least two bins")
        bw = float(np.mean(np.diff(centers)))
        tau_min = float(centers[0] - bw / 2)
        acq, starts, stops = AcquisitionMeta(bin_width=bw), 0, 0
    return CorrelationHistogram(
        bin_width=bw,
        tau_min=tau_min,
        tau_max=tau_min + bw * len(counts),
        counts=np.rint(counts).astype(np.int64),
        total_starts=starts,
        total_stops=stops,
        acquisition=acq,
    )
