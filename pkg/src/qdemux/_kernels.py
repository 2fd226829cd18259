"""Compiled inner loops."""
import numpy as np
from numba import njit


@njit(cache=True)
def dead_time_filter(ticks, dead_ticks, last):
    """Non-paralyzable dead time on sorted ticks.

    A tick is accepted when it lies at least ``dead_ticks`` after the previous
    accepted one (blocked arrivals do not extend the window). ``last`` is the
    previously accepted tick carried over from an earlier call.
    """
    keep = np.zeros(ticks.size, dtype=np.bool_)
    for i in range(ticks.size):
        t = ticks[i]
        if t - last >= dead_ticks:
            keep[i] = True
            last = t
    return keep, last


@njit(cache=True)
def window_correlate(a, b, tick_ps, bin_width, k_max, counts):
    """Accumulate delays ``b[j] - a[i]`` into centered bins.

    Both inputs are sorted tick arrays. A lower pointer into ``b`` slides
    forward with ``a``; only pairs inside the span are visited. Bin index is
    ``round_half_away(delay / bin_width)`` so the layout is mirror symmetric.
    """
    reach = (k_max + 1.0) * bin_width
    nb = b.size
    j0 = 0
    for i in range(a.size):
        ta = a[i]
        while j0 < nb and (b[j0] - ta) * tick_ps < -reach:
            j0 += 1
        j = j0
        while j < nb:
            d = (b[j] - ta) * tick_ps
            if d > reach:
                break
            x = abs(d) / bin_width + 0.5
            k = int(np.floor(x))
            if k <= k_max:
                if d < 0:
                    counts[k_max - k] += 1
                else:
                    counts[k_max + k] += 1
            j += 1
    return counts
