"""Pure-Python list scheduler; reference twin of ``_listsched.pyx``."""
from __future__ import annotations

import bisect
import heapq

import numpy as np


def list_schedule(duration, sm, stream, device, comm, rank, pred_count, succ_ptr, succ_idx,
                  capacity, n_streams):
    """Greedy list schedule of a DAG over per-device SM pools.

    At every decision time the ready events are scanned in ``rank`` order and
    each one starts if its stream is idle, its device has ``sm`` free SMs and,
    for comm events, the device's interconnect channel is idle.  Time then
    jumps to the next completion.  Returns ``(start, end)`` arrays.
    """
    n = len(duration)
    duration = [float(x) for x in duration]
    sm = [int(x) for x in sm]
    stream = [int(x) for x in stream]
    device = [int(x) for x in device]
    comm = [bool(x) for x in comm]
    rank = [int(x) for x in rank]
    waiting = [int(x) for x in pred_count]
    succ_ptr = [int(x) for x in succ_ptr]
    succ_idx = [int(x) for x in succ_idx]
    free_sm = [int(x) for x in capacity]
    channel_busy = [False] * len(free_sm)
    stream_busy = [False] * n_streams
    by_rank = [0] * n
    for i, r in enumerate(rank):
        by_rank[r] = i

    start = [0.0] * n
    end = [0.0] * n
    ready = sorted(rank[i] for i in range(n) if waiting[i] == 0)
    running: list[tuple[float, int, int]] = []
    t = 0.0
    done = 0
    while done < n:
        still = []
        for r in ready:
            i = by_rank[r]
            d = device[i]
            if (stream_busy[stream[i]] or free_sm[d] < sm[i]
                    or (comm[i] and channel_busy[d])):
                still.append(r)
                continue
            stream_busy[stream[i]] = True
            free_sm[d] -= sm[i]
            if comm[i]:
                channel_busy[d] = True
            start[i] = t
            end[i] = t + duration[i]
            heapq.heappush(running, (end[i], r, i))
        ready = still
        if not running:
            raise RuntimeError("deadlock: ready events cannot fit any device")
        t = running[0][0]
        while running and running[0][0] == t:
            _, _, i = heapq.heappop(running)
            done += 1
            d = device[i]
            stream_busy[stream[i]] = False
            free_sm[d] += sm[i]
            if comm[i]:
                channel_busy[d] = False
            for j in succ_idx[succ_ptr[i]:succ_ptr[i + 1]]:
                waiting[j] -= 1
                if waiting[j] == 0:
                    bisect.insort(ready, rank[j])
    return np.array(start), np.array(end)
