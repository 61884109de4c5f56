#!/usr/bin/env python3
"""Convert the Victoria Park recordings into a nanoslam event file.

Inputs are the published MATLAB files:

* ``aa3_dr.mat``: ``time`` (ms), ``speed`` (m/s at the rear encoder),
  ``steering`` (rad)
* ``aa3_gpsx.mat``: ``timeGps`` (ms), ``Lo_m``, ``La_m`` (local metres)
* either ``aa3_lsr2.mat`` (``TLsr`` in ms, ``LASER`` in cm, 361 beams over
  180 degrees), from which tree trunks are extracted, or a text file of
  ready-made detections with one ``time range bearing`` triple per line
  (time in seconds; several rows may share a time)

The output is ``<out>`` in the line format read by ``nanoslam`` plus a
``<out>.manifest.json`` sidecar with per-kind counts.

Usage::

    python3 victoria_to_events.py --dr aa3_dr.mat --gps aa3_gpsx.mat \\
        --laser aa3_lsr2.mat --out data/victoria.txt
"""

from __future__ import annotations

import argparse
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np
from scipy.io import loadmat

LASER_MAX_M = 75.0
BEAMS = 361


def num(x: float) -> str:
    return repr(float(x))


def trees_in_scan(ranges: np.ndarray, max_range: float, jump: float, min_beams: int) -> list[tuple[float, float]]:
    """Range and bearing to the centres of compact returns in one scan.

    Consecutive beams closer than ``max_range`` whose ranges differ by less
    than ``jump`` form a segment; a segment's trunk diameter is estimated
    from its angular width and the centre is pushed back by its radius.
    """
    angles = np.linspace(0.0, math.pi, BEAMS) - math.pi / 2
    valid = ranges < max_range
    found = []
    start = None
    for i in range(BEAMS + 1):
        inside = i < BEAMS and valid[i] and (start is None or abs(ranges[i] - ranges[i - 1]) < jump)
        if inside and start is None:
            start = i
        elif not inside and start is not None:
            end = i - 1
            # segments touching an occluding edge are partial and skipped
            edge_ok = (start == 0 or ranges[start - 1] > ranges[start]) and (end == BEAMS - 1 or ranges[end + 1] > ranges[end])
            if end - start + 1 >= min_beams and edge_ok:
                width = angles[end] - angles[start]
                r_mid = float(np.mean(ranges[start : end + 1]))
                diameter = 2.0 * r_mid * math.tan(width / 2.0)
                if diameter < 2.0:
                    bearing = float(np.mean(angles[start : end + 1]))
                    found.append((r_mid + diameter / 2.0, bearing))
            start = i if (i < BEAMS and valid[i]) else None
    return found


def laser_detections(path: Path, max_range: float, jump: float, min_beams: int) -> dict[float, list[tuple[float, float]]]:
    data = loadmat(path)
    times = np.asarray(data["TLsr"], dtype=float).ravel() / 1000.0
    scans = np.asarray(data["LASER"], dtype=float) / 100.0
    return {float(t): trees_in_scan(scan, max_range, jump, min_beams) for t, scan in zip(times, scans)}


def text_detections(path: Path) -> dict[float, list[tuple[float, float]]]:
    grouped: dict[float, list[tuple[float, float]]] = defaultdict(list)
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        t, r, b = (float(x) for x in line.split()[:3])
        grouped[t].append((r, b))
    return grouped


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--dr", type=Path, required=True)
    parser.add_argument("--gps", type=Path, required=True)
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--laser", type=Path)
    source.add_argument("--detections", type=Path)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--max-range", type=float, default=30.0, help="ignore laser returns beyond this, m")
    parser.add_argument("--jump", type=float, default=1.0, help="range discontinuity that splits segments, m")
    parser.add_argument("--min-beams", type=int, default=2)
    args = parser.parse_args()

    events: list[tuple[float, int, str]] = []
    dr = loadmat(args.dr)
    t_dr = np.asarray(dr["time"], dtype=float).ravel() / 1000.0
    for t, v, a in zip(t_dr, np.asarray(dr["speed"], dtype=float).ravel(), np.asarray(dr["steering"], dtype=float).ravel()):
        events.append((t, 0, f"CONTROL {num(v)} {num(a)}"))

    gps = loadmat(args.gps)
    for t, x, y in zip(
        np.asarray(gps["timeGps"], dtype=float).ravel() / 1000.0,
        np.asarray(gps["Lo_m"], dtype=float).ravel(),
        np.asarray(gps["La_m"], dtype=float).ravel(),
    ):
        if np.isfinite(x) and np.isfinite(y):
            events.append((t, 2, f"GPS {num(x)} {num(y)}"))

    if args.laser is not None:
        detections = laser_detections(args.laser, min(args.max_range, LASER_MAX_M), args.jump, args.min_beams)
    else:
        detections = text_detections(args.detections)
    detection_count = 0
    for t, zs in detections.items():
        if zs:
            detection_count += len(zs)
            body = " ".join(f"{num(r)} {num(b)}" for r, b in zs)
            events.append((t, 1, f"MEAS {body}"))

    # controls before measurements before GPS at equal times
    events.sort(key=lambda e: (e[0], e[1]))
    t0 = events[0][0]
    with args.out.open("w") as out:
        out.write("# Victoria Park, converted from the published MATLAB files\n")
        for t, _, body in events:
            out.write(f"{num(t - t0)} {body}\n")

    manifest = {
        "control": sum(1 for e in events if e[1] == 0),
        "meas": sum(1 for e in events if e[1] == 1),
        "gps": sum(1 for e in events if e[1] == 2),
        "detections": detection_count,
    }
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{len(events)} events -> {args.out}")


if __name__ == "__main__":
    main()
