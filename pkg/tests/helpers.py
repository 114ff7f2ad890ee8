"""Small network builders shared by the tests."""

import math

from navtraj.roadnet import Intersection, RoadNetwork, RoadSegment


def make_net(n, edges, coords=None, lengths=None, headings=None, types=None):
    """Network from (src, dst[, reachable[, angle]]) tuples; default coords walk east along the equator."""
    coords = coords if coords is not None else [(0.001 * i, 0.0) for i in range(n)]
    segs = [
        RoadSegment(
            i,
            lengths[i] if lengths is not None else 100.0,
            types[i] if types is not None else 0,
            coords[i][0],
            coords[i][1],
            headings[i] if headings is not None else None,
        )
        for i in range(n)
    ]
    inters = []
    for e in edges:
        src, dst = e[0], e[1]
        reach = e[2] if len(e) > 2 else True
        ang = e[3] if len(e) > 3 else 0.0
        inters.append(Intersection(src, dst, reach, ang))
    return RoadNetwork(segs, inters)


def chain_net(n):
    """0 -> 1 -> ... -> n-1, each segment 100 m heading east."""
    return make_net(n, [(i, i + 1) for i in range(n - 1)], headings=[math.pi / 2] * n)


def random_digraph(rng, n, p):
    edges = [(a, b) for a in range(n) for b in range(n) if a != b and rng.random() < p]
    coords = [(116.3 + 0.01 * rng.random(), 39.9 + 0.01 * rng.random()) for _ in range(n)]
    return make_net(n, edges, coords=coords)
