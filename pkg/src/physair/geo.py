"""Sensor graphs, wind-aware edge features, and derived graph matrices.

The network is always a complete directed graph over the sensors. Edge
order is fixed: all edges into node 0 first (sources in ascending order),
then all edges into node 1, and so on. Several consumers rely on that
grouping, e.g. summing incoming messages by reshaping to (N, N-1).

Distances are great-circle kilometres with a small floor so that 1/dist
stays finite for co-located sensors. Wind directions arrive in the
meteorological convention (degrees the wind blows FROM) and are converted
to the blowing-toward vector before any angle is taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

EARTH_RADIUS_KM = 6371.0
EPS_DIST_KM = 0.01


@dataclass(frozen=True)
class SensorMeta:
    """One sensor: a stable id and its geolocation in degrees."""

    sensor_id: str
    latitude: float
    longitude: float

    def validate(self) -> None:
        if not (-90.0 <= self.latitude <= 90.0):
            raise ValidationError(f"sensor {self.sensor_id!r}: latitude {self.latitude} outside [-90, 90]")
        if not (-180.0 <= self.longitude <= 180.0):
            raise ValidationError(f"sensor {self.sensor_id!r}: longitude {self.longitude} outside [-180, 180]")


@dataclass(frozen=True)
class WindRecord:
    """Hourly wind: speed in km/h and the meteorological from-direction."""

    timestamp: str
    speed_kmh: float
    direction_deg: float

    def __post_init__(self):
        if self.speed_kmh < 0:
            raise ValidationError(f"wind at {self.timestamp}: speed {self.speed_kmh} < 0")
        object.__setattr__(self, "direction_deg", float(self.direction_deg) % 360.0)


def haversine_km(a: SensorMeta, b: SensorMeta) -> float:
    """Great-circle distance between two sensors, in kilometres.

    Uses Earth radius 6371.0 km. Exactly symmetric: the formula only sees
    absolute coordinate differences.
    """
    a.validate()
    b.validate()
    lat1, lon1 = np.radians(a.latitude), np.radians(a.longitude)
    lat2, lon2 = np.radians(b.latitude), np.radians(b.longitude)
    s1 = np.sin(abs(lat2 - lat1) / 2.0)
    s2 = np.sin(abs(lon2 - lon1) / 2.0)
    h = s1 * s1 + np.cos(lat1) * np.cos(lat2) * s2 * s2
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(min(1.0, h))))


def pairwise_distances_km(lats, lons) -> np.ndarray:
    """Full haversine distance matrix in km, exactly symmetric, zero diagonal."""
    lat = np.radians(np.asarray(lats, dtype=float))[:, None]
    lon = np.radians(np.asarray(lons, dtype=float))[:, None]
    s1 = np.sin(np.abs(lat.T - lat) / 2.0)
    s2 = np.sin(np.abs(lon.T - lon) / 2.0)
    h = s1 * s1 + np.cos(lat) * np.cos(lat.T) * s2 * s2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))
    out = np.triu(d, 1)
    out = out + out.T  # mirror the upper triangle so symmetry is exact
    np.fill_diagonal(out, 0.0)
    return out


def cross_distances_km(lats_a, lons_a, lats_b, lons_b) -> np.ndarray:
    """Haversine distances between two point sets, shape (len(a), len(b))."""
    lat_a = np.radians(np.asarray(lats_a, dtype=float))[:, None]
    lon_a = np.radians(np.asarray(lons_a, dtype=float))[:, None]
    lat_b = np.radians(np.asarray(lats_b, dtype=float))[None, :]
    lon_b = np.radians(np.asarray(lons_b, dtype=float))[None, :]
    s1 = np.sin(np.abs(lat_b - lat_a) / 2.0)
    s2 = np.sin(np.abs(lon_b - lon_a) / 2.0)
    h = s1 * s1 + np.cos(lat_a) * np.cos(lat_b) * s2 * s2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


@dataclass(frozen=True)
class Graph:
    """Complete directed graph over a sensor network.

    dist keeps true zero on the diagonal; off-diagonal entries are floored
    at eps_dist. Edge k runs src[k] -> dst[k], grouped by destination.
    edge_east/edge_north are unit vectors along each edge in a local
    east/north frame, zero where endpoints coincide.
    """

    sensors: tuple
    dist: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_east: np.ndarray
    edge_north: np.ndarray
    eps_dist: float = EPS_DIST_KM

    @property
    def n_nodes(self) -> int:
        return len(self.sensors)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge_dist(self) -> np.ndarray:
        """Per-edge distance (km), in edge order."""
        return self.dist[self.src, self.dst]

    def diffusion_edge_features(self) -> np.ndarray:
        """Per-edge inverse distance, the feature weighting the adjacency."""
        return 1.0 / self.edge_dist()

    def local_edge_features(self) -> np.ndarray:
        """Edge feature feeding the local normalization; reuses 1/dist."""
        return self.diffusion_edge_features()

    def adjacency(self) -> np.ndarray:
        """Weighted adjacency A[i, j] = 1/dist(i, j), zero diagonal."""
        n = self.n_nodes
        a = np.zeros((n, n))
        off = ~np.eye(n, dtype=bool)
        a[off] = 1.0 / self.dist[off]
        return a


def build_graph(sensors, eps_dist: float = EPS_DIST_KM) -> Graph:
    """Build the complete directed graph for a list of SensorMeta.

    Validates ids and coordinates, computes the clamped distance matrix,
    and fixes the edge ordering (grouped by destination node).
    """
    sensors = tuple(sensors)
    n = len(sensors)
    if n < 2:
        raise ValidationError(f"a graph needs at least 2 sensors, got {n}")
    ids = [s.sensor_id for s in sensors]
    if len(set(ids)) != n:
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate sensor ids: {dupes}")
    for s in sensors:
        s.validate()

    lats = np.array([s.latitude for s in sensors])
    lons = np.array([s.longitude for s in sensors])
    dist = pairwise_distances_km(lats, lons)
    off = ~np.eye(n, dtype=bool)
    dist[off] = np.maximum(dist[off], eps_dist)

    idx = np.arange(n)
    dst = np.repeat(idx, n - 1)
    src = np.concatenate([np.delete(idx, i) for i in range(n)])

    # Unit edge vectors in a local equirectangular frame anchored at the
    # midpoint latitude of each pair. Built from coordinate differences, so
    # reversing an edge flips the vector exactly.
    lat_r = np.radians(lats)
    lon_r = np.radians(lons)
    dx = (lon_r[dst] - lon_r[src]) * np.cos((lat_r[dst] + lat_r[src]) / 2.0)
    dy = lat_r[dst] - lat_r[src]
    norm = np.hypot(dx, dy)
    safe = np.where(norm > 0, norm, 1.0)
    edge_east = np.where(norm > 0, dx / safe, 0.0)
    edge_north = np.where(norm > 0, dy / safe, 0.0)

    return Graph(sensors=sensors, dist=dist, src=src, dst=dst,
                 edge_east=edge_east, edge_north=edge_north, eps_dist=eps_dist)


def convection_edge_features(graph: Graph, wind: WindRecord) -> np.ndarray:
    """Per-edge (w_v, w_A, dist) for one wind record, shape (E, 3).

    w_v is the city-level wind speed copied to every edge. w_A is the
    cosine of the angle between the wind's blowing-toward vector and the
    bearing of the edge, so wind blowing straight from j toward i gives
    w_A = +1 on edge j->i and, exactly, -1 on the reverse edge.
    """
    toward = np.radians((wind.direction_deg + 180.0) % 360.0)
    # compass angle: 0 = north, 90 = east
    u_east, u_north = np.sin(toward), np.cos(toward)
    w_a = np.clip(u_east * graph.edge_east + u_north * graph.edge_north, -1.0, 1.0)
    out = np.empty((graph.n_edges, 3))
    out[:, 0] = wind.speed_kmh
    out[:, 1] = w_a
    out[:, 2] = graph.edge_dist()
    return out


def scaled_laplacian(a: np.ndarray, tol: float = 1e-6, max_iter: int = 1000):
    """Normalized Laplacian of a weighted adjacency, rescaled to [-1, 1].

    Returns (L, lambda_max, L_D) with L = I - D^(-1/2) A D^(-1/2) and
    L_D = 2 L / lambda_max - I. lambda_max comes from block power
    iteration (a 4-column subspace with Rayleigh-Ritz extraction; a single
    vector can stall for hundreds of iterations when the two largest
    eigenvalues sit close together). The iteration stops once the top Ritz
    pair's residual ||L y - lambda y|| drops to tol, which leaves an error
    of order tol^2 in lambda and keeps the spectrum of L_D inside [-1, 1]
    to far better than 1e-8. If it has not settled after max_iter steps
    the conventional upper bound 2.0 is used instead.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T):
        raise ValidationError("adjacency must be square and symmetric")
    if np.any(np.diag(a) != 0):
        raise ValidationError("adjacency must have a zero diagonal")
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        bad = np.nonzero(deg <= 0)[0].tolist()
        raise ValidationError(f"nodes with zero degree: {bad}")

    d_half = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - d_half[:, None] * a * d_half[None, :]

    block = min(4, n)
    v = np.random.default_rng(0).standard_normal((n, block))
    v, _ = np.linalg.qr(v)
    lam_max = 2.0
    for _ in range(max_iter):
        v, _ = np.linalg.qr(lap @ v)
        small = v.T @ (lap @ v)
        theta, s = np.linalg.eigh((small + small.T) / 2.0)
        y = v @ s[:, -1]
        lam = float(theta[-1])
        if np.linalg.norm(lap @ y - lam * y) <= tol:
            lam_max = lam
            break

    scaled = (2.0 / lam_max) * lap - np.eye(n)
    return lap, lam_max, scaled


def local_norm_matrix(graph: Graph, edge_features: np.ndarray | None = None) -> np.ndarray:
    """Diagonal matrix M with M[i, i] = 1 + sum of features on edges into i.

    Defaults to the local (inverse-distance) edge features. Entries are
    always >= 1, so M scales features up; its inverse is what actually
    shrinks them (see the model module for which one is applied).
    """
    feats = graph.local_edge_features() if edge_features is None else np.asarray(edge_features, dtype=float)
    if feats.shape != (graph.n_edges,):
        raise ValidationError(f"expected {graph.n_edges} edge features, got shape {feats.shape}")
    if np.any(feats <= 0):
        raise ValidationError("local edge features must be positive")
    m = np.ones(graph.n_nodes)
    np.add.at(m, graph.dst, feats)
    return np.diag(m)


@dataclass(frozen=True)
class GraphMatrices:
    """Everything the model's linear algebra needs, derived once per graph."""

    a: np.ndarray
    d: np.ndarray
    lap: np.ndarray
    lap_scaled: np.ndarray
    lambda_max: float
    m: np.ndarray
    m_inv: np.ndarray


def build_matrices(graph: Graph) -> GraphMatrices:
    """Adjacency, degree, Laplacians, and local normalization for one graph."""
    a = graph.adjacency()
    d = np.diag(a.sum(axis=1))
    lap, lam_max, lap_scaled = scaled_laplacian(a)
    m = local_norm_matrix(graph)
    m_inv = np.diag(1.0 / np.diag(m))
    return GraphMatrices(a=a, d=d, lap=lap, lap_scaled=lap_scaled,
                         lambda_max=lam_max, m=m, m_inv=m_inv)
