"""Manufactured-solution datasets for desk-scale experiments.

Points fill the unit square minus a circular hole, with an optional
densified ring hugging the hole boundary so degree-adaptive graph
construction sees a genuine density gradient. Target fields are smooth
closed forms of the wall distance, so stored targets are exact and the
generator doubles as its own oracle:

    g(x)  = 1 - exp(-dist(x) / 0.1)           wall-distance envelope
    T     = T_in + A * g * sin(pi x) sin(pi y) * 1e-3
    v     = v_in * g
    k     = 0.01 * v_in^2 * g * (1 - g)

The input vector mirrors the sparse-boundary sensing layout: two inlet
scalars plus a discretized forcing profile q_j = A sin(pi j / (P + 1)),
so inputs carry no node coordinates and the reconstruction stays heavily
underdetermined (ratio n*C/(P+2), >= 40:1 at defaults).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidParameterError
from .graphs import PointCloud

CHANNEL_NAMES = ("T", "v", "k")


@dataclass(frozen=True)
class SynthSpec:
    n_target: int = 400
    hole_center: tuple[float, float] = (0.5, 0.5)
    hole_radius: float = 0.25
    densify_factor: float = 4.0
    band_width: float = 0.08
    profile_len: int = 20
    a_range: tuple[float, float] = (540.0, 660.0)
    t_in_range: tuple[float, float] = (536.4, 655.6)
    v_in_range: tuple[float, float] = (4.05, 4.95)
    sample_count: int = 950
    seed: int = 0

    def __post_init__(self):
        if self.n_target < 50:
            raise InvalidParameterError("n_target must be >= 50")
        if self.profile_len < 1:
            raise InvalidParameterError("profile_len must be >= 1")
        if self.densify_factor < 1:
            raise InvalidParameterError("densify_factor must be >= 1")
        for rng in (self.a_range, self.t_in_range, self.v_in_range):
            if rng[0] > rng[1]:
                raise InvalidParameterError(f"invalid range {rng}")

    @property
    def input_width(self) -> int:
        return self.profile_len + 2


def wall_distance(coords: np.ndarray, spec: SynthSpec) -> np.ndarray:
    center = np.asarray(spec.hole_center)
    return np.linalg.norm(coords - center, axis=1) - spec.hole_radius


def manufactured_fields(coords: np.ndarray, a: float, t_in: float, v_in: float,
                        spec: SynthSpec) -> np.ndarray:
    """Closed-form (n, 3) target channels (T, v, k)."""
    g = 1.0 - np.exp(-wall_distance(coords, spec) / 0.1)
    t = t_in + a * g * np.sin(np.pi * coords[:, 0]) * np.sin(np.pi * coords[:, 1]) * 1e-3
    v = v_in * g
    k = 0.01 * v_in**2 * g * (1.0 - g)
    return np.stack([t, v, k], axis=1)


def input_vector(a: float, t_in: float, v_in: float, profile_len: int) -> np.ndarray:
    j = np.arange(1, profile_len + 1)
    return np.concatenate([[t_in, v_in], a * np.sin(np.pi * j / (profile_len + 1))])


def generate_points(spec: SynthSpec) -> PointCloud:
    """Jittered grid minus the hole, plus a densified near-wall ring."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    center = np.asarray(spec.hole_center)
    res = int(np.ceil(np.sqrt(spec.n_target * 1.6)))
    for _ in range(8):
        ii, jj = np.meshgrid(np.arange(res), np.arange(res), indexing="ij")
        base = np.stack([ii.ravel(), jj.ravel()], axis=1) + 0.5
        base = (base + rng.uniform(-0.45, 0.45, size=base.shape)) / res
        keep = np.linalg.norm(base - center, axis=1) > spec.hole_radius
        base = base[keep]
        band_lo, band_hi = spec.hole_radius, spec.hole_radius + spec.band_width
        r_base = np.linalg.norm(base - center, axis=1)
        in_band = int(np.count_nonzero((r_base > band_lo) & (r_base <= band_hi)))
        extra = int(round((spec.densify_factor - 1.0) * in_band))
        if extra:
            rr = np.sqrt(rng.uniform(band_lo**2, band_hi**2, size=extra))
            th = rng.uniform(0, 2 * np.pi, size=extra)
            ring = center + np.stack([rr * np.cos(th), rr * np.sin(th)], axis=1)
            pool = np.concatenate([base, ring])
        else:
            pool = base
        if pool.shape[0] >= spec.n_target:
            pick = np.sort(rng.choice(pool.shape[0], size=spec.n_target, replace=False))
            return PointCloud(pool[pick])
        res = int(np.ceil(res * 1.3))
    raise InvalidParameterError(
        f"could not place {spec.n_target} points after bounded attempts"
    )


def generate_dataset(spec: SynthSpec):
    """Dataset of (input vector, exact target field) pairs on one point cloud.

    Returns (dataset, points). Per-sample parameter draws use derived
    seeds, so generation is deterministic and parallelizable.
    """
    from .training import Dataset  # local import: training depends on us for specs

    points = generate_points(spec)
    q = spec.input_width
    inputs = np.empty((spec.sample_count, q))
    targets = np.empty((spec.sample_count, points.n, 3))
    for i in range(spec.sample_count):
        srng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, i]))
        a = srng.uniform(*spec.a_range)
        t_in = srng.uniform(*spec.t_in_range)
        v_in = srng.uniform(*spec.v_in_range)
        inputs[i] = input_vector(a, t_in, v_in, spec.profile_len)
        targets[i] = manufactured_fields(points.coords, a, t_in, v_in, spec)
    ratio = points.n * 3 / q
    meta = {
        "generator": "manufactured",
        "spec": asdict(spec),
        "seed": spec.seed,
        "reconstruction_ratio": ratio,
        "channel_names": list(CHANNEL_NAMES),
    }
    ds = Dataset(
        inputs=inputs,
        targets=targets,
        ids=[f"sample{i:05d}" for i in range(spec.sample_count)],
        meta=meta,
    )
    return ds, points
