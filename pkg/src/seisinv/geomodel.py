"""Layered velocity-model synthesis.

Models are stacks of 2 to 5 constant-velocity layers separated by gently
undulating interfaces. Construction rules:

  * layer velocities increase with depth, each in [1500, 4000] m/s, and
    adjacent layers differ by at least 300 m/s;
  * interfaces stay out of the top ten grid rows and keep a minimum
    vertical separation of 6 rows;
  * per-column interface depths wander around a base depth by a smoothed
    random walk clipped to +/- undulation_bound rows.

An optional fault shifts every interface vertically right of a random
column; 5-layer and faulted models only appear in the domain-shift set.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

VEL_MIN = 1500.0
VEL_MAX = 4000.0
MIN_VEL_GAP = 300.0
MIN_TOP_DEPTH = 10      # interfaces keep out of rows 0..9
MIN_SEPARATION = 6      # rows between adjacent interfaces
BASE_DEPTH_LO = 12
BASE_DEPTH_MARGIN = 8   # deepest base depth is H - this


@dataclass
class LayeredModelSpec:
    """Generator parameters for one layered model."""
    interface_count: int
    layer_velocities: list
    base_depths: list
    undulations: np.ndarray   # [interface_count, W] integer row offsets
    seed: int
    fault_column: Optional[int] = None
    fault_offset: int = 0

    def interface_depths(self) -> np.ndarray:
        """Per-column absolute depth of each interface, shape [k, W]."""
        base = np.asarray(self.base_depths, dtype=int)[:, None]
        return base + np.asarray(self.undulations, dtype=int)


@dataclass
class VelocityModel:
    values: np.ndarray        # [H, W] m/s
    spacing: float = 10.0
    spec: Optional[LayeredModelSpec] = None


@dataclass
class StatsReport:
    depth_mean: np.ndarray        # [H] mean velocity per row
    depth_std: np.ndarray         # [H]
    histogram: np.ndarray         # fraction of cells per velocity bin
    bin_edges: np.ndarray
    interface_count_map: np.ndarray   # [H, W] mean interface count per model
    n_models: int = 0


def _smoothed_walk(rng, width, bound):
    """Random walk, mean-removed, box-smoothed, scaled into [-bound, bound]."""
    if bound == 0:
        return np.zeros(width, dtype=int)
    walk = np.cumsum(rng.integers(-1, 2, size=width)).astype(float)
    walk -= walk.mean()
    smooth = np.convolve(walk, np.ones(9) / 9.0, mode="same")
    peak = np.max(np.abs(smooth))
    if peak > bound:
        smooth *= bound / peak
    return np.clip(np.rint(smooth).astype(int), -bound, bound)


def sample_layer_spec(seed, interface_count, undulation_bound=3,
                      H=100, W=100, fault=False) -> LayeredModelSpec:
    """Draw a valid LayeredModelSpec; pure function of its arguments.

    interface_count 1..4 covers the standard model types I-IV; 5 is
    admitted only for the domain-shift recipe.
    """
    if not 1 <= interface_count <= 5:
        raise ValueError(f"interface_count {interface_count} outside 1..5")
    if undulation_bound < 0:
        raise ValueError("undulation_bound must be >= 0")
    k = interface_count
    lo, hi = BASE_DEPTH_LO, H - BASE_DEPTH_MARGIN
    if lo + (k - 1) * MIN_SEPARATION > hi:
        raise ValueError(
            f"cannot place {k} interfaces with separation {MIN_SEPARATION} "
            f"in rows [{lo}, {hi}] of an H={H} grid"
        )

    rng = np.random.default_rng([interface_count, seed & (2 ** 63 - 1)])

    for _ in range(10000):
        vels = np.sort(rng.uniform(VEL_MIN, VEL_MAX, size=k + 1))
        if np.all(np.diff(vels) >= MIN_VEL_GAP):
            break
    else:
        raise ValueError(
            f"could not draw {k + 1} velocities with {MIN_VEL_GAP} m/s gaps "
            f"inside [{VEL_MIN}, {VEL_MAX}]"
        )

    for _ in range(10000):
        base = np.sort(rng.integers(lo, hi + 1, size=k))
        if k == 1 or np.all(np.diff(base) >= MIN_SEPARATION):
            break
    else:
        raise ValueError("could not place interface base depths")

    depths = base[:, None] + np.stack(
        [_smoothed_walk(rng, W, undulation_bound) for _ in range(k)]
    )

    fault_column = None
    fault_offset = 0
    if fault:
        fault_column = int(rng.integers(W // 4, 3 * W // 4))
        fault_offset = int(rng.choice([-1, 1]) * rng.integers(2, 6))
        depths[:, fault_column:] += fault_offset

    # Re-impose hard bounds after undulation and faulting, keeping strict
    # top-to-bottom ordering so interfaces can never touch.
    for j in range(k - 1, -1, -1):
        depths[j] = np.minimum(depths[j], H - 2 - (k - 1 - j))
    depths[0] = np.maximum(depths[0], MIN_TOP_DEPTH)
    for j in range(1, k):
        depths[j] = np.maximum(depths[j], depths[j - 1] + 1)

    return LayeredModelSpec(
        interface_count=k,
        layer_velocities=[float(v) for v in vels],
        base_depths=[int(b) for b in base],
        undulations=depths - base[:, None],
        seed=int(seed),
        fault_column=fault_column,
        fault_offset=fault_offset,
    )


def layer_index_map(spec: LayeredModelSpec, H, W) -> np.ndarray:
    """Integer layer id per cell, 0 at the surface."""
    depths = spec.interface_depths()
    if depths.shape[1] != W:
        raise ValueError(
            f"spec undulations cover {depths.shape[1]} columns, grid has {W}"
        )
    if np.any(depths >= H) or np.any(depths < 1):
        raise ValueError("interface depths fall outside the grid")
    rows = np.arange(H)[:, None]
    return (rows >= depths[:, None, :]).sum(axis=0)


def rasterize(spec: LayeredModelSpec, H=100, W=100) -> VelocityModel:
    """Fill each layer with its constant velocity on an H x W grid."""
    idx = layer_index_map(spec, H, W)
    vels = np.asarray(spec.layer_velocities, dtype=np.float64)
    if len(vels) != spec.interface_count + 1:
        raise ValueError("layer_velocities length does not match interfaces")
    return VelocityModel(values=vels[idx], spec=spec)


def validate(model: VelocityModel) -> list:
    """Check recipe invariants; returns a list of violation strings."""
    v = np.asarray(model.values, dtype=np.float64)
    violations = []
    tol = 1e-6
    if np.any(v < VEL_MIN - tol) or np.any(v > VEL_MAX + tol):
        r, c = np.unravel_index(
            np.argmax(np.abs(v - np.clip(v, VEL_MIN, VEL_MAX))), v.shape
        )
        violations.append(
            f"velocity {v[r, c]:.1f} outside [{VEL_MIN:.0f}, {VEL_MAX:.0f}] "
            f"at cell ({r}, {c})"
        )
    dv = np.diff(v, axis=0)   # dv[r] = v[r+1] - v[r]
    neg = np.argwhere(dv < -tol)
    for r, c in neg[:8]:
        violations.append(
            f"column {c} decreases by {-dv[r, c]:.1f} m/s at row {r + 1}"
        )
    small = np.argwhere((dv > tol) & (dv < MIN_VEL_GAP - tol))
    for r, c in small[:8]:
        violations.append(
            f"velocity gap {dv[r, c]:.1f} < {MIN_VEL_GAP:.0f} m/s "
            f"at column {c}, rows {r}/{r + 1}"
        )
    # An interface at depth d flips dv[d-1]; depths below 10 mean a flip
    # in rows 0..8 of dv.
    shallow = np.argwhere(np.abs(dv[:MIN_TOP_DEPTH - 1]) > tol)
    for r, c in shallow[:8]:
        violations.append(
            f"interface at depth {r + 1} < {MIN_TOP_DEPTH} in column {c}"
        )
    return violations


def recover_interface_depths(model: VelocityModel) -> np.ndarray:
    """Per-column rows where a new layer starts, from values alone."""
    dv = np.diff(np.asarray(model.values), axis=0)
    H1, W = dv.shape
    depths = [np.flatnonzero(np.abs(dv[:, c]) > 1e-9) + 1 for c in range(W)]
    counts = {len(d) for d in depths}
    if len(counts) != 1:
        raise ValueError(f"inconsistent interface counts per column: {counts}")
    return np.stack(depths, axis=1)


def dataset_statistics(models) -> StatsReport:
    """Aggregate velocity and interface-position statistics."""
    models = list(models)
    if not models:
        raise ValueError("dataset_statistics needs at least one model")
    stack = np.stack([np.asarray(m.values, dtype=np.float64) for m in models])
    n, H, W = stack.shape
    per_row = stack.transpose(1, 0, 2).reshape(H, n * W)
    hist, edges = np.histogram(stack, bins=50, range=(VEL_MIN, VEL_MAX))
    count_map = np.zeros((H, W), dtype=np.float64)
    dv = np.abs(np.diff(stack, axis=1)) > 1e-9
    count_map[1:] = dv.sum(axis=0)   # new layer starts at row r, mark row r
    # Normalise by model count so the report depends on the collection's
    # distribution, not its multiplicity.
    return StatsReport(
        depth_mean=per_row.mean(axis=1),
        depth_std=per_row.std(axis=1),
        histogram=hist.astype(np.float64) / stack.size,
        bin_edges=edges,
        interface_count_map=count_map / n,
        n_models=n,
    )


def spec_to_json(spec: LayeredModelSpec) -> dict:
    return {
        "interface_count": spec.interface_count,
        "layer_velocities": [float(v) for v in spec.layer_velocities],
        "base_depths": [int(b) for b in spec.base_depths],
        "undulations": np.asarray(spec.undulations, dtype=int).tolist(),
        "seed": int(spec.seed),
        "fault_column": spec.fault_column,
        "fault_offset": int(spec.fault_offset),
    }


def spec_from_json(obj: dict) -> LayeredModelSpec:
    return LayeredModelSpec(
        interface_count=int(obj["interface_count"]),
        layer_velocities=[float(v) for v in obj["layer_velocities"]],
        base_depths=[int(b) for b in obj["base_depths"]],
        undulations=np.asarray(obj["undulations"], dtype=int),
        seed=int(obj["seed"]),
        fault_column=obj.get("fault_column"),
        fault_offset=int(obj.get("fault_offset", 0)),
    )
