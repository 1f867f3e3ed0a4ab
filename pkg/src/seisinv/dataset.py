"""Dataset assembly: simulate, normalize, perturb, split, persist.

A dataset is a directory of SINV tensor files plus a JSON manifest.
Velocity models are stored in m/s; cubes are stored after per-gather
normalization (and optional noise), ready for training.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import containers, geomodel, wavesim

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# reported when the noise realization carries no power
SNR_CAP_DB = 300.0

TYPE_LABELS = {1: "I", 2: "II", 3: "III", 4: "IV", 5: "V"}


@dataclass(frozen=True)
class NormalizationSpec:
    velocity_min: float = geomodel.VEL_MIN
    velocity_max: float = geomodel.VEL_MAX
    seismic_mode: str = "per_gather_max_abs"

    def __post_init__(self):
        if not self.velocity_max > self.velocity_min:
            raise ValueError(
                f"velocity_max {self.velocity_max} must exceed "
                f"velocity_min {self.velocity_min}"
            )


@dataclass(frozen=True)
class AcquisitionProfile:
    """Everything needed to turn a sampled layer spec into a stored pair."""

    name: str
    height: int
    width: int
    n_sources: int
    receiver_count: int
    record_steps: int
    record_dt: float
    dt_internal: float
    peak_frequency: float
    sponge_width: int
    spacing: float = 10.0

    def grid(self) -> wavesim.SimGrid:
        return wavesim.SimGrid(
            nz=self.height, nx=self.width, dx=self.spacing,
            sponge_width=self.sponge_width,
        )

    def geometry(self) -> wavesim.AcquisitionGeometry:
        return wavesim.default_geometry(
            nx=self.width, n_sources=self.n_sources,
            record_dt=self.record_dt, record_steps=self.record_steps,
        )

    def wavelet(self) -> wavesim.Wavelet:
        return wavesim.ricker_wavelet(self.peak_frequency, self.dt_internal)


def paper_profile() -> AcquisitionProfile:
    return AcquisitionProfile(
        name="paper", height=100, width=100, n_sources=20,
        receiver_count=32, record_steps=1000, record_dt=1e-3,
        dt_internal=2.5e-4, peak_frequency=15.0, sponge_width=20,
    )


def toy_profile() -> AcquisitionProfile:
    return AcquisitionProfile(
        name="toy", height=64, width=64, n_sources=8,
        receiver_count=16, record_steps=400, record_dt=2.5e-3,
        dt_internal=5e-4, peak_frequency=25.0, sponge_width=12,
    )


def get_profile(name: str) -> AcquisitionProfile:
    table = {"toy": toy_profile, "paper": paper_profile}
    if name not in table:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(table)}")
    return table[name]()


# ---------------------------------------------------------------------------
# normalization and perturbation


def normalize_velocity(values, spec: NormalizationSpec = None):
    """Affine map of velocities in m/s onto [0, 1]."""
    spec = spec or NormalizationSpec()
    values = np.asarray(values, dtype=np.float64)
    lo, hi = spec.velocity_min, spec.velocity_max
    bad = (values < lo - 1e-6) | (values > hi + 1e-6)
    if bad.any():
        r, c = [int(v) for v in np.argwhere(bad)[0]] if values.ndim == 2 \
            else (0, int(np.flatnonzero(bad.ravel())[0]))
        raise ValueError(
            f"velocity {values.ravel()[np.flatnonzero(bad.ravel())[0]]:.6g} "
            f"at cell ({r}, {c}) outside [{lo}, {hi}]"
        )
    return (values - lo) / (hi - lo)


def denormalize_velocity(grid, spec: NormalizationSpec = None):
    spec = spec or NormalizationSpec()
    grid = np.asarray(grid, dtype=np.float64)
    return grid * (spec.velocity_max - spec.velocity_min) + spec.velocity_min


def normalize_seismic(cube):
    """Scale each gather by its own max-abs amplitude."""
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3:
        raise ValueError(f"expected cube [S, T, R], got shape {cube.shape}")
    if not np.isfinite(cube).all():
        raise ValueError("cube contains non-finite amplitudes")
    peaks = np.abs(cube).max(axis=(1, 2))
    zero = np.flatnonzero(peaks == 0.0)
    if zero.size:
        raise ValueError(f"gather {int(zero[0])} is all-zero")
    return cube / peaks[:, None, None]


def uniform_receiver_indices(total, k):
    if k < 2:
        raise ValueError(f"uniform mode needs k >= 2, got {k}")
    i = np.arange(k)
    return np.rint(i * (total - 1) / (k - 1)).astype(int)


def subsample_receivers(cube, k, mode="uniform", seed=0):
    """Keep k receiver columns; returns (cube [S,T,k], indices)."""
    cube = np.asarray(cube)
    total = cube.shape[2]
    if k > total:
        raise ValueError(f"cannot keep {k} of {total} receivers")
    if mode == "uniform":
        idx = uniform_receiver_indices(total, k)
    elif mode == "random":
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(total, size=k, replace=False))
    else:
        raise ValueError(f"unknown receiver subsampling mode {mode!r}")
    return cube[:, :, idx], idx


def truncate_time(cube, keep):
    cube = np.asarray(cube)
    if keep <= 0:
        raise ValueError(f"keep must be positive, got {keep}")
    if keep > cube.shape[1]:
        raise ValueError(
            f"cannot keep {keep} of {cube.shape[1]} time samples")
    return cube[:, :keep].copy()


def add_gaussian_noise(cube, noise_std, seed=0):
    """Add zero-mean Gaussian noise of fixed std; returns (cube, SNR dB).

    The std is an absolute amplitude in normalized units, shared across
    the whole dataset rather than tuned per sample, so per-sample SNR
    varies around the dataset average.
    """
    cube = np.asarray(cube, dtype=np.float64)
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std == 0.0:
        return cube.copy(), SNR_CAP_DB
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, size=cube.shape)
    p_signal = float(np.mean(cube ** 2))
    p_noise = float(np.mean(noise ** 2))
    if p_noise == 0.0:
        return cube + noise, SNR_CAP_DB
    snr_db = 10.0 * np.log10(p_signal / p_noise)
    return cube + noise, float(min(snr_db, SNR_CAP_DB))


def rms_amplitude(cube):
    return float(np.sqrt(np.mean(np.asarray(cube, dtype=np.float64) ** 2)))


def noise_std_for_snr(rms, target_db):
    """Std that puts noise power target_db below a signal of given RMS."""
    return rms / 10.0 ** (target_db / 20.0)


# ---------------------------------------------------------------------------
# manifest


class ManifestError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    version: int = MANIFEST_VERSION
    profile: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)
    normalization: NormalizationSpec = field(default_factory=NormalizationSpec)
    entries: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)

    def ids(self):
        return [e["id"] for e in self.entries]

    def entry(self, sample_id):
        for e in self.entries:
            if e["id"] == sample_id:
                return e
        raise KeyError(f"no sample {sample_id!r} in manifest")

    def split_ids(self, split):
        if split not in self.splits:
            raise KeyError(
                f"no split {split!r}; assigned splits: {sorted(self.splits)}")
        return list(self.splits[split])

    def _read_checked(self, relpath, expected_sha):
        path = Path(self.root) / relpath
        if not path.exists():
            raise ManifestError(f"missing dataset file {path}")
        actual = containers.sha256_file(path)
        if actual != expected_sha:
            raise ManifestError(
                f"checksum mismatch for {path}: manifest has "
                f"{expected_sha[:12]}.., file has {actual[:12]}.."
            )
        return containers.read_tensor(path)

    def load_model(self, sample_id):
        """Stored velocity grid in m/s, float32 [H, W]."""
        e = self.entry(sample_id)
        return self._read_checked(e["model"], e["model_sha256"])

    def load_cube(self, sample_id):
        """Stored normalized cube, float32 [S, T, R]."""
        e = self.entry(sample_id)
        return self._read_checked(e["cube"], e["cube_sha256"])

    def load_pair(self, sample_id):
        """(cube [S,T,R], velocity grid scaled to [0,1]), both float32."""
        cube = self.load_cube(sample_id)
        model = self.load_model(sample_id)
        truth = normalize_velocity(model, self.normalization)
        return cube, truth.astype(np.float32)

    def layer_spec(self, sample_id) -> geomodel.LayeredModelSpec:
        return geomodel.spec_from_json(self.entry(sample_id)["spec"])

    def verify(self):
        """Non-raising integrity sweep; returns a list of problems."""
        problems = []
        seen = set()
        for e in self.entries:
            if e["id"] in seen:
                problems.append(f"duplicate id {e['id']}")
            seen.add(e["id"])
            for kind in ("model", "cube"):
                path = Path(self.root) / e[kind]
                if not path.exists():
                    problems.append(f"{e['id']}: missing {path}")
                elif containers.sha256_file(path) != e[f"{kind}_sha256"]:
                    problems.append(f"{e['id']}: checksum mismatch on {kind}")
        assigned = [i for ids in self.splits.values() for i in ids]
        if self.splits:
            if len(set(assigned)) != len(assigned):
                problems.append("split sets overlap")
            if set(assigned) != seen:
                problems.append("splits do not cover exactly the sample ids")
        return problems

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "profile": self.profile,
            "geometry": self.geometry,
            "normalization": {
                "velocity_min": self.normalization.velocity_min,
                "velocity_max": self.normalization.velocity_max,
                "seismic_mode": self.normalization.seismic_mode,
            },
            "entries": self.entries,
            "splits": self.splits,
            "skipped": self.skipped,
        }

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / "manifest.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        obj = json.loads(path.read_text())
        if obj.get("version") != MANIFEST_VERSION:
            raise ManifestError(
                f"manifest version {obj.get('version')} unsupported "
                f"(expected {MANIFEST_VERSION})"
            )
        norm = obj.get("normalization", {})
        return cls(
            root=path.parent,
            version=obj["version"],
            profile=obj.get("profile", {}),
            geometry=obj.get("geometry", {}),
            normalization=NormalizationSpec(
                velocity_min=norm.get("velocity_min", geomodel.VEL_MIN),
                velocity_max=norm.get("velocity_max", geomodel.VEL_MAX),
                seismic_mode=norm.get("seismic_mode", "per_gather_max_abs"),
            ),
            entries=obj.get("entries", []),
            splits=obj.get("splits", {}),
            skipped=obj.get("skipped", []),
        )


# ---------------------------------------------------------------------------
# building


def sample_seed(base_seed, interface_count, index):
    """Stable per-sample seed, decorrelated across (type, index)."""
    ss = np.random.SeedSequence(entropy=(int(base_seed),
                                         int(interface_count), int(index)))
    return int(ss.generate_state(1)[0])


def build_sample(layer_spec, profile: AcquisitionProfile,
                 noise_std=0.0, noise_seed=0):
    """Simulate one (model, cube) pair; cube comes back normalized."""
    model = geomodel.rasterize(layer_spec, H=profile.height, W=profile.width)
    violations = geomodel.validate(model)
    if violations:
        raise wavesim.SimulationError(
            f"sampled model violates constraints: {violations[0]}")
    cube = wavesim.simulate_cube(
        model, profile.geometry(), profile.wavelet(), profile.grid())
    cube, indices = subsample_receivers(cube, profile.receiver_count)
    cube = normalize_seismic(cube)
    snr_db = None
    if noise_std:
        cube, snr_db = add_gaussian_noise(cube, noise_std, seed=noise_seed)
    return model, cube.astype(np.float32), indices, snr_db


def build_dataset(out_dir, n_per_type, profile: AcquisitionProfile,
                  base_seed=0, types=(1, 2, 3, 4), fault=False,
                  noise_std=0.0, undulation_bound=3,
                  progress=None) -> DatasetManifest:
    """Write n_per_type samples of each requested type under out_dir.

    Re-running with the same arguments reproduces byte-identical files.
    Simulation failures are skipped and noted in the manifest.
    """
    out_dir = Path(out_dir)
    samples_dir = out_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    geometry = profile.geometry()
    manifest = DatasetManifest(
        root=out_dir,
        profile={
            "name": profile.name, "height": profile.height,
            "width": profile.width, "spacing": profile.spacing,
            "n_sources": profile.n_sources,
            "receiver_count": profile.receiver_count,
            "record_steps": profile.record_steps,
            "record_dt": profile.record_dt,
            "dt_internal": profile.dt_internal,
            "peak_frequency": profile.peak_frequency,
            "sponge_width": profile.sponge_width,
        },
        geometry={
            "source_columns": list(geometry.source_columns),
            "receiver_columns": [
                int(i) for i in
                uniform_receiver_indices(profile.width,
                                         profile.receiver_count)
            ],
            "source_row": geometry.source_row,
            "receiver_row": geometry.receiver_row,
        },
    )

    done = 0
    total = len(types) * n_per_type
    for itype in types:
        label = TYPE_LABELS[itype]
        for index in range(n_per_type):
            seed = sample_seed(base_seed, itype, index)
            sample_id = f"{label}-{index:05d}"
            try:
                layer_spec = geomodel.sample_layer_spec(
                    seed, itype, undulation_bound=undulation_bound,
                    H=profile.height, W=profile.width, fault=fault)
                model, cube, _, snr_db = build_sample(
                    layer_spec, profile,
                    noise_std=noise_std, noise_seed=seed + 1)
            except (wavesim.SimulationError, ValueError) as exc:
                log.warning("skipping %s (seed %d): %s", sample_id, seed, exc)
                manifest.skipped.append(
                    {"id": sample_id, "seed": seed, "reason": str(exc)})
                continue
            sdir = samples_dir / sample_id
            sdir.mkdir(exist_ok=True)
            model_path = sdir / "model.sinv"
            cube_path = sdir / "cube.sinv"
            containers.write_tensor(
                model_path, model.values.astype(np.float32))
            containers.write_tensor(cube_path, cube)
            entry = {
                "id": sample_id,
                "type": label,
                "interface_count": itype,
                "seed": seed,
                "model": str(model_path.relative_to(out_dir)),
                "cube": str(cube_path.relative_to(out_dir)),
                "model_sha256": containers.sha256_file(model_path),
                "cube_sha256": containers.sha256_file(cube_path),
                "spec": geomodel.spec_to_json(layer_spec),
            }
            if snr_db is not None:
                entry["snr_db"] = snr_db
                entry["noise_std"] = noise_std
            manifest.entries.append(entry)
            done += 1
            if progress is not None:
                progress(done, total, sample_id)
    if manifest.skipped:
        log.warning("dataset shortfall: %d of %d samples skipped",
                    len(manifest.skipped), total)
    manifest.save()
    return manifest


def split(manifest: DatasetManifest, seed,
          sizes=(10000, 1000, 1000)) -> DatasetManifest:
    """Assign every sample to train/valid/test with the given sizes."""
    ids = manifest.ids()
    if sum(sizes) > len(ids):
        raise ValueError(
            f"split sizes {tuple(sizes)} need {sum(sizes)} samples, "
            f"manifest has {len(ids)}"
        )
    if sum(sizes) != len(ids):
        raise ValueError(
            f"split sizes {tuple(sizes)} sum to {sum(sizes)} but the "
            f"manifest has {len(ids)} samples; splits must be exhaustive"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_valid, n_test = sizes
    manifest.splits = {
        "train": sorted(shuffled[:n_train]),
        "valid": sorted(shuffled[n_train:n_train + n_valid]),
        "test": sorted(shuffled[n_train + n_valid:]),
    }
    manifest.save()
    return manifest


def build_new_domain_dataset(out_dir, n_per_type,
                             profile: AcquisitionProfile, base_seed=0,
                             noise_std=None, types=(2, 3, 4, 5),
                             undulation_bound=3,
                             progress=None) -> DatasetManifest:
    """Domain-shift counterpart: faulted, busier models under noise.

    noise_std=None derives the dataset-wide std from one clean reference
    sample so the average SNR lands near 0 dB.
    """
    if noise_std is None:
        ref_spec = geomodel.sample_layer_spec(
            sample_seed(base_seed, types[0], 0), types[0],
            undulation_bound=undulation_bound,
            H=profile.height, W=profile.width, fault=True)
        _, ref_cube, _, _ = build_sample(ref_spec, profile)
        noise_std = rms_amplitude(ref_cube)
    return build_dataset(
        out_dir, n_per_type, profile, base_seed=base_seed, types=types,
        fault=True, noise_std=noise_std, undulation_bound=undulation_bound,
        progress=progress)


def default_split_sizes(total):
    """Split sizes for a dataset of the given total.

    The full-scale dataset keeps its canonical 10000/1000/1000; other
    totals hold out ~2/19 of the samples (the CI-scale 380 -> 300/40/40).
    """
    if total == 12000:
        return (10000, 1000, 1000)
    hold = max(1, int(round(total * (40.0 / 380.0))))
    if total - 2 * hold < 1:
        raise ValueError(f"total {total} too small to split three ways")
    return (total - 2 * hold, hold, hold)
