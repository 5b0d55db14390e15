"""Synthetic multi-domain identity data and portable binary tensor files.

Each domain draws per-identity token prototypes from a shared latent space,
then pushes every sample through a domain transform, a per-camera transform,
and additive Gaussian noise. Identity sets are disjoint across domains.
The evaluation split holds fresh identities, photographed under every
camera, so the standard cross-camera retrieval protocol applies.

The file container is little-endian binary: magic ``SAGE``, u32 version,
u32 entry count, then per entry a u16 name length, UTF-8 name, u8 dtype tag
(1 = float64, 2 = UTF-8 JSON), u8 rank, u64 dims, and the raw row-major
payload; the file ends with a u64 FNV-1a checksum of the body.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, FormatError
from .rng import derive_rng

MAGIC = b"SAGE"
VERSION = 1
DTYPE_F64 = 1
DTYPE_JSON = 2
METADATA_KEY = "__metadata__"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MAX_CONDITION = 100.0


# ---------------------------------------------------------------------------
# synthetic domains


@dataclass
class DomainSpec:
    n_identities: int
    samples_per_identity: int
    n_cameras: int
    domain_transform: np.ndarray            # (d_in, d_in)
    domain_bias: np.ndarray                 # (d_in,)
    camera_transforms: list[np.ndarray]
    camera_biases: list[np.ndarray]
    noise_sigma: float
    seed: int
    n_eval_identities: int = 8
    eval_samples_per_camera: int = 2

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be nonnegative")
        if self.n_cameras < 2:
            raise DataError("need at least two cameras for cross-camera evaluation")
        if len(self.camera_transforms) != self.n_cameras or len(self.camera_biases) != self.n_cameras:
            raise DataError("camera transform count does not match n_cameras")
        for mat in [self.domain_transform, *self.camera_transforms]:
            if np.linalg.cond(mat) > _MAX_CONDITION:
                raise DataError(f"transform condition number {np.linalg.cond(mat):.1f} > {_MAX_CONDITION}")


@dataclass
class Sample:
    tokens: np.ndarray  # (content_tokens, d_in)
    identity: int
    camera: int
    domain: int


@dataclass
class SyntheticDataset:
    samples: list[Sample]
    split: str  # train | query | gallery

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DomainData:
    index: int
    spec: DomainSpec
    train: SyntheticDataset
    query: SyntheticDataset
    gallery: SyntheticDataset


def dataset_arrays(ds: SyntheticDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (tokens, identity, camera) arrays for a dataset."""
    tokens = np.stack([s.tokens for s in ds.samples])
    ids = np.array([s.identity for s in ds.samples], dtype=np.int64)
    cams = np.array([s.camera for s in ds.samples], dtype=np.int64)
    return tokens, ids, cams


def _render(proto: np.ndarray, spec: DomainSpec, camera: int, rng: np.random.Generator) -> np.ndarray:
    styled = proto @ spec.domain_transform + spec.domain_bias
    shot = styled @ spec.camera_transforms[camera] + spec.camera_biases[camera]
    if spec.noise_sigma > 0:
        shot = shot + spec.noise_sigma * rng.standard_normal(shot.shape)
    return shot


def generate_domains(
    base_seed: int,
    specs: Sequence[DomainSpec],
    shared_identity_space: int,
    content_tokens: int = 4,
) -> list[DomainData]:
    """Materialize train/query/gallery splits for every domain spec.

    Prototypes are standard normal in the shared latent space; two specs
    with equal seeds and counts draw identical prototypes, which the shift
    diagnostics rely on. Identity ids are globally disjoint across domains.
    """
    domains = []
    for index, spec in enumerate(specs):
        rng = derive_rng(base_seed, "domain", index, spec.seed)
        id_base = index * 10_000

        train_samples = []
        for local in range(spec.n_identities):
            proto = rng.standard_normal((content_tokens, shared_identity_space))
            for s in range(spec.samples_per_identity):
                cam = s % spec.n_cameras
                train_samples.append(
                    Sample(_render(proto, spec, cam, rng), id_base + local, cam, index)
                )

        query_samples = []
        gallery_samples = []
        for local in range(spec.n_eval_identities):
            ident = id_base + spec.n_identities + local
            proto = rng.standard_normal((content_tokens, shared_identity_space))
            query_samples.append(Sample(_render(proto, spec, 0, rng), ident, 0, index))
            for cam in range(spec.n_cameras):
                for _ in range(spec.eval_samples_per_camera):
                    gallery_samples.append(Sample(_render(proto, spec, cam, rng), ident, cam, index))

        domains.append(
            DomainData(
                index=index,
                spec=spec,
                train=SyntheticDataset(train_samples, "train"),
                query=SyntheticDataset(query_samples, "query"),
                gallery=SyntheticDataset(gallery_samples, "gallery"),
            )
        )
    return domains


def pool_datasets(datasets: Sequence[SyntheticDataset]) -> SyntheticDataset:
    """Blend several training sets into one (identities stay globally distinct)."""
    samples: list[Sample] = []
    for ds in datasets:
        samples.extend(ds.samples)
    return SyntheticDataset(samples, "train")


# ---------------------------------------------------------------------------
# domain spec construction


@dataclass
class DomainSpecRequest:
    """JSON-friendly description from which actual transforms are derived."""

    role: str = "source"
    n_identities: int = 12
    samples_per_identity: int = 4
    n_cameras: int = 2
    noise_sigma: float = 0.05
    seed: int = 0
    n_eval_identities: int = 8
    eval_samples_per_camera: int = 2
    shift_delta: float = 0.5
    camera_delta: float = 0.05
    target_camera_blend: float = 0.5

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise DataError(f"unknown domain role {self.role!r}")


def _unit_spectral(rng: np.random.Generator, dim: int) -> np.ndarray:
    g = rng.standard_normal((dim, dim))
    return g / np.linalg.norm(g, 2)


def build_domain_specs(
    master_seed: int, requests: Sequence[DomainSpecRequest], d_in: int
) -> list[DomainSpec]:
    """Derive transforms for each requested domain.

    Sources sit at ``identity + shift_delta * R`` with mild camera jitter.
    A target's domain transform is the mean of the source transforms, and
    each of its cameras blends back toward one source, so source experts
    carry genuinely complementary information about the target.
    """
    sources = [r for r in requests if r.role == "source"]
    if not sources:
        raise DataError("at least one source domain is required")

    source_maps: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for si, req in enumerate(r for r in requests if r.role == "source"):
        rng = derive_rng(master_seed, "domain-transform", req.seed)
        transform = np.eye(d_in) + req.shift_delta * _unit_spectral(rng, d_in)
        bias = 0.1 * rng.standard_normal(d_in)
        source_maps[si] = (transform, bias)

    specs = []
    source_index = 0
    for req in requests:
        if req.role == "source":
            transform, bias = source_maps[source_index]
            rng = derive_rng(master_seed, "camera-transform", req.seed)
            cams = [
                np.eye(d_in) + req.camera_delta * _unit_spectral(rng, d_in)
                for _ in range(req.n_cameras)
            ]
            cam_biases = [0.02 * rng.standard_normal(d_in) for _ in range(req.n_cameras)]
            source_index += 1
        else:
            mean_t = np.mean([t for t, _ in source_maps.values()], axis=0)
            mean_b = np.mean([b for _, b in source_maps.values()], axis=0)
            transform, bias = mean_t, mean_b
            inv = np.linalg.inv(mean_t)
            gamma = req.target_camera_blend
            cams = []
            cam_biases = []
            for cam in range(req.n_cameras):
                src_t, src_b = source_maps[cam % len(source_maps)]
                blend_t = (1.0 - gamma) * mean_t + gamma * src_t
                blend_b = (1.0 - gamma) * mean_b + gamma * src_b
                cam_transform = inv @ blend_t
                cams.append(cam_transform)
                cam_biases.append(blend_b - mean_b @ cam_transform)
        specs.append(
            DomainSpec(
                n_identities=req.n_identities,
                samples_per_identity=req.samples_per_identity,
                n_cameras=req.n_cameras,
                domain_transform=transform,
                domain_bias=bias,
                camera_transforms=cams,
                camera_biases=cam_biases,
                noise_sigma=req.noise_sigma,
                seed=req.seed,
                n_eval_identities=req.n_eval_identities,
                eval_samples_per_camera=req.eval_samples_per_camera,
            )
        )
    return specs


def trend_requests(
    n_sources: int = 3,
    *,
    n_identities: int = 12,
    target_identities: int = 16,
    samples_per_identity: int = 4,
    noise_sigma: float = 0.05,
) -> list[DomainSpecRequest]:
    """The default 3-sources-plus-target layout used by the trend experiments."""
    reqs = [
        DomainSpecRequest(
            role="source",
            n_identities=n_identities,
            samples_per_identity=samples_per_identity,
            noise_sigma=noise_sigma,
            seed=i,
        )
        for i in range(n_sources)
    ]
    reqs.append(
        DomainSpecRequest(
            role="target",
            n_identities=target_identities,
            samples_per_identity=samples_per_identity,
            n_cameras=max(2, n_sources),
            noise_sigma=noise_sigma,
            seed=n_sources,
        )
    )
    return reqs


# ---------------------------------------------------------------------------
# binary container


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def write_checkpoint(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    metadata: dict | None = None,
) -> None:
    """Write named float64 tensors (+ JSON metadata) to the binary container."""
    entries: list[tuple[str, int, bytes, tuple[int, ...]]] = []
    for name in tensors:
        if name == METADATA_KEY:
            raise DataError(f"tensor name {METADATA_KEY!r} is reserved")
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        entries.append((name, DTYPE_F64, arr.astype("<f8").tobytes(), arr.shape))
    if metadata is not None:
        blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
        entries.append((METADATA_KEY, DTYPE_JSON, blob, (len(blob),)))
    entries.sort(key=lambda e: e[0])

    body = bytearray()
    for name, dtype, payload, shape in entries:
        name_bytes = name.encode("utf-8")
        body += struct.pack("<H", len(name_bytes))
        body += name_bytes
        body += struct.pack("<BB", dtype, len(shape))
        for dim in shape:
            body += struct.pack("<Q", dim)
        body += payload

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(entries))
    out += body
    out += struct.pack("<Q", fnv1a_64(bytes(body)))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", self.offset)
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`write_checkpoint`."""
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    n_entries = reader.u32("entry count")
    body_start = reader.offset

    tensors: dict[str, np.ndarray] = {}
    metadata: dict = {}
    for _ in range(n_entries):
        name_len = reader.u16("name length")
        name_offset = reader.offset
        name = reader.take(name_len, "name").decode("utf-8")
        dtype = reader.u8("dtype tag")
        rank = reader.u8("rank")
        shape = tuple(reader.u64("dimension") for _ in range(rank))
        if dtype == DTYPE_F64:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = reader.take(8 * count, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}", name_offset)
            tensors[name] = arr
        elif dtype == DTYPE_JSON:
            nbytes = shape[0] if shape else 0
            payload = reader.take(nbytes, "metadata blob")
            metadata = json.loads(payload.decode("utf-8"))
        else:
            raise FormatError(f"unknown dtype tag {dtype}", reader.offset - 2)

    body_end = reader.offset
    stored = reader.u64("checksum")
    actual = fnv1a_64(blob[body_start:body_end])
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:#x}, computed {actual:#x}", body_end)
    if reader.offset != len(blob):
        raise FormatError("trailing bytes after checksum", reader.offset)
    return tensors, metadata


def write_features(
    path: str | Path, features: np.ndarray, ids: np.ndarray, cams: np.ndarray
) -> None:
    features = np.asarray(features, dtype=np.float64)
    ids = np.asarray(ids)
    cams = np.asarray(cams)
    if features.ndim != 2 or ids.shape != (features.shape[0],) or cams.shape != (features.shape[0],):
        raise DataError(
            f"features {features.shape}, ids {ids.shape}, cams {cams.shape} do not line up"
        )
    write_checkpoint(
        path,
        {"features": features, "ids": ids.astype(np.float64), "cams": cams.astype(np.float64)},
        metadata={"rows": int(features.shape[0]), "dim": int(features.shape[1])},
    )


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tensors, metadata = read_checkpoint(path)
    features = tensors["features"]
    ids = tensors["ids"].astype(np.int64)
    cams = tensors["cams"].astype(np.int64)
    rows = metadata.get("rows")
    if rows != features.shape[0] or ids.shape[0] != rows or cams.shape[0] != rows:
        raise FormatError(
            f"header declares {rows} rows but arrays hold {features.shape[0]}", 0
        )
    return features, ids, cams


# ---------------------------------------------------------------------------
# digests and manifests


def arrays_digest(arrays: Mapping[str, np.ndarray]) -> str:
    """Order-independent content hash used by the freeze contracts."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.shape).encode("utf-8"))
        digest.update(arr.tobytes())
    return digest.hexdigest()


def manifest_for(domains: Sequence[DomainData]) -> dict:
    entries = []
    for dom in domains:
        splits = {}
        all_ids: set[int] = set()
        images = 0
        for name, ds in (("train", dom.train), ("query", dom.query), ("gallery", dom.gallery)):
            ids = {s.identity for s in ds.samples}
            splits[name] = {"images": len(ds.samples), "identities": len(ids)}
            all_ids |= ids
            images += len(ds.samples)
        entries.append(
            {
                "domain": dom.index,
                "cameras": dom.spec.n_cameras,
                "images": images,
                "identities": len(all_ids),
                **splits,
            }
        )
    return {"domains": entries}


def write_manifest(path: str | Path, domains: Sequence[DomainData]) -> None:
    Path(path).write_text(json.dumps(manifest_for(domains), indent=2, sort_keys=True) + "\n")
