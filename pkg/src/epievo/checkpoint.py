"""Binary checkpoint container for a whole ecosystem.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"EPIEVOCK"
    8       4     format version (uint32)
    12      8     header length H in bytes (uint64)
    20      8     blob length B in bytes (uint64)
    28      H     UTF-8 JSON header (sorted keys)
    28+H    B     parameter blob, float64 little-endian
    28+H+B  4     CRC-32 of every preceding byte (uint32)

The JSON header echoes the configuration, holds the generation counters, the
species registry, all RNG states and, per network, its bookkeeping fields and
layer structure. Each gene records the element ``offset`` (in float64 units)
of its data inside the blob, stored as six consecutive arrays: weights,
weights' squared-gradient average, weights' squared-update average, then the
same three for the bias.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .ecosystem import Ecosystem, EcosystemConfig
from .errors import CheckpointError
from .genome import Species
from .model import CONV, ConvKernelGene, FCNodeGene, LayerSpec, Network
from .tensor import Parameter

MAGIC = b"EPIEVOCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQQ")
_F8 = np.dtype("<f8")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def to_bytes(eco: Ecosystem) -> bytes:
    chunks: list[np.ndarray] = []
    cursor = 0

    def put(param: Parameter) -> None:
        nonlocal cursor
        for arr in (param.data, param.sq_grad_avg, param.sq_delta_avg):
            chunks.append(np.ascontiguousarray(arr, dtype=_F8).ravel())
            cursor += arr.size

    networks = []
    for net in eco.networks:
        layers = []
        for layer in net.layers:
            genes = []
            for g in layer.genes:
                genes.append({"offset": cursor, "shape": list(g.weights.shape)})
                put(g.weights)
                put(g.bias)
            layers.append({"kind": layer.kind, "stride": list(layer.stride), "genes": genes})
        networks.append(
            {
                "id": net.id,
                "age": net.age,
                "absolute_fitness": net.absolute_fitness,
                "relative_fitness": net.relative_fitness,
                "relative_complexity": net.relative_complexity,
                "is_new_offspring": net.is_new_offspring,
                "species_id": net.species_id,
                "rng": _rng_state(net.rng),
                "layers": layers,
            }
        )
    header = {
        "format": "epievo-checkpoint",
        "config": vars(eco.config),
        "input_shape": list(eco.input_shape),
        "num_classes": eco.num_classes,
        "generation": eco.generation,
        "next_network_id": eco.next_network_id,
        "next_species_id": eco.next_species_id,
        "best_fitness": eco.best_fitness,
        "meta": eco.meta,
        "rng": _rng_state(eco.rng),
        "species": [
            {"id": sp.id, "genome_key": [list(k) for k in sp.genome_key], "members": sp.members,
             "champion": sp.champion}
            for sp in eco.species.values()
        ],
        "networks": networks,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    body = _PREFIX.pack(MAGIC, VERSION, len(head), len(blob)) + head + blob
    return body + struct.pack("<I", zlib.crc32(body))


def save(eco: Ecosystem, path) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(eco))
    os.replace(tmp, path)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Ecosystem:
    if len(raw) < _PREFIX.size + 4:
        raise CheckpointError(f"{source}: truncated ({len(raw)} bytes)")
    magic, version, hlen, blen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    total = _PREFIX.size + hlen + blen + 4
    if len(raw) != total:
        raise CheckpointError(f"{source}: truncated or padded, expected {total} bytes, found {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, total - 4)
    if zlib.crc32(raw[: total - 4]) != crc:
        raise CheckpointError(f"{source}: checksum mismatch")
    try:
        header = json.loads(raw[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
        blob = np.frombuffer(raw, dtype=_F8, count=blen // 8, offset=_PREFIX.size + hlen)
        return _build(header, blob)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CheckpointError(f"{source}: malformed header ({exc})") from exc


def _param(blob: np.ndarray, offset: int, shape) -> tuple[Parameter, int]:
    n = int(np.prod(shape))
    if offset + 3 * n > blob.size:
        raise CheckpointError("parameter blob shorter than the header claims")
    p = Parameter(blob[offset : offset + n].reshape(shape))
    p.sq_grad_avg = blob[offset + n : offset + 2 * n].reshape(shape).copy()
    p.sq_delta_avg = blob[offset + 2 * n : offset + 3 * n].reshape(shape).copy()
    return p, offset + 3 * n


def _build(header: dict, blob: np.ndarray) -> Ecosystem:
    cfg = EcosystemConfig(**header["config"])
    eco = Ecosystem(
        cfg,
        tuple(header["input_shape"]),
        header["num_classes"],
        generation=header["generation"],
        rng=_rng_from(header["rng"]),
        next_network_id=header["next_network_id"],
        next_species_id=header["next_species_id"],
        best_fitness=header["best_fitness"],
        meta=dict(header.get("meta", {})),
    )
    for s in header["species"]:
        key = tuple((k, n) for k, n in s["genome_key"])
        eco.species[s["id"]] = Species(s["id"], key, list(s["members"]), s["champion"])
    for rec in header["networks"]:
        layers = []
        for lay in rec["layers"]:
            genes = []
            for g in lay["genes"]:
                w, off = _param(blob, g["offset"], tuple(g["shape"]))
                b, _ = _param(blob, off, (1,))
                genes.append(ConvKernelGene(w, b) if lay["kind"] == CONV else FCNodeGene(w, b))
            layers.append(LayerSpec(lay["kind"], genes, tuple(lay["stride"])))
        eco.networks.append(
            Network(
                layers,
                eco.input_shape,
                eco.num_classes,
                id=rec["id"],
                age=rec["age"],
                absolute_fitness=rec["absolute_fitness"],
                relative_fitness=rec["relative_fitness"],
                relative_complexity=rec["relative_complexity"],
                is_new_offspring=rec["is_new_offspring"],
                species_id=rec["species_id"],
                rng=_rng_from(rec["rng"]),
            )
        )
    return eco


def load(path) -> Ecosystem:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from exc
    return from_bytes(raw, str(path))
