"""
Single-file checkpoint archive.

    b"GCOCKPT\\0" | uint32 LE header length | JSON header | float32 LE tensor blocks

The header carries the schema version, archive kind, config, training
metadata, the tensor table (name, shape, byte offset, byte length, sha256)
and a sha256 of the whole payload.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from .denoiser_net import DenoiserCheckpoint, DenoiserConfig, UNetDenoiser
from .errors import (CheckpointError, CheckpointMismatchError, HashMismatchError,
                     SchemaMismatchError)
from .image_utils import write_atomic
from .latent_codec import CodecConfig, CodecMode, ConvAutoencoder, LatentCodec
from .ms_acm import TextEncoderConfig
from .outpaint_stage import (AdapterConfig, OutpaintCheckpoint, OutpaintOptions, build_outpainter,
                             outpaint_layout)
from .pose_stage import pose_layout

logger = logging.getLogger(__name__)

MAGIC = b"GCOCKPT\0"
SCHEMA_VERSION = 1
POSE, OUTPAINT, CODEC = "pose", "outpaint", "codec"
HEADER_KEYS = ("kind", "config", "metadata", "tensors", "payload_sha256")


@dataclass
class CheckpointArchive:
    kind: str
    config: Dict
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    @property
    def step(self) -> int:
        return int(self.metadata.get("step", 0))

    @property
    def seed(self) -> int:
        return int(self.metadata.get("seed", 0))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(archive: CheckpointArchive, path: Union[str, Path]) -> Path:
    """
    Write an archive to a single file.

    Args:
        archive: the archive to store
        path: destination, replaced atomically through a temporary file

    Returns:
        The written path
    """
    table, blocks, offset = [], [], 0
    for name in sorted(archive.tensors):
        arr = archive.tensors[name].detach().cpu().numpy().astype("<f4")
        raw = np.ascontiguousarray(arr).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), "sha256": _sha256(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    header = {
        "schema": archive.schema,
        "kind": archive.kind,
        "step": archive.step,
        "seed": archive.seed,
        "config": archive.config,
        "metadata": archive.metadata,
        "tensors": table,
        "payload_sha256": _sha256(payload),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = write_atomic(path, MAGIC + struct.pack("<I", len(head)) + head + payload)
    logger.info(f"checkpoint saved: {path} ({archive.kind}, {len(table)} tensors, {len(payload)} bytes)")
    return path


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> CheckpointArchive:
    """Read and verify an archive; raises HashMismatchError on any payload corruption."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 4:
        raise CheckpointError(f"{path} is not a gco checkpoint")
    (head_len,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointError(f"corrupt checkpoint header in {path}: not a JSON object")
    if header.get("schema") != SCHEMA_VERSION:
        raise SchemaMismatchError(
            f"checkpoint schema {header.get('schema')} in {path}, this build reads schema {SCHEMA_VERSION}")
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise CheckpointError(f"corrupt checkpoint header in {path}: missing {', '.join(missing)}")
    payload = data[start + head_len:]
    if _sha256(payload) != header["payload_sha256"]:
        raise HashMismatchError(f"hash mismatch: payload of {path} does not match its header")

    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if _sha256(raw) != entry["sha256"]:
            raise HashMismatchError(f"hash mismatch: tensor {entry['name']} in {path}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    archive = CheckpointArchive(header["kind"], header["config"], tensors, header["metadata"], header["schema"])
    if expected_kind is not None and archive.kind != expected_kind:
        raise CheckpointMismatchError(f"{path} holds a '{archive.kind}' checkpoint, expected '{expected_kind}'")
    logger.debug(f"checkpoint loaded: {path} ({archive.kind}, {len(tensors)} tensors)")
    return archive


# ------------------------------------------------------------ conversions

def _prefixed(prefix: str, state: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def _strip(prefix: str, tensors: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}


def _archive_channels(archive: CheckpointArchive) -> int:
    cfg = archive.config.get("denoiser") or archive.config.get("backbone") or {}
    return int(cfg.get("out_channels", 0))


def pose_to_archive(ckpt: DenoiserCheckpoint) -> CheckpointArchive:
    return CheckpointArchive(POSE, {"denoiser": ckpt.config.to_dict()},
                             _prefixed("denoiser", ckpt.model.state_dict()), dict(ckpt.metadata))


def pose_from_archive(archive: CheckpointArchive) -> DenoiserCheckpoint:
    if archive.kind != POSE:
        raise CheckpointMismatchError(f"expected a pose predictor checkpoint, got '{archive.kind}'",
                                      expected_layout=pose_layout(_archive_channels(archive)))
    config = DenoiserConfig.from_dict(archive.config["denoiser"])
    with torch.random.fork_rng(devices=[]):
        model = UNetDenoiser(config)
    model.load_state_dict(_strip("denoiser", archive.tensors))
    return DenoiserCheckpoint(config, model.eval(), dict(archive.metadata))


def outpaint_to_archive(ckpt: OutpaintCheckpoint) -> CheckpointArchive:
    config = {
        "kind": ckpt.kind,
        "backbone": ckpt.backbone_config.to_dict(),
        "text_encoder": ckpt.text_encoder.config.to_dict(),
        "options": ckpt.options.to_dict(),
        "adapter": ckpt.adapter_config.to_dict() if ckpt.adapter_config else None,
        "channel_layout": ckpt.channel_layout,
    }
    tensors = {**_prefixed("model", ckpt.model.state_dict()),
               **_prefixed("text_encoder", ckpt.text_encoder.state_dict())}
    return CheckpointArchive(OUTPAINT, config, tensors, dict(ckpt.metadata))


def outpaint_from_archive(archive: CheckpointArchive) -> OutpaintCheckpoint:
    if archive.kind != OUTPAINT:
        raise CheckpointMismatchError(f"expected an outpainting checkpoint, got '{archive.kind}'",
                                      expected_layout=outpaint_layout(_archive_channels(archive)))
    cfg = archive.config
    adapter = AdapterConfig(**cfg["adapter"]) if cfg.get("adapter") else None
    ckpt = build_outpainter(cfg["kind"], DenoiserConfig.from_dict(cfg["backbone"]),
                            text_config=TextEncoderConfig(**cfg["text_encoder"]), adapter_config=adapter)
    ckpt.model.load_state_dict(_strip("model", archive.tensors))
    ckpt.text_encoder.load_state_dict(_strip("text_encoder", archive.tensors))
    ckpt.model.eval()
    ckpt.text_encoder.eval()
    ckpt.options = OutpaintOptions(**cfg["options"])
    ckpt.metadata = dict(archive.metadata)
    return ckpt


def codec_to_archive(codec: LatentCodec, metadata: Optional[Dict] = None) -> CheckpointArchive:
    config = {"codec": codec.config.to_dict()}
    tensors: Dict[str, torch.Tensor] = {}
    if codec.autoencoder is not None:
        config["width"] = codec.autoencoder.encoder[0].out_channels
        tensors = _prefixed("autoencoder", codec.autoencoder.state_dict())
    return CheckpointArchive(CODEC, config, tensors, dict(metadata or {}))


def codec_from_archive(archive: CheckpointArchive) -> LatentCodec:
    if archive.kind != CODEC:
        raise CheckpointMismatchError(f"expected a codec checkpoint, got '{archive.kind}'")
    config = CodecConfig(**archive.config["codec"])
    if config.mode is not CodecMode.LEARNED_AE:
        return LatentCodec(config)
    with torch.random.fork_rng(devices=[]):
        model = ConvAutoencoder(config.latent_channels, config.downsample_factor, archive.config["width"])
    model.load_state_dict(_strip("autoencoder", archive.tensors))
    return LatentCodec(config, model)


def save_pose_checkpoint(ckpt: DenoiserCheckpoint, path: Union[str, Path]) -> Path:
    return save_checkpoint(pose_to_archive(ckpt), path)


def load_pose_checkpoint(path: Union[str, Path]) -> DenoiserCheckpoint:
    return pose_from_archive(load_checkpoint(path))


def save_outpaint_checkpoint(ckpt: OutpaintCheckpoint, path: Union[str, Path]) -> Path:
    return save_checkpoint(outpaint_to_archive(ckpt), path)


def load_outpaint_checkpoint(path: Union[str, Path]) -> OutpaintCheckpoint:
    return outpaint_from_archive(load_checkpoint(path))


def save_codec(codec: LatentCodec, path: Union[str, Path], metadata: Optional[Dict] = None) -> Path:
    return save_checkpoint(codec_to_archive(codec, metadata), path)


def load_codec(path: Union[str, Path]) -> LatentCodec:
    return codec_from_archive(load_checkpoint(path))
