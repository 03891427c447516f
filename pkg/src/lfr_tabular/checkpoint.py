"""Checkpoint codec, checkpoint storage and run-artifact archiving.

File layout (all integers little-endian):

    b"LFRCKPT1"                 8-byte magic
    header length               8 bytes, unsigned
    header                      canonical JSON (sorted keys, no whitespace)
    blob                        float32 tensors, back to back

The header holds `format_version`, the run metadata, one entry per tensor
(`name`, `shape`, `offset`, `length`, both in bytes into the blob) and
`digest`: SHA-256 over the header without the digest field followed by the
blob. Nothing time-dependent is stored, so identical runs produce identical
files and decode followed by encode reproduces the input bytes.
"""

import abc
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from lfr_tabular.config import ConfigManager, RunConfig, TrainConfig
from lfr_tabular.data import FeatureMeta
from lfr_tabular.diversity import SelectionResult
from lfr_tabular.errors import CheckpointError
from lfr_tabular.nn import EncoderModel, InitSpec, PredictorModel, ProjectorModel
from lfr_tabular.optim import build_optimizer
from lfr_tabular.pipeline import PhaseRecord, TrainState

logger = logging.getLogger(__name__)

MAGIC = b"LFRCKPT1"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """Decoded checkpoint: JSON metadata plus named float32 arrays."""

    meta: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    digest: str = ""

    @property
    def feature_meta(self) -> Optional[FeatureMeta]:
        """Preprocessing metadata stored with the run, if any."""
        data = self.meta.get("feature_meta")
        return FeatureMeta.from_dict(data) if data else None

    def config(self) -> TrainConfig:
        """Rebuild the configuration echoed in the checkpoint."""
        data = self.meta["config"]
        return RunConfig(**data) if "dataset" in data else TrainConfig(**data)

    def arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under `prefix.` with the prefix stripped."""
        cut = len(prefix) + 1
        return {
            k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")
        }


def _canonical(header: Dict[str, Any]) -> bytes:
    try:
        return json.dumps(
            header, sort_keys=True, separators=(",", ":"), allow_nan=False
        ).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise CheckpointError("Checkpoint metadata is not serializable", str(e)) from e


def _digest(header: Dict[str, Any], blob: bytes) -> str:
    h = hashlib.sha256()
    h.update(_canonical({k: v for k, v in header.items() if k != "digest"}))
    h.update(blob)
    return h.hexdigest()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint; sets `checkpoint.digest`."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        raw = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(np.shape(checkpoint.tensors[name])),
                "offset": offset,
                "length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "meta": checkpoint.meta,
        "tensors": entries,
    }
    header["digest"] = checkpoint.digest = _digest(header, blob)
    encoded = _canonical(header)
    return MAGIC + _LENGTH.pack(len(encoded)) + encoded + blob


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse and verify a checkpoint.

    Raises:
        CheckpointError: On a bad magic string, a malformed header, an
            unsupported version, out-of-range tensors or a digest mismatch.
    """
    prefix = len(MAGIC) + _LENGTH.size
    if len(data) < prefix or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file", "missing LFRCKPT1 magic")
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    if prefix + length > len(data):
        raise CheckpointError("Truncated checkpoint header")
    try:
        header = json.loads(data[prefix : prefix + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("Malformed checkpoint header", str(e)) from e
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            "Unsupported checkpoint version",
            str(header.get("format_version") if isinstance(header, dict) else None),
        )
    blob = data[prefix + length :]
    stored = header.get("digest")
    if stored != _digest(header, blob):
        raise CheckpointError(
            "Checkpoint digest mismatch", "file is corrupted or altered"
        )

    tensors = {}
    for entry in header["tensors"]:
        start, size = entry["offset"], entry["length"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if start + size > len(blob) or size != 4 * count:
            raise CheckpointError("Tensor out of range", entry["name"])
        array = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(header["meta"], tensors, stored)


class AbstractCheckpointStore(abc.ABC):
    """Where checkpoints live."""

    @abc.abstractmethod
    def save(self, name: str, checkpoint: Checkpoint) -> Path:
        """Persist a checkpoint under `name` and return its location.

        Raises:
            CheckpointError: If the checkpoint cannot be written.
        """

    @abc.abstractmethod
    def load(self, name: str) -> Checkpoint:
        """Read and verify the checkpoint stored under `name`.

        Raises:
            CheckpointError: If it is missing, unreadable or corrupted.
        """

    @abc.abstractmethod
    def list_checkpoints(self) -> List[str]:
        """Names of the stored checkpoints."""


class FileSystemCheckpointStore(AbstractCheckpointStore):
    """Checkpoints as files in one directory, written atomically."""

    suffix = ".lfr"

    def __init__(self, directory: Path) -> None:
        self._directory = Path(directory)
        self._ensure_directory_exists()

    @property
    def directory(self) -> Path:
        """The checkpoint directory."""
        return self._directory

    def _ensure_directory_exists(self) -> None:
        try:
            self._directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            msg = f"Failed to create checkpoint directory: {self._directory}"
            logger.error("%s - %s", msg, e)
            raise CheckpointError(msg, details=str(e)) from e

    def path_for(self, name: str) -> Path:
        """File path of checkpoint `name`.

        A bare name resolves inside the store directory (with `.lfr` added when
        it has no suffix); anything with a directory part is used as given.
        """
        path = Path(name)
        if path.is_absolute() or len(path.parts) > 1:
            return path
        return self._directory / (name if path.suffix else f"{name}{self.suffix}")

    def save(self, name: str, checkpoint: Checkpoint) -> Path:
        path = self.path_for(name)
        data = encode_checkpoint(checkpoint)
        tmp = path.with_name(path.name + ".tmp")
        try:
            with open(tmp, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            logger.warning(
                "Checkpoint %s was not written; training state exists only in memory",
                path,
            )
            raise CheckpointError("Failed to write checkpoint", f"{path}: {e}") from e
        logger.info(
            "Checkpoint written to %s (digest %s)", path, checkpoint.digest[:12]
        )
        return path

    def load(self, name: str) -> Checkpoint:
        path = self.path_for(name)
        try:
            data = path.read_bytes()
        except FileNotFoundError as e:
            raise CheckpointError("Checkpoint not found", str(path)) from e
        except OSError as e:
            raise CheckpointError("Failed to read checkpoint", f"{path}: {e}") from e
        return decode_checkpoint(data)

    def list_checkpoints(self) -> List[str]:
        return sorted(p.stem for p in self._directory.glob(f"*{self.suffix}"))


def state_to_checkpoint(
    state: TrainState, feature_meta: Optional[FeatureMeta] = None
) -> Checkpoint:
    """Capture every parameter, optimizer buffer and counter of a run."""
    cfg = state.config
    tensors: Dict[str, np.ndarray] = {}
    for name, value in state.encoder.state_arrays().items():
        tensors[f"encoder.{name}"] = value
    projectors = []
    chosen = state.selection.chosen_indices
    for k, (proj, index) in enumerate(zip(state.projectors, chosen)):
        for name, value in proj.state_arrays().items():
            tensors[f"projector.{k}.{name}"] = value
        projectors.append(
            {
                "index": index,
                "seed": proj.init_spec.seed,
                "scheme": proj.init_spec.scheme,
                "dropout_rate": proj.init_spec.dropout_rate,
                "widths": proj.widths,
            }
        )
    for k, head in enumerate(state.predictors):
        for name, value in head.state_arrays().items():
            tensors[f"predictor.{k}.{name}"] = value
    optimizers = {}
    for label, opt in (
        ("encoder", state.encoder_optimizer),
        ("predictor", state.predictor_optimizer),
    ):
        for name, value in opt.state_arrays().items():
            tensors[f"optim.{label}.{name}"] = value
        optimizers[label] = {"kind": opt.kind, "step_count": opt.step_count}

    meta = {
        "config": cfg.model_dump(mode="json"),
        "in_dim": state.encoder.in_dim,
        "encoder_widths": state.encoder.widths,
        "predictor_widths": [head.widths for head in state.predictors],
        "projectors": projectors,
        "selection": state.selection.to_dict(),
        "discarded": list(state.discarded),
        "signature_cosines": None if state.cosines is None else state.cosines.tolist(),
        "optimizers": optimizers,
        "epoch": state.epoch,
        "step": state.step,
        "last_loss": state.last_loss,
        "e_losses": list(state.e_losses),
        "m_losses": list(state.m_losses),
        "eval_history": [list(item) for item in state.eval_history],
        "history": [vars(r).copy() for r in state.history],
        "rng": {"generator": "philox", "seed": cfg.train.seed, "epoch": state.epoch},
        "feature_meta": feature_meta.to_dict() if feature_meta else None,
    }
    return Checkpoint(meta, tensors)


def encoder_from_checkpoint(checkpoint: Checkpoint) -> EncoderModel:
    """Rebuild the trained encoder."""
    model = checkpoint.config().model
    encoder = EncoderModel.build(
        checkpoint.meta["in_dim"],
        model.latent_dim,
        hidden=model.encoder_hidden,
        depth=model.encoder_depth,
    )
    encoder.load_state_arrays(checkpoint.arrays("encoder"))
    return encoder


def state_from_checkpoint(checkpoint: Checkpoint) -> TrainState:
    """Rebuild a `TrainState` that continues exactly where the run stopped."""
    meta = checkpoint.meta
    cfg = checkpoint.config()
    encoder = encoder_from_checkpoint(checkpoint)
    projectors = [
        ProjectorModel.from_arrays(
            entry["widths"],
            checkpoint.arrays(f"projector.{k}"),
            InitSpec(entry["scheme"], entry["dropout_rate"], entry["seed"]),
            index=entry["index"],
        )
        for k, entry in enumerate(meta["projectors"])
    ]
    predictors = []
    for k, widths in enumerate(meta["predictor_widths"]):
        head = PredictorModel.build(
            widths[0], widths[-1], hidden=cfg.model.predictor_hidden, index=k
        )
        head.load_state_arrays(checkpoint.arrays(f"predictor.{k}"))
        predictors.append(head)

    encoder_opt = build_optimizer(cfg.optimizer, encoder.parameters())
    predictor_opt = build_optimizer(
        cfg.optimizer, [p for head in predictors for p in head.parameters()]
    )
    for label, opt in (("encoder", encoder_opt), ("predictor", predictor_opt)):
        opt.load_state_arrays(checkpoint.arrays(f"optim.{label}"))
        opt.step_count = meta["optimizers"][label]["step_count"]

    selection = meta["selection"]
    cosines = meta.get("signature_cosines")
    return TrainState(
        config=cfg,
        encoder=encoder,
        projectors=projectors,
        predictors=predictors,
        encoder_optimizer=encoder_opt,
        predictor_optimizer=predictor_opt,
        selection=SelectionResult(
            chosen_indices=list(selection["chosen_indices"]),
            log_det=(
                float("-inf") if selection["log_det"] is None else selection["log_det"]
            ),
            candidate_count=selection["candidate_count"],
            selection_order=list(selection["selection_order"]),
            singular=selection["singular"],
            strategy=selection["strategy"],
        ),
        discarded=list(meta["discarded"]),
        cosines=None if cosines is None else np.asarray(cosines),
        epoch=meta["epoch"],
        step=meta["step"],
        last_loss=meta["last_loss"],
        e_losses=list(meta["e_losses"]),
        m_losses=list(meta["m_losses"]),
        history=[PhaseRecord(**r) for r in meta["history"]],
        eval_history=[(int(e), float(a)) for e, a in meta["eval_history"]],
    )


class RunArchiver:
    """Writes the artifacts of one run into its output directory.

    Artifacts: checkpoints (through a checkpoint store), the effective
    configuration, the selection report, evaluation reports and the
    preprocessing metadata.
    """

    CONFIG_NAME = "effective_config.json"
    SELECTION_NAME = "selection_report.json"
    FEATURE_META_NAME = "feature_meta.json"
    TRAIN_LOG_NAME = "train_log.tsv"

    def __init__(self, store: AbstractCheckpointStore, directory: Path) -> None:
        self._store = store
        self._directory = Path(directory)

    @property
    def directory(self) -> Path:
        """The run directory."""
        return self._directory

    @property
    def train_log_path(self) -> Path:
        """Where the TSV training log goes."""
        return self._directory / self.TRAIN_LOG_NAME

    def archive_checkpoint(
        self, state: TrainState, name: str, feature_meta: Optional[FeatureMeta] = None
    ) -> Tuple[Checkpoint, Path]:
        """Encode and store the state; returns the checkpoint and its location."""
        checkpoint = state_to_checkpoint(state, feature_meta)
        return checkpoint, self._store.save(name, checkpoint)

    def load_checkpoint(self, name: str) -> Checkpoint:
        """Load a checkpoint through the store."""
        return self._store.load(name)

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        """Write a JSON artifact.

        Raises:
            CheckpointError: If the file cannot be written.
        """
        path = self._directory / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        except OSError as e:
            logger.error("Failed to write %s: %s", path, e)
            raise CheckpointError(f"Failed to write {name}", str(e)) from e
        logger.info("Wrote %s", path)
        return path

    def write_config(
        self, config_manager: ConfigManager, command: str = "pretrain"
    ) -> Path:
        """Write the fully resolved configuration of a command.

        Pretraining owns `effective_config.json`; other commands write
        `effective_config_<command>.json` beside it.
        """
        name = self.CONFIG_NAME
        if command != "pretrain":
            name = f"effective_config_{command}.json"
        return config_manager.save_effective(self._directory / name)

    def write_selection_report(self, state: TrainState) -> Path:
        """Chosen indices, log-determinant and signature cosines."""
        payload = state.selection.to_dict()
        payload["discarded"] = list(state.discarded)
        payload["signature_cosines"] = (
            None if state.cosines is None else state.cosines.tolist()
        )
        return self.write_json(self.SELECTION_NAME, payload)

    def write_feature_meta(self, meta: FeatureMeta) -> Path:
        """Preprocessing metadata next to the checkpoints."""
        return meta.save(self._directory / self.FEATURE_META_NAME)
