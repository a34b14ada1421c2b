"""Soft prompt bank: instruction prefix plus one prompt matrix per attribute.

Checkpoint layout (``.spb``)::

    b"SPBANK\\0\\0"               8-byte magic
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON object
    payload                      float64 little-endian arrays, row-major,
                                 in the order listed by header["arrays"]

Header keys: ``format``, ``version``, ``embed_dim``, ``dtype``,
``attribute_ids``, ``arrays`` (list of ``{"name", "shape"}``) and ``mixer``
(``null`` or the mixer's scalar settings).  Array names are ``prefix``,
``prompt/<attribute id>`` and ``mixer/<parameter>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import BankCorruptError, BankVersionError, PromptInitError, ValidationError
from .fileio import atomic_write_bytes

PROMPT_LENGTH = 20
PREFIX_LENGTH = 100
INSTRUCTION_PHRASE = "Show me three distinct utterances that all express the X"

FORMAT_NAME = "soft-prompt-bank"
FORMAT_VERSION = "1.1"
CHECKPOINT_SUFFIX = ".spb"
MAGIC = b"SPBANK\0\0"

Embedder = Callable[[str], np.ndarray]


def cyclic_fit(matrix: np.ndarray, rows: int) -> np.ndarray:
    """Truncate to ``rows`` rows, or pad by repeating rows from the start."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError(f"need a non-empty (n x d) matrix, got shape {matrix.shape}")
    idx = np.arange(rows) % matrix.shape[0]
    return matrix[idx].copy()


@dataclass
class SoftPrompt:
    attribute_id: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != PROMPT_LENGTH:
            raise ValidationError(
                f"prompt {self.attribute_id!r} must have {PROMPT_LENGTH} rows, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError(f"prompt {self.attribute_id!r} has non-finite entries")


@dataclass
class InstructionPrefix:
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != PREFIX_LENGTH:
            raise ValidationError(f"prefix must have {PREFIX_LENGTH} rows, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValidationError("prefix has non-finite entries")


@dataclass
class SoftPromptBank:
    prefix: InstructionPrefix
    prompts: dict[str, SoftPrompt]
    embed_dim: int
    version: str = FORMAT_VERSION

    def __post_init__(self):
        if self.prefix.matrix.shape[1] != self.embed_dim:
            raise ValidationError("prefix width does not match embed_dim")
        for prompt in self.prompts.values():
            if prompt.matrix.shape[1] != self.embed_dim:
                raise ValidationError(f"prompt {prompt.attribute_id!r} width does not match embed_dim")

    def matrix(self, attribute_id: str) -> np.ndarray:
        return self.prompts[attribute_id].matrix

    def snapshot(self) -> "SoftPromptBank":
        """Deep copy that later in-place updates cannot reach."""
        return SoftPromptBank(
            prefix=InstructionPrefix(self.prefix.matrix.copy()),
            prompts={k: SoftPrompt(k, p.matrix.copy()) for k, p in self.prompts.items()},
            embed_dim=self.embed_dim,
            version=self.version,
        )

    def equals(self, other: "SoftPromptBank") -> bool:
        return (
            self.embed_dim == other.embed_dim
            and self.version == other.version
            and list(self.prompts) == list(other.prompts)
            and np.array_equal(self.prefix.matrix, other.prefix.matrix)
            and all(np.array_equal(p.matrix, other.prompts[k].matrix) for k, p in self.prompts.items())
        )


def initialize_attribute_prompt(spec, embedder: Embedder) -> SoftPrompt:
    text = f"{spec.name} is {spec.description}"
    try:
        emb = np.asarray(embedder(text), dtype=np.float64)
    except Exception as exc:
        raise PromptInitError(spec.id, str(exc)) from exc
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise PromptInitError(spec.id, f"embedder returned shape {emb.shape}")
    return SoftPrompt(spec.id, cyclic_fit(emb, PROMPT_LENGTH))


def initialize_prefix(embedder: Embedder, phrase: str = INSTRUCTION_PHRASE) -> InstructionPrefix:
    # The "X" placeholder is embedded literally.
    emb = np.asarray(embedder(phrase), dtype=np.float64)
    return InstructionPrefix(cyclic_fit(emb, PREFIX_LENGTH))


def initialize_bank(ontology, embedder: Embedder) -> SoftPromptBank:
    """Prefix plus one prompt for every attribute in ``ontology``."""
    prefix = initialize_prefix(embedder)
    prompts = {spec.id: initialize_attribute_prompt(spec, embedder) for spec in ontology}
    return SoftPromptBank(prefix=prefix, prompts=prompts, embed_dim=prefix.matrix.shape[1])


def _parse_version(version: str) -> tuple[int, int]:
    try:
        major, minor = version.split(".")
        return int(major), int(minor)
    except (AttributeError, ValueError) as exc:
        raise BankVersionError(f"unparseable checkpoint version {version!r}") from exc


def save_bank(bank: SoftPromptBank, path, mixer=None, version: str = FORMAT_VERSION) -> None:
    arrays = [("prefix", bank.prefix.matrix)]
    arrays += [(f"prompt/{k}", p.matrix) for k, p in bank.prompts.items()]
    mixer_header = None
    if mixer is not None:
        mixer_header = mixer.settings()
        arrays += [(f"mixer/{name}", arr) for name, arr in mixer.arrays().items()]
    header = {
        "format": FORMAT_NAME,
        "version": version,
        "embed_dim": bank.embed_dim,
        "dtype": "<f8",
        "attribute_ids": list(bank.prompts),
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        "mixer": mixer_header,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in arrays)
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(head)) + head + payload)


def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise BankCorruptError(f"{path}: not a soft prompt bank checkpoint")
    (head_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BankCorruptError(f"{path}: unreadable header") from exc
    if header.get("format") != FORMAT_NAME:
        raise BankCorruptError(f"{path}: unexpected format {header.get('format')!r}")
    file_major, file_minor = _parse_version(header.get("version"))
    cur_major, cur_minor = _parse_version(FORMAT_VERSION)
    if file_major != cur_major or file_minor > cur_minor:
        raise BankVersionError(
            f"{path}: checkpoint version {header['version']} is incompatible with reader {FORMAT_VERSION}")
    offset = start + head_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise BankCorruptError(f"{path}: payload truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise BankCorruptError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return header, arrays


def load_checkpoint(path):
    """Return ``(bank, mixer_params_or_None)`` from a checkpoint file."""
    from .mixing import MixerParams  # mixing imports this module

    header, arrays = _read_checkpoint(path)
    d = header["embed_dim"]
    prefix = arrays.get("prefix")
    if prefix is None or prefix.shape != (PREFIX_LENGTH, d):
        shape = None if prefix is None else prefix.shape
        raise BankCorruptError(f"{path}: prefix shape {shape} != ({PREFIX_LENGTH}, {d})")
    prompts = {}
    for attribute_id in header["attribute_ids"]:
        mat = arrays.get(f"prompt/{attribute_id}")
        if mat is None or mat.shape != (PROMPT_LENGTH, d):
            raise BankCorruptError(f"{path}: prompt {attribute_id!r} has wrong shape")
        prompts[attribute_id] = SoftPrompt(attribute_id, mat)
    bank = SoftPromptBank(InstructionPrefix(prefix), prompts, embed_dim=d, version=header["version"])
    mixer = None
    if header.get("mixer") is not None:
        mixer_arrays = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("mixer/")}
        try:
            mixer = MixerParams.from_parts(header["mixer"], mixer_arrays, embed_dim=d)
        except ValueError as exc:
            raise BankCorruptError(f"{path}: mixer parameters inconsistent: {exc}") from exc
    return bank, mixer


def load_bank(path) -> SoftPromptBank:
    return load_checkpoint(path)[0]
