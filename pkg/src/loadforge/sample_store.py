"""Dataset sources (file-per-sample and container-backed) and seeded sampling."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDataset,
    FormatError,
    IndexOutOfRange,
    LoadForgeError,
    PayloadError,
    TruncatedFile,
    Unsupported,
)
from .record_format import (
    KIND_ENCODED,
    KIND_TENSOR,
    ContainerHandle,
    decode_tensor_body,
    open_container,
)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
IMAGE_EXTENSIONS = (".ppm", ".brt")


# -- SplitMix64 -----------------------------------------------------------------

def splitmix_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns ``(output, new_state)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


class SampleRng:
    """Mutable SplitMix64 stream.  Every draw is one call to ``next_u64``."""

    __slots__ = ("state",)

    def __init__(self, state: int = 0):
        self.state = state & MASK64

    def next_u64(self) -> int:
        out, self.state = splitmix_next(self.state)
        return out

    def next_below(self, bound: int) -> int:
        # plain modulo; the bias is irrelevant for bound << 2**64
        return self.next_u64() % bound

    def next_unit(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def copy(self) -> "SampleRng":
        return SampleRng(self.state)

    def __eq__(self, other):
        return isinstance(other, SampleRng) and other.state == self.state

    def __repr__(self):
        return f"SampleRng(state=0x{self.state:016x})"


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix_block(seed: int, count: int) -> np.ndarray:
    """The first ``count`` SplitMix64 outputs from state ``seed``, vectorized.

    SplitMix64 is counter based: output k only depends on seed + (k+1)*gamma.
    """
    with np.errstate(over="ignore"):
        steps = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        return _mix(np.uint64(seed & MASK64) + steps)


def epoch_seed(global_seed: int, epoch: int) -> int:
    first, _ = splitmix_next(global_seed & MASK64)
    out, _ = splitmix_next(first ^ (epoch & MASK64))
    return out


def permutation(global_seed: int, epoch: int, n: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)`` fully determined by its arguments."""
    if n < 1:
        raise EmptyDataset("cannot shuffle an empty dataset")
    # draw k of the epoch stream picks the partner for position n-1-k
    draws = splitmix_block(epoch_seed(global_seed, epoch), n - 1)
    partners = (draws % np.arange(n, 1, -1, dtype=np.uint64)).tolist()
    order = list(range(n))
    for i, j in zip(range(n - 1, 0, -1), partners):
        order[i], order[j] = order[j], order[i]
    return np.array(order, dtype=np.int64)


def sample_seed(global_seed: int, epoch: int, index: int) -> int:
    out, _ = splitmix_next(epoch_seed(global_seed, epoch) ^ (index & MASK64))
    return out


def sample_seeds(global_seed: int, epoch: int, indices) -> list[int]:
    """:func:`sample_seed` for many indices at once."""
    base = np.uint64(epoch_seed(global_seed, epoch))
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix((base ^ idx) + np.uint64(GOLDEN_GAMMA)).tolist()


# -- PPM ------------------------------------------------------------------------

def _ppm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos]
        if ch == 0x23:  # '#': comment to end of line
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        elif ch in b" \t\r\n\x0b\x0c":
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in b" \t\r\n\x0b\x0c#":
        pos += 1
    if start == pos:
        raise TruncatedFile("PPM header ends early")
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a binary (P6, maxval 255) PPM into an HxWx3 uint8 array."""
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM (magic {bytes(data[:2])!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _ppm_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise Unsupported(f"PPM maxval {maxval} is not supported (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"PPM has empty dimensions {width}x{height}")
    if pos >= len(data):
        raise TruncatedFile("PPM header ends before pixel data")
    pos += 1  # exactly one whitespace byte
    need = width * height * 3
    if len(data) - pos < need:
        raise TruncatedFile(f"PPM pixel data has {len(data) - pos} bytes, needs {need}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise FormatError("PPM encoding needs an HxWx3 uint8 array")
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def decode_image_file(data: bytes, suffix: str) -> np.ndarray:
    if suffix == ".ppm":
        return decode_ppm(data)
    if suffix == ".brt":
        return decode_tensor_body(data)
    raise Unsupported(f"no decoder for {suffix!r} files")


# -- sources --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Sample:
    key: str
    label: int
    image: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.key == other.key
            and self.label == other.label
            and self.image.dtype == other.image.dtype
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
        )


@dataclass(frozen=True)
class ManifestEntry:
    key: str
    path: str
    label: int


class DatasetSource:
    """Read-only random access over a dataset; safe to share between threads."""

    kind = "abstract"

    def __len__(self) -> int:
        raise NotImplementedError

    def fetch(self, index: int) -> Sample:
        raise NotImplementedError

    def key_of(self, index: int) -> str:
        return f"#{index}"

    def _check_index(self, index: int):
        if not 0 <= index < len(self):
            raise IndexOutOfRange(f"sample {index} out of range [0, {len(self)})")

    def close(self):
        pass


class FilePerSampleSource(DatasetSource):
    """One file per sample in a class-per-subdirectory tree."""

    kind = "files"

    def __init__(self, root, manifest: list[ManifestEntry], classes: list[str]):
        self.root = Path(root)
        self.manifest = manifest
        self.classes = classes

    def __len__(self):
        return len(self.manifest)

    def key_of(self, index):
        return self.manifest[index].key

    def fetch(self, index: int) -> Sample:
        self._check_index(index)
        entry = self.manifest[index]
        try:
            with open(entry.path, "rb") as fh:
                data = fh.read()
            image = decode_image_file(data, os.path.splitext(entry.path)[1].lower())
        except (OSError, LoadForgeError) as exc:
            exc.key = entry.key
            raise
        return Sample(entry.key, entry.label, image)

    def __repr__(self):
        return f"FilePerSampleSource({str(self.root)!r}, n={len(self)})"


class ContainerSource(DatasetSource):
    """Samples served from an open record container."""

    kind = "container"

    def __init__(self, handle: ContainerHandle):
        self.handle = handle

    @classmethod
    def from_path(cls, path) -> "ContainerSource":
        return cls(open_container(path))

    def __len__(self):
        return self.handle.record_count

    def fetch(self, index: int) -> Sample:
        # the handle bounds-checks the index
        try:
            key, label, kind, body = self.handle.read_fields(index)
            if kind == KIND_TENSOR:
                # the body lives in a buffer private to this call, so no copy
                image = decode_tensor_body(body, copy=False)
            elif kind == KIND_ENCODED:
                image = decode_ppm(bytes(body))
            else:
                raise PayloadError(f"unknown payload kind {kind}")
        except (OSError, LoadForgeError) as exc:
            exc.key = self.key_of(index)
            raise
        return Sample(key, label, image)

    def close(self):
        self.handle.close()

    def __repr__(self):
        return f"ContainerSource({self.handle.path!r}, n={len(self)})"


def scan_directory(root) -> FilePerSampleSource:
    """Index ``root/<class>/<file>`` into a file-per-sample source.

    Keys are ``"<class>/<stem>"``; labels are the rank of the class directory
    name among all sorted subdirectories.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {str(root)!r} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    manifest = []
    for label, name in enumerate(classes):
        with os.scandir(root / name) as it:
            for entry in it:
                stem, ext = os.path.splitext(entry.name)
                if ext.lower() in IMAGE_EXTENSIONS and entry.is_file():
                    manifest.append(ManifestEntry(f"{name}/{stem}", entry.path, label))
    if not manifest:
        raise EmptyDataset(f"no .ppm or .brt files under {str(root)!r}")
    manifest.sort(key=lambda e: e.key)
    return FilePerSampleSource(root, manifest, classes)


def fetch(source: DatasetSource, index: int) -> Sample:
    return source.fetch(index)
