"""Unpaired corpora, the non-overlapping split, and batch sampling for both
training stages."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import imaging
from .errors import CorpusError, ShapeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MAX_RESAMPLE = 1000


@dataclass(frozen=True)
class UnpairedCorpus:
    lr_paths: tuple[Path, ...]
    hr_paths: tuple[Path, ...]
    scale: int

    def __post_init__(self):
        object.__setattr__(self, "lr_paths", tuple(Path(p) for p in self.lr_paths))
        object.__setattr__(self, "hr_paths", tuple(Path(p) for p in self.hr_paths))
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if not self.hr_paths:
            raise CorpusError("corpus has no HR images")
        shared = {p.resolve() for p in self.lr_paths} & {p.resolve() for p in self.hr_paths}
        if shared:
            raise CorpusError(f"files listed as both LR and HR: {sorted(map(str, shared))}")


@dataclass(frozen=True)
class SplitSpec:
    n_prime: int = 0
    mode: str = "basic"


@dataclass(frozen=True)
class GeneratedPairSet:
    pairs: tuple[tuple[Path, Path], ...]
    provenance: str
    scale: int

    def write_manifest(self, path) -> None:
        lines = [f"# producer={self.provenance} scale={self.scale}"]
        lines += [f"{gen}\t{hr}" for gen, hr in self.pairs]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read_manifest(cls, path) -> "GeneratedPairSet":
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise CorpusError(f"{path}: missing manifest header")
        header = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        base = path.parent
        pairs = []
        for line in lines[1:]:
            if not line.strip():
                continue
            gen, hr = line.split("\t")
            pairs.append((base / gen if not Path(gen).is_absolute() else Path(gen),
                          base / hr if not Path(hr).is_absolute() else Path(hr)))
        if not pairs:
            raise CorpusError(f"{path}: manifest lists no pairs")
        return cls(tuple(pairs), header.get("producer", "unknown"), int(header["scale"]))


def list_images(directory) -> list[Path]:
    """Sorted image files directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CorpusError(f"no images in {directory}")
    return files


def scan_corpus(lr_dir, hr_dir, scale: int) -> UnpairedCorpus:
    """Collect LR and HR image paths, sorted, ignoring any filename pairing."""
    return UnpairedCorpus(tuple(list_images(Path(lr_dir))),
                          tuple(list_images(Path(hr_dir))), scale)


def apply_split(corpus: UnpairedCorpus, split: SplitSpec,
                rng: np.random.Generator) -> UnpairedCorpus:
    """Basic split keeps everything. The non-overlapping split keeps a random
    ``n_prime`` HR indices and gives LR the complementary indices."""
    if split.mode == "basic":
        return corpus
    if split.mode != "non_overlapping":
        raise ValueError(f"unknown split mode {split.mode!r}")
    n = len(corpus.hr_paths)
    if len(corpus.lr_paths) != n:
        raise ValueError("non-overlapping split needs index-aligned LR and HR lists "
                         f"({len(corpus.lr_paths)} LR vs {n} HR)")
    if not 0 < split.n_prime < n:
        raise ValueError(f"n_prime must be in (0, {n}), got {split.n_prime}")
    order = rng.permutation(n)
    hr_idx = np.sort(order[:split.n_prime])
    lr_idx = np.sort(order[split.n_prime:])
    return UnpairedCorpus(tuple(corpus.lr_paths[i] for i in lr_idx),
                          tuple(corpus.hr_paths[i] for i in hr_idx), corpus.scale)


def split_indices(n: int, n_prime: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """The (HR, LR) index sets :func:`apply_split` would keep for ``n`` images."""
    order = rng.permutation(n)
    return np.sort(order[:n_prime]), np.sort(order[n_prime:])


@lru_cache(maxsize=4096)
def _load_cached(path: Path) -> np.ndarray:
    img = imaging.load_image(path)
    img.setflags(write=False)
    return img


def load_cached(path) -> np.ndarray:
    """Load an image once per process; the returned array is read-only."""
    return _load_cached(Path(path))


def _eligible(paths, min_side: int) -> list[Path]:
    ok = [p for p in paths if min(load_cached(p).shape[-2:]) >= min_side]
    if not ok:
        raise CorpusError(f"no image is at least {min_side}px on its shorter side")
    return ok


def _pick(paths, rng: np.random.Generator):
    return paths[int(rng.integers(len(paths)))]


def _sample_crops(paths, size: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    ok = _eligible(paths, size)
    return np.concatenate(
        [imaging.random_crop(load_cached(_pick(ok, rng)), size, rng) for _ in range(batch)])


def stage1_batch(corpus: UnpairedCorpus, batch: int, patch: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(bicubic LR of random HR crops, independent random real-LR crops)."""
    s = corpus.scale
    hr_ok = _eligible(corpus.hr_paths, patch * s)
    syn = []
    for _ in range(batch):
        crop = imaging.random_crop(load_cached(_pick(hr_ok, rng)), patch * s, rng)
        syn.append(imaging.bicubic_resize(crop, 1.0 / s))
    real = _sample_crops(corpus.lr_paths, patch, batch, rng)
    return np.concatenate(syn).astype(np.float32), real.astype(np.float32)


def _pair_images(pair) -> tuple[np.ndarray, np.ndarray]:
    gen_path, hr_path = pair
    return load_cached(gen_path), load_cached(hr_path)


def stage2_batch(pairset: GeneratedPairSet, corpus: UnpairedCorpus | None, batch: int,
                 patch: int, rng: np.random.Generator, need_real_lr: bool = True
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Aligned (generated LR, real HR) crops plus an unpaired real-LR stream.

    Pairs whose LR side is smaller than ``patch`` are skipped. With
    ``need_real_lr`` false no real-LR crops are drawn and the slot is None.
    """
    if not pairset.pairs:
        raise CorpusError("empty generated pair set")
    s = pairset.scale
    ok = [p for p in pairset.pairs if min(load_cached(p[0]).shape[-2:]) >= patch]
    if not ok:
        raise CorpusError(f"no generated LR image is at least {patch}px")
    gens, hrs = [], []
    for _ in range(batch):
        gen, hr = _pair_images(_pick(ok, rng))
        if hr.shape[-2:] != (gen.shape[-2] * s, gen.shape[-1] * s):
            raise ShapeError(f"pair violates the x{s} correspondence: "
                             f"{gen.shape[-2:]} vs {hr.shape[-2:]}")
        hp, lp = imaging.paired_crop(hr, gen, patch, s, rng)
        gens.append(lp)
        hrs.append(hp)
    real = None
    if need_real_lr:
        if corpus is None or not corpus.lr_paths:
            raise CorpusError("a real-LR stream is required but the LR corpus is empty")
        real = _sample_crops(corpus.lr_paths, patch, batch, rng).astype(np.float32)
    return (np.concatenate(gens).astype(np.float32), np.concatenate(hrs).astype(np.float32),
            real)


def worker_rng(base_seed: int, worker_id: int) -> np.random.Generator:
    """Independent generator for a prefetch worker."""
    return np.random.default_rng([base_seed, worker_id])
