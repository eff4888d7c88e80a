"""Procedural glyph segmentation data and federated client splits.

Each image holds three glyphs side by side, one per horizontal cell.
Glyph classes 1-4 are a filled disk, a cross, a triangle outline and a
ring; class 0 is background. A domain is an intensity transform applied
after rendering: domain 0 leaves the image as drawn, domain 1 inverts
grey levels. Masks never depend on the domain.
"""
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .rng import stream

NUM_CLASSES = 5
GLYPH_CLASSES = (1, 2, 3, 4)
SCHEMES = ("iid", "full_noniid", "dirichlet")

# Shape sizes at scale 1 for a 32 px cell, chosen so every glyph covers
# about 180 px^2: balanced per-class pixel frequencies.
_DISK_R = 7.57
_RING_R, _RING_T = 9.16, 4.0
_CROSS_A, _CROSS_B = 9.0, 3.0
_TRI_RHO, _TRI_T = 6.33, 4.0

DOMAIN_TRANSFORMS = {
    "identity": lambda img: img,
    "invert": lambda img: 1.0 - img,
    "gamma": lambda img: np.sqrt(img),
    "dim": lambda img: 0.5 * img,
}


@dataclass
class DataConfig:
    train_size: int = 800
    val_size: int = 200
    test_size: int = 400
    seed: int = 0
    height: int = 64
    width: int = 96
    noise: float = 0.0
    domains: tuple = ("identity", "invert")
    paired: bool = False

    def __post_init__(self):
        self.domains = tuple(self.domains)
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.width % 3 or self.height < self.width // 3:
            raise ConfigurationError("width must split into three square cells that fit the height")
        if self.height % 2 or self.width % 2:
            raise ConfigurationError("height and width must be even")
        unknown = [d for d in self.domains if d not in DOMAIN_TRANSFORMS]
        if unknown:
            raise ConfigurationError(f"unknown domain transform(s) {unknown}")
        if len(self.domains) < 1:
            raise ConfigurationError("need at least one domain")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")


@dataclass
class Sample:
    id: int
    image: np.ndarray
    mask: np.ndarray
    domain: int
    split: str = "train"


@dataclass
class SampleSet:
    """A split stored as stacked arrays; ``ids`` are global sample ids."""

    ids: np.ndarray
    images: np.ndarray
    masks: np.ndarray
    domains: np.ndarray
    split: str = "train"
    _pos: dict = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.ids)

    def position(self, sample_ids):
        if self._pos is None:
            self._pos = {int(s): i for i, s in enumerate(self.ids)}
        return np.array([self._pos[int(s)] for s in np.atleast_1d(sample_ids)], dtype=np.intp)

    def subset(self, sample_ids):
        pos = self.position(sample_ids)
        return SampleSet(self.ids[pos], self.images[pos], self.masks[pos], self.domains[pos],
                         self.split)

    def sample(self, i):
        return Sample(int(self.ids[i]), self.images[i], self.masks[i], int(self.domains[i]),
                      self.split)

    def __iter__(self):
        for i in range(len(self)):
            yield self.sample(i)

    def content_hash(self):
        h = hashlib.sha256()
        for arr in (self.ids.astype("<i8"), self.domains.astype("<i8"),
                    self.images.astype("<f8"), self.masks.astype("u1")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class Dataset:
    config: DataConfig
    train: SampleSet
    val: SampleSet
    test: SampleSet

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    def content_hash(self):
        h = hashlib.sha256()
        for name, s in self.splits().items():
            h.update(name.encode())
            h.update(s.content_hash().encode())
        return h.hexdigest()


# ---------------------------------------------------------------- glyphs

def _glyph_mask(cls, yy, xx, cy, cx, s):
    dy, dx = yy - cy, xx - cx
    if cls == 1:
        return dy * dy + dx * dx <= (_DISK_R * s) ** 2
    if cls == 2:
        a, b = _CROSS_A * s, _CROSS_B * s
        return ((np.abs(dx) <= a) & (np.abs(dy) <= b)) | ((np.abs(dy) <= a) & (np.abs(dx) <= b))
    if cls == 3:
        # upward triangle: edge normals at -90, 30 and 150 degrees
        proj = [dy, dx * math.cos(math.radians(30)) - dy * 0.5,
                -dx * math.cos(math.radians(30)) - dy * 0.5]
        outer = _TRI_RHO * s
        inner = (_TRI_RHO - _TRI_T) * s
        inside_outer = np.logical_and.reduce([p <= outer for p in proj])
        inside_inner = np.logical_and.reduce([p <= inner for p in proj])
        return inside_outer & ~inside_inner
    if cls == 4:
        r2 = dy * dy + dx * dx
        return (r2 <= (_RING_R * s) ** 2) & (r2 > ((_RING_R - _RING_T) * s) ** 2)
    raise ValueError(f"no glyph for class {cls}")


def render(classes, rng, height=64, width=96, noise=0.0, scales=None):
    """Draw a clear-domain image and its mask for three glyph classes.

    ``scales`` (three values in [0.7, 1]) overrides the random glyph scale.
    """
    cell = width // 3
    unit = cell / 32.0
    mask = np.zeros((height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:cell] + 0.5
    for k, cls in enumerate(classes):
        top = rng.uniform(0, height - cell)
        jy, jx = rng.uniform(-4, 4, size=2) * unit
        scale = rng.uniform(0.7, 1.0) if scales is None else scales[k]
        scale *= unit
        m = _glyph_mask(int(cls), yy, xx, top + cell / 2 + jy, cell / 2 + jx, scale)
        region = mask[:, k * cell:(k + 1) * cell]
        region[m] = cls
    fg = rng.uniform(0.7, 1.0, size=mask.shape)
    bg = rng.uniform(0.0, 0.1, size=mask.shape)
    image = np.where(mask > 0, fg, bg)
    if noise > 0:
        image = np.clip(image + rng.normal(0.0, noise, size=image.shape), 0.0, 1.0)
    return image, mask


def apply_domain(image, domain, transforms=("identity", "invert")):
    return DOMAIN_TRANSFORMS[transforms[domain]](image)


def generate_sample(rng, domain, classes=None, sample_id=0, config=None):
    """One sample of the given domain.

    Geometry and intensities are drawn from ``rng`` before the domain
    transform, so two calls from identical generator states differ only by
    that transform.
    """
    config = config or DataConfig()
    if not 0 <= domain < len(config.domains):
        raise ConfigurationError(f"domain must be in [0, {len(config.domains)})")
    if classes is None:
        classes = rng.choice(GLYPH_CLASSES, size=3)
    image, mask = render(classes, rng, config.height, config.width, config.noise)
    return Sample(int(sample_id), apply_domain(image, domain, config.domains), mask, int(domain))


def _balanced_triples(n, rng):
    slots = 3 * n
    base = np.repeat(np.array(GLYPH_CLASSES), slots // len(GLYPH_CLASSES))
    extra = rng.choice(GLYPH_CLASSES, size=slots - base.size, replace=False)
    return rng.permutation(np.concatenate([base, extra])).reshape(n, 3)


def _stratified_scales(triples, rng):
    """Per class, spread glyph scales evenly over [0.7, 1] so pixel areas balance."""
    scales = np.empty(triples.shape)
    for cls in GLYPH_CLASSES:
        where = np.flatnonzero(triples.ravel() == cls)
        n = where.size
        strata = (np.arange(n) + rng.uniform(size=n)) / max(n, 1)
        scales.ravel()[where] = 0.7 + 0.3 * rng.permutation(strata)
    return scales


def _generate_split(config, name, size, first_id):
    rng = stream(config.seed, "data", ("train", "val", "test").index(name))
    n_dom = len(config.domains)
    triples = _balanced_triples(size, rng)
    scales = _stratified_scales(triples, rng)
    domains = np.arange(size) % n_dom
    domains = rng.permutation(domains)
    images = np.empty((size, config.height, config.width))
    masks = np.empty((size, config.height, config.width), dtype=np.uint8)
    if config.paired:
        # consecutive samples share a geometry draw and differ only by domain
        domains = np.arange(size) % n_dom
        for i in range(0, size, n_dom):
            clear, mask = render(triples[i], rng, config.height, config.width, config.noise,
                                 scales[i])
            for d in range(min(n_dom, size - i)):
                images[i + d] = apply_domain(clear, d, config.domains)
                masks[i + d] = mask
    else:
        for i in range(size):
            clear, mask = render(triples[i], rng, config.height, config.width, config.noise,
                                 scales[i])
            images[i] = apply_domain(clear, domains[i], config.domains)
            masks[i] = mask
    ids = np.arange(first_id, first_id + size, dtype=np.int64)
    return SampleSet(ids, images, masks, domains.astype(np.int64), name)


def generate_dataset(config=None):
    config = config or DataConfig()
    train = _generate_split(config, "train", config.train_size, 0)
    val = _generate_split(config, "val", config.val_size, config.train_size)
    test = _generate_split(config, "test", config.test_size, config.train_size + config.val_size)
    return Dataset(config, train, val, test)


# ---------------------------------------------------------------- splits

@dataclass
class FederatedSplit:
    scheme: str
    clients: list  # client index -> array of sample ids
    domain_counts: np.ndarray  # (K, n_domains)

    @property
    def num_clients(self):
        return len(self.clients)

    def sizes(self):
        return np.array([len(c) for c in self.clients])

    def to_json(self):
        return {"scheme": self.scheme, "K": self.num_clients,
                "clients": {str(k): [int(s) for s in ids] for k, ids in enumerate(self.clients)},
                "domain_counts": self.domain_counts.tolist()}

    @classmethod
    def from_json(cls, obj):
        K = int(obj["K"])
        clients = [np.array(obj["clients"][str(k)], dtype=np.int64) for k in range(K)]
        return cls(obj["scheme"], clients, np.array(obj["domain_counts"], dtype=np.int64))


def _largest_remainder(total, proportions):
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _allocate(ids_by_domain, counts):
    """Deal shuffled per-domain id lists out to clients by count matrix ``(K, D)``."""
    K = counts.shape[0]
    clients = [[] for _ in range(K)]
    for d, ids in enumerate(ids_by_domain):
        start = 0
        for k in range(K):
            clients[k].extend(ids[start:start + counts[k, d]])
            start += counts[k, d]
    return [np.sort(np.array(c, dtype=np.int64)) for c in clients]


def partition_set(samples, scheme, K=10, seed=0, dirichlet_alpha=0.25, label="train"):
    """Split ``samples`` (a :class:`SampleSet`) into ``K`` client shards."""
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown split scheme {scheme!r}")
    N = len(samples)
    if K < 1 or K > N // 2:
        raise ConfigurationError(f"K={K} clients needs K <= N/2 = {N // 2}")
    rng = stream(seed, "partition:" + label, SCHEMES.index(scheme), K)
    n_dom = int(samples.domains.max()) + 1
    ids_by_domain = [rng.permutation(samples.ids[samples.domains == d]) for d in range(n_dom)]
    sizes = [len(x) for x in ids_by_domain]
    counts = np.zeros((K, n_dom), dtype=np.int64)
    if scheme == "iid":
        for d in range(n_dom):
            counts[:, d] = _largest_remainder(sizes[d], np.full(K, 1.0 / K))
        # rotate remainders so no client collects all of them
        for d in range(n_dom):
            counts[:, d] = np.roll(counts[:, d], d)
    elif scheme == "full_noniid":
        if K % n_dom:
            raise ConfigurationError(f"full_noniid needs K divisible by {n_dom} domains; got {K}")
        per = K // n_dom
        for d in range(n_dom):
            counts[d * per:(d + 1) * per, d] = _largest_remainder(sizes[d], np.full(per, 1.0 / per))
    else:
        for d in range(n_dom):
            props = rng.dirichlet(np.full(K, dirichlet_alpha))
            counts[:, d] = _largest_remainder(sizes[d], props)
    clients = _allocate(ids_by_domain, counts)
    return FederatedSplit(scheme, clients, counts)


def partition(dataset, scheme, K=10, seed=0, dirichlet_alpha=0.25):
    return partition_set(dataset.train, scheme, K, seed, dirichlet_alpha)


def matching_shards(split, samples, seed=0):
    """Shard ``samples`` so each client's domain mix mirrors its training shard."""
    rng = stream(seed, "shards", len(samples))
    K = split.num_clients
    n_dom = split.domain_counts.shape[1]
    counts = np.zeros((K, n_dom), dtype=np.int64)
    ids_by_domain = []
    for d in range(n_dom):
        ids = rng.permutation(samples.ids[samples.domains == d])
        ids_by_domain.append(ids)
        col = split.domain_counts[:, d].astype(np.float64)
        if col.sum() > 0:
            counts[:, d] = _largest_remainder(len(ids), col / col.sum())
    return _allocate(ids_by_domain, counts)


def iid_shards(samples, K, seed=0):
    """Balanced IID shards of ``samples`` (the shifted test protocol)."""
    return partition_set(samples, "iid", K, seed, label="shift").clients


# ---------------------------------------------------------------- disk format

_RECORD_HEAD = np.dtype([("id", "<i8"), ("domain", "<i8")])


def export_dataset(dataset, out_dir):
    """Write ``meta.json`` and one little-endian blob per split."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = dataset.config
    h, w = cfg.height, cfg.width
    rec = np.dtype([("id", "<i8"), ("domain", "<i8"), ("image", "<f8", (h * w,)),
                    ("mask", "u1", (h * w,))])
    counts = {}
    for name, s in dataset.splits().items():
        arr = np.empty(len(s), dtype=rec)
        arr["id"] = s.ids
        arr["domain"] = s.domains
        arr["image"] = s.images.reshape(len(s), -1)
        arr["mask"] = s.masks.reshape(len(s), -1)
        with open(os.path.join(out_dir, f"{name}.bin"), "wb") as fh:
            fh.write(arr.tobytes())
        counts[name] = {"n": len(s), "per_domain": np.bincount(s.domains).tolist()}
    meta = {"format": "fsddi-dataset-1", "config": asdict(cfg), "seed": cfg.seed,
            "counts": counts, "content_hash": dataset.content_hash()}
    meta["config"]["domains"] = list(cfg.domains)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def import_dataset(in_dir):
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    cfg = DataConfig(**meta["config"])
    h, w = cfg.height, cfg.width
    rec = np.dtype([("id", "<i8"), ("domain", "<i8"), ("image", "<f8", (h * w,)),
                    ("mask", "u1", (h * w,))])
    splits = {}
    for name in ("train", "val", "test"):
        with open(os.path.join(in_dir, f"{name}.bin"), "rb") as fh:
            arr = np.frombuffer(fh.read(), dtype=rec)
        n = arr.shape[0]
        splits[name] = SampleSet(arr["id"].astype(np.int64), arr["image"].reshape(n, h, w).astype(np.float64),
                                 arr["mask"].reshape(n, h, w).astype(np.uint8),
                                 arr["domain"].astype(np.int64), name)
    return Dataset(cfg, splits["train"], splits["val"], splits["test"])
