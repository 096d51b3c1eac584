"""Seeded synthetic request traces standing in for a honeypot capture.

Legitimate traffic is a homogeneous Poisson stream from a wide address pool.
DDoS traces add a second, much faster Poisson stream from a small pool of
attacking addresses whose countries follow a Zipf law, starting at the attack
onset.
"""
import hashlib
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hive3d.errors import ConfigError, FormatError

N_COUNTRIES = 64
COUNTRY_CODES = tuple(f"C{i:02d}" for i in range(N_COUNTRIES))
LEGITIMATE, ATTACK = "legitimate", "attack"
NORMAL, DDOS = "Normal", "DDoS"
CLASS_NAMES = (NORMAL, DDOS)

# fixed registry seed: the /8 -> country table must not depend on trace seeds
_REGISTRY_SEED = 0x48495645


def _octet_table():
    perm = np.random.default_rng(_REGISTRY_SEED).permutation(256)
    table = np.empty(256, dtype=np.int64)
    table[perm] = np.arange(256) % N_COUNTRIES
    return table


_OCTET_COUNTRY = _octet_table()
_COUNTRY_OCTETS = [np.flatnonzero(_OCTET_COUNTRY == c) for c in range(N_COUNTRIES)]


def country_of(ip):
    """Country index of a 32-bit address (seeded /8 registry)."""
    return int(_OCTET_COUNTRY[(int(ip) >> 24) & 0xFF])


def ip_to_str(ip):
    ip = int(ip)
    return f"{ip >> 24 & 255}.{ip >> 16 & 255}.{ip >> 8 & 255}.{ip & 255}"


def ip_from_str(s):
    parts = [int(p) for p in s.split(".")]
    if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
        raise FormatError(f"bad IPv4 address {s!r}")
    return (parts[0] << 24) | (parts[1] << 16) | (parts[2] << 8) | parts[3]


@dataclass(frozen=True)
class FlowRecord:
    timestamp: float
    src_ip: int
    country: int
    kind: str

    def to_line(self):
        return f"{self.timestamp!r}\t{ip_to_str(self.src_ip)}\t{COUNTRY_CODES[self.country]}\t{self.kind}"

    @classmethod
    def from_line(cls, line):
        try:
            ts, ip, cc, kind = line.rstrip("\n").split("\t")
            country = COUNTRY_CODES.index(cc)
        except ValueError as exc:
            raise FormatError(f"malformed trace line {line!r}") from exc
        if kind not in (LEGITIMATE, ATTACK):
            raise FormatError(f"unknown record kind {kind!r}")
        return cls(float(ts), ip_from_str(ip), country, kind)


@dataclass(frozen=True)
class TraceConfig:
    seed: int = 0
    label: str = NORMAL
    capture_duration: float = 8.0
    normal_rate: float = 1.5
    attack_rate: float = 300.0
    attack_onset: float = 1.0
    ip_pool_normal: int = 512
    ip_pool_attack: int = 48
    country_concentration: float = 0.3

    def validate(self):
        if self.label not in CLASS_NAMES:
            raise ConfigError(f"label must be one of {CLASS_NAMES}, got {self.label!r}")
        if not self.capture_duration > 0:
            raise ConfigError("capture_duration must be positive")
        if self.normal_rate < 0 or self.attack_rate < 0:
            raise ConfigError("rates must be non-negative")
        if not 0 <= self.attack_onset < self.capture_duration:
            raise ConfigError(
                f"attack_onset {self.attack_onset} outside [0, {self.capture_duration})"
            )
        if self.ip_pool_normal < 1 or self.ip_pool_attack < 1:
            raise ConfigError("IP pools must be non-empty")
        if not 0 < self.country_concentration <= 1:
            raise ConfigError("country_concentration must lie in (0, 1]")
        if self.label == DDOS:
            if self.attack_rate <= 0:
                raise ConfigError("DDoS traces need a positive attack_rate")
            if not self.attack_rate > self.normal_rate:
                raise ConfigError("attack_rate must exceed normal_rate for DDoS traces")


def _ips_in_countries(rng, countries):
    octets = np.array([rng.choice(_COUNTRY_OCTETS[c]) for c in countries], dtype=np.int64)
    low = rng.integers(1, 1 << 24, size=len(countries), dtype=np.int64)
    return (octets << 24) | low


def _poisson_times(rng, rate, start, stop):
    n = rng.poisson(rate * (stop - start)) if rate > 0 and stop > start else 0
    return np.sort(rng.uniform(start, stop, size=n))


def generate_trace(cfg):
    """Timestamp-ordered list of FlowRecord for one capture window."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    normal_pool = _ips_in_countries(rng, rng.integers(0, N_COUNTRIES, size=cfg.ip_pool_normal))

    times = [_poisson_times(rng, cfg.normal_rate, 0.0, cfg.capture_duration)]
    ips = [normal_pool[rng.integers(0, len(normal_pool), size=len(times[0]))]]
    kinds = [np.zeros(len(times[0]), dtype=bool)]

    if cfg.label == DDOS:
        ranking = rng.permutation(N_COUNTRIES)
        weights = np.arange(1, N_COUNTRIES + 1, dtype=np.float64) ** (-4.0 * cfg.country_concentration)
        attack_countries = ranking[rng.choice(N_COUNTRIES, size=cfg.ip_pool_attack, p=weights / weights.sum())]
        attack_pool = _ips_in_countries(rng, attack_countries)
        t_att = _poisson_times(rng, cfg.attack_rate, cfg.attack_onset, cfg.capture_duration)
        times.append(t_att)
        ips.append(attack_pool[rng.integers(0, len(attack_pool), size=len(t_att))])
        kinds.append(np.ones(len(t_att), dtype=bool))

    t = np.concatenate(times)
    ip = np.concatenate(ips)
    k = np.concatenate(kinds)
    order = np.argsort(t, kind="stable")
    return [
        FlowRecord(float(t[i]), int(ip[i]), country_of(ip[i]), ATTACK if k[i] else LEGITIMATE)
        for i in order
    ]


@dataclass
class TraceEntry:
    name: str
    label: str
    split: str
    config: TraceConfig


@dataclass
class Manifest:
    entries: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")


def _derived_seed(base, label, index):
    h = hashlib.blake2b(f"{base}:{label}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def generate_dataset(n_per_class, base_cfg, split=0.8, onset_range=(0.1, 0.9)):
    """Balanced, stratified train/val manifest of trace configurations.

    Each trace gets its own derived seed; DDoS traces draw their attack onset
    uniformly from ``onset_range`` (seconds).
    """
    if n_per_class < 2:
        raise ConfigError("need at least 2 traces per class to stratify")
    if not 0 < split < 1:
        raise ConfigError("split must lie strictly between 0 and 1")
    n_train = int(round(n_per_class * split))
    n_train = min(max(n_train, 1), n_per_class - 1)
    lo, hi = onset_range
    if not 0 <= lo <= hi < base_cfg.capture_duration:
        raise ConfigError(f"onset_range {onset_range} invalid for duration {base_cfg.capture_duration}")

    entries = []
    for label in CLASS_NAMES:
        rng = np.random.default_rng(_derived_seed(base_cfg.seed, label, "split"))
        train_idx = set(rng.permutation(n_per_class)[:n_train].tolist())
        for i in range(n_per_class):
            seed = _derived_seed(base_cfg.seed, label, i)
            onset = base_cfg.attack_onset
            if label == DDOS:
                onset = float(np.random.default_rng(seed ^ 0x5A5A).uniform(lo, hi))
            cfg = replace(base_cfg, seed=seed, label=label, attack_onset=onset)
            cfg.validate()
            split_name = "train" if i in train_idx else "val"
            entries.append(TraceEntry(f"{label.lower()}_{i:05d}", label, split_name, cfg))
    return Manifest(entries)


def write_trace(records, path):
    text = "".join(r.to_line() + "\n" for r in records)
    atomic_write_bytes(path, text.encode())


def read_trace(path):
    with open(path, encoding="utf-8") as fh:
        return [FlowRecord.from_line(line) for line in fh if line.strip()]


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


MANIFEST_HEADER = "path\tlabel\tsplit"


def write_dataset(manifest, out_dir):
    """Write every trace to ``out_dir/traces`` and a manifest listing them."""
    out_dir = Path(out_dir)
    lines = [MANIFEST_HEADER]
    for e in manifest.entries:
        rel = Path("traces") / e.split / e.label / f"{e.name}.tsv"
        write_trace(generate_trace(e.config), out_dir / rel)
        lines.append(f"{rel.as_posix()}\t{e.label}\t{e.split}")
    atomic_write_bytes(out_dir / "manifest.tsv", ("\n".join(lines) + "\n").encode())
    return out_dir / "manifest.tsv"


def read_manifest(path):
    """(trace_path, label, split) rows of a manifest file, paths resolved."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_HEADER:
            raise FormatError(f"{path}: unexpected manifest header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            try:
                rel, label, split = line.rstrip("\n").split("\t")
            except ValueError as exc:
                raise FormatError(f"{path}: malformed manifest line {line!r}") from exc
            if label not in CLASS_NAMES or split not in ("train", "val"):
                raise FormatError(f"{path}: bad label/split in {line!r}")
            rows.append((path.parent / rel, label, split))
    return rows
