"""The generation loop: initialise, train/evaluate, calibrate, breed, mutate, cull."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as D
from .errors import InitError, InputError
from .evolution import calibrate, crossover, cull, mutate, network_from_key
from .genome import GenomeKey, Species, genome_key, similarity
from .model import FC, Network, evaluate, minimal_network, parameter_count, train_epoch

logger = logging.getLogger(__name__)

INIT_ATTEMPTS = 100
PAIR_ATTEMPTS = 100


@dataclass
class EcosystemConfig:
    initial_size: int = 64
    max_size: int = 111
    initial_species: int = 8
    species_cap: int = 16
    generations: int = 100
    train_subset_fraction: float = 0.10
    batch_size: int = 128
    mutation_probability: float = 0.5
    offspring_target: int | None = None
    speciation_enabled: bool = True
    master_seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.initial_size < 1:
            raise InputError("initial_size: must be >= 1")
        if self.initial_size > self.max_size:
            raise InputError(f"initial_size: {self.initial_size} exceeds max_size {self.max_size}")
        if self.initial_species < 1:
            raise InputError("initial_species: must be >= 1")
        if self.initial_species > self.species_cap:
            raise InputError(f"initial_species: {self.initial_species} exceeds species_cap {self.species_cap}")
        if not 0.0 < self.train_subset_fraction <= 1.0:
            raise InputError("train_subset_fraction: must lie in (0, 1]")
        if self.batch_size < 1:
            raise InputError("batch_size: must be >= 1")
        if not 0.0 <= self.mutation_probability <= 1.0:
            raise InputError("mutation_probability: must lie in [0, 1]")
        if self.offspring_target is not None and self.offspring_target < 0:
            raise InputError("offspring_target: must be >= 0")
        if self.generations < 0:
            raise InputError("generations: must be >= 0")
        if self.threads < 1:
            raise InputError("threads: must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class GenerationMetrics:
    generation: int
    highest_fitness: float
    average_fitness: float
    average_offspring_fitness_before_bp: float | None
    species_count: int
    mean_parameter_count: float
    failed_mutation_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def network_rng(master_seed: int, net_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, net_id])))


@dataclass
class Ecosystem:
    config: EcosystemConfig
    input_shape: tuple[int, int, int]
    num_classes: int
    networks: list[Network] = field(default_factory=list)
    species: dict[int, Species] = field(default_factory=dict)
    generation: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    next_network_id: int = 0
    next_species_id: int = 0
    best_fitness: float = 0.0
    # free-form run settings (task, data location) carried through checkpoints
    meta: dict = field(default_factory=dict)
    # (generation, network id, subset digest); diagnostics only, not checkpointed
    subset_log: list = field(default_factory=list)

    def new_id(self) -> int:
        nid = self.next_network_id
        self.next_network_id += 1
        return nid

    def by_id(self) -> dict[int, Network]:
        return {n.id: n for n in self.networks}

    # -- species registry -------------------------------------------------

    def species_for_key(self, key: GenomeKey) -> Species | None:
        for sp in self.species.values():
            if sp.genome_key == key:
                return sp
        return None

    def add_species(self, key: GenomeKey) -> Species:
        if len(self.species) >= self.config.species_cap:
            raise InputError("species cap reached")
        sp = Species(self.next_species_id, key)
        self.species[sp.id] = sp
        self.next_species_id += 1
        return sp

    def accepts_key(self, key: GenomeKey) -> bool:
        if not self.config.speciation_enabled:
            return True
        return self.species_for_key(key) is not None or len(self.species) < self.config.species_cap

    def refresh_species(self) -> None:
        """Rebuild member lists and champions; drop species with no members."""
        for sp in self.species.values():
            sp.members = []
        for n in self.networks:
            if n.species_id is not None:
                self.species[n.species_id].members.append(n.id)
        nets = self.by_id()
        for sid in [s for s, sp in self.species.items() if not sp.members]:
            del self.species[sid]
        for sp in self.species.values():
            best = max((nets[m] for m in sp.members), key=lambda n: (n.absolute_fitness, -n.id))
            sp.champion = best.id

    def groups(self) -> list[list[Network]]:
        if not self.config.speciation_enabled:
            return [self.networks] if self.networks else []
        nets = self.by_id()
        return [[nets[m] for m in sp.members] for sp in self.species.values() if sp.members]

    def audit(self) -> list[str]:
        """Registry consistency problems (empty list when consistent)."""
        problems = []
        if len(self.networks) > self.config.max_size:
            problems.append(f"ecosystem size {len(self.networks)} exceeds {self.config.max_size}")
        if not self.config.speciation_enabled:
            return problems
        if len(self.species) > self.config.species_cap:
            problems.append(f"{len(self.species)} species exceed cap {self.config.species_cap}")
        nets = self.by_id()
        seen = set()
        for sp in self.species.values():
            for m in sp.members:
                if m in seen:
                    problems.append(f"network {m} listed in two species")
                seen.add(m)
                if m not in nets:
                    problems.append(f"species {sp.id} lists missing network {m}")
                elif genome_key(nets[m]) != sp.genome_key:
                    problems.append(f"network {m} key differs from species {sp.id}")
                elif nets[m].species_id != sp.id:
                    problems.append(f"network {m} points at species {nets[m].species_id}, not {sp.id}")
            if sp.members and sp.champion not in sp.members:
                problems.append(f"species {sp.id} champion {sp.champion} is not a member")
        for n in self.networks:
            if n.id not in seen:
                problems.append(f"network {n.id} belongs to no species")
        keys = [sp.genome_key for sp in self.species.values()]
        if len(set(keys)) != len(keys):
            problems.append("two species share a genome key")
        return problems


# ---------------------------------------------------------------------------
# initialisation


def _spawn(eco: Ecosystem, key: GenomeKey, species_id=None) -> Network:
    nid = eco.new_id()
    return network_from_key(
        key, eco.input_shape, eco.num_classes, network_rng(eco.config.master_seed, nid), id=nid, species_id=species_id
    )


def init_ecosystem(cfg: EcosystemConfig, input_shape, num_classes: int, rng=None) -> Ecosystem:
    """Create the initial population (see the README for the seeding rules)."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.master_seed])))
    eco = Ecosystem(cfg, tuple(input_shape), num_classes, rng=rng)
    minimal_key: GenomeKey = ((FC, num_classes),)

    if cfg.speciation_enabled:
        n_species = min(cfg.initial_species, cfg.initial_size)
        if n_species < cfg.initial_species:
            logger.warning("initial_species reduced to %d to fit %d networks", n_species, cfg.initial_size)
        sizes = [cfg.initial_size // n_species + (i < cfg.initial_size % n_species) for i in range(n_species)]
        keys = [minimal_key]
        while len(keys) < n_species:
            isolated = minimal_network(input_shape, num_classes, rng)
            for _ in range(INIT_ATTEMPTS):
                mutate(isolated, rng)
                key = genome_key(isolated)
                if key not in keys:
                    keys.append(key)
                    break
            else:
                raise InitError(f"no novel genome found after {INIT_ATTEMPTS} mutations")
        for key, size in zip(keys, sizes):
            sp = eco.add_species(key)
            for _ in range(size):
                eco.networks.append(_spawn(eco, key, sp.id))
    else:
        for _ in range(cfg.initial_size):
            nid = eco.new_id()
            net = minimal_network(input_shape, num_classes, network_rng(cfg.master_seed, nid), id=nid)
            outcome = mutate(net, rng)
            if outcome.failed:
                logger.warning("initial mutation of network %d failed: %s", nid, outcome.reason)
            eco.networks.append(net)
    eco.refresh_species()
    return eco


# ---------------------------------------------------------------------------
# generation


def subset_digest(indices: np.ndarray) -> str:
    return hashlib.sha1(np.sort(indices).astype(np.int64).tobytes()).hexdigest()[:16]


def _train_and_evaluate(net: Network, train: D.Dataset, test: D.Dataset, cfg: EcosystemConfig) -> str:
    idx = D.sample_subset(len(train), cfg.train_subset_fraction, net.rng)
    train_epoch(net, train.images, train.labels, list(D.batches(idx, cfg.batch_size)))
    evaluate(net, test.images, test.labels)
    return subset_digest(idx)


def offspring_count(eco: Ecosystem) -> int:
    if eco.config.offspring_target is not None:
        return eco.config.offspring_target
    size = len(eco.networks)
    return max(eco.config.max_size - size, math.ceil(size / 4))


def _weighted_pick(nets, rng, exclude=None):
    pool = [n for n in nets if n is not exclude]
    w = np.array([n.relative_fitness for n in pool])
    p = w / w.sum() if w.sum() > 0 else None
    return pool[rng.choice(len(pool), p=p)]


def _select_parents(eco: Ecosystem):
    rng = eco.rng
    if eco.config.speciation_enabled:
        groups = [g for g in eco.groups() if len(g) >= 2]
        if not groups:
            return None
        w = np.array([sum(n.relative_fitness for n in g) for g in groups])
        group = groups[rng.choice(len(groups), p=w / w.sum())]
        p1 = _weighted_pick(group, rng)
        return p1, _weighted_pick(group, rng, exclude=p1)
    nets = eco.networks
    if len(nets) < 2:
        return None
    for _ in range(PAIR_ATTEMPTS):
        i, j = rng.choice(len(nets), size=2, replace=False)
        p1, p2 = nets[i], nets[j]
        if rng.random() < similarity(genome_key(p1), genome_key(p2)):
            return p1, p2
    return None


def run_generation(eco: Ecosystem, train: D.Dataset, test: D.Dataset) -> GenerationMetrics:
    """Advance the ecosystem by one generation and return its metrics."""
    cfg = eco.config
    eco.generation += 1
    for n in eco.networks:
        n.is_new_offspring = False

    # (1) train on a fresh random subset, then evaluate on the full test set
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            digests = list(pool.map(lambda n: _train_and_evaluate(n, train, test, cfg), eco.networks))
    else:
        digests = [_train_and_evaluate(n, train, test, cfg) for n in eco.networks]
    eco.subset_log.extend((eco.generation, n.id, d) for n, d in zip(eco.networks, digests))
    eco.refresh_species()
    eco.best_fitness = max([eco.best_fitness] + [n.absolute_fitness for n in eco.networks])
    average = float(np.mean([n.absolute_fitness for n in eco.networks]))

    # (2) calibration
    for group in eco.groups():
        calibrate(group)

    # (3) crossover; offspring are scored before any training
    offspring = []
    for _ in range(offspring_count(eco)):
        parents = _select_parents(eco)
        if parents is None:
            break
        p1, p2 = parents
        nid = eco.new_id()
        child = crossover(p1, p2, eco.rng, id=nid, child_rng=network_rng(cfg.master_seed, nid),
                          species_id=p1.species_id if cfg.speciation_enabled else None)
        evaluate(child, test.images, test.labels)
        offspring.append(child)
    eco.networks.extend(offspring)

    # (4) mutation of established networks
    failed = 0
    for net in eco.networks:
        if net.is_new_offspring or eco.rng.random() >= cfg.mutation_probability:
            continue
        outcome = mutate(net, eco.rng, eco.accepts_key)
        if outcome.failed:
            failed += 1
            continue
        if cfg.speciation_enabled:
            key = genome_key(net)
            sp = eco.species_for_key(key) or eco.add_species(key)
            net.species_id = sp.id
            eco.refresh_species()
    eco.refresh_species()

    # (5) culling
    for group in eco.groups():
        calibrate(group)
    eco.networks = cull(eco.networks, cfg.max_size, eco.rng)
    eco.refresh_species()

    return GenerationMetrics(
        generation=eco.generation,
        highest_fitness=eco.best_fitness,
        average_fitness=average,
        average_offspring_fitness_before_bp=(
            float(np.mean([c.absolute_fitness for c in offspring])) if offspring else None
        ),
        species_count=len(eco.species) if cfg.speciation_enabled else 1,
        mean_parameter_count=float(np.mean([parameter_count(n) for n in eco.networks])),
        failed_mutation_count=failed,
    )
