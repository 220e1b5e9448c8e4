"""Dataset generation: phantom seeds x placements -> solved, averaged samples."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

from . import emfield, sarmap
from .dataset import SampleRejected, build_sample
from .phantom import PhantomSpec, coil_preset, draw_phantom, enumerate_placements

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationConfig:
    field_tag: str = "3T"
    phantom_seeds: tuple = tuple(range(8))
    counts: tuple = (8, 8)
    range_x: tuple = (-0.01, 0.01)
    range_y: tuple = (-0.01, 0.01)
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    target_mass: float = 1e-3


@dataclass
class GenerationResult:
    samples: list
    placements_considered: int
    rejected: list  # (phantom_seed, placement, reason)


def resolve_threads(flag=None):
    """Flag wins over SARFORGE_THREADS, which wins over the CPU count."""
    if flag:
        return max(1, int(flag))
    env = os.environ.get("SARFORGE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _simulate_one(args):
    seed, placement, spec, field_tag, target_mass = args
    coil = coil_preset(field_tag)
    grid = draw_phantom(seed, spec).rasterize(spec, placement)
    solution = emfield.simulate(grid, coil, placement)
    sar = sarmap.compute_sar(solution.e_field, grid, target_mass)
    summary = sarmap.summarize(sar)
    try:
        return build_sample(grid, placement, solution, sar, field_tag, seed, summary.ratio), None
    except SampleRejected as exc:
        return None, exc.reason


def generate(config, threads=1):
    """Build every sample of the sweep, in deterministic (seed, placement) order."""
    if not config.phantom_seeds:
        raise ValueError("at least one phantom seed is required")
    coil = coil_preset(config.field_tag)
    spec = replace(config.spec, frequency=coil.frequency).validate()
    jobs = []
    considered = 0
    for seed in config.phantom_seeds:
        shape = draw_phantom(seed, spec)
        considered += config.counts[0] * config.counts[1]
        placements = enumerate_placements(shape, coil, (config.range_x, config.range_y), config.counts)
        jobs.extend((seed, p, spec, config.field_tag, config.target_mass) for p in placements)

    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            results = list(pool.map(_simulate_one, jobs, chunksize=8))
    else:
        results = [_simulate_one(job) for job in jobs]

    samples, rejected = [], []
    for job, (sample, reason) in zip(jobs, results):
        if sample is None:
            rejected.append((job[0], job[1], reason))
        else:
            samples.append(sample)
    log.info("generated %d samples, %d rejected, %d placements filtered",
             len(samples), len(rejected), considered - len(jobs))
    return GenerationResult(samples, considered, rejected)
