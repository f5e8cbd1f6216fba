"""Online perception loop shared by live episodes and offline replay.

Per tick the caller feeds:

1. ``experience``: the vibration window recorded while driving into the
   current cell -> roughness -> buffer sample -> speed-risk update;
2. ``perceive``: the sensor frame -> map fusion, OOD mask, refit when due,
   cost/speed rasterisation.

Everything downstream of these inputs is deterministic, which is what makes
replay reproduce a live run's maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bev_map
from .estimator import (DEFAULT_COST_HYPER, DEFAULT_SPEED_HYPER, GprHyper, InputScaling,
                        RiskState, fit_cost_model, fit_speed_model, rasterize, speed_limit,
                        update_alpha_s)
from .experience_buffer import BufferConfig, ExperienceBuffer
from .feature_space import ClusterSet
from .proprioception import DEFAULT_PARAMS, RoughnessParams, roughness


@dataclass(frozen=True)
class PipelineConfig:
    grid_size: int = bev_map.DEFAULT_SIZE
    resolution: float = bev_map.DEFAULT_RESOLUTION
    beta: float = bev_map.DEFAULT_BETA
    weight_cap: float = bev_map.DEFAULT_WEIGHT_CAP
    ood_radius: int = 1
    cost_hyper: GprHyper = DEFAULT_COST_HYPER
    speed_hyper: GprHyper = DEFAULT_SPEED_HYPER
    scaling: InputScaling = InputScaling()
    buffer: BufferConfig = BufferConfig()
    risk: RiskState = RiskState()
    refit_period: float = 1.0
    refit_samples: int = 16
    roughness_params: RoughnessParams = DEFAULT_PARAMS
    s_hard_max: float = 8.0
    query_speed_floor: float = 1.0


@dataclass
class ExperienceResult:
    roughness: float
    inserted: bool
    speed_limit: float | None
    alpha_s: float


class TraversabilityPipeline:
    def __init__(self, clusters: ClusterSet, config: PipelineConfig, x: float, y: float):
        self.clusters = clusters
        self.config = config
        self.grid = bev_map.BevGrid.centered(clusters.k, x, y, width=config.grid_size,
                                             height=config.grid_size,
                                             resolution=config.resolution,
                                             weight_cap=config.weight_cap)
        self.buffer = ExperienceBuffer(config.buffer)
        self.risk = config.risk
        self.cost_model = None
        self.speed_model = None
        self.last_refit_t = -np.inf
        self.new_samples = 0
        self.n_refits = 0
        self.query_speed = config.query_speed_floor
        self.pins = []

    def pin(self, descriptor, roughness_value: float, speeds, t: float = 0.0):
        self.buffer.pin(descriptor, roughness_value, speeds, t)
        self.pins.append({"descriptor": np.asarray(descriptor, float).tolist(),
                          "roughness": float(roughness_value), "speeds": [float(s) for s in speeds]})
        self.refit(t)

    def refit_due(self, t: float) -> bool:
        return (self.new_samples >= self.config.refit_samples
                or t - self.last_refit_t >= self.config.refit_period - 1e-9)

    def refit(self, t: float) -> None:
        snap = self.buffer.snapshot()
        if snap:
            self.cost_model = fit_cost_model(snap, self.config.cost_hyper, self.config.scaling)
            self.speed_model = fit_speed_model(snap, self.config.speed_hyper, self.config.scaling)
        self.last_refit_t = t
        self.new_samples = 0
        self.n_refits += 1

    def perceive(self, t: float, x: float, y: float, cells, descriptors, speed: float) -> bool:
        """Fuse one sensor frame; returns True when the models were refitted."""
        grid = self.grid
        bev_map.recenter(grid, x, y)
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        gi, gj = grid.lattice_to_cell(cells[:, 0], cells[:, 1])
        bev_map.integrate(grid, np.column_stack([gi, gj]), descriptors, self.config.beta)
        bev_map.update_ood(grid, self.clusters, self.config.ood_radius)
        self.query_speed = max(float(speed), self.config.query_speed_floor)
        refitted = False
        if self.refit_due(t):
            self.refit(t)
            refitted = True
            rasterize(grid, self.cost_model, self.speed_model, self.risk, self.query_speed,
                      self.config.s_hard_max)
        elif len(cells):
            rasterize(grid, self.cost_model, self.speed_model, self.risk, self.query_speed,
                      self.config.s_hard_max, cells=(gi, gj))
        return refitted

    def cell_descriptor(self, x: float, y: float):
        i, j = self.grid.world_to_cell(x, y)
        if not self.grid.in_bounds(i, j) or self.grid.weight[i, j] <= 0:
            return None
        return self.grid.descriptor[i, j].copy()

    def current_speed_limit(self, x: float, y: float):
        desc = self.cell_descriptor(x, y)
        if desc is None:
            return None
        i, j = self.grid.world_to_cell(x, y)
        if self.grid.ood[i, j]:
            return 0.0
        return float(speed_limit(self.speed_model, desc, self.risk.r_max, self.risk.alpha_s,
                                 self.config.s_hard_max))

    def experience(self, t: float, x: float, y: float, speed: float, window) -> ExperienceResult:
        """Turn one vibration window into a buffer sample and a speed-risk update."""
        r = roughness(window, self.config.roughness_params)
        desc = self.cell_descriptor(x, y)
        inserted = False
        if desc is not None:
            self.buffer.add(desc, max(float(speed), 0.0), r, t)
            self.new_samples += 1
            inserted = True
        lim = self.current_speed_limit(x, y)
        if lim is not None:
            self.risk = update_alpha_s(self.risk, speed, lim, r)
        return ExperienceResult(r, inserted, lim, self.risk.alpha_s)
