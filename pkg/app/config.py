"""Run configuration: INI sections [model], [box], [run], [output] validated by pydantic.

Precedence is command line flag, then config file, then environment.
"""
import configparser
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.grid import GridGeometry
from app.model import BoxGeometry, ConnectionFunction, RngSpec

logger = logging.getLogger(__name__)

OUTPUT_DIR = os.getenv("RCM_OUTPUT_DIR", "output")
THREADS = int(os.getenv("RCM_THREADS", "1"))
LOG_LEVEL = os.getenv("RCM_LOG_LEVEL", "INFO")

DEFAULT_SEED = 20240601
SECTIONS = ("model", "box", "run", "output")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelBlock(_Block):
    kind: Literal["gilbert", "exponential", "radial-table"] = "gilbert"
    dimension: int = Field(1, ge=1)
    radius: float = Field(1.0, gt=0)
    rate: float = Field(1.0, gt=0)
    # "r:v; r:v; ..." for radial tables
    table: Optional[str] = None

    def connection(self) -> ConnectionFunction:
        if self.kind == "gilbert":
            return ConnectionFunction.gilbert(self.radius, self.dimension)
        if self.kind == "exponential":
            return ConnectionFunction.exponential(self.rate, self.dimension)
        if not self.table:
            raise ConfigError("[model] kind = radial-table needs a table = r:v; r:v; ... entry")
        try:
            pairs = [tuple(float(v) for v in item.split(":")) for item in self.table.split(";") if item.strip()]
            return ConnectionFunction.radial_table(pairs, self.dimension)
        except ValueError as e:
            raise ConfigError(f"invalid radial table '{self.table}': {e}")


class BoxBlock(_Block):
    side_length: float = Field(40.0, gt=0)
    boundary: Literal["periodic", "free"] = "periodic"


class RunBlock(_Block):
    t: float = Field(0.2, ge=0)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)
    replicates: int = Field(100000, gt=0)
    profile_replicates: int = Field(2000, gt=0)
    threads: int = Field(default_factory=lambda: THREADS, ge=1)
    probes: str = "0.5, 1.5, 2.5"
    max_size: int = Field(10, ge=1)
    # lengths left unset scale with the connection function
    bin_width: Optional[float] = Field(None, gt=0)
    profile_radius: Optional[float] = Field(None, gt=0)
    grid_cells: int = Field(4096, ge=2)
    grid_spacing: Optional[float] = Field(None, gt=0)
    expansion_cells: int = Field(1024, ge=2)
    expansion_spacing: Optional[float] = Field(None, gt=0)
    expansion_order: int = Field(3, ge=0, le=5)
    expansion_method: Literal["elimination", "monte-carlo"] = "elimination"
    mc_samples: int = Field(4096, gt=0)
    mc_max_samples: int = Field(262144, gt=0)
    mc_relative_error: float = Field(0.02, gt=0)
    series_t: float = Field(0.05, ge=0)
    oze_solver: Literal["fourier", "neumann"] = "fourier"
    zero_intensity: bool = False
    spectral_floor: float = Field(1e-8, gt=0)
    neumann_tol: float = Field(1e-12, gt=0)
    neumann_max_terms: int = Field(500, gt=0)
    residual_tol: float = Field(1e-6, gt=0)
    identity_tol: float = Field(1e-8, gt=0)
    sigmas: float = Field(3.0, gt=0)
    subcritical_bound: Optional[float] = Field(None, gt=0)
    boundary_threshold: float = Field(0.01, gt=0)

    @field_validator("probes")
    @classmethod
    def _probes_parse(cls, value: str) -> str:
        for item in value.split(";" if ";" in value else ","):
            if item.strip():
                [float(c) for c in item.split()]
        return value

    @field_validator("grid_cells", "expansion_cells")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value & (value - 1):
            raise ValueError(f"grid cells must be a power of two, got {value}")
        return value

    def probe_points(self, dimension: int) -> List[np.ndarray]:
        """Probe displacements: comma separated numbers in d = 1, ';' separated vectors otherwise"""
        if dimension == 1 and ";" not in self.probes:
            items = [item for item in self.probes.split(",") if item.strip()]
        else:
            items = [item for item in self.probes.split(";") if item.strip()]
        points = [np.array([float(c) for c in item.replace(",", " ").split()]) for item in items]
        for point in points:
            if point.shape != (dimension,):
                raise ConfigError(f"probe {point.tolist()} is not a {dimension}-vector")
        return points


class OutputBlock(_Block):
    directory: str = Field(default_factory=lambda: OUTPUT_DIR)
    formats: str = "csv,json,binary"
    record_wall_time: bool = False

    @field_validator("formats")
    @classmethod
    def _known_formats(cls, value: str) -> str:
        unknown = {f.strip() for f in value.split(",") if f.strip()} - {"csv", "json", "binary"}
        if unknown:
            raise ValueError(f"unknown output formats {sorted(unknown)}")
        return value

    def wants(self, fmt: str) -> bool:
        return fmt in {f.strip() for f in self.formats.split(",")}


class RunConfig(_Block):
    model: ModelBlock = ModelBlock()
    box: BoxBlock = BoxBlock()
    run: RunBlock = RunBlock()
    output: OutputBlock = OutputBlock()

    @model_validator(mode="after")
    def _consistent(self):
        f = self.connection()
        if self.box.side_length <= 2 * f.truncation_radius:
            raise ValueError(f"box side {self.box.side_length} must exceed twice the truncation radius "
                             f"{f.truncation_radius}")
        return self

    def connection(self) -> ConnectionFunction:
        return self.model.connection()

    def box_geometry(self) -> BoxGeometry:
        return BoxGeometry(dimension=self.model.dimension, side_length=self.box.side_length,
                           boundary=self.box.boundary)

    def rng(self) -> RngSpec:
        return RngSpec(seed=self.run.seed)

    @property
    def length_scale(self) -> float:
        return self.connection().length_scale

    def oze_geometry(self) -> GridGeometry:
        spacing = self.run.grid_spacing or self.length_scale / 64
        return GridGeometry(dimension=self.model.dimension, cells=self.run.grid_cells, spacing=spacing)

    def expansion_geometry(self) -> GridGeometry:
        spacing = self.run.expansion_spacing or self.length_scale / 64
        return GridGeometry(dimension=self.model.dimension, cells=self.run.expansion_cells, spacing=spacing)

    @property
    def bin_width(self) -> float:
        return self.run.bin_width or self.length_scale / 20

    @property
    def profile_radius(self) -> float:
        return self.run.profile_radius or 6 * self.length_scale

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       threads: Optional[int] = None) -> "RunConfig":
        data = self.model_dump()
        if seed is not None:
            data["run"]["seed"] = seed
        if threads is not None:
            data["run"]["threads"] = threads
        if out is not None:
            data["output"]["directory"] = out
        return build_config(data)


def build_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid configuration: {problems}", {"errors": len(e.errors())})


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {source}: {e}")
    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections {unknown} in {source}; expected {list(SECTIONS)}")
    data = {name: dict(parser.items(name)) for name in parser.sections()}
    return build_config(data)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Config from an INI file, or the defaults when no path is given"""
    if path is None:
        return build_config({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    logger.info(f"loaded config from {path}")
    return parse_config_text(text, str(path))
