"""
Configuration module for the carbon-aware OPF toolkit.

Loads and validates configuration from environment variables using Pydantic.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import colorlog
import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

# Load environment variables from .env file
load_dotenv()


class SolverConfig(BaseModel):
    """NLP solver configuration for OPF and C-OPF."""

    method: Literal["slsqp", "auglag"] = Field(
        default="slsqp",
        description="NLP driver"
    )

    tol_feas: float = Field(
        default=1e-6,
        gt=0.0,
        le=1e-2,
        description="Acceptance tolerance on constraint violation (p.u.)"
    )
    tol_comp: float = Field(
        default=1e-6,
        gt=0.0,
        description="Acceptance tolerance on dual-flow complementarity products (MW^2)"
    )
    tol_kkt: float = Field(
        default=1e-6,
        gt=0.0,
        description="Acceptance tolerance on the scaled KKT stationarity residual"
    )

    eps_start: float = Field(
        default=1e-2,
        gt=0.0,
        description="First complementarity relaxation level (p.u.^2)"
    )
    eps_end: float = Field(
        default=1e-8,
        gt=0.0,
        description="Last complementarity relaxation level (p.u.^2)"
    )
    eps_factor: float = Field(
        default=0.1,
        gt=0.0,
        lt=1.0,
        description="Geometric reduction factor between relaxation stages"
    )

    max_iter: int = Field(
        default=500,
        ge=1,
        description="Maximum iterations per NLP stage"
    )
    ftol: float = Field(
        default=1e-12,
        gt=0.0,
        description="Objective tolerance passed to the NLP driver"
    )

    polish: bool = Field(
        default=True,
        description="Re-solve with flow directions fixed after the last relaxation stage"
    )
    prefix_radial: bool = Field(
        default=True,
        description="Fix directions of radial branches feeding passive subtrees"
    )

    @field_validator("eps_end")
    @classmethod
    def validate_eps_end(cls, v, info):
        """The relaxation schedule must be non-increasing."""
        start = info.data.get("eps_start")
        if start is not None and v > start:
            raise ValueError("eps_end must not exceed eps_start")
        return v


class PowerFlowConfig(BaseModel):
    """Newton-Raphson and flow-direction settings."""

    tol: float = Field(
        default=1e-8,
        gt=0.0,
        description="Mismatch infinity-norm tolerance (p.u.)"
    )
    max_iter: int = Field(
        default=50,
        ge=1,
        le=500,
        description="Maximum Newton iterations"
    )
    damping: float = Field(
        default=0.5,
        gt=0.0,
        le=1.0,
        description="Step factor applied when the mismatch grows"
    )
    zero_flow_mw: float = Field(
        default=1e-9,
        ge=0.0,
        description="Flows below this magnitude (MW) are treated as zero"
    )


class ModelConfig(BaseModel):
    """Modelling choices shared by the CLI subcommands."""

    pf_model: Literal["dc", "ac"] = Field(
        default="dc",
        description="Power flow model"
    )
    es_model: Literal["water_tank", "load_clean_gen"] = Field(
        default="water_tank",
        description="Energy storage carbon model"
    )


class RuntimeConfig(BaseModel):
    """Worker fan-out for sweeps and oracle enumeration."""

    workers: int = Field(
        default=1,
        ge=1,
        le=64,
        description="Number of concurrent solve workers"
    )
    executor: Literal["thread", "process"] = Field(
        default="thread",
        description="Pool type used when workers > 1"
    )


class LoggingConfig(BaseModel):
    """Logging configuration."""

    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = Field(
        default="INFO",
        description="Log level"
    )

    log_format: Literal["json", "console"] = Field(
        default="console",
        description="Log format"
    )

    log_file: Optional[Path] = Field(
        default=None,
        description="Log file path (None for console only)"
    )

    colored_logs: bool = Field(
        default=True,
        description="Enable colored console logs"
    )


class Config(BaseModel):
    """Main configuration class."""

    solver: SolverConfig
    power_flow: PowerFlowConfig
    model: ModelConfig
    runtime: RuntimeConfig
    logging: LoggingConfig

    @classmethod
    def from_env(cls) -> "Config":
        """Create configuration from environment variables."""
        return cls(
            solver=SolverConfig(
                method=os.getenv("CARBON_OPF_METHOD", "slsqp"),
                tol_feas=float(os.getenv("CARBON_OPF_TOL_FEAS", "1e-6")),
                tol_comp=float(os.getenv("CARBON_OPF_TOL_COMP", "1e-6")),
                tol_kkt=float(os.getenv("CARBON_OPF_TOL_KKT", "1e-6")),
                eps_start=float(os.getenv("CARBON_OPF_EPS_START", "1e-2")),
                eps_end=float(os.getenv("CARBON_OPF_EPS_END", "1e-8")),
                eps_factor=float(os.getenv("CARBON_OPF_EPS_FACTOR", "0.1")),
                max_iter=int(os.getenv("CARBON_OPF_MAX_ITER", "500")),
                ftol=float(os.getenv("CARBON_OPF_FTOL", "1e-12")),
                polish=os.getenv("CARBON_OPF_POLISH", "true").lower() == "true",
                prefix_radial=os.getenv("CARBON_OPF_PREFIX_RADIAL", "true").lower() == "true",
            ),
            power_flow=PowerFlowConfig(
                tol=float(os.getenv("CARBON_OPF_PF_TOL", "1e-8")),
                max_iter=int(os.getenv("CARBON_OPF_PF_MAX_ITER", "50")),
            ),
            model=ModelConfig(
                pf_model=os.getenv("CARBON_OPF_PF_MODEL", "dc"),
                es_model=os.getenv("CARBON_OPF_ES_MODEL", "water_tank"),
            ),
            runtime=RuntimeConfig(
                workers=int(os.getenv("CARBON_OPF_WORKERS", "1")),
                executor=os.getenv("CARBON_OPF_EXECUTOR", "thread"),
            ),
            logging=LoggingConfig(
                log_level=os.getenv("LOG_LEVEL", "INFO"),
                log_format=os.getenv("LOG_FORMAT", "console"),
                log_file=Path(os.getenv("LOG_FILE")) if os.getenv("LOG_FILE") else None,
                colored_logs=os.getenv("COLORED_LOGS", "true").lower() == "true",
            ),
        )


def configure_logging(settings: LoggingConfig) -> None:
    """
    Install root handlers according to the logging section.

    Console output goes to stderr so that CLI artifacts on stdout stay clean.

    Args:
        settings: Logging configuration
    """
    if settings.log_format == "json":
        formatter: logging.Formatter = structlog.stdlib.ProcessorFormatter(
            processor=structlog.processors.JSONRenderer(),
            foreign_pre_chain=[
                structlog.stdlib.add_log_level,
                structlog.stdlib.add_logger_name,
                structlog.processors.TimeStamper(fmt="iso"),
            ],
        )
    elif settings.colored_logs:
        formatter = colorlog.ColoredFormatter(
            "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"
        )
    else:
        formatter = logging.Formatter("%(levelname)-8s %(name)s: %(message)s")

    handlers = [logging.StreamHandler(sys.stderr)]
    if settings.log_file is not None:
        handlers.append(logging.FileHandler(settings.log_file))

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(settings.log_level)


# Global configuration instance
config: Optional[Config] = None


def get_config() -> Config:
    """Get global configuration instance (singleton pattern)."""
    global config
    if config is None:
        config = Config.from_env()
    return config


def reload_config() -> Config:
    """Reload configuration from environment."""
    global config
    load_dotenv(override=True)
    config = Config.from_env()
    return config


# Convenience function to get config
def cfg() -> Config:
    """Shorthand for get_config()."""
    return get_config()
