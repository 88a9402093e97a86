"""Simulation, calibration, compilation and in-the-loop training for an analog
in-memory vector-matrix multiplication chip."""

from .calibration import blend_decalibration, calibrate, calibrate_drivers, calibrate_neurons, characterize
from .compiler import conv_model, dense_model, partition, plan_model, quantize_weights
from .core import AnalogCore, CalibrationState, CoreGeometry, FixedPatternState, PhysicsSpec, VariationSpec
from .cost import CostReport, TimingSpec, estimate_cost
from .data import Dataset, load_mnist
from .errors import (AnalogVmmError, CalibrationError, ConfigurationError, ContractViolation, IngestionError,
                     PartitionRequired)
from .mac import MacOptions, build_schedule, execute_batch, execute_mac
from .training import TrainState, backward_itl, evaluate, forward, train_epoch

__version__ = "0.1.0"
