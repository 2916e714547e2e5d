"""Compact DNN inference engine and graph compiler for keyword spotting on
small CPUs: graph IR, optimization passes, interchangeable kernels, post
training quantization, latency-driven implementation search, an MFCC audio
frontend and a cached workflow runner."""

from .graph import (
    Graph,
    LayerNode,
    TensorDesc,
    WeightTensor,
    count_flops,
    count_params,
    infer_shapes,
    model_size_bytes,
    sparsity_report,
    validate,
)
from .netbuilder import ArchSpec, Candidate, ConvLayerSpec, build_network, build_preset, pareto_frontier
from .passes import CompileOptions, ExecutablePlan, compile_graph
from .executor import classify, default_assignment, execute, reference_execute
from .quantizer import QuantParams, calibrate, quantize, sensitivity_report
from .search import SearchConfig, brute_force, search
from .audio import import_dataset, load_wav, mfcc, wav_to_features
from .bench import BenchReport, benchmark, emit_report

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BenchReport", "Candidate", "CompileOptions", "ConvLayerSpec",
    "ExecutablePlan", "Graph", "LayerNode", "QuantParams", "SearchConfig",
    "TensorDesc", "WeightTensor", "benchmark", "brute_force", "build_network",
    "build_preset", "calibrate", "classify", "compile_graph", "count_flops",
    "count_params", "default_assignment", "emit_report", "execute",
    "import_dataset", "infer_shapes", "load_wav", "mfcc", "model_size_bytes",
    "pareto_frontier", "quantize", "reference_execute", "search",
    "sensitivity_report", "sparsity_report", "validate", "wav_to_features",
]
