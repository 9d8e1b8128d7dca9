"""Quantization-aware low-rank adaptation at desk scale.

Group-wise low-bit quantization of frozen weights, pooled low-rank adapters
trained against the quantized base, and a lossless merge of those adapters
into the quantized zero points.
"""

from .adapter import (
    AdapterPair,
    DenseLayer,
    QuantLinearLayer,
    count_adapter_params,
    effective_delta,
    lora_forward,
    lora_merge,
    merge,
    qalora_backward,
    qalora_forward,
)
from .numkit import group_sum_pool, matmul, numeric_rank
from .quant import (
    QuantizedMatrix,
    dequantize,
    pack_codes,
    quantize_groupwise,
    quantize_minmax,
    rtn_requantize,
    unpack_codes,
)
from .training import (
    Dataset,
    ToyModel,
    TrainConfig,
    evaluate,
    init_adapters,
    pipeline_lora_ptq,
    pipeline_qalora,
    train_qalora,
)

__version__ = "0.1.0"
