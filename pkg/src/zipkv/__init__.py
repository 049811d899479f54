"""Mixed-precision KV-cache compression: quantizers, saliency, cache and replay harness."""

from .attention import TiledAttnConfig, attention_decode, attention_full, attention_tiled, probe_attention
from .cache import (CacheConfig, CompressionReport, MixedCache, Scheme, append_decode, compress_prefill,
                    compression_report, materialize, maybe_recompress, record_probe_row)
from .core import AttnMatrix, Tensor4, Trace, load_trace, save_trace, synth_trace, trace_digest
from .harness import PolicyReport, run_compare, run_policy
from .policies import PolicyConfig
from .quantizers import (QuantizedBlock, QuantParams, cst_quantize, dequantize, dequantize_block, param_budget,
                         quantize_matrix, quantize_uniform)
from .saliency import (Partition, ProbeConfig, SaliencyVector, accumulated_scores, normalized_scores,
                       select_probes, select_salient)

__version__ = "0.1.0"
