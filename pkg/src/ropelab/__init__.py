"""ropelab: bfloat16 effects on rotary attention, plus masks for packed documents."""

from .attention import (
    AttentionStack,
    LayerWeights,
    first_column_logits,
    forward_logits,
    gaussian_inputs,
    init_random,
    load_weights,
    project_inputs,
    save_weights,
    softmax_scores,
)
from .diagnostics import (
    DiffConfig,
    DiffReport,
    length_sweep,
    logit_diff_first_token,
    per_token_diff,
    score_diff_D,
    shift_sweep,
)
from .masks import (
    AttentionPlan,
    BatchLayout,
    MaskScheme,
    Role,
    Token,
    compile_plan,
    enumerate_pairs,
    interleave_chunks,
    layout_from_lengths,
    pack_documents,
    pair_cost_ratio,
    render_ascii,
)
from .precision import (
    EXACT,
    F32,
    FA2_BF16,
    Bf16Word,
    PrecisionPolicy,
    decode_bf16,
    encode_bf16,
    round_along_policy,
    round_bf16,
)
from .rope import PositionShift, RotaryConfig, make_rotary_config, rope_logit, rotate

__version__ = "0.1.0"
