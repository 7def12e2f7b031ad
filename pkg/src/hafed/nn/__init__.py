from hafed.nn.model import (
    AlignedBatch,
    ArchSpec,
    HAFedformer,
    SeqBatch,
    add_positional_encoding,
    backward,
    decoder_forward,
    encoder_stack_forward,
    fuse_embeddings,
    init_params,
    layout,
    make_aligned_batch,
    make_seq_batch,
    model_forward,
    param_count,
    stack_layers,
    stem_forward,
)
