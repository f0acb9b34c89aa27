//! Prefix perplexity, length extrapolation, per-position curves, attention
//! locality and pooling, greedy decoding.

mod attention;
mod decode;
mod scoring;

pub use attention::{
    locality_metric, mean_attention, pool_attention, read_attention_dump, write_attention_dump, AttentionStats,
    AttnMatrix, PooledGrid, LOCALITY_WINDOW, POOL_SIZE,
};
pub use decode::{argmax, greedy_decode, greedy_loop, ModelDecoder, NextLogits};
pub use scoring::{
    extrapolation_sweep, mean_domain_ppl, per_position_logprob, prefix_ppl, read_records, score_suffix, suffix_nll,
    write_records, EvalRecord, NllTotal, RecordMeta, SuffixScore, EVAL_HEADER,
};

#[cfg(test)]
mod tests;
