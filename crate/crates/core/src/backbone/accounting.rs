//! Closed-form parameter and FLOP counts.
//!
//! Parameters, with `V` vocab, `C` context, `d` width, `f` feed-forward
//! width and `L` layers:
//!
//! ```text
//! embeddings      V·d + C·d
//! per block       4d² + 4d      attention projections and biases
//!                 2·d·f + f + d feed-forward
//!                 4d            two layer norms
//! final norm      2d
//! cloze head      d² + d + 2d + V
//! ```
//!
//! FLOPs count matrix products only, at `2·m·k·n` each. For `T` input
//! positions (soft prefix rows included) and `p` per-layer prefix rows:
//!
//! ```text
//! per block   2·T·d·d            query projection
//!             2·2·(T+p)·d·d      key and value projections
//!             2·T·(T+p)·d        scores, summed over heads
//!             2·T·(T+p)·d        attention-weighted values
//!             2·T·d·d            output projection
//!             2·2·T·d·f          feed-forward
//! head        2·T·d·d + 2·T·d·V  dense layer and vocabulary projection
//! ```

use super::TransformerConfig;

pub fn param_count(cfg: &TransformerConfig) -> usize {
    let (v, c, d, f, l) = (cfg.vocab_size, cfg.max_context, cfg.d_model, cfg.ff_dim, cfg.n_layers);
    let block = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d;
    v * d + c * d + l * block + 2 * d + d * d + d + 2 * d + v
}

/// FLOPs of a full-vocabulary forward pass over `seq_len` positions.
pub fn flop_count(cfg: &TransformerConfig, seq_len: usize) -> u64 {
    flop_count_prefixed(cfg, seq_len, 0)
}

/// Like [`flop_count`] with `prefix_len` extra key/value rows at every layer.
pub fn flop_count_prefixed(cfg: &TransformerConfig, seq_len: usize, prefix_len: usize) -> u64 {
    let (t, p) = (seq_len as u64, prefix_len as u64);
    let (d, f, v, l) = (cfg.d_model as u64, cfg.ff_dim as u64, cfg.vocab_size as u64, cfg.n_layers as u64);
    let kv = t + p;
    let block = 2 * t * d * d + 4 * kv * d * d + 4 * t * kv * d + 2 * t * d * d + 4 * t * d * f;
    l * block + 2 * t * d * d + 2 * t * d * v
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::{Backbone, PromptVars};
    use super::*;
    use crate::tensor::{init, Graph};

    #[test]
    fn embedding_table_example() {
        let cfg = TransformerConfig {
            vocab_size: 1000,
            ..Default::default()
        };
        let m = Backbone::new(cfg, crate::text::Vocabulary::from((0..1000).map(|i| format!("x{i}")).collect::<Vec<_>>()), 0).unwrap();
        assert_eq!(m.token_embeddings().len(), 64_000);
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for m in [tiny(), {
            let cfg = TransformerConfig::default();
            let vocab = crate::text::Vocabulary::from((0..cfg.vocab_size).map(|i| format!("x{i}")).collect::<Vec<_>>());
            Backbone::new(cfg, vocab, 0).unwrap()
        }] {
            let enumerated: usize = m.params().iter().map(|p| p.shape().iter().product::<usize>()).sum();
            assert_eq!(param_count(&m.config), enumerated);
        }
    }

    fn traced_flops(m: &Backbone, n: usize, input_k: usize, layer_k: usize) -> u64 {
        let g = Graph::new();
        let v = m.bind(&g);
        let d = m.config.d_model;
        let mut rng = init::rng(0);
        let prompts = PromptVars {
            input: (input_k > 0).then(|| g.input(init::normal(&mut rng, &[input_k, d], 1.0).into_data(), input_k, d, false)),
            layers: (layer_k > 0).then(|| {
                (0..m.config.n_layers)
                    .map(|_| g.input(init::normal(&mut rng, &[layer_k, d], 1.0).into_data(), layer_k, d, false))
                    .collect()
            }),
        };
        let ids: Vec<usize> = (0..n).map(|i| 4 + i % 5).collect();
        let h = m.encode(&g, &v, &ids, &prompts, None).unwrap();
        let before = g.matmul_flops();
        m.vocab_logits(&g, &v, h);
        assert!(g.matmul_flops() > before);
        g.matmul_flops()
    }

    #[test]
    fn flops_match_traced_graph() {
        let m = tiny();
        assert_eq!(flop_count(&m.config, 7), traced_flops(&m, 7, 0, 0));
        assert_eq!(flop_count(&m.config, 7 + 3), traced_flops(&m, 7, 3, 0));
        assert_eq!(flop_count_prefixed(&m.config, 7, 4), traced_flops(&m, 7, 0, 4));
    }

    #[test]
    fn soft_prefix_parity() {
        let cfg = TransformerConfig::default();
        assert_eq!(flop_count(&cfg, 30 + 20), flop_count(&cfg, 50));
    }
}
