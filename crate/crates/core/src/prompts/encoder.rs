//! Small trainable encoders that map `m` embedded tokens to `k` prompt rows.
//!
//! - CNN: three blocks of width-3 convolution (same padding), relu and max
//!   pooling (window 2, stride 1), then adaptive max pooling onto `k` rows
//!   and a linear map `h → d`.
//! - RNN: three stacked LSTM layers, the last `k` top-layer states
//!   (left-padded with zero rows when `m < k`), then linear layers
//!   `h → h → h → d` with relu between them.
//! - MLP: a position-wise `d_p → h → h → d` network with relu, then adaptive
//!   max pooling onto `k` rows.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::init::{self, SeedRng};
use crate::tensor::{pool_windows, Graph, Parameter, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Cnn,
    #[serde(alias = "lstm")]
    Rnn,
    Mlp,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cnn => "cnn",
            Self::Rnn => "rnn",
            Self::Mlp => "mlp",
        })
    }
}

const KERNEL: usize = 3;
const LAYERS: usize = 3;

/// Shape of one encoder instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub kind: EncoderKind,
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub k: usize,
}

impl EncoderShape {
    /// `(name, rows, cols)` of every weight, in a fixed order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (d_in, h, d) = (self.d_in, self.hidden, self.d_out);
        let p = |s: String| format!("prompt.encoder.{s}");
        let mut out = Vec::new();
        match self.kind {
            EncoderKind::Cnn => {
                for i in 0..LAYERS {
                    let c_in = if i == 0 { d_in } else { h };
                    out.push((p(format!("conv{i}.w")), KERNEL * c_in, h));
                    out.push((p(format!("conv{i}.b")), 1, h));
                }
                out.push((p("out.w".into()), h, d));
                out.push((p("out.b".into()), 1, d));
            }
            EncoderKind::Rnn => {
                for i in 0..LAYERS {
                    let c_in = if i == 0 { d_in } else { h };
                    out.push((p(format!("lstm{i}.wx")), c_in, 4 * h));
                    out.push((p(format!("lstm{i}.wh")), h, 4 * h));
                    out.push((p(format!("lstm{i}.b")), 1, 4 * h));
                }
                for i in 0..LAYERS {
                    let c_out = if i + 1 == LAYERS { d } else { h };
                    out.push((p(format!("fc{i}.w")), h, c_out));
                    out.push((p(format!("fc{i}.b")), 1, c_out));
                }
            }
            EncoderKind::Mlp => {
                for i in 0..LAYERS {
                    let c_in = if i == 0 { d_in } else { h };
                    let c_out = if i + 1 == LAYERS { d } else { h };
                    out.push((p(format!("fc{i}.w")), c_in, c_out));
                    out.push((p(format!("fc{i}.b")), 1, c_out));
                }
            }
        }
        out
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (d_in, h, d) = (self.d_in, self.hidden, self.d_out);
        match self.kind {
            EncoderKind::Cnn => KERNEL * d_in * h + h + 2 * (KERNEL * h * h + h) + h * d + d,
            EncoderKind::Rnn => {
                let lstm = |c_in: usize| 4 * h * (c_in + h) + 4 * h;
                lstm(d_in) + 2 * lstm(h) + 2 * (h * h + h) + h * d + d
            }
            EncoderKind::Mlp => d_in * h + h + h * h + h + h * d + d,
        }
    }

    /// Matmul FLOPs for encoding `m` tokens.
    pub fn flop_count(&self, m: usize) -> u64 {
        let (d_in, h, d, k) = (self.d_in as u64, self.hidden as u64, self.d_out as u64, self.k as u64);
        let kk = KERNEL as u64;
        match self.kind {
            EncoderKind::Cnn => {
                let mut len = m;
                let mut total = 0;
                for i in 0..LAYERS {
                    let c_in = if i == 0 { d_in } else { h };
                    total += 2 * len as u64 * kk * c_in * h;
                    len = pool_windows(len, 2, 1).len();
                }
                total + 2 * k * h * d
            }
            EncoderKind::Rnn => {
                let m = m as u64;
                let steps = 2 * m * d_in * 4 * h + 2 * m * h * 4 * h + 2 * (2 * m * h * 4 * h + 2 * m * h * 4 * h);
                steps + 2 * (2 * k * h * h) + 2 * k * h * d
            }
            EncoderKind::Mlp => 2 * m as u64 * (d_in * h + h * h + h * d),
        }
    }

    pub fn init(&self, rng: &mut SeedRng) -> Vec<Parameter> {
        self.layout()
            .into_iter()
            .scan(0, |fan_in, (name, rows, cols)| {
                // biases share the fan-in of the weight before them
                let t = if name.ends_with(".b") {
                    init::fan_in_uniform(rng, &[cols], *fan_in)
                } else {
                    *fan_in = rows;
                    init::fan_in_uniform(rng, &[rows, cols], rows)
                };
                Some(Parameter::new(name, t))
            })
            .collect()
    }

    /// Encodes `x` (`m × d_in`) into `k × d_out` rows. `w` yields the graph
    /// handles of the weights in [`EncoderShape::layout`] order.
    pub fn forward<'a>(&self, g: &Graph<'a>, w: &[Var], x: Var) -> Var {
        assert_eq!(w.len(), self.layout().len());
        let k = self.k;
        match self.kind {
            EncoderKind::Cnn => {
                let mut h = x;
                for i in 0..LAYERS {
                    h = g.relu(g.conv1d(h, w[2 * i], w[2 * i + 1], KERNEL, KERNEL / 2));
                    h = g.max_pool1d(h, 2, 1);
                }
                let pooled = g.adaptive_max_pool(h, k);
                g.linear(pooled, w[6], w[7])
            }
            EncoderKind::Rnn => {
                let hd = self.hidden;
                let mut seq: Vec<Var> = (0..x.rows()).map(|t| g.slice_rows(x, t, 1)).collect();
                for l in 0..LAYERS {
                    let (wx, wh, b) = (w[3 * l], w[3 * l + 1], w[3 * l + 2]);
                    let mut h = g.constant(vec![0.0; hd], 1, hd);
                    let mut c = g.constant(vec![0.0; hd], 1, hd);
                    let mut out = Vec::with_capacity(seq.len());
                    for &xt in &seq {
                        (h, c) = g.lstm_cell(xt, h, c, wx, wh, b);
                        out.push(h);
                    }
                    seq = out;
                }
                let m = seq.len();
                let mut rows: Vec<Var> = Vec::with_capacity(k);
                if m < k {
                    rows.push(g.constant(vec![0.0; (k - m) * hd], k - m, hd));
                }
                rows.extend_from_slice(&seq[m.saturating_sub(k)..]);
                let mut h = g.concat_rows(&rows);
                for i in 0..LAYERS {
                    h = g.linear(h, w[9 + 2 * i], w[10 + 2 * i]);
                    if i + 1 < LAYERS {
                        h = g.relu(h);
                    }
                }
                h
            }
            EncoderKind::Mlp => {
                let h = g.relu(g.linear(x, w[0], w[1]));
                let h = g.relu(g.linear(h, w[2], w[3]));
                let h = g.linear(h, w[4], w[5]);
                g.adaptive_max_pool(h, k)
            }
        }
    }
}

/// Largest hidden width whose parameter count stays within `budget`; at
/// least 1.
pub fn size_hidden(kind: EncoderKind, d_in: usize, d_out: usize, k: usize, budget: usize) -> usize {
    let count = |hidden| EncoderShape { kind, d_in, hidden, d_out, k }.param_count();
    let mut h = 1;
    while count(h + 1) <= budget {
        h += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes() -> Vec<EncoderShape> {
        [EncoderKind::Cnn, EncoderKind::Rnn, EncoderKind::Mlp]
            .into_iter()
            .map(|kind| EncoderShape { kind, d_in: 6, hidden: 4, d_out: 5, k: 3 })
            .collect()
    }

    #[test]
    fn count_matches_layout() {
        for s in shapes() {
            let enumerated: usize = s.layout().iter().map(|(_, r, c)| r * c).sum();
            assert_eq!(s.param_count(), enumerated, "{:?}", s.kind);
        }
    }

    #[test]
    fn output_rows_and_traced_flops() {
        for s in shapes() {
            let params = s.init(&mut init::rng(2));
            for m in [1, 2, 3, 7] {
                let g = Graph::new();
                let w: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
                let x = g.input(init::normal(&mut init::rng(m as u64), &[m, 6], 1.0).into_data(), m, 6, false);
                let before = g.matmul_flops();
                let out = s.forward(&g, &w, x);
                assert_eq!(out.shape(), [3, 5], "{:?} m={m}", s.kind);
                assert_eq!(g.matmul_flops() - before, s.flop_count(m), "{:?} m={m}", s.kind);
            }
        }
    }

    #[test]
    fn sizing_respects_budget() {
        for kind in [EncoderKind::Cnn, EncoderKind::Rnn, EncoderKind::Mlp] {
            let h = size_hidden(kind, 64, 64, 20, 1753);
            let count = |hidden| EncoderShape { kind, d_in: 64, hidden, d_out: 64, k: 20 }.param_count();
            assert!(count(h) <= 1753 || h == 1);
            assert!(count(h + 1) > 1753);
        }
    }

    #[test]
    fn serde_names() {
        assert_eq!(serde_json::from_str::<EncoderKind>("\"lstm\"").unwrap(), EncoderKind::Rnn);
        assert_eq!(serde_json::to_string(&EncoderKind::Cnn).unwrap(), "\"cnn\"");
    }
}
