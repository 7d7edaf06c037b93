//! The two classification heads.
//!
//! Global: score every label against the final [CLS] vector, optionally
//! through an affine(+tanh) pooler. Local: use each label embedding as a
//! query over the token vectors of one chosen layer; the attention-weighted
//! value summary is scored by a small MLP. The local head sees positions
//! 0..=T including [CLS]; padding is excluded by the mask.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Mask, Tape, Var};
use crate::numerics::tensor::Tensor;

// ── global head ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Pooler {
    pub weight: Tensor,
    pub bias: Tensor,
    pub tanh: bool,
}

#[derive(Clone, Debug)]
pub struct GlobalHead {
    /// Label embeddings, [L × d'] where d' is the pooler output width
    /// (= model dim without a pooler).
    pub e_global: Tensor,
    pub pooler: Option<Pooler>,
}

impl GlobalHead {
    pub fn init(
        num_labels: usize,
        model_dim: usize,
        pooler: Option<(usize, bool)>,
        seed: u64,
    ) -> Self {
        let out_dim = pooler.map_or(model_dim, |(d, _)| d);
        let std = 1.0 / (out_dim as f64).sqrt();
        let mut rng = Rng::substream(seed, "global.e", 0);
        GlobalHead {
            e_global: Tensor::randn(vec![num_labels, out_dim], std, &mut rng),
            pooler: pooler.map(|(d, tanh)| {
                let mut rng = Rng::substream(seed, "global.pooler.w", 0);
                Pooler {
                    weight: Tensor::randn(
                        vec![model_dim, d],
                        1.0 / (model_dim as f64).sqrt(),
                        &mut rng,
                    ),
                    bias: Tensor::zeros(vec![d]),
                    tanh,
                }
            }),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.e_global.shape()[0]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("global.e".to_owned(), &self.e_global)];
        if let Some(p) = &self.pooler {
            out.push(("global.pooler.w".to_owned(), &p.weight));
            out.push(("global.pooler.b".to_owned(), &p.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("global.e".to_owned(), &mut self.e_global)];
        if let Some(p) = &mut self.pooler {
            out.push(("global.pooler.w".to_owned(), &mut p.weight));
            out.push(("global.pooler.b".to_owned(), &mut p.bias));
        }
        out
    }

    pub fn bind(&self, tape: &Tape) -> GlobalHeadVars {
        GlobalHeadVars {
            e_global: tape.leaf(self.e_global.clone()),
            pooler: self.pooler.as_ref().map(|p| PoolerVars {
                weight: tape.leaf(p.weight.clone()),
                bias: tape.leaf(p.bias.clone()),
                tanh: p.tanh,
            }),
        }
    }
}

#[derive(Clone)]
pub struct PoolerVars {
    pub weight: Var,
    pub bias: Var,
    pub tanh: bool,
}

#[derive(Clone)]
pub struct GlobalHeadVars {
    pub e_global: Var,
    pub pooler: Option<PoolerVars>,
}

impl GlobalHeadVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.e_global.clone()];
        if let Some(p) = &self.pooler {
            out.push(p.weight.clone());
            out.push(p.bias.clone());
        }
        out
    }
}

/// z[b,l] = ⟨pool(h_cls[b]), e_global[l]⟩ for a [batch × d] block of final
/// [CLS] vectors. Probabilities are σ(z), taken by the caller.
pub fn global_logits(vars: &GlobalHeadVars, h_cls: &Var) -> Result<Var> {
    let pooled = match &vars.pooler {
        Some(p) => {
            let a = h_cls.matmul(&p.weight)?.add_bias(&p.bias)?;
            if p.tanh {
                a.tanh_act()
            } else {
                a
            }
        }
        None => h_cls.clone(),
    };
    pooled.matmul_nt(&vars.e_global)
}

// ── local head ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LocalHead {
    /// Key projection ψ_K: [d × d_a] weight and [d_a] bias.
    pub psi_k_w: Tensor,
    pub psi_k_b: Tensor,
    /// Value projection ψ_V: [d × d_v] weight and [d_v] bias.
    pub psi_v_w: Tensor,
    pub psi_v_b: Tensor,
    /// Label embeddings acting as attention queries, [L × d_a].
    pub e_local: Tensor,
    /// Scorer MLP: d_v → d_h → 1 with ReLU.
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    /// Attention temperature; smaller is sharper.
    pub tau: f64,
    /// Which encoder layer feeds this head.
    pub n_local: usize,
}

impl LocalHead {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        num_labels: usize,
        model_dim: usize,
        d_a: usize,
        d_v: usize,
        d_h: usize,
        tau: f64,
        n_local: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain {
                op: "LocalHead::init",
                msg: format!("temperature must be positive and finite, got {tau}"),
            });
        }
        let r = |name: &str, shape: Vec<usize>, fan_in: usize| {
            let mut rng = Rng::substream(seed, name, 0);
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
        };
        Ok(LocalHead {
            psi_k_w: r("local.psi_k.w", vec![model_dim, d_a], model_dim),
            psi_k_b: Tensor::zeros(vec![d_a]),
            psi_v_w: r("local.psi_v.w", vec![model_dim, d_v], model_dim),
            psi_v_b: Tensor::zeros(vec![d_v]),
            e_local: r("local.e", vec![num_labels, d_a], d_a),
            mlp_w1: r("local.mlp.w1", vec![d_v, d_h], d_v),
            mlp_b1: Tensor::zeros(vec![d_h]),
            mlp_w2: r("local.mlp.w2", vec![d_h, 1], d_h),
            mlp_b2: Tensor::zeros(vec![1]),
            tau,
            n_local,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.e_local.shape()[0]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("local.psi_k.w".to_owned(), &self.psi_k_w),
            ("local.psi_k.b".to_owned(), &self.psi_k_b),
            ("local.psi_v.w".to_owned(), &self.psi_v_w),
            ("local.psi_v.b".to_owned(), &self.psi_v_b),
            ("local.e".to_owned(), &self.e_local),
            ("local.mlp.w1".to_owned(), &self.mlp_w1),
            ("local.mlp.b1".to_owned(), &self.mlp_b1),
            ("local.mlp.w2".to_owned(), &self.mlp_w2),
            ("local.mlp.b2".to_owned(), &self.mlp_b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("local.psi_k.w".to_owned(), &mut self.psi_k_w),
            ("local.psi_k.b".to_owned(), &mut self.psi_k_b),
            ("local.psi_v.w".to_owned(), &mut self.psi_v_w),
            ("local.psi_v.b".to_owned(), &mut self.psi_v_b),
            ("local.e".to_owned(), &mut self.e_local),
            ("local.mlp.w1".to_owned(), &mut self.mlp_w1),
            ("local.mlp.b1".to_owned(), &mut self.mlp_b1),
            ("local.mlp.w2".to_owned(), &mut self.mlp_w2),
            ("local.mlp.b2".to_owned(), &mut self.mlp_b2),
        ]
    }

    pub fn bind(&self, tape: &Tape) -> LocalHeadVars {
        LocalHeadVars {
            psi_k_w: tape.leaf(self.psi_k_w.clone()),
            psi_k_b: tape.leaf(self.psi_k_b.clone()),
            psi_v_w: tape.leaf(self.psi_v_w.clone()),
            psi_v_b: tape.leaf(self.psi_v_b.clone()),
            e_local: tape.leaf(self.e_local.clone()),
            mlp_w1: tape.leaf(self.mlp_w1.clone()),
            mlp_b1: tape.leaf(self.mlp_b1.clone()),
            mlp_w2: tape.leaf(self.mlp_w2.clone()),
            mlp_b2: tape.leaf(self.mlp_b2.clone()),
            tau: self.tau,
        }
    }
}

#[derive(Clone)]
pub struct LocalHeadVars {
    pub psi_k_w: Var,
    pub psi_k_b: Var,
    pub psi_v_w: Var,
    pub psi_v_b: Var,
    pub e_local: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub tau: f64,
}

impl LocalHeadVars {
    pub fn ordered(&self) -> Vec<Var> {
        vec![
            self.psi_k_w.clone(),
            self.psi_k_b.clone(),
            self.psi_v_w.clone(),
            self.psi_v_b.clone(),
            self.e_local.clone(),
            self.mlp_w1.clone(),
            self.mlp_b1.clone(),
            self.mlp_w2.clone(),
            self.mlp_b2.clone(),
        ]
    }
}

/// α[b,l,i] ∝ exp(⟨ψ_K(h_i), e_local[l]⟩ / τ) over unmasked positions i.
/// `h_local` is a [batch·seq × d] layer output.
pub fn label_attention(
    vars: &LocalHeadVars,
    h_local: &Var,
    mask: &Mask,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let d_a = vars.psi_k_b.shape()[0];
    let keys = h_local.matmul(&vars.psi_k_w)?.add_bias(&vars.psi_k_b)?;
    let keys3 = keys.reshape(vec![batch, seq, d_a])?;
    let scores = vars.e_local.bmm_broadcast_nt(&keys3)?; // [batch, L, seq]
    scores.softmax_masked(mask, vars.tau)
}

/// Local logits: v[b,l] = Σ_i α[b,l,i]·ψ_V(h_i), scored by the MLP.
/// Returns (logits [batch × L], attention [batch × L × seq]).
pub fn local_logits(
    vars: &LocalHeadVars,
    h_local: &Var,
    mask: &Mask,
    batch: usize,
    seq: usize,
) -> Result<(Var, Var)> {
    let alpha = label_attention(vars, h_local, mask, batch, seq)?;
    let num_labels = vars.e_local.shape()[0];
    let d_v = vars.psi_v_b.shape()[0];
    let values = h_local.matmul(&vars.psi_v_w)?.add_bias(&vars.psi_v_b)?;
    let values3 = values.reshape(vec![batch, seq, d_v])?;
    let v = alpha.bmm(&values3)?; // [batch, L, d_v]
    let flat = v.reshape(vec![batch * num_labels, d_v])?;
    let hidden = flat.matmul(&vars.mlp_w1)?.add_bias(&vars.mlp_b1)?.relu();
    let scored = hidden.matmul(&vars.mlp_w2)?.add_bias(&vars.mlp_b2)?;
    let logits = scored.reshape(vec![batch, num_labels])?;
    Ok((logits, alpha))
}

/// Materialized attention weights for inspection and dumps.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    /// [batch × L × seq]
    pub alpha: Tensor,
    pub mask: Mask,
}

impl AttentionMap {
    pub fn new(alpha: Tensor, mask: Mask) -> Result<Self> {
        let s = alpha.shape();
        if s.len() != 3 || s[0] != mask.rows() || s[2] != mask.cols() {
            return Err(Error::Dimension {
                op: "AttentionMap::new",
                lhs: s.to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        Ok(AttentionMap { alpha, mask })
    }

    pub fn weight(&self, doc: usize, label: usize, pos: usize) -> f64 {
        self.alpha.get3(doc, label, pos)
    }

    /// `doc_id<TAB>label_id<TAB>position<TAB>weight` lines, unmasked
    /// positions only; doc ids start at `doc_offset`.
    pub fn to_tsv(&self, doc_offset: usize) -> String {
        let [batch, labels, seq] = *self.alpha.shape() else {
            unreachable!("validated 3-d in constructor");
        };
        let mut out = String::new();
        for b in 0..batch {
            for l in 0..labels {
                for i in 0..seq {
                    if self.mask.row(b)[i] {
                        out.push_str(&format!(
                            "{}\t{l}\t{i}\t{:.6}\n",
                            doc_offset + b,
                            self.alpha.get3(b, l, i)
                        ));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;

    fn full_mask(batch: usize, seq: usize) -> Mask {
        Mask::full(batch, seq)
    }

    // ── global head ──────────────────────────────────────────────────

    #[test]
    fn global_zero_embeddings_give_zero_logits() {
        let mut head = GlobalHead::init(3, 4, None, 5);
        head.e_global = Tensor::zeros(vec![3, 4]);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::full(vec![2, 4], 0.7));
        let z = global_logits(&vars, &h).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        let p = z.sigmoid();
        assert!(p.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn global_logit_is_the_dot_product() {
        let mut head = GlobalHead::init(1, 2, None, 5);
        head.e_global = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let z = global_logits(&vars, &h).unwrap();
        assert_eq!(z.value().item(), 3.0);
    }

    #[test]
    fn global_matches_per_label_dot_loop() {
        let mut rng = Rng::new(33);
        let head = GlobalHead::init(5, 6, None, 33);
        let h = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let z = global_logits(&vars, &tape.leaf(h.clone())).unwrap();
        for b in 0..3 {
            for l in 0..5 {
                let want: f64 = (0..6)
                    .map(|c| h.get2(b, c) * head.e_global.get2(l, c))
                    .sum();
                assert!((z.value().get2(b, l) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_pooler_applies_affine_and_tanh() {
        let head = GlobalHead::init(4, 6, Some((3, true)), 9);
        assert_eq!(head.e_global.shape(), [4, 3]);
        let p = head.pooler.as_ref().unwrap();
        assert_eq!(p.weight.shape(), [6, 3]);
        let mut rng = Rng::new(1);
        let h = Tensor::randn(vec![2, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let z = global_logits(&vars, &tape.leaf(h.clone())).unwrap();
        for b in 0..2 {
            for l in 0..4 {
                let mut want = 0.0;
                for j in 0..3 {
                    let mut a = p.bias.data()[j];
                    for c in 0..6 {
                        a += h.get2(b, c) * p.weight.get2(c, j);
                    }
                    want += a.tanh() * head.e_global.get2(l, j);
                }
                assert!((z.value().get2(b, l) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_dimension_mismatch_is_an_error() {
        let head = GlobalHead::init(3, 4, None, 5);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::zeros(vec![2, 5]));
        assert!(matches!(
            global_logits(&vars, &h),
            Err(Error::Dimension { .. })
        ));
    }

    // ── local head ───────────────────────────────────────────────────

    fn identity_key_head(num_labels: usize, tau: f64) -> LocalHead {
        // d = d_a = d_v = 1 with ψ_K = ψ_V = identity: scores are the raw
        // hidden values times the label embedding.
        let mut head = LocalHead::init(num_labels, 1, 1, 1, 2, tau, 0, 7).unwrap();
        head.psi_k_w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        head.psi_k_b = Tensor::zeros(vec![1]);
        head.psi_v_w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        head.psi_v_b = Tensor::zeros(vec![1]);
        head.e_local = Tensor::full(vec![num_labels, 1], 1.0);
        head
    }

    #[test]
    fn zero_label_embedding_attends_uniformly() {
        let mut head = identity_key_head(2, 1.0);
        head.e_local = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::new(vec![4, 1], vec![5.0, -2.0, 0.4, 9.0]).unwrap());
        let mask = Mask::new(1, 4, vec![true, true, true, false]).unwrap();
        let alpha = label_attention(&vars, &h, &mask, 1, 4).unwrap();
        let v = alpha.value();
        for i in 0..3 {
            assert!((v.get3(0, 0, i) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(v.get3(0, 0, 3), 0.0);
        // the non-zero label row is *not* uniform
        assert!((v.get3(0, 1, 0) - 1.0 / 3.0).abs() > 0.1);
    }

    #[test]
    fn two_position_closed_form() {
        // scores (0, ln 3) at tau 1 → α = (0.25, 0.75)
        let head = identity_key_head(1, 1.0);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::new(vec![2, 1], vec![0.0, 3.0f64.ln()]).unwrap());
        let alpha = label_attention(&vars, &h, &full_mask(1, 2), 1, 2).unwrap();
        assert!((alpha.value().get3(0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((alpha.value().get3(0, 0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let head = identity_key_head(1, 0.01);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::new(vec![3, 1], vec![0.1, 0.9, 0.5]).unwrap());
        let alpha = label_attention(&vars, &h, &full_mask(1, 3), 1, 3).unwrap();
        assert!(alpha.value().get3(0, 0, 1) >= 1.0 - 1e-8);
    }

    #[test]
    fn all_masked_document_is_degenerate() {
        let head = identity_key_head(1, 1.0);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::zeros(vec![2, 1]));
        let mask = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            label_attention(&vars, &h, &mask, 1, 2),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn one_hot_attention_copies_the_value_row() {
        // tau 1e-3 with a clear score gap puts all mass on the argmax, so
        // v equals ψ_V at that position.
        let mut head = identity_key_head(1, 1e-3);
        head.mlp_w1 = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        head.mlp_w2 = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::new(vec![3, 1], vec![0.2, 1.4, -0.6]).unwrap());
        let (_, alpha) = local_logits(&vars, &h, &full_mask(1, 3), 1, 3).unwrap();
        assert!(alpha.value().get3(0, 0, 1) >= 1.0 - 1e-12);
        // reconstruct v = Σ α·value = h[1] here
        let v: f64 = (0..3)
            .map(|i| alpha.value().get3(0, 0, i) * h.value().get2(i, 0))
            .sum();
        assert!((v - 1.4).abs() < 1e-8);
    }

    #[test]
    fn zero_final_mlp_layer_outputs_its_bias() {
        let mut head = LocalHead::init(3, 2, 2, 2, 4, 1.0, 0, 77).unwrap();
        head.mlp_w2 = Tensor::zeros(vec![4, 1]);
        head.mlp_b2 = Tensor::new(vec![1], vec![0.37]).unwrap();
        let mut rng = Rng::new(2);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::randn(vec![6, 2], 1.0, &mut rng));
        let (logits, _) = local_logits(&vars, &h, &full_mask(2, 3), 2, 3).unwrap();
        for &z in logits.value().data() {
            assert!((z - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_shapes_match_a_nested_loop_oracle() {
        let (batch, seq, labels, d) = (1usize, 3usize, 2usize, 2usize);
        let head = LocalHead::init(labels, d, d, d, d, 0.9, 0, 123).unwrap();
        let mut rng = Rng::new(55);
        let h = Tensor::randn(vec![batch * seq, d], 1.0, &mut rng);
        let mask = Mask::new(1, 3, vec![true, true, false]).unwrap();

        let tape = Tape::new();
        let vars = head.bind(&tape);
        let (logits, alpha) = local_logits(&vars, &tape.leaf(h.clone()), &mask, batch, seq).unwrap();

        // brute force with scalar loops
        let key = |i: usize, a: usize| -> f64 {
            (0..d).map(|c| h.get2(i, c) * head.psi_k_w.get2(c, a)).sum::<f64>()
                + head.psi_k_b.data()[a]
        };
        let val = |i: usize, a: usize| -> f64 {
            (0..d).map(|c| h.get2(i, c) * head.psi_v_w.get2(c, a)).sum::<f64>()
                + head.psi_v_b.data()[a]
        };
        for l in 0..labels {
            let score = |i: usize| -> f64 {
                (0..d).map(|a| key(i, a) * head.e_local.get2(l, a)).sum()
            };
            let m = score(0).max(score(1));
            let e0 = ((score(0) - m) / 0.9).exp();
            let e1 = ((score(1) - m) / 0.9).exp();
            let z = e0 + e1;
            let want = [e0 / z, e1 / z, 0.0];
            for i in 0..seq {
                assert!(
                    (alpha.value().get3(0, l, i) - want[i]).abs() < 1e-12,
                    "alpha({l},{i})"
                );
            }
            let v: Vec<f64> = (0..d)
                .map(|a| want[0] * val(0, a) + want[1] * val(1, a))
                .collect();
            let mut hid = vec![0.0; d];
            for (j, hj) in hid.iter_mut().enumerate() {
                let mut s = head.mlp_b1.data()[j];
                for (a, va) in v.iter().enumerate() {
                    s += va * head.mlp_w1.get2(a, j);
                }
                *hj = s.max(0.0);
            }
            let mut out = head.mlp_b2.data()[0];
            for (j, hj) in hid.iter().enumerate() {
                out += hj * head.mlp_w2.get2(j, 0);
            }
            assert!(
                (logits.value().get2(0, l) - out).abs() < 1e-12,
                "logit for label {l}"
            );
        }
    }

    #[test]
    fn attention_rows_are_stochastic_and_masked_entries_zero() {
        let head = LocalHead::init(4, 3, 3, 3, 3, 0.7, 0, 321).unwrap();
        let mut rng = Rng::new(8);
        let tape = Tape::new();
        let vars = head.bind(&tape);
        let h = tape.leaf(Tensor::randn(vec![2 * 4, 3], 1.0, &mut rng));
        let mask = Mask::new(
            2,
            4,
            vec![true, true, true, false, true, true, false, false],
        )
        .unwrap();
        let alpha = label_attention(&vars, &h, &mask, 2, 4).unwrap();
        let map = AttentionMap::new(alpha.value(), mask.clone()).unwrap();
        for b in 0..2 {
            for l in 0..4 {
                let mut sum = 0.0;
                for i in 0..4 {
                    let w = map.weight(b, l, i);
                    assert!((0.0..=1.0).contains(&w));
                    if !mask.row(b)[i] {
                        assert_eq!(w, 0.0);
                    }
                    sum += w;
                }
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        // dump format: doc, label, position, weight for unmasked cells only
        let tsv = map.to_tsv(10);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 2 * 4 * 4 - 4 - 8); // minus masked cells
        assert!(lines[0].starts_with("10\t0\t0\t"));
    }

    #[test]
    fn attention_entropy_is_monotone_in_temperature() {
        let scores = [0.5, -1.0, 2.0, 0.0];
        let mut last = -1.0;
        for tau in [0.05, 0.2, 1.0, 5.0, 50.0] {
            let head = identity_key_head(1, tau);
            let tape = Tape::new();
            let vars = head.bind(&tape);
            let h = tape.leaf(Tensor::new(vec![4, 1], scores.to_vec()).unwrap());
            let alpha = label_attention(&vars, &h, &full_mask(1, 4), 1, 4).unwrap();
            let entropy: f64 = alpha
                .value()
                .data()
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            assert!(
                entropy >= last - 1e-12,
                "entropy decreased at tau {tau}: {entropy} < {last}"
            );
            last = entropy;
        }
    }

    #[test]
    fn padding_invariance_of_both_heads() {
        let d = 3;
        let head = LocalHead::init(4, d, d, d, d, 0.8, 0, 11).unwrap();
        let ghead = GlobalHead::init(4, d, None, 11);
        let mut rng = Rng::new(14);
        let content = Tensor::randn(vec![2, d], 1.0, &mut rng);
        let garbage = Tensor::randn(vec![2, d], 9.0, &mut rng);

        let run = |rows: &Tensor, seq: usize, real: usize| {
            let tape = Tape::new();
            let vars = head.bind(&tape);
            let gvars = ghead.bind(&tape);
            let mut mdata = vec![false; seq];
            for m in mdata.iter_mut().take(real) {
                *m = true;
            }
            let mask = Mask::new(1, seq, mdata).unwrap();
            let h = tape.leaf(rows.clone());
            let (logits, _) = local_logits(&vars, &h, &mask, 1, seq).unwrap();
            let cls = h.select_rows(&[0]).unwrap();
            let g = global_logits(&gvars, &cls).unwrap();
            (logits.value(), g.value())
        };

        let (short_l, short_g) = run(&content, 2, 2);
        let padded = Tensor::new(
            vec![4, d],
            content
                .data()
                .iter()
                .chain(garbage.data())
                .copied()
                .collect(),
        )
        .unwrap();
        let (long_l, long_g) = run(&padded, 4, 2);
        assert!(short_l.max_abs_diff(&long_l) <= 1e-9);
        assert!(short_g.max_abs_diff(&long_g) <= 1e-9);
    }

    #[test]
    fn permuting_content_positions_permutes_alpha_and_preserves_v() {
        let d = 3;
        let head = LocalHead::init(2, d, d, d, d, 0.6, 0, 19).unwrap();
        let mut rng = Rng::new(3);
        let rows = Tensor::randn(vec![4, d], 1.0, &mut rng);
        let perm = [0usize, 3, 1, 2]; // keep CLS, rotate content

        let run = |t: &Tensor| {
            let tape = Tape::new();
            let vars = head.bind(&tape);
            let h = tape.leaf(t.clone());
            local_logits(&vars, &h, &full_mask(1, 4), 1, 4).unwrap()
        };
        let (logits_a, alpha_a) = run(&rows);
        let permuted = Tensor::new(
            vec![4, d],
            perm.iter().flat_map(|&i| rows.row(i).to_vec()).collect(),
        )
        .unwrap();
        let (logits_b, alpha_b) = run(&permuted);

        for l in 0..2 {
            for (new_pos, &old_pos) in perm.iter().enumerate() {
                assert!(
                    (alpha_a.value().get3(0, l, old_pos)
                        - alpha_b.value().get3(0, l, new_pos))
                    .abs()
                        < 1e-12
                );
            }
        }
        assert!(logits_a.value().max_abs_diff(&logits_b.value()) <= 1e-12);
    }

    #[test]
    fn both_heads_pass_gradcheck() {
        let d = 3;
        let head = LocalHead::init(2, d, d, d, d, 0.8, 0, 501).unwrap();
        let ghead = GlobalHead::init(2, d, Some((2, true)), 502);
        let mut rng = Rng::new(6);
        let h = Tensor::randn(vec![2 * 3, d], 1.0, &mut rng);
        let mask = Mask::new(2, 3, vec![true, true, false, true, true, true]).unwrap();
        let targets = Tensor::new(
            vec![2, 2],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();

        let mut tensors: Vec<Tensor> = head
            .named_tensors()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();
        for (_, t) in ghead.named_tensors() {
            tensors.push(t.clone());
        }
        tensors.push(h.clone());

        let report = check_gradients(
            |_, vars| {
                let lv = LocalHeadVars {
                    psi_k_w: vars[0].clone(),
                    psi_k_b: vars[1].clone(),
                    psi_v_w: vars[2].clone(),
                    psi_v_b: vars[3].clone(),
                    e_local: vars[4].clone(),
                    mlp_w1: vars[5].clone(),
                    mlp_b1: vars[6].clone(),
                    mlp_w2: vars[7].clone(),
                    mlp_b2: vars[8].clone(),
                    tau: head.tau,
                };
                let gv = GlobalHeadVars {
                    e_global: vars[9].clone(),
                    pooler: Some(PoolerVars {
                        weight: vars[10].clone(),
                        bias: vars[11].clone(),
                        tanh: true,
                    }),
                };
                let hv = &vars[12];
                let (local, _) = local_logits(&lv, hv, &mask, 2, 3)?;
                let cls = hv.select_rows(&[0, 3])?;
                let global = global_logits(&gv, &cls)?;
                let ll = local.bce_with_logits(&targets)?;
                let lg = global.bce_with_logits(&targets)?;
                ll.add(&lg)
            },
            &tensors,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "worst {:?}", report.worst);
    }
}
