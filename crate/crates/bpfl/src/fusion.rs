//! Weighted fusion of global and local features.
//!
//! The global feature is projected to the local channel width, combined with
//! the local feature through a per-channel two-way softmax, and the fused
//! result is projected back to the global width for the global head. Both
//! projections are dense affine maps, personalized per client and never
//! aggregated: their shapes depend on the client's local feature width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{dense_forward, Bindings, ParamSet};
use crate::tensor::Tensor;

/// Dimension-matching projections: `up` maps global width G to local width C,
/// `down` maps C back to G. Parameter names are `w` / `b` inside each set.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProjection {
    pub up: ParamSet,
    pub down: ParamSet,
    pub global_dim: usize,
    pub local_dim: usize,
}

fn affine_set(in_dim: usize, out_dim: usize, mut fill: impl FnMut(usize, usize) -> f64) -> ParamSet {
    let mut w = vec![0.0; in_dim * out_dim];
    for i in 0..in_dim {
        for j in 0..out_dim {
            w[i * out_dim + j] = fill(i, j);
        }
    }
    let mut set = ParamSet::new();
    set.insert("w", Tensor::matrix(in_dim, out_dim, w).expect("finite init"), true)
        .expect("fresh set");
    set.insert("b", Tensor::zeros(vec![out_dim]), true).expect("fresh set");
    set
}

impl FusionProjection {
    /// Exact identity on the leading `min(G, C)` square, zeros elsewhere.
    pub fn identity(global_dim: usize, local_dim: usize) -> Self {
        let diag = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
        FusionProjection {
            up: affine_set(global_dim, local_dim, diag),
            down: affine_set(local_dim, global_dim, diag),
            global_dim,
            local_dim,
        }
    }

    /// Identity-padded with small uniform noise off the diagonal, so round-0
    /// fusion starts close to a pass-through.
    pub fn seeded(global_dim: usize, local_dim: usize, rng: &mut impl Rng) -> Self {
        const NOISE: f64 = 0.05;
        let mut noisy_diag = |i: usize, j: usize| {
            if i == j {
                1.0
            } else {
                rng.gen_range(-NOISE..NOISE)
            }
        };
        let up = affine_set(global_dim, local_dim, &mut noisy_diag);
        let down = affine_set(local_dim, global_dim, &mut noisy_diag);
        FusionProjection {
            up,
            down,
            global_dim,
            local_dim,
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.up.set_trainable(trainable);
        self.down.set_trainable(trainable);
    }

    pub fn element_count(&self) -> usize {
        self.up.element_count() + self.down.element_count()
    }

    /// Projects the global feature to the local width (affine map G -> C).
    pub fn resample_global(&self, x_g: &Tensor) -> Result<Tensor> {
        let (_, g) = x_g.dims2()?;
        if g != self.global_dim {
            return Err(Error::Shape(format!(
                "global feature width {g} does not match projection input {}",
                self.global_dim
            )));
        }
        dense_forward(x_g, &self.up.get("w")?.value, &self.up.get("b")?.value)
    }

    /// Projects the fused feature back to the global width (C -> G).
    pub fn resample_fused(&self, x_lf: &Tensor) -> Result<Tensor> {
        let (_, c) = x_lf.dims2()?;
        if c != self.local_dim {
            return Err(Error::Shape(format!(
                "fused feature width {c} does not match projection input {}",
                self.local_dim
            )));
        }
        dense_forward(x_lf, &self.down.get("w")?.value, &self.down.get("b")?.value)
    }

    /// Tape version of `resample_global`.
    pub fn resample_global_graph(
        &self,
        g: &mut Graph,
        x_g: NodeId,
        prefix: &str,
        binds: &mut Bindings,
    ) -> Result<NodeId> {
        affine_graph(g, &self.up, &format!("{prefix}.up"), x_g, binds)
    }

    /// Tape version of `resample_fused`.
    pub fn resample_fused_graph(
        &self,
        g: &mut Graph,
        x_lf: NodeId,
        prefix: &str,
        binds: &mut Bindings,
    ) -> Result<NodeId> {
        affine_graph(g, &self.down, &format!("{prefix}.down"), x_lf, binds)
    }
}

fn affine_graph(
    g: &mut Graph,
    set: &ParamSet,
    prefix: &str,
    x: NodeId,
    binds: &mut Bindings,
) -> Result<NodeId> {
    let w = set.get("w")?;
    let b = set.get("b")?;
    let wn = g.leaf(w.value.clone(), w.trainable);
    let bn = g.leaf(b.value.clone(), b.trainable);
    binds.push((format!("{prefix}.w"), wn));
    binds.push((format!("{prefix}.b"), bn));
    let y = g.matmul(x, wn)?;
    g.add_bias(y, bn)
}

/// Per-channel weights of the two-way softmax over (global, local).
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub a: Tensor,
    pub b: Tensor,
}

fn two_way_softmax(d: f64) -> f64 {
    // exp(g) / (exp(g) + exp(l)) computed as a stable sigmoid of g - l.
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// `a_i = exp(ĝ_i) / (exp(ĝ_i) + exp(l_i))`, `b_i = 1 - a_i`, per channel.
pub fn fusion_weights(xg_hat: &Tensor, x_l: &Tensor) -> Result<FusionWeights> {
    if !xg_hat.same_shape(x_l) {
        return Err(Error::Shape(format!(
            "fusion weight inputs {:?} vs {:?}",
            xg_hat.shape(),
            x_l.shape()
        )));
    }
    let a = xg_hat.zip_map(x_l, |g, l| two_way_softmax(g - l))?;
    let b = a.map(|v| 1.0 - v);
    Ok(FusionWeights { a, b })
}

/// Convex per-channel combination `a ⊙ ĝ + b ⊙ l`.
pub fn fuse_local(xg_hat: &Tensor, x_l: &Tensor, w: &FusionWeights) -> Result<Tensor> {
    if !xg_hat.same_shape(x_l) {
        return Err(Error::Shape(format!(
            "fusion inputs {:?} vs {:?}",
            xg_hat.shape(),
            x_l.shape()
        )));
    }
    let ga = xg_hat.mul(&w.a)?;
    let lb = x_l.mul(&w.b)?;
    ga.add(&lb)
}

/// Tape version of weights + fuse: `x_lf = l + sigmoid(ĝ - l) ⊙ (ĝ - l)`.
/// Gradients flow through both exponential terms.
pub fn fuse_graph(g: &mut Graph, xg_hat: NodeId, x_l: NodeId) -> Result<NodeId> {
    let d = g.sub(xg_hat, x_l)?;
    let a = g.sigmoid(d)?;
    let ad = g.mul(a, d)?;
    g.add(x_l, ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_projection_passes_through() {
        let proj = FusionProjection::identity(3, 3);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        assert!(proj.resample_global(&x).unwrap().bit_eq(&x));
        assert!(proj.resample_fused(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn resample_matches_dense_oracle() {
        // G=2 -> C=3 with hand-set weights
        let mut proj = FusionProjection::identity(2, 3);
        let w = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        proj.up.get_mut("w").unwrap().value = w.clone();
        proj.up.get_mut("b").unwrap().value = b.clone();
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let got = proj.resample_global(&x).unwrap();
        let expect = dense_forward(&x, &w, &b).unwrap();
        assert!(got.bit_eq(&expect));
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut proj = FusionProjection::identity(2, 2);
        proj.up.get_mut("b").unwrap().value = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let x = Tensor::zeros(vec![3, 2]);
        let y = proj.resample_global(&x).unwrap();
        for r in 0..3 {
            assert_eq!(y.at2(r, 0), 0.7);
            assert_eq!(y.at2(r, 1), -0.3);
        }
    }

    #[test]
    fn pseudo_inverse_pair_recovers_input() {
        // up embeds 2 -> 3, down truncates 3 -> 2; down ∘ up = identity on R².
        let proj = FusionProjection::identity(2, 3);
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let up = proj.resample_global(&x).unwrap();
        let back = proj.resample_fused(&up).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((back.at2(i, j) - x.at2(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn equal_inputs_give_half_weights() {
        let x = Tensor::matrix(1, 4, vec![3.0, -1.0, 0.0, 100.0]).unwrap();
        let w = fusion_weights(&x, &x).unwrap();
        for &a in w.a.data() {
            assert_eq!(a, 0.5);
        }
    }

    #[test]
    fn closed_form_ln2() {
        let g = Tensor::matrix(1, 1, vec![2.0f64.ln()]).unwrap();
        let l = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let w = fusion_weights(&g, &l).unwrap();
        assert!((w.a.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.b.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extreme_magnitudes_do_not_overflow() {
        let g = Tensor::matrix(1, 1, vec![500.0]).unwrap();
        let l = Tensor::matrix(1, 1, vec![-500.0]).unwrap();
        let w = fusion_weights(&g, &l).unwrap();
        assert!(w.a.data()[0] > 1.0 - 1e-12);
        assert!((w.a.data()[0] + w.b.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_agreement_is_idempotent() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = fusion_weights(&x, &x).unwrap();
        let fused = fuse_local(&x, &x, &w).unwrap();
        for j in 0..3 {
            assert!((fused.at2(0, j) - x.at2(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_random_matches_scalar_oracle() {
        let mut rng = crate::util::rng_from(&[23]);
        let gd: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ld: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = Tensor::matrix(2, 3, gd.clone()).unwrap();
        let l = Tensor::matrix(2, 3, ld.clone()).unwrap();
        let w = fusion_weights(&g, &l).unwrap();
        let fused = fuse_local(&g, &l, &w).unwrap();
        for i in 0..6 {
            let eg = gd[i].exp();
            let el = ld[i].exp();
            let expect = (eg * gd[i] + el * ld[i]) / (eg + el);
            assert!((fused.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn half_weights_average_the_inputs() {
        let g = Tensor::matrix(1, 2, vec![2.0, -4.0]).unwrap();
        let l = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let w = FusionWeights {
            a: Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(),
            b: Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap(),
        };
        let fused = fuse_local(&g, &l, &w).unwrap();
        assert_eq!(fused.data(), &[1.0, -1.0]);
    }
}
