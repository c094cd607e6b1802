//! Shared/private representation disentanglement: tied shared projector,
//! per-modality private projectors, central moment discrepancy alignment,
//! squared-cosine orthogonality, and L1 reconstruction fidelity.

use crate::matrix::Matrix;
use crate::nn::{Binding, LayerNorm, Linear, Mlp2, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::{EvidentError, Result};
use rand_chacha::ChaCha12Rng;

/// Guard for the cosine denominators in the orthogonality loss.
pub const COSINE_EPS: f64 = 1e-8;

/// Value-level snapshot of one sample's disentangled features.
#[derive(Debug, Clone)]
pub struct DisentangledSet {
    pub z_sh_v: Matrix,
    pub z_sh_a: Matrix,
    pub z_sp_v: Matrix,
    pub z_sp_a: Matrix,
    pub z_sh_joint: Matrix,
}

/// Tape-resident counterpart of [`DisentangledSet`].
#[derive(Debug, Clone, Copy)]
pub struct DisentangledNodes {
    pub z_sh_v: NodeId,
    pub z_sh_a: NodeId,
    pub z_sp_v: NodeId,
    pub z_sp_a: NodeId,
    pub z_sh_joint: NodeId,
}

impl DisentangledNodes {
    pub fn values(&self, tape: &Tape) -> DisentangledSet {
        DisentangledSet {
            z_sh_v: tape.value(self.z_sh_v),
            z_sh_a: tape.value(self.z_sh_a),
            z_sp_v: tape.value(self.z_sp_v),
            z_sp_a: tape.value(self.z_sp_a),
            z_sh_joint: tape.value(self.z_sh_joint),
        }
    }
}

/// Projection heads: one shared two-layer GELU MLP with parameters tied
/// across modalities, plus an independent private MLP per modality.
#[derive(Debug, Clone)]
pub struct Disentangler {
    pub shared: Mlp2,
    pub private_v: Mlp2,
    pub private_a: Mlp2,
    pub dim: usize,
}

impl Disentangler {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, dim: usize) -> Self {
        Disentangler {
            shared: Mlp2::new(store, rng, "proj.shared", dim, dim, dim),
            private_v: Mlp2::new(store, rng, "proj.private_v", dim, dim, dim),
            private_a: Mlp2::new(store, rng, "proj.private_a", dim, dim, dim),
            dim,
        }
    }

    /// Split pooled per-modality features into shared and private parts;
    /// the joint shared representation is the concatenation [sh_v ; sh_a].
    pub fn project(&self, bind: &Binding, zbar_v: NodeId, zbar_a: NodeId) -> DisentangledNodes {
        let t = bind.tape;
        assert!(
            t.shape(zbar_v).1 == self.dim && t.shape(zbar_a).1 == self.dim,
            "projector expects 1x{} inputs",
            self.dim
        );
        let z_sh_v = self.shared.forward(bind, zbar_v);
        let z_sh_a = self.shared.forward(bind, zbar_a);
        let z_sp_v = self.private_v.forward(bind, zbar_v);
        let z_sp_a = self.private_a.forward(bind, zbar_a);
        DisentangledNodes {
            z_sh_v,
            z_sh_a,
            z_sp_v,
            z_sp_a,
            z_sh_joint: t.concat_cols(z_sh_v, z_sh_a),
        }
    }
}

/// Central Moment Discrepancy between two batches (rows are samples):
/// ||E[a]-E[b]|| plus the Euclidean distances between central moment
/// vectors of orders 2..=order. Population moments, no normalization.
pub fn cmd_loss(a: &Matrix, b: &Matrix, order: usize) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(EvidentError::Config(format!(
            "cmd_loss needs batches of at least 2 rows, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(EvidentError::Dimension(format!(
            "cmd_loss column mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mean_a = a.col_means();
    let mean_b = b.col_means();
    let mut total = mean_a.sub(&mean_b).norm_sq().sqrt();
    for k in 2..=order {
        let ca = central_moment(a, &mean_a, k as i32);
        let cb = central_moment(b, &mean_b, k as i32);
        total += ca.sub(&cb).norm_sq().sqrt();
    }
    Ok(total)
}

fn central_moment(x: &Matrix, mean: &Matrix, k: i32) -> Matrix {
    let mut acc = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let d = x.get(r, c) - mean.get(0, c);
            acc.set(0, c, acc.get(0, c) + d.powi(k));
        }
    }
    acc.scale(1.0 / x.rows() as f64)
}

/// [`cmd_loss`] inside the gradient graph. `a` and `b` are BxD nodes with
/// B >= 2.
pub fn cmd_loss_graph(tape: &Tape, a: NodeId, b: NodeId, order: usize) -> NodeId {
    let t = tape;
    assert!(
        t.shape(a).0 >= 2 && t.shape(b).0 >= 2,
        "cmd_loss_graph needs batches of at least 2 rows"
    );
    let mean_a = t.mean_rows(a);
    let mean_b = t.mean_rows(b);
    let centered_a = t.add_row(a, t.scale(mean_a, -1.0));
    let centered_b = t.add_row(b, t.scale(mean_b, -1.0));
    let mut total = euclid(t, t.sub(mean_a, mean_b));
    for k in 2..=order {
        let ca = t.mean_rows(t.powi(centered_a, k as i32));
        let cb = t.mean_rows(t.powi(centered_b, k as i32));
        total = t.add(total, euclid(t, t.sub(ca, cb)));
    }
    total
}

// ||v||_2 of a row node, guarded so the gradient at exactly zero stays finite.
fn euclid(t: &Tape, v: NodeId) -> NodeId {
    t.sqrt(t.add_scalar(t.sum_all(t.square(v)), 1e-24))
}

/// Squared cosine similarities over the pairs (sh_v, sp_v), (sh_a, sp_a),
/// (sp_v, sp_a); each term lies in [0, 1], the sum in [0, 3].
pub fn orth_loss(set: &DisentangledSet) -> f64 {
    cos_sq(&set.z_sh_v, &set.z_sp_v)
        + cos_sq(&set.z_sh_a, &set.z_sp_a)
        + cos_sq(&set.z_sp_v, &set.z_sp_a)
}

fn cos_sq(a: &Matrix, b: &Matrix) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let denom = a.norm_sq().sqrt() * b.norm_sq().sqrt() + COSINE_EPS;
    (dot / denom).powi(2)
}

/// [`orth_loss`] inside the gradient graph.
pub fn orth_loss_graph(tape: &Tape, set: &DisentangledNodes) -> NodeId {
    let t = tape;
    let pairs = [
        (set.z_sh_v, set.z_sp_v),
        (set.z_sh_a, set.z_sp_a),
        (set.z_sp_v, set.z_sp_a),
    ];
    pairs
        .iter()
        .map(|(a, b)| cos_sq_graph(t, *a, *b))
        .reduce(|acc, x| t.add(acc, x))
        .unwrap()
}

fn cos_sq_graph(t: &Tape, a: NodeId, b: NodeId) -> NodeId {
    let dot = t.sum_all(t.mul(a, b));
    let norm_a = t.sqrt(t.add_scalar(t.sum_all(t.square(a)), 1e-24));
    let norm_b = t.sqrt(t.add_scalar(t.sum_all(t.square(b)), 1e-24));
    let denom = t.add_scalar(t.mul(norm_a, norm_b), COSINE_EPS);
    t.square(t.div(dot, denom))
}

/// Decoder mirroring the projector: LayerNorm([z_sh ; z_sp]) -> 2D -> D
/// hidden (GELU) -> D output.
#[derive(Debug, Clone)]
pub struct FeatureDecoder {
    pub ln: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
}

impl FeatureDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, dim: usize) -> Self {
        FeatureDecoder {
            ln: LayerNorm::new(store, &format!("{name}.ln"), 2 * dim),
            l1: Linear::new(store, rng, &format!("{name}.l1"), 2 * dim, dim),
            l2: Linear::new(store, rng, &format!("{name}.l2"), dim, dim),
        }
    }

    pub fn forward(&self, bind: &Binding, z_sh: NodeId, z_sp: NodeId) -> NodeId {
        let t = bind.tape;
        let cat = t.concat_cols(z_sh, z_sp);
        let normed = self.ln.forward(bind, cat);
        self.l2.forward(bind, t.gelu(self.l1.forward(bind, normed)))
    }
}

/// L1 reconstruction loss ||zbar - decode(z_sh, z_sp)||_1 for one modality.
pub fn reconstruct_loss_graph(
    tape: &Tape,
    bind: &Binding,
    decoder: &FeatureDecoder,
    z_sh: NodeId,
    z_sp: NodeId,
    zbar: NodeId,
) -> NodeId {
    let rebuilt = decoder.forward(bind, z_sh, z_sp);
    tape.sum_all(tape.abs(tape.sub(zbar, rebuilt)))
}
