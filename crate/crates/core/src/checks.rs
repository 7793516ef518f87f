//! Named finite-difference gradient checks over every tape op and loss, run
//! in f64 with all randomness frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arcface::{
    arcface_loss, cosine_matrix, hs_arcface_loss, hs_route, id_loss, margin_loss, subcenter_arcface_loss, triplet_loss,
    ArcMargin, Routing,
};
use crate::embedding::{gumbel_softmax, orthogonal_loss, quantize_st, similarity_logits, GumbelNoise, SoftInput};
use crate::tensor::{finite_diff_check, GradCheckError, GradCheckReport, Graph, Tensor, TensorError, Var};

/// Tolerance on max relative error for smooth functions.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for functions containing a max or argmax selection.
pub const SELECT_TOL: f64 = 1e-5;
pub const STEP: f64 = 1e-5;

type Scalar = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

pub struct Check {
    pub name: &'static str,
    pub tol: f64,
    leaves: Vec<Tensor<f64>>,
    f: Scalar,
}

impl Check {
    fn new(
        name: &'static str,
        tol: f64,
        leaves: Vec<Tensor<f64>>,
        f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Self {
        Self { name, tol, leaves, f: Box::new(f) }
    }

    /// Checks an op with tensor output by contracting it against fixed
    /// random weights.
    fn op(
        name: &'static str,
        tol: f64,
        leaves: Vec<Tensor<f64>>,
        f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Self {
        let seed = name.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        Self::new(name, tol, leaves, move |g, v| {
            let y = f(g, v)?;
            let w = g.constant(uniform(&g.shape(y), seed));
            let p = g.mul(y, w)?;
            g.sum(p)
        })
    }

    pub fn run(&self) -> Result<GradCheckReport, GradCheckError> {
        finite_diff_check(&self.f, &self.leaves, STEP, self.tol)
    }
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform values kept at least 0.1 away from zero, clear of kinks.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, seed);
    t.data_mut().iter_mut().for_each(|x| *x = x.signum() * (0.1 + x.abs()));
    t
}

fn lift(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid { op: "loss", detail: other.to_string() },
    }
}

/// Every registered check, sorted by name.
pub fn registry() -> Vec<Check> {
    let x = || uniform(&[4, 3], 1);
    let y = || uniform(&[4, 3], 2);
    let labels = [0usize, 2, 1, 2];
    let pk = [0usize, 0, 1, 1, 2, 2];
    let arc = ArcMargin::default();
    let mut checks = vec![
        Check::op("add", SMOOTH_TOL, vec![x(), y()], |g, v| g.add(v[0], v[1])),
        Check::op("sub", SMOOTH_TOL, vec![x(), y()], |g, v| g.sub(v[0], v[1])),
        Check::op("mul", SMOOTH_TOL, vec![x(), y()], |g, v| g.mul(v[0], v[1])),
        Check::op("add_trailing", SMOOTH_TOL, vec![x(), uniform(&[3], 3)], |g, v| g.add_trailing(v[0], v[1])),
        Check::op("mul_trailing", SMOOTH_TOL, vec![x(), uniform(&[3], 3)], |g, v| g.mul_trailing(v[0], v[1])),
        Check::op("scale", SMOOTH_TOL, vec![x()], |g, v| g.scale(v[0], -1.7)),
        Check::op("matmul", SMOOTH_TOL, vec![x(), uniform(&[3, 5], 4)], |g, v| g.matmul(v[0], v[1])),
        Check::op("matmul_nt", SMOOTH_TOL, vec![x(), uniform(&[5, 3], 4)], |g, v| g.matmul_nt(v[0], v[1])),
        Check::op("linear", SMOOTH_TOL, vec![x(), uniform(&[3, 5], 4), uniform(&[5], 5)], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        Check::op("gelu", SMOOTH_TOL, vec![uniform(&[4, 3], 6).map_scale(3.0)], |g, v| g.gelu(v[0])),
        Check::op("relu", SELECT_TOL, vec![off_zero(&[4, 3], 7)], |g, v| g.relu(v[0])),
        Check::op("softmax_rows", SMOOTH_TOL, vec![x()], |g, v| g.softmax(v[0], 1)),
        Check::op("softmax_cols", SMOOTH_TOL, vec![x()], |g, v| g.softmax(v[0], 0)),
        Check::op("layer_norm", SMOOTH_TOL, vec![x(), uniform(&[3], 8), uniform(&[3], 9)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-6)
        }),
        Check::op("batch_norm", SMOOTH_TOL, vec![x(), uniform(&[3], 8), uniform(&[3], 9)], |g, v| {
            g.batch_norm(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
        }),
        Check::op("normalize_rows", SMOOTH_TOL, vec![x()], |g, v| g.normalize_rows(v[0])),
        Check::op(
            "attention",
            SMOOTH_TOL,
            vec![uniform(&[2, 3, 4], 10), uniform(&[2, 3, 4], 11), uniform(&[2, 3, 4], 12)],
            |g, v| g.attention(v[0], v[1], v[2], 2),
        ),
        Check::new("cross_entropy", SMOOTH_TOL, vec![x()], move |g, v| g.cross_entropy(v[0], &labels, 0.1)),
        Check::new("frobenius_norm", SMOOTH_TOL, vec![x()], |g, v| g.frobenius_norm(v[0])),
        Check::op("pairwise_distance", SMOOTH_TOL, vec![x()], |g, v| g.pairwise_distance(v[0])),
        Check::op("group_max", SELECT_TOL, vec![uniform(&[4, 6], 13)], |g, v| g.group_max(v[0], 3)),
        Check::op("concat_rows", SMOOTH_TOL, vec![x(), uniform(&[2, 3], 14)], |g, v| g.concat_rows(&[v[0], v[1]])),
        Check::op("concat_cols", SMOOTH_TOL, vec![x(), uniform(&[4, 2], 14)], |g, v| g.concat_cols(&[v[0], v[1]])),
        Check::op("gather_rows", SMOOTH_TOL, vec![x()], |g, v| g.gather_rows(v[0], &[3, 0, 3])),
        Check::op("gather", SMOOTH_TOL, vec![x()], |g, v| g.gather(v[0], &[11, 0, 5, 5], &[2, 2])),
        Check::op("reshape", SMOOTH_TOL, vec![x()], |g, v| g.reshape(v[0], &[2, 6])),
        Check::op("mean_pool", SMOOTH_TOL, vec![x()], |g, v| g.mean_pool(v[0], 2)),
        Check::new("sum", SMOOTH_TOL, vec![x()], |g, v| g.sum(v[0])),
        Check::new("mean", SMOOTH_TOL, vec![x()], |g, v| g.mean(v[0])),
        Check::op("similarity_logits", SMOOTH_TOL, vec![x(), uniform(&[5, 3], 15)], |g, v| {
            similarity_logits(g, v[0], v[1]).map_err(lift)
        }),
        Check::op("gumbel_softmax", SMOOTH_TOL, vec![x()], |g, v| {
            gumbel_softmax(g, v[0], 0.5, &mut GumbelNoise::Frozen(uniform(&[4, 3], 16))).map_err(lift)
        }),
        Check::op("quantize_st_soft", SMOOTH_TOL, vec![x(), uniform(&[5, 3], 15)], |g, v| {
            let mut noise = GumbelNoise::Frozen(uniform(&[4, 5], 17));
            quantize_st(g, v[0], v[1], 0.5, &mut noise, SoftInput::Probabilities).map(|q| q.soft).map_err(lift)
        }),
        Check::op("quantize_st_soft_logits", SMOOTH_TOL, vec![x(), uniform(&[5, 3], 15)], |g, v| {
            let mut noise = GumbelNoise::Frozen(uniform(&[4, 5], 17));
            quantize_st(g, v[0], v[1], 0.5, &mut noise, SoftInput::Logits).map(|q| q.soft).map_err(lift)
        }),
        Check::new("orthogonal_loss", SMOOTH_TOL, vec![uniform(&[5, 3], 18)], |g, v| {
            orthogonal_loss(g, v[0]).map_err(lift)
        }),
        Check::op("cosine_matrix", SMOOTH_TOL, vec![x(), uniform(&[5, 3], 19)], |g, v| {
            cosine_matrix(g, v[0], v[1]).map_err(lift)
        }),
        Check::new("margin_loss", SMOOTH_TOL, vec![x().map_scale(0.9)], move |g, v| {
            margin_loss(g, v[0], &labels, arc).map_err(lift)
        }),
        Check::new("arcface_loss", SMOOTH_TOL, vec![x(), uniform(&[3, 3], 20)], move |g, v| {
            arcface_loss(g, v[0], &labels, v[1], arc).map_err(lift)
        }),
        Check::new("subcenter_arcface_loss", SELECT_TOL, vec![x(), uniform(&[3, 2, 3], 21)], move |g, v| {
            subcenter_arcface_loss(g, v[0], &labels, v[1], arc).map_err(lift)
        }),
        hs_check(labels, arc),
        Check::new("id_loss", SMOOTH_TOL, vec![x()], move |g, v| id_loss(g, v[0], &labels, 0.1).map_err(lift)),
        Check::new("triplet_loss", SELECT_TOL, vec![uniform(&[6, 3], 23)], move |g, v| {
            triplet_loss(g, v[0], &pk, 0.3).map_err(lift)
        }),
    ];
    checks.sort_by_key(|c| c.name);
    checks
}

/// HS-Arcface with its routing computed once at the base point and frozen.
fn hs_check(labels: [usize; 4], arc: ArcMargin) -> Check {
    let feats = uniform(&[4, 3], 1);
    let centers = uniform(&[3, 4, 3], 22);
    let routing: Vec<usize> = (0..4).map(|b| hs_route(feats.row(b), &centers).expect("valid shapes").level).collect();
    Check::new("hs_arcface_loss", SELECT_TOL, vec![feats, centers], move |g, v| {
        hs_arcface_loss(g, v[0], &labels, v[1], arc, Routing::Frozen(&routing)).map(|(l, _)| l).map_err(lift)
    })
}

/// A deliberately wrong backward pass: the forward value is `x^2` while the
/// gradient is that of `3x`. Used as a negative control.
pub fn broken_backward() -> Check {
    Check::new("broken_backward", SMOOTH_TOL, vec![uniform(&[3], 30)], |g, v| {
        let soft = g.scale(v[0], 3.0)?;
        let squared = {
            let x = g.value(v[0]);
            Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * x.data()[i])
        };
        let y = g.straight_through(soft, squared)?;
        g.sum(y)
    })
}

trait MapScale {
    fn map_scale(self, k: f64) -> Self;
}

impl MapScale for Tensor<f64> {
    fn map_scale(mut self, k: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= k);
        self
    }
}
