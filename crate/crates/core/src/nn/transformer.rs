//! Post-norm transformer encoder layers over per-sentence row matrices.

use rand_chacha::ChaCha20Rng;

use crate::autograd::Var;
use crate::nn::ParamStore;

const LN_EPS: f64 = 1e-5;

/// Self-attention + feed-forward block with residuals and post-layer-norm.
pub struct EncoderLayer {
    pub model_dim: usize,
    pub n_heads: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        n_heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        assert!(
            model_dim % n_heads == 0,
            "model dim {model_dim} not divisible by {n_heads} heads"
        );
        let mut ones = |name: &str| store.add(name, ndarray::Array2::ones((1, model_dim)));
        let ln1_g = ones(&format!("{prefix}.ln1.g"));
        let ln2_g = ones(&format!("{prefix}.ln2.g"));
        EncoderLayer {
            model_dim,
            n_heads,
            wq: store.add_xavier(&format!("{prefix}.wq"), model_dim, model_dim, rng),
            wk: store.add_xavier(&format!("{prefix}.wk"), model_dim, model_dim, rng),
            wv: store.add_xavier(&format!("{prefix}.wv"), model_dim, model_dim, rng),
            wo: store.add_xavier(&format!("{prefix}.wo"), model_dim, model_dim, rng),
            bo: store.add_zeros(&format!("{prefix}.bo"), 1, model_dim),
            ln1_g,
            ln1_b: store.add_zeros(&format!("{prefix}.ln1.b"), 1, model_dim),
            w1: store.add_xavier(&format!("{prefix}.ff.w1"), model_dim, ff_dim, rng),
            b1: store.add_zeros(&format!("{prefix}.ff.b1"), 1, ff_dim),
            w2: store.add_xavier(&format!("{prefix}.ff.w2"), ff_dim, model_dim, rng),
            b2: store.add_zeros(&format!("{prefix}.ff.b2"), 1, model_dim),
            ln2_g,
            ln2_b: store.add_zeros(&format!("{prefix}.ln2.b"), 1, model_dim),
        }
    }

    /// Maps a `rows×model_dim` matrix to the same shape. Every row attends
    /// to every row.
    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let dk = self.model_dim / self.n_heads;
        let q = x.matmul(bound[self.wq]);
        let k = x.matmul(bound[self.wk]);
        let v = x.matmul(bound[self.wv]);
        let heads: Vec<Var<'t>> = (0..self.n_heads)
            .map(|h| {
                let lo = h * dk;
                let hi = lo + dk;
                let qh = q.slice_cols(lo, hi);
                let kh = k.slice_cols(lo, hi);
                let vh = v.slice_cols(lo, hi);
                let scores = qh.matmul(kh.t()).scale(1.0 / (dk as f64).sqrt());
                scores.softmax_rows().matmul(vh)
            })
            .collect();
        let attended = Var::concat_cols(&heads)
            .matmul(bound[self.wo])
            .add_row(bound[self.bo]);
        let x = (x + attended).layer_norm(bound[self.ln1_g], bound[self.ln1_b], LN_EPS);
        let ff = x
            .matmul(bound[self.w1])
            .add_row(bound[self.b1])
            .relu()
            .matmul(bound[self.w2])
            .add_row(bound[self.b2]);
        (x + ff).layer_norm(bound[self.ln2_g], bound[self.ln2_b], LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    #[test]
    fn layer_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l0", 8, 2, 16, &mut rng);
        let x0 = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 8 + j) as f64 * 0.1).sin());

        let run = || {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let x = tape.leaf(x0.clone());
            (*layer.forward(&bound, x).value()).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.dim(), (5, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn layer_gradients_match_parameter_perturbation() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l0", 4, 2, 8, &mut rng);
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| ((i + 2 * j) as f64 * 0.3).cos());

        let analytic = {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let x = tape.leaf(x0.clone());
            let loss = layer.forward(&bound, x).square().mean_all();
            let mut grads = tape.backward(loss);
            let indices = store.all_indices();
            store.collect_grads(&bound, &mut grads, &indices)
        };

        let loss_value = |store: &ParamStore| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let x = tape.leaf(x0.clone());
            layer.forward(&bound, x).square().mean_all().value()[[0, 0]]
        };

        // Spot-check entries of every parameter against central differences
        // computed by perturbing the stored value in place.
        let h = 1e-5;
        let mut check_rng = ChaCha20Rng::seed_from_u64(33);
        for (idx, grad) in &analytic {
            let dim = store.params[*idx].value.dim();
            for _ in 0..3 {
                let r = check_rng.random_range(0..dim.0);
                let c = check_rng.random_range(0..dim.1);
                let original = store.params[*idx].value[[r, c]];
                let mut eval_at = |val: f64| {
                    std::sync::Arc::get_mut(&mut store.params[*idx].value).unwrap()[[r, c]] = val;
                    loss_value(&store)
                };
                let fd = (eval_at(original + h) - eval_at(original - h)) / (2.0 * h);
                eval_at(original);
                let a = grad[[r, c]];
                let scale = 1.0_f64.max(a.abs()).max(fd.abs());
                assert!(
                    (a - fd).abs() / scale < 1e-5,
                    "param {} [{r},{c}]: analytic {a} vs fd {fd}",
                    store.params[*idx].name
                );
            }
        }
    }
}
