//! LSTM sequence classifier with additive attention.
//!
//! Forward passes run on same-length batches so each timestep is a single
//! matrix multiply across the batch. Also serves as the evaluation
//! classifier in bidirectional mode.

use rand_chacha::ChaCha20Rng;

use crate::autograd::{Tape, Var};
use crate::nn::ParamStore;

/// Fused-gate LSTM cell; gate order along columns is `[i, f, g, o]`.
pub struct LstmCell {
    pub hidden_dim: usize,
    w: usize,
    u: usize,
    b: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        // Forget-gate bias starts at 1 so cell state persists from the
        // first steps, the usual LSTM trainability fix.
        let mut bias = ndarray::Array2::zeros((1, 4 * hidden_dim));
        bias.slice_mut(ndarray::s![.., hidden_dim..2 * hidden_dim])
            .fill(1.0);
        LstmCell {
            hidden_dim,
            w: store.add_xavier(&format!("{prefix}.w"), input_dim, 4 * hidden_dim, rng),
            u: store.add_xavier(&format!("{prefix}.u"), hidden_dim, 4 * hidden_dim, rng),
            b: store.add(&format!("{prefix}.b"), bias),
        }
    }

    /// One step over a `batch×input_dim` slice; returns `(h, c)`.
    pub fn step<'t>(
        &self,
        bound: &[Var<'t>],
        x: Var<'t>,
        h: Var<'t>,
        c: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let hd = self.hidden_dim;
        let z = (x.matmul(bound[self.w]) + h.matmul(bound[self.u])).add_row(bound[self.b]);
        let i = z.slice_cols(0, hd).sigmoid();
        let f = z.slice_cols(hd, 2 * hd).sigmoid();
        let g = z.slice_cols(2 * hd, 3 * hd).tanh();
        let o = z.slice_cols(3 * hd, 4 * hd).sigmoid();
        let c_next = f * c + i * g;
        let h_next = o * c_next.tanh();
        (h_next, c_next)
    }

    /// Runs the cell over a full sequence of `batch×input_dim` steps.
    pub fn run<'t>(&self, tape: &'t Tape, bound: &[Var<'t>], xs: &[Var<'t>]) -> Vec<Var<'t>> {
        let batch = xs[0].dim().0;
        let mut h = tape.leaf(ndarray::Array2::zeros((batch, self.hidden_dim)));
        let mut c = h;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let (h2, c2) = self.step(bound, x, h, c);
            h = h2;
            c = c2;
            out.push(h);
        }
        out
    }
}

/// Additive attention: `score_t = tanh(h_t W + b) v`, weights softmaxed
/// over timesteps, context is the weight-averaged hidden state.
pub struct AdditiveAttention {
    w: usize,
    b: usize,
    v: usize,
}

impl AdditiveAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        attn_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        AdditiveAttention {
            w: store.add_xavier(&format!("{prefix}.w"), hidden_dim, attn_dim, rng),
            b: store.add_zeros(&format!("{prefix}.b"), 1, attn_dim),
            v: store.add_xavier(&format!("{prefix}.v"), attn_dim, 1, rng),
        }
    }

    /// Returns `(weights batch×steps, context batch×hidden)`.
    pub fn apply<'t>(&self, bound: &[Var<'t>], hs: &[Var<'t>]) -> (Var<'t>, Var<'t>) {
        let scores: Vec<Var<'t>> = hs
            .iter()
            .map(|&h| {
                h.matmul(bound[self.w])
                    .add_row(bound[self.b])
                    .tanh()
                    .matmul(bound[self.v])
            })
            .collect();
        let alpha = Var::concat_cols(&scores).softmax_rows();
        let hidden_dim = hs[0].dim().1;
        let mut ctx = alpha.slice_cols(0, 1).broadcast_col(hidden_dim) * hs[0];
        for (t, &h) in hs.iter().enumerate().skip(1) {
            ctx = ctx + alpha.slice_cols(t, t + 1).broadcast_col(hidden_dim) * h;
        }
        (alpha, ctx)
    }
}

/// Attention classifier over token sequences, optionally bidirectional.
pub struct LstmClassifier {
    pub store: ParamStore,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub bidirectional: bool,
    pub embedding: usize,
    fwd: LstmCell,
    bwd: Option<LstmCell>,
    attention: AdditiveAttention,
    w_out: usize,
    b_out: usize,
}

/// Intermediate tensors from one classifier forward pass.
pub struct LstmForward<'t> {
    /// `batch×steps` attention weights.
    pub alpha: Var<'t>,
    /// Per-step hidden states, each `batch×state_dim`.
    pub hidden: Vec<Var<'t>>,
    /// `batch×n_classes` unnormalized scores.
    pub logits: Var<'t>,
    /// Per-step embedded inputs, each `batch×embed_dim`.
    pub embedded: Vec<Var<'t>>,
}

impl LstmClassifier {
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        n_classes: usize,
        bidirectional: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let embedding = store.add_unit_variance("embedding", vocab_size, embed_dim, rng);
        let fwd = LstmCell::new(&mut store, "lstm.fwd", embed_dim, hidden_dim, rng);
        let bwd = bidirectional
            .then(|| LstmCell::new(&mut store, "lstm.bwd", embed_dim, hidden_dim, rng));
        let state_dim = if bidirectional {
            2 * hidden_dim
        } else {
            hidden_dim
        };
        let attention = AdditiveAttention::new(&mut store, "attn", state_dim, hidden_dim, rng);
        let w_out = store.add_xavier("out.w", state_dim, n_classes, rng);
        let b_out = store.add_zeros("out.b", 1, n_classes);
        LstmClassifier {
            store,
            embed_dim,
            hidden_dim,
            n_classes,
            vocab_size,
            bidirectional,
            embedding,
            fwd,
            bwd,
            attention,
            w_out,
            b_out,
        }
    }

    /// Embeds a same-length batch: one `batch×embed_dim` matrix per step.
    pub fn embed_batch<'t>(&self, bound: &[Var<'t>], batch: &[&[usize]]) -> Vec<Var<'t>> {
        let steps = batch[0].len();
        debug_assert!(batch.iter().all(|s| s.len() == steps));
        (0..steps)
            .map(|t| {
                let rows: Vec<usize> = batch.iter().map(|s| s[t]).collect();
                bound[self.embedding].gather_rows(&rows)
            })
            .collect()
    }

    /// Forward pass from already-embedded steps; the gradient of the loss
    /// with respect to each entry of `embedded` stays addressable.
    pub fn forward_embedded<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        embedded: Vec<Var<'t>>,
    ) -> LstmForward<'t> {
        let fwd_states = self.fwd.run(tape, bound, &embedded);
        let hidden: Vec<Var<'t>> = match &self.bwd {
            Some(bwd_cell) => {
                let rev: Vec<Var<'t>> = embedded.iter().rev().copied().collect();
                let mut bwd_states = bwd_cell.run(tape, bound, &rev);
                bwd_states.reverse();
                fwd_states
                    .iter()
                    .zip(bwd_states)
                    .map(|(&f, b)| Var::concat_cols(&[f, b]))
                    .collect()
            }
            None => fwd_states,
        };
        let (alpha, ctx) = self.attention.apply(bound, &hidden);
        let logits = ctx.matmul(bound[self.w_out]).add_row(bound[self.b_out]);
        LstmForward {
            alpha,
            hidden,
            logits,
            embedded,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &[Var<'t>],
        batch: &[&[usize]],
    ) -> LstmForward<'t> {
        let embedded = self.embed_batch(bound, batch);
        self.forward_embedded(tape, bound, embedded)
    }

    /// Argmax class per sequence, without building gradient state.
    pub fn predict(&self, batch: &[&[usize]]) -> Vec<usize> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let out = self.forward(&tape, &bound, batch);
        let logits = out.logits.value();
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn attention_weights_form_a_distribution() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let model = LstmClassifier::new(10, 8, 8, 2, false, &mut rng);
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let batch: Vec<&[usize]> = vec![&[1, 2, 3, 4], &[5, 6, 7, 8]];
        let out = model.forward(&tape, &bound, &batch);
        let alpha = out.alpha.value();
        assert_eq!(alpha.dim(), (2, 4));
        for row in alpha.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn bidirectional_doubles_state_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let model = LstmClassifier::new(10, 8, 6, 2, true, &mut rng);
        let tape = Tape::new();
        let bound = model.store.bind(&tape);
        let batch: Vec<&[usize]> = vec![&[1, 2, 3]];
        let out = model.forward(&tape, &bound, &batch);
        assert_eq!(out.hidden[0].dim(), (1, 12));
        assert_eq!(out.logits.dim(), (1, 2));
    }

    #[test]
    fn classifier_overfits_a_tiny_separable_task() {
        use crate::nn::Adam;
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut model = LstmClassifier::new(8, 8, 16, 2, false, &mut rng);
        // Class decided by whether token 2 or token 3 appears.
        let data: Vec<(Vec<usize>, usize)> = vec![
            (vec![1, 2, 4], 0),
            (vec![4, 2, 5], 0),
            (vec![5, 2, 1], 0),
            (vec![1, 3, 4], 1),
            (vec![4, 3, 5], 1),
            (vec![5, 3, 1], 1),
        ];
        let mut opt = Adam::new(0.02);
        let indices = model.store.all_indices();
        for _ in 0..120 {
            let tape = Tape::new();
            let bound = model.store.bind(&tape);
            let batch: Vec<&[usize]> = data.iter().map(|(s, _)| s.as_slice()).collect();
            let targets: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
            let out = model.forward(&tape, &bound, &batch);
            let loss = out.logits.cross_entropy_rows(&targets, &vec![1.0; 6]);
            let mut grads = tape.backward(loss);
            let updates = model.store.collect_grads(&bound, &mut grads, &indices);
            drop(grads);
            drop(tape);
            opt.step(&mut model.store, &updates);
        }
        let batch: Vec<&[usize]> = data.iter().map(|(s, _)| s.as_slice()).collect();
        let preds = model.predict(&batch);
        let truth: Vec<usize> = data.iter().map(|(_, y)| *y).collect();
        assert_eq!(preds, truth);
    }
}
