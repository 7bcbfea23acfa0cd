//! Reusable model blocks on top of the tape: a post-norm Transformer encoder
//! layer and a bidirectional LSTM. Parameters are registered under a name
//! prefix so several instances can share one store.

use super::matrix::Matrix;
use super::params::{init_weight, Binder, ParamStore};
use super::tape::Var;

/// One post-norm Transformer encoder layer: multi-head self-attention and a
/// tanh feed-forward block, each wrapped in residual + layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

impl TransformerLayer {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, ff_dim: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim must be divisible by head count");
        TransformerLayer {
            prefix: prefix.into(),
            dim,
            heads,
            ff_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        let d = self.dim;
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{w}"), init_weight(d, d, seed, &format!("{p}.attn.{w}")));
            store.insert(&format!("{p}.attn.b{}", &w[1..]), Matrix::zeros(1, d));
        }
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("{p}.{ln}.gain"), Matrix::filled(1, d, 1.0));
            store.insert(&format!("{p}.{ln}.bias"), Matrix::zeros(1, d));
        }
        store.insert(&format!("{p}.ff.w1"), init_weight(d, self.ff_dim, seed, &format!("{p}.ff.w1")));
        store.insert(&format!("{p}.ff.b1"), Matrix::zeros(1, self.ff_dim));
        store.insert(&format!("{p}.ff.w2"), init_weight(self.ff_dim, d, seed, &format!("{p}.ff.w2")));
        store.insert(&format!("{p}.ff.b2"), Matrix::zeros(1, d));
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Var<'t> {
        let p = &self.prefix;
        assert_eq!(x.cols(), self.dim, "transformer layer input width");
        let q = x.matmul(b.param(&format!("{p}.attn.wq"))).add_row(b.param(&format!("{p}.attn.bq")));
        let k = x.matmul(b.param(&format!("{p}.attn.wk"))).add_row(b.param(&format!("{p}.attn.bk")));
        let v = x.matmul(b.param(&format!("{p}.attn.wv"))).add_row(b.param(&format!("{p}.attn.bv")));
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * head_dim, head_dim);
            let kh = k.slice_cols(h * head_dim, head_dim);
            let vh = v.slice_cols(h * head_dim, head_dim);
            let attn = qh.matmul(kh.transpose_var()).scale(scale).softmax_rows();
            head_outputs.push(attn.matmul(vh));
        }
        let merged = if head_outputs.len() == 1 {
            head_outputs[0]
        } else {
            b.tape().concat_cols(&head_outputs)
        };
        let attended = merged
            .matmul(b.param(&format!("{p}.attn.wo")))
            .add_row(b.param(&format!("{p}.attn.bo")));
        let x1 = x.add(attended).layer_norm_rows(
            b.param(&format!("{p}.ln1.gain")),
            b.param(&format!("{p}.ln1.bias")),
        );
        let ff = x1
            .matmul(b.param(&format!("{p}.ff.w1")))
            .add_row(b.param(&format!("{p}.ff.b1")))
            .tanh()
            .matmul(b.param(&format!("{p}.ff.w2")))
            .add_row(b.param(&format!("{p}.ff.b2")));
        x1.add(ff).layer_norm_rows(
            b.param(&format!("{p}.ln2.gain")),
            b.param(&format!("{p}.ln2.bias")),
        )
    }
}

/// One LSTM direction. Gate order within the packed weight is i, f, g, o.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmDirection {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        LstmDirection {
            prefix: prefix.into(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        store.insert(
            &format!("{p}.w"),
            init_weight(self.input_dim, 4 * self.hidden_dim, seed, &format!("{p}.w")),
        );
        store.insert(
            &format!("{p}.u"),
            init_weight(self.hidden_dim, 4 * self.hidden_dim, seed, &format!("{p}.u")),
        );
        store.insert(&format!("{p}.b"), Matrix::zeros(1, 4 * self.hidden_dim));
    }

    /// Runs over `inputs` (each 1 x input_dim) and returns the hidden state
    /// at every step.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, inputs: &[Var<'t>]) -> Vec<Var<'t>> {
        let p = &self.prefix;
        let w = b.param(&format!("{p}.w"));
        let u = b.param(&format!("{p}.u"));
        let bias = b.param(&format!("{p}.b"));
        let hd = self.hidden_dim;
        let mut h = b.constant(Matrix::zeros(1, hd));
        let mut c = b.constant(Matrix::zeros(1, hd));
        let mut outputs = Vec::with_capacity(inputs.len());
        for x in inputs {
            let z = x.matmul(w).add(h.matmul(u)).add_row(bias);
            let i = z.slice_cols(0, hd).sigmoid();
            let f = z.slice_cols(hd, hd).sigmoid();
            let g = z.slice_cols(2 * hd, hd).tanh();
            let o = z.slice_cols(3 * hd, hd).sigmoid();
            c = f.hadamard(c).add(i.hadamard(g));
            h = o.hadamard(c.tanh());
            outputs.push(h);
        }
        outputs
    }
}

/// Bidirectional LSTM whose per-step output is forward-half concatenated
/// with backward-half.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
}

impl BiLstm {
    /// `output_dim` must be even; each direction gets half.
    pub fn new(prefix: &str, input_dim: usize, output_dim: usize) -> Self {
        assert!(output_dim % 2 == 0, "bidirectional output dim must be even");
        BiLstm {
            forward_dir: LstmDirection::new(format!("{prefix}.fwd"), input_dim, output_dim / 2),
            backward_dir: LstmDirection::new(format!("{prefix}.bwd"), input_dim, output_dim / 2),
        }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.forward_dir.register(store, seed);
        self.backward_dir.register(store, seed);
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, inputs: &[Var<'t>]) -> Vec<Var<'t>> {
        let fwd = self.forward_dir.forward(b, inputs);
        let reversed: Vec<Var<'t>> = inputs.iter().rev().copied().collect();
        let mut bwd = self.backward_dir.forward(b, &reversed);
        bwd.reverse();
        fwd.into_iter()
            .zip(bwd)
            .map(|(f, r)| b.tape().concat_cols(&[f, r]))
            .collect()
    }
}
