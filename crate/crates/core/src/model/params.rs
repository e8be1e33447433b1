use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

/// All trainable tensors. Weight matrices are stored input-major
/// (`x.dot(w)` applies them). Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub frame_w: Array2<f64>,
    pub frame_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub head_ln_g: Array1<f64>,
    pub head_ln_b: Array1<f64>,
    /// `None` when the output projection is tied to `tok_emb`.
    pub out_w: Option<Array2<f64>>,
    pub out_b: Array1<f64>,
}

/// Truncated normal (two standard deviations) used for weight init.
struct TruncatedNormal(Normal<f64>, f64);

impl TruncatedNormal {
    fn new(std: f64) -> Self {
        TruncatedNormal(Normal::new(0.0, std).expect("positive std"), 2.0 * std)
    }

    fn matrix<R: Rng + ?Sized>(&self, rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || loop {
            let x = self.0.sample(rng);
            if x.abs() <= self.1 {
                break x;
            }
        })
    }
}

impl Parameters {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.hidden;
        let f = config.ffn_dim();
        let v = config.vocab_size;
        let tn = TruncatedNormal::new(config.init_std);
        let zeros = |n| Array1::<f64>::zeros(n);
        let ones = |n| Array1::<f64>::ones(n);

        let tok_emb = tn.matrix(rng, v, d);
        let pos_emb = tn.matrix(rng, config.max_len, d);
        let seg_emb = tn.matrix(rng, 2, d);
        let frame_w = tn.matrix(rng, config.frame_dim, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: tn.matrix(rng, d, d),
                bq: zeros(d),
                wk: tn.matrix(rng, d, d),
                bk: zeros(d),
                wv: tn.matrix(rng, d, d),
                bv: zeros(d),
                wo: tn.matrix(rng, d, d),
                bo: zeros(d),
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w1: tn.matrix(rng, d, f),
                b1: zeros(f),
                w2: tn.matrix(rng, f, d),
                b2: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
            })
            .collect();
        let head_w = tn.matrix(rng, d, d);
        let out_w = (!config.tie_embeddings).then(|| tn.matrix(rng, d, v));
        Parameters {
            tok_emb,
            pos_emb,
            seg_emb,
            frame_w,
            frame_b: zeros(d),
            layers,
            head_w,
            head_b: zeros(d),
            head_ln_g: ones(d),
            head_ln_b: zeros(d),
            out_w,
            out_b: zeros(v),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut t| t.fill(0.0));
        z
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = vec![
            ("embeddings.token".into(), self.tok_emb.view().into_dyn()),
            ("embeddings.position".into(), self.pos_emb.view().into_dyn()),
            ("embeddings.segment".into(), self.seg_emb.view().into_dyn()),
            ("embeddings.frame.weight".into(), self.frame_w.view().into_dyn()),
            ("embeddings.frame.bias".into(), self.frame_b.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("encoder.{i}.{n}");
            out.extend([
                (p("attention.query.weight"), l.wq.view().into_dyn()),
                (p("attention.query.bias"), l.bq.view().into_dyn()),
                (p("attention.key.weight"), l.wk.view().into_dyn()),
                (p("attention.key.bias"), l.bk.view().into_dyn()),
                (p("attention.value.weight"), l.wv.view().into_dyn()),
                (p("attention.value.bias"), l.bv.view().into_dyn()),
                (p("attention.output.weight"), l.wo.view().into_dyn()),
                (p("attention.output.bias"), l.bo.view().into_dyn()),
                (p("attention.norm.gain"), l.ln1_g.view().into_dyn()),
                (p("attention.norm.bias"), l.ln1_b.view().into_dyn()),
                (p("ffn.inner.weight"), l.w1.view().into_dyn()),
                (p("ffn.inner.bias"), l.b1.view().into_dyn()),
                (p("ffn.outer.weight"), l.w2.view().into_dyn()),
                (p("ffn.outer.bias"), l.b2.view().into_dyn()),
                (p("ffn.norm.gain"), l.ln2_g.view().into_dyn()),
                (p("ffn.norm.bias"), l.ln2_b.view().into_dyn()),
            ]);
        }
        out.extend([
            ("head.dense.weight".into(), self.head_w.view().into_dyn()),
            ("head.dense.bias".into(), self.head_b.view().into_dyn()),
            ("head.norm.gain".into(), self.head_ln_g.view().into_dyn()),
            ("head.norm.bias".into(), self.head_ln_b.view().into_dyn()),
        ]);
        if let Some(w) = &self.out_w {
            out.push(("head.output.weight".into(), w.view().into_dyn()));
        }
        out.push(("head.output.bias".into(), self.out_b.view().into_dyn()));
        out
    }

    /// Mutable visit in the same order as [`Parameters::tensors`].
    pub fn for_each_mut<F>(&mut self, mut f: F)
    where
        F: FnMut(usize, ArrayViewMutD<'_, f64>),
    {
        let mut i = 0;
        let mut visit = |t: ArrayViewMutD<'_, f64>| {
            f(i, t);
            i += 1;
        };
        visit(self.tok_emb.view_mut().into_dyn());
        visit(self.pos_emb.view_mut().into_dyn());
        visit(self.seg_emb.view_mut().into_dyn());
        visit(self.frame_w.view_mut().into_dyn());
        visit(self.frame_b.view_mut().into_dyn());
        for l in &mut self.layers {
            visit(l.wq.view_mut().into_dyn());
            visit(l.bq.view_mut().into_dyn());
            visit(l.wk.view_mut().into_dyn());
            visit(l.bk.view_mut().into_dyn());
            visit(l.wv.view_mut().into_dyn());
            visit(l.bv.view_mut().into_dyn());
            visit(l.wo.view_mut().into_dyn());
            visit(l.bo.view_mut().into_dyn());
            visit(l.ln1_g.view_mut().into_dyn());
            visit(l.ln1_b.view_mut().into_dyn());
            visit(l.w1.view_mut().into_dyn());
            visit(l.b1.view_mut().into_dyn());
            visit(l.w2.view_mut().into_dyn());
            visit(l.b2.view_mut().into_dyn());
            visit(l.ln2_g.view_mut().into_dyn());
            visit(l.ln2_b.view_mut().into_dyn());
        }
        visit(self.head_w.view_mut().into_dyn());
        visit(self.head_b.view_mut().into_dyn());
        visit(self.head_ln_g.view_mut().into_dyn());
        visit(self.head_ln_b.view_mut().into_dyn());
        if let Some(w) = &mut self.out_w {
            visit(w.view_mut().into_dyn());
        }
        visit(self.out_b.view_mut().into_dyn());
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors().len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f64) {
        let src = other.tensors();
        self.for_each_mut(|i, mut t| t.scaled_add(scale, &src[i].1));
    }

    /// Rounds every value to 32-bit precision (the checkpoint storage format).
    pub fn round_to_f32(&mut self) {
        self.for_each_mut(|_, mut t| t.mapv_inplace(|v| v as f32 as f64));
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> bool {
        let d = config.hidden;
        self.tok_emb.dim() == (config.vocab_size, d)
            && self.pos_emb.dim() == (config.max_len, d)
            && self.seg_emb.dim() == (2, d)
            && self.frame_w.dim() == (config.frame_dim, d)
            && self.layers.len() == config.layers
            && self.out_w.is_none() == config.tie_embeddings
            && self.out_b.len() == config.vocab_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_truncation() {
        let c = ModelConfig::tiny(64);
        let p = Parameters::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.check_shapes(&c));
        assert!(p.tok_emb.iter().all(|v| v.abs() <= 0.04));
        assert!(p.layers[0].ln1_g.iter().all(|&v| v == 1.0));
        assert_eq!(p.tensors().len(), 5 + 16 * 2 + 6);
        let mut count = 0;
        let mut q = p.clone();
        q.for_each_mut(|_, _| count += 1);
        assert_eq!(count, p.num_tensors());
    }

    #[test]
    fn tied_config_drops_output_matrix() {
        let c = ModelConfig {
            tie_embeddings: true,
            ..ModelConfig::tiny(64)
        };
        let p = Parameters::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.out_w.is_none());
        assert!(p.check_shapes(&c));
    }
}
