//! Layers shared by the interaction block, the shape prior and the denoiser.

use rand::Rng;

use super::graph::Var;
use super::{Bound, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with std `1/sqrt(d_in)`.
    FanIn,
    Normal(f64),
}

/// Affine projection `x · W + b` with `W` of shape `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::Zeros => Tensor::zeros([d_in, d_out]),
            Init::FanIn => Tensor::randn([d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            Init::Normal(std) => Tensor::randn([d_in, d_out], std, rng),
        };
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(&p[self.weight])?;
        match self.bias {
            Some(b) => y.add(&p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones([d]))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&p[self.gain], &p[self.bias], LAYER_NORM_EPS)
    }
}

/// Linear → GELU → Linear with hidden width `4d`. The caller adds the
/// residual.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, true, Init::FanIn, rng)?,
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, true, Init::FanIn, rng)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.up.forward(p, x)?.gelu()?;
        self.down.forward(p, h)
    }
}

/// Single-head scaled dot-product attention: `softmax(Q Kᵀ / √d) V`.
pub fn cross_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(shape_err("cross_attention", format!("expected matrices, got {qs:?} {ks:?} {vs:?}")));
    }
    if qs[1] != ks[1] {
        return Err(shape_err("cross_attention", format!("query width {} vs key width {}", qs[1], ks[1])));
    }
    if ks[0] != vs[0] {
        return Err(shape_err("cross_attention", format!("{} keys vs {} values", ks[0], vs[0])));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let weights = q.matmul_t(&k)?.scale(scale)?.softmax()?;
    weights.matmul(&v)
}

/// Global single-head self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let mut lin = |suffix: &str| Linear::new(store, &format!("{name}.{suffix}"), d, d, true, Init::FanIn, rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            out: lin("out")?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = cross_attention(
            self.q.forward(p, x)?,
            self.k.forward(p, x)?,
            self.v.forward(p, x)?,
        )?;
        self.out.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let g = Graph::new();
        let x = g.constant(Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap());
        let y = x.softmax().unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);

        let raw = Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap();
        let a = g.constant(raw.clone()).softmax().unwrap().value();
        let b = g.constant(raw.map(|v| v + 1000.0)).softmax().unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);

        let u = g.constant(Tensor::full([5], 0.7)).softmax().unwrap().value();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_constant_and_unit_pair() {
        let g = Graph::new();
        let gain = g.constant(Tensor::ones([4]));
        let bias = g.constant(Tensor::zeros([4]));
        let x = g.constant(Tensor::full([4], 3.5));
        let y = x.layer_norm(&gain, &bias, LAYER_NORM_EPS).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let gain = g.constant(Tensor::ones([2]));
        let bias = g.constant(Tensor::zeros([2]));
        let x = g.constant(Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let y = x.layer_norm(&gain, &bias, LAYER_NORM_EPS).unwrap().value();
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn attention_singleton_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::new();
        let q = g.constant(Tensor::randn([5, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::randn([1, 4], 1.0, &mut rng));
        let v = g.constant(Tensor::randn([1, 4], 1.0, &mut rng));
        let out = cross_attention(q, k, v).unwrap().value();
        for r in 0..5 {
            assert_eq!(out.row(r), v.value().row(0));
        }
    }

    #[test]
    fn attention_identical_keys_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let row = Tensor::randn([1, 3], 1.0, &mut rng);
        let rep = |t: &Tensor| {
            let mut d = Vec::new();
            for _ in 0..4 {
                d.extend_from_slice(t.data());
            }
            Tensor::new([4, 3], d).unwrap()
        };
        let q = g.constant(Tensor::randn([6, 3], 1.0, &mut rng));
        let k = g.constant(rep(&Tensor::randn([1, 3], 1.0, &mut rng)));
        let v = g.constant(rep(&row));
        let out = cross_attention(q, k, v).unwrap().value();
        for r in 0..6 {
            for c in 0..3 {
                assert!((out.at2(r, c) - row.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let g = Graph::new();
        let q = g.constant(Tensor::zeros([2, 3]));
        let k = g.constant(Tensor::zeros([2, 4]));
        let v = g.constant(Tensor::zeros([2, 4]));
        assert!(cross_attention(q, k, v).is_err());
    }

    #[test]
    fn ffn_zero_weights_and_leading_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 4, &mut rng).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::randn([2, 3, 4], 1.0, &mut rng));
        assert_eq!(ffn.forward(&p, x).unwrap().shape(), vec![2, 3, 4]);

        for id in [ffn.up.weight, ffn.down.weight] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::randn([5, 4], 1.0, &mut rng));
        let y = ffn.forward(&p, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
